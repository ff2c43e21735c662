#pragma once

#include <vector>

#include "ccattn/tensor.hpp"

namespace ccattn {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> m;  // first moment
  std::vector<double> v;  // second moment
  long step = 0;
};

// One Adam update in place. State moments are allocated on first use;
// deterministic given (params, grads, state, hyper).
void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               AdamState& state, const AdamHyper& hyper);

// Convenience wrapper driving adam_step over a set of leaf tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamHyper hyper);

  void step();       // applies each param's accumulated grad
  void zero_grad();  // clears grads and re-arms backward()

 private:
  std::vector<Tensor> params_;
  std::vector<AdamState> states_;
  AdamHyper hyper_;
};

}  // namespace ccattn
