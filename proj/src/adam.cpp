#include "ccattn/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace ccattn {

void adam_step(std::vector<double>& params, const std::vector<double>& grads,
               AdamState& state, const AdamHyper& hyper) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: params/grads size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state sized for a different parameter");

  state.step += 1;
  const double b1 = hyper.beta1;
  const double b2 = hyper.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
  }
}

Adam::Adam(std::vector<Tensor> params, AdamHyper hyper)
    : params_(std::move(params)), states_(params_.size()), hyper_(hyper) {
  for (const Tensor& p : params_)
    if (!p.requires_grad())
      throw std::invalid_argument("Adam: parameter does not require grad");
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i)
    adam_step(params_[i].data(), params_[i].grad(), states_[i], hyper_);
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace ccattn
