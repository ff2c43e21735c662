#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ccattn/attention.hpp"
#include "ccattn/fragments.hpp"
#include "ccattn/rng.hpp"
#include "ccattn/tensor.hpp"

namespace ccattn {

enum class HThresholdMode { uniform, fixed };

struct LossConfig {
  double gamma1 = 0.2;  // ranking margin
  double gamma2 = 0.2;  // re-sourcing margin
  double gamma3 = 0.2;  // swapping margin
  double lambda_ccr = 1.0;
  double lambda_ccs = 1.0;
  HThresholdMode h_threshold_mode = HThresholdMode::uniform;  // uniform: 1/|K|
  double h_threshold = 0.0;                                   // fixed mode value
  Aggregation agg = Aggregation::mean;
};

void validate_loss_config(const LossConfig& config);

// Key indices split by whether their attention weight clears the threshold.
struct Partition {
  std::vector<int> attended;  // strictly above threshold
  std::vector<int> ignored;
};

struct LossBundle {
  Tensor rank;
  Tensor ccr;
  Tensor ccs;
  Tensor total;
};

// One content swap: query fragment `query_index` re-sourced to `token`,
// whose embedding row (on the model graph) stands in for the query.
struct SwapSample {
  int query_index = -1;
  int token = -1;
  Tensor embedding;  // [d]
};

// Triplet ranking with in-batch hardest negatives: mean over anchors of
// [S(i, j*) - S(i, i) + gamma1]+ + [S(r*, i) - S(i, i) + gamma1]+ where j*/r*
// maximize the off-diagonal row/column entries. `eligible` (row-major BxB)
// restricts which entries may serve as negatives (diagonal never does);
// anchors with no eligible negative in a direction contribute 0 there.
Tensor ranking_loss(const Tensor& scores, double gamma1);
Tensor ranking_loss(const Tensor& scores, double gamma1,
                    const std::vector<std::uint8_t>& eligible);

// Per query row: j attended iff w_ij > threshold (uniform mode: 1/|K|).
std::vector<Partition> partition_keys(const AttentionMap& map, const LossConfig& config);

// Re-softmax of the score row over `group` times the group's key rows: the
// attended feature after removing the complementary keys. Empty group is a
// caller error (callers skip such fragments).
Tensor group_feature(const Tensor& score_row, const FragmentSet& keys,
                     const std::vector<int>& group, double inv_temperature);

// [AGG_i Sim(q_i, s_i) - AGG_i Sim(q_i, l_i) + gamma2]+ with l_i over the
// attended group, s_i over the ignored group. Fragments whose attended or
// ignored group is empty drop out of both aggregates; 0 if none remain.
// Uses gamma2, agg and the threshold settings from `config`.
Tensor ccr_loss(const FragmentSet& query, const AttentionMap& map,
                const FragmentSet& keys, const LossConfig& config);

// [Sim(swapped, a_i) - Sim(q_i, a_i) + gamma3]+ for the sampled fragment.
Tensor ccs_loss(const FragmentSet& query, const AttendedInfo& attended,
                const SwapSample& swap, double gamma3);

// total = rank + lambda_ccr * ccr + lambda_ccs * ccs
LossBundle combined_loss(const Tensor& rank, const Tensor& ccr, const Tensor& ccs,
                         const LossConfig& config);

// Uniformly picks one query fragment, then a replacement token uniform over
// the vocabulary minus every token in the caption. No eligible token: nullopt
// (the ccs contribution is skipped). Consumes rng only when a swap happens.
std::optional<SwapSample> sample_swap(const FragmentSet& query, int vocab_size,
                                      const Tensor& token_embeddings, Rng& rng);

}  // namespace ccattn
