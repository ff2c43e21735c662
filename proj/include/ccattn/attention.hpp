#pragma once

#include <vector>

#include "ccattn/fragments.hpp"
#include "ccattn/tensor.hpp"

namespace ccattn {

enum class AttentionDirection { text_to_image, image_to_text };
enum class Aggregation { mean, logsumexp };

struct AttentionConfig {
  double inv_temperature = 9.0;  // softmax sharpening over cosine scores
  bool clip_scores = false;      // clamp scores at 0 before the softmax
  AttentionDirection direction = AttentionDirection::text_to_image;
  bool both_directions = false;  // score_matrix averages both directions
  Aggregation agg = Aggregation::mean;
};

// Attention of one query set over one key set. `scores` holds the values fed
// to the softmax (post-clip when clipping is on), so re-softmaxing scores with
// `inv_temperature` over any key subset is consistent with `weights`.
struct AttentionMap {
  Tensor weights;  // [|Q| x |K|], rows sum to 1
  Tensor scores;   // [|Q| x |K|]
  AttentionDirection direction = AttentionDirection::text_to_image;
  double inv_temperature = 1.0;
};

struct AttendedInfo {
  Tensor vectors;  // [|Q| x d], convex combination of key rows per query
};

struct PairAttention {
  AttentionMap map;
  AttendedInfo attended;
};

// Scores e = cosine(q_i, k_j), weights = softmax_rows(inv_temperature * e),
// attended vectors a_i = sum_j w_ij k_j.
PairAttention attend(const FragmentSet& query, const FragmentSet& key,
                     double inv_temperature, bool clip_scores = false,
                     AttentionDirection direction = AttentionDirection::text_to_image);

// Image-sentence similarity: AGG over query fragments of cosine(q_i, a_i).
Tensor pair_similarity(const FragmentSet& query, const AttendedInfo& attended,
                       Aggregation agg);

// Entry (a, b) = similarity of image a with text b under config.direction;
// with both_directions the two directions are averaged.
Tensor score_matrix(const std::vector<FragmentSet>& images,
                    const std::vector<FragmentSet>& texts,
                    const AttentionConfig& config);

}  // namespace ccattn
