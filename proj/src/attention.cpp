#include "ccattn/attention.hpp"

#include <stdexcept>
#include <string>

namespace ccattn {

void validate_fragment_set(const FragmentSet& set) {
  if (!set.features.defined() || set.features.rank() != 2 || set.count() < 1)
    throw std::invalid_argument("fragment_set: features must be a non-empty [n x d] tensor");
  if (set.kind == Modality::image) {
    if (!set.boxes.empty() && static_cast<int>(set.boxes.size()) != set.count())
      throw std::invalid_argument("fragment_set: box count disagrees with feature rows");
    for (const Box& b : set.boxes)
      if (!(b.w > 0.0) || !(b.h > 0.0))
        throw std::invalid_argument("fragment_set: boxes need positive extent");
  } else {
    if (!set.tokens.empty() && static_cast<int>(set.tokens.size()) != set.count())
      throw std::invalid_argument("fragment_set: token count disagrees with feature rows");
  }
}

PairAttention attend(const FragmentSet& query, const FragmentSet& key,
                     double inv_temperature, bool clip_scores,
                     AttentionDirection direction) {
  if (query.count() < 1 || key.count() < 1)
    throw std::invalid_argument("attend: empty fragment set");
  if (query.dim() != key.dim())
    throw std::invalid_argument("attend: embedding dimension mismatch");

  Tensor e = cosine_matrix(query.features, key.features);
  if (clip_scores) e = relu(e);
  Tensor w = softmax_rows(e, inv_temperature);
  Tensor a = matmul(w, key.features);

  PairAttention out;
  out.map = AttentionMap{w, e, direction, inv_temperature};
  out.attended = AttendedInfo{a};
  return out;
}

Tensor pair_similarity(const FragmentSet& query, const AttendedInfo& attended,
                       Aggregation agg) {
  if (query.count() != attended.vectors.rows())
    throw std::invalid_argument("pair_similarity: row count mismatch");
  Tensor sims = cosine_rows(query.features, attended.vectors);
  return agg == Aggregation::mean ? mean_all(sims) : logsumexp_all(sims);
}

namespace {

Tensor one_direction_score(const FragmentSet& image, const FragmentSet& text,
                           AttentionDirection direction, const AttentionConfig& config) {
  const FragmentSet& query = direction == AttentionDirection::text_to_image ? text : image;
  const FragmentSet& key = direction == AttentionDirection::text_to_image ? image : text;
  PairAttention pa = attend(query, key, config.inv_temperature, config.clip_scores, direction);
  return pair_similarity(query, pa.attended, config.agg);
}

}  // namespace

Tensor score_matrix(const std::vector<FragmentSet>& images,
                    const std::vector<FragmentSet>& texts,
                    const AttentionConfig& config) {
  if (images.empty() || texts.empty())
    throw std::invalid_argument("score_matrix: empty batch");
  const int n = static_cast<int>(images.size());
  const int m = static_cast<int>(texts.size());
  std::vector<Tensor> entries;
  entries.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(m));
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < m; ++b) {
      if (config.both_directions) {
        Tensor s1 = one_direction_score(images[a], texts[b],
                                        AttentionDirection::text_to_image, config);
        Tensor s2 = one_direction_score(images[a], texts[b],
                                        AttentionDirection::image_to_text, config);
        entries.push_back(mul_scalar(add(s1, s2), 0.5));
      } else {
        entries.push_back(one_direction_score(images[a], texts[b], config.direction, config));
      }
    }
  }
  return reshape(stack_scalars(entries), {n, m});
}

}  // namespace ccattn
