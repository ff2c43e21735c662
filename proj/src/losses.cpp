#include "ccattn/losses.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace ccattn {

void validate_loss_config(const LossConfig& config) {
  if (config.gamma1 < 0.0 || config.gamma2 < 0.0 || config.gamma3 < 0.0)
    throw std::invalid_argument("loss_config: margins must be nonnegative");
  if (config.lambda_ccr < 0.0 || config.lambda_ccs < 0.0)
    throw std::invalid_argument("loss_config: lambdas must be nonnegative");
  if (config.h_threshold_mode == HThresholdMode::fixed && config.h_threshold < 0.0)
    throw std::invalid_argument("loss_config: fixed threshold must be nonnegative");
}

Tensor ranking_loss(const Tensor& scores, double gamma1) {
  const int b = scores.rows();
  std::vector<std::uint8_t> eligible(static_cast<std::size_t>(b) * static_cast<std::size_t>(b), 1);
  for (int i = 0; i < b; ++i) eligible[static_cast<std::size_t>(i) * (b + 1)] = 0;
  return ranking_loss(scores, gamma1, eligible);
}

Tensor ranking_loss(const Tensor& scores, double gamma1,
                    const std::vector<std::uint8_t>& eligible) {
  if (scores.rank() != 2 || scores.rows() != scores.cols())
    throw std::invalid_argument("ranking_loss: expects a square score matrix");
  const int b = scores.rows();
  if (b < 2) throw std::invalid_argument("ranking_loss: batch must hold at least 2 pairs");
  if (gamma1 < 0.0) throw std::invalid_argument("ranking_loss: negative margin");
  if (eligible.size() != static_cast<std::size_t>(b) * static_cast<std::size_t>(b))
    throw std::invalid_argument("ranking_loss: eligibility mask size mismatch");

  const std::vector<double>& s = scores.data();
  auto at = [&](int i, int j) { return s[static_cast<std::size_t>(i) * b + j]; };
  auto ok = [&](int i, int j) {
    return i != j && eligible[static_cast<std::size_t>(i) * b + j] != 0;
  };

  // per anchor: hardest eligible negative in its row (caption side) and
  // column (image side); first maximum wins ties
  std::vector<int> row_arg(b, -1), col_arg(b, -1);
  std::vector<double> hinge_row(b, 0.0), hinge_col(b, 0.0);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < b; ++j)
      if (ok(i, j) && (row_arg[i] < 0 || at(i, j) > at(i, row_arg[i]))) row_arg[i] = j;
    for (int r = 0; r < b; ++r)
      if (ok(r, i) && (col_arg[i] < 0 || at(r, i) > at(col_arg[i], i))) col_arg[i] = r;
    if (row_arg[i] >= 0)
      hinge_row[i] = std::max(0.0, at(i, row_arg[i]) - at(i, i) + gamma1);
    if (col_arg[i] >= 0)
      hinge_col[i] = std::max(0.0, at(col_arg[i], i) - at(i, i) + gamma1);
    total += hinge_row[i] + hinge_col[i];
  }
  total /= b;

  return Tensor::make(
      "ranking_loss", {1}, {total}, {scores},
      [b, row_arg, col_arg, hinge_row, hinge_col](TensorNode& o) {
        TensorNode& ps = *o.parents[0];
        const double g = o.grad[0] / b;
        for (int i = 0; i < b; ++i) {
          if (hinge_row[i] > 0.0) {
            ps.grad[static_cast<std::size_t>(i) * b + row_arg[i]] += g;
            ps.grad[static_cast<std::size_t>(i) * (b + 1)] -= g;
          }
          if (hinge_col[i] > 0.0) {
            ps.grad[static_cast<std::size_t>(col_arg[i]) * b + i] += g;
            ps.grad[static_cast<std::size_t>(i) * (b + 1)] -= g;
          }
        }
      });
}

std::vector<Partition> partition_keys(const AttentionMap& map, const LossConfig& config) {
  validate_loss_config(config);
  const int nq = map.weights.rows();
  const int nk = map.weights.cols();
  const double threshold = config.h_threshold_mode == HThresholdMode::uniform
                               ? 1.0 / nk
                               : config.h_threshold;
  std::vector<Partition> parts(static_cast<std::size_t>(nq));
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < nk; ++j) {
      if (map.weights.at(i, j) > threshold)
        parts[static_cast<std::size_t>(i)].attended.push_back(j);
      else
        parts[static_cast<std::size_t>(i)].ignored.push_back(j);
    }
  }
  return parts;
}

Tensor group_feature(const Tensor& score_row, const FragmentSet& keys,
                     const std::vector<int>& group, double inv_temperature) {
  if (group.empty()) throw std::invalid_argument("group_feature: empty group");
  if (score_row.rank() != 1)
    throw std::invalid_argument("group_feature: score row must be rank-1");
  if (score_row.cols() != keys.count())
    throw std::invalid_argument("group_feature: score row length disagrees with keys");
  const int g = static_cast<int>(group.size());
  const int d = keys.dim();
  Tensor w_hat = softmax_rows(gather_rows(score_row, group), inv_temperature);
  Tensor k_g = gather_rows(keys.features, group);
  return reshape(matmul(reshape(w_hat, {1, g}), k_g), {d});
}

namespace {

Tensor aggregate(const Tensor& values, Aggregation agg) {
  return agg == Aggregation::mean ? mean_all(values) : logsumexp_all(values);
}

}  // namespace

Tensor ccr_loss(const FragmentSet& query, const AttentionMap& map,
                const FragmentSet& keys, const LossConfig& config) {
  if (query.count() != map.weights.rows() || keys.count() != map.weights.cols())
    throw std::invalid_argument("ccr_loss: map shape disagrees with fragment sets");
  const std::vector<Partition> parts = partition_keys(map, config);
  std::vector<Tensor> sims_att, sims_ign;
  for (int i = 0; i < query.count(); ++i) {
    const Partition& p = parts[static_cast<std::size_t>(i)];
    if (p.attended.empty() || p.ignored.empty()) continue;
    Tensor q_i = row(query.features, i);
    Tensor e_i = row(map.scores, i);
    Tensor l_i = group_feature(e_i, keys, p.attended, map.inv_temperature);
    Tensor s_i = group_feature(e_i, keys, p.ignored, map.inv_temperature);
    sims_att.push_back(cosine(q_i, l_i));
    sims_ign.push_back(cosine(q_i, s_i));
  }
  if (sims_att.empty()) return Tensor::scalar(0.0);
  Tensor gap = sub(aggregate(stack_scalars(sims_ign), config.agg),
                   aggregate(stack_scalars(sims_att), config.agg));
  return relu(add_scalar(gap, config.gamma2));
}

Tensor ccs_loss(const FragmentSet& query, const AttendedInfo& attended,
                const SwapSample& swap, double gamma3) {
  if (gamma3 < 0.0) throw std::invalid_argument("ccs_loss: negative margin");
  if (swap.query_index < 0 || swap.query_index >= query.count())
    throw std::invalid_argument("ccs_loss: swap index out of range");
  if (!swap.embedding.defined() ||
      static_cast<int>(swap.embedding.size()) != query.dim())
    throw std::invalid_argument("ccs_loss: swap embedding dimension mismatch");
  Tensor a_i = row(attended.vectors, swap.query_index);
  Tensor q_i = row(query.features, swap.query_index);
  Tensor gap = sub(cosine(swap.embedding, a_i), cosine(q_i, a_i));
  return relu(add_scalar(gap, gamma3));
}

LossBundle combined_loss(const Tensor& rank, const Tensor& ccr, const Tensor& ccs,
                         const LossConfig& config) {
  validate_loss_config(config);
  LossBundle bundle;
  bundle.rank = rank;
  bundle.ccr = ccr;
  bundle.ccs = ccs;
  bundle.total = add(rank, add(mul_scalar(ccr, config.lambda_ccr),
                               mul_scalar(ccs, config.lambda_ccs)));
  return bundle;
}

std::optional<SwapSample> sample_swap(const FragmentSet& query, int vocab_size,
                                      const Tensor& token_embeddings, Rng& rng) {
  if (query.kind != Modality::text || query.tokens.empty())
    throw std::invalid_argument("sample_swap: query must be a text set with tokens");
  if (token_embeddings.rows() != vocab_size)
    throw std::invalid_argument("sample_swap: embedding table size disagrees with vocab");
  std::vector<std::uint8_t> in_caption(static_cast<std::size_t>(vocab_size), 0);
  for (int t : query.tokens) {
    if (t < 0 || t >= vocab_size)
      throw std::invalid_argument("sample_swap: caption token outside vocabulary");
    in_caption[static_cast<std::size_t>(t)] = 1;
  }
  std::vector<int> candidates;
  for (int t = 0; t < vocab_size; ++t)
    if (!in_caption[static_cast<std::size_t>(t)]) candidates.push_back(t);
  if (candidates.empty()) return std::nullopt;

  SwapSample swap;
  swap.query_index = rng.uniform_int(query.count());
  swap.token = candidates[static_cast<std::size_t>(
      rng.uniform_int(static_cast<int>(candidates.size())))];
  swap.embedding = row(token_embeddings, swap.token);
  return swap;
}

}  // namespace ccattn
