#include "ccattn/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ccattn {

void validate_train_config(const TrainConfig& config) {
  validate_loss_config(config.loss);
  if (config.batch_size < 2)
    throw std::invalid_argument("validate_train_config: batch_size must be at least 2");
  if (config.epochs < 1)
    throw std::invalid_argument("validate_train_config: epochs must be positive");
  if (config.eval_every < 1)
    throw std::invalid_argument("validate_train_config: eval_every must be positive");
  if (!(config.attention.inv_temperature > 0.0))
    throw std::invalid_argument("validate_train_config: inv_temperature must be positive");
  if (!(config.adam.learning_rate > 0.0))
    throw std::invalid_argument("validate_train_config: learning_rate must be positive");
}

namespace {

struct BatchLoss {
  double rank = 0.0;
  double ccr = 0.0;
  double ccs = 0.0;
  double total = 0.0;
};

BatchLoss train_batch(Model& model, const Dataset& data,
                      const std::vector<int>& batch, const TrainConfig& cfg,
                      Adam& opt, Rng& rng) {
  const int b = static_cast<int>(batch.size());
  std::vector<FragmentSet> images, captions;
  images.reserve(b);
  captions.reserve(b);
  for (int idx : batch) {
    images.push_back(encode_image(model, data.train[idx].image));
    captions.push_back(encode_caption(model, data.train[idx].caption));
  }

  // duplicated pairs must not serve as each other's negatives
  std::vector<std::uint8_t> eligible(static_cast<std::size_t>(b) * b, 1);
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < b; ++c)
      if (data.train[batch[r]].id == data.train[batch[c]].id)
        eligible[static_cast<std::size_t>(r) * b + c] = 0;

  Tensor scores = score_matrix(images, captions, cfg.attention);
  Tensor rank = ranking_loss(scores, cfg.loss.gamma1, eligible);

  Tensor ccr = Tensor::scalar(0.0);
  Tensor ccs = Tensor::scalar(0.0);
  const bool want_ccr = cfg.loss.lambda_ccr > 0.0;
  const bool want_ccs = cfg.loss.lambda_ccs > 0.0;
  if (want_ccr || want_ccs) {
    std::vector<Tensor> ccr_terms, ccs_terms;
    for (int i = 0; i < b; ++i) {
      PairAttention pa =
          attend(captions[i], images[i], cfg.attention.inv_temperature,
                 cfg.attention.clip_scores, AttentionDirection::text_to_image);
      if (want_ccr)
        ccr_terms.push_back(ccr_loss(captions[i], pa.map, images[i], cfg.loss));
      if (want_ccs) {
        std::optional<SwapSample> swap = sample_swap(
            captions[i], model.vocab_size(), model.token_embeddings, rng);
        if (swap)
          ccs_terms.push_back(
              ccs_loss(captions[i], pa.attended, *swap, cfg.loss.gamma3));
      }
    }
    if (!ccr_terms.empty()) ccr = mean_all(stack_scalars(ccr_terms));
    if (!ccs_terms.empty()) ccs = mean_all(stack_scalars(ccs_terms));
  }

  LossBundle bundle = combined_loss(rank, ccr, ccs, cfg.loss);
  opt.zero_grad();
  backward(bundle.total);
  opt.step();

  BatchLoss out;
  out.rank = bundle.rank.value();
  out.ccr = bundle.ccr.value();
  out.ccs = bundle.ccs.value();
  out.total = bundle.total.value();
  return out;
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const TrainConfig& config) {
  validate_train_config(config);
  const int n = static_cast<int>(data.train.size());
  if (n < config.batch_size)
    throw std::invalid_argument("train: training split smaller than one batch");

  Rng rng(config.seed);
  std::vector<Tensor> params = {model.token_embeddings, model.region_projection};
  Adam opt(params, config.adam);

  TrainResult result;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats stats;
    stats.epoch = epoch;
    int batches = 0;
    for (int start = 0; start + config.batch_size <= n; start += config.batch_size) {
      std::vector<int> batch(order.begin() + start,
                             order.begin() + start + config.batch_size);
      BatchLoss loss;
      try {
        loss = train_batch(model, data, batch, config, opt, rng);
      } catch (const NonFiniteError& e) {
        std::string ids;
        for (int idx : batch) {
          if (!ids.empty()) ids += ' ';
          ids += std::to_string(data.train[idx].id);
        }
        throw std::runtime_error("train: non-finite value in epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(batches) + " (pair ids " + ids +
                                 "): " + e.what());
      }
      stats.rank_loss += loss.rank;
      stats.ccr_loss += loss.ccr;
      stats.ccs_loss += loss.ccs;
      stats.total_loss += loss.total;
      ++batches;
    }
    stats.rank_loss /= batches;
    stats.ccr_loss /= batches;
    stats.ccs_loss /= batches;
    stats.total_loss /= batches;

    const bool eval_now = (epoch + 1) % config.eval_every == 0 ||
                          epoch + 1 == config.epochs;
    if (eval_now && !data.val.empty())
      stats.val_rsum = evaluate_retrieval(model, data.val, config.attention).rsum;
    const bool improved =
        data.val.empty()
            ? true  // no validation signal: keep the latest
            : (eval_now && (result.best_epoch < 0 ||
                            stats.val_rsum > result.best_val_rsum));
    if (improved) {
      result.best_model = clone_model(model);
      result.best_epoch = epoch;
      result.best_val_rsum = stats.val_rsum;
      if (!config.checkpoint_path.empty())
        save_model(result.best_model, config.checkpoint_path);
    }
    result.history.push_back(stats);
  }
  return result;
}

RetrievalReport evaluate_retrieval(const Model& model,
                                   const std::vector<PairSample>& split,
                                   const AttentionConfig& attention,
                                   const std::vector<int>& ks) {
  if (split.empty()) throw std::invalid_argument("evaluate_retrieval: empty split");
  std::vector<FragmentSet> images, captions;
  images.reserve(split.size());
  captions.reserve(split.size());
  for (const PairSample& p : split) {
    images.push_back(encode_image(model, p.image));
    captions.push_back(encode_caption(model, p.caption));
  }
  Tensor scores = score_matrix(images, captions, attention);
  return recall_at_k(scores, ks);
}

AttentionReport evaluate_attention(const Model& model,
                                   const std::vector<PairSample>& split,
                                   const AttentionConfig& attention,
                                   const MetricThresholds& thresholds) {
  if (split.empty()) throw std::invalid_argument("evaluate_attention: empty split");
  std::vector<AnnotatedAttention> items;
  items.reserve(split.size());
  for (const PairSample& p : split) {
    FragmentSet image = encode_image(model, p.image);
    FragmentSet caption = encode_caption(model, p.caption);
    PairAttention pa = attend(caption, image, attention.inv_temperature,
                              attention.clip_scores, AttentionDirection::text_to_image);
    AnnotatedAttention item;
    const int rows = pa.map.weights.rows();
    const int cols = pa.map.weights.cols();
    item.weights.resize(rows);
    for (int r = 0; r < rows; ++r) {
      item.weights[r].resize(cols);
      for (int c = 0; c < cols; ++c) item.weights[r][c] = pa.map.weights.at(r, c);
    }
    item.boxes = p.image.boxes;
    item.annotation = p.annotation;
    items.push_back(std::move(item));
  }
  return corpus_attention_report(items, thresholds);
}

EvalReport evaluate(const Model& model, const std::vector<PairSample>& split,
                    const AttentionConfig& attention,
                    const MetricThresholds& thresholds) {
  EvalReport report;
  report.retrieval = evaluate_retrieval(model, split, attention);
  report.attention = evaluate_attention(model, split, attention, thresholds);
  return report;
}

void dump_attention(const Model& model, const std::vector<PairSample>& split,
                    const AttentionConfig& attention, const std::string& path) {
  if (split.empty()) throw std::invalid_argument("dump_attention: empty split");
  const int keys = split[0].image.count();
  std::string out = "pair_id,query_index,token";
  for (int k = 0; k < keys; ++k) out += ",w_" + std::to_string(k);
  for (int k = 0; k < keys; ++k) {
    const std::string s = std::to_string(k);
    out += ",box_x_" + s + ",box_y_" + s + ",box_w_" + s + ",box_h_" + s;
  }
  out += "\n";
  char buf[40];
  auto cell = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += ',';
    out += buf;
  };
  for (const PairSample& p : split) {
    if (p.image.count() != keys)
      throw std::invalid_argument("dump_attention: splits must share a region count");
    FragmentSet image = encode_image(model, p.image);
    FragmentSet caption = encode_caption(model, p.caption);
    PairAttention pa = attend(caption, image, attention.inv_temperature,
                              attention.clip_scores, AttentionDirection::text_to_image);
    for (int r = 0; r < pa.map.weights.rows(); ++r) {
      out += std::to_string(p.id);
      out += ',' + std::to_string(r);
      out += ',' + std::to_string(p.caption.tokens[r]);
      for (int c = 0; c < keys; ++c) cell(pa.map.weights.at(r, c));
      for (int c = 0; c < keys; ++c) {
        cell(p.image.boxes[c].x);
        cell(p.image.boxes[c].y);
        cell(p.image.boxes[c].w);
        cell(p.image.boxes[c].h);
      }
      out += '\n';
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.good()) throw std::runtime_error("dump_attention: cannot open " + path);
  f << out;
  f.close();
  if (!f.good()) throw std::runtime_error("dump_attention: write failed for " + path);
}

}  // namespace ccattn
