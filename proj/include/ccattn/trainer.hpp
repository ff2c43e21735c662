#pragma once

#include <string>
#include <vector>

#include "ccattn/adam.hpp"
#include "ccattn/attention.hpp"
#include "ccattn/losses.hpp"
#include "ccattn/metrics.hpp"
#include "ccattn/model.hpp"
#include "ccattn/synthworld.hpp"

namespace ccattn {

struct TrainConfig {
  LossConfig loss;
  AttentionConfig attention;
  AdamHyper adam;
  int batch_size = 16;  // at least 2, so every anchor has a negative
  int epochs = 10;
  int eval_every = 1;  // validation cadence in epochs; the last epoch always runs
  unsigned long long seed = 1;
  std::string checkpoint_path;  // best model written here when set
};

void validate_train_config(const TrainConfig& config);

struct EpochStats {
  int epoch = 0;
  double rank_loss = 0.0;  // batch means
  double ccr_loss = 0.0;
  double ccs_loss = 0.0;
  double total_loss = 0.0;
  double val_rsum = -1.0;  // -1 on epochs without a validation pass
};

struct TrainResult {
  std::vector<EpochStats> history;
  Model best_model;  // highest validation rsum, earliest epoch on ties
  int best_epoch = -1;
  double best_val_rsum = 0.0;
};

// Shuffled full batches (a short tail is dropped), in-batch hardest-negative
// ranking on the pairwise score matrix, constraint terms on positive pairs
// only. A constraint with zero weight is skipped outright, so the rng stream
// matches a run without it. Pairs sharing an id are masked as negatives.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& config);

RetrievalReport evaluate_retrieval(const Model& model,
                                   const std::vector<PairSample>& split,
                                   const AttentionConfig& attention,
                                   const std::vector<int>& ks = {1, 5, 10});

// Always attends caption -> image; the config direction only affects scoring.
AttentionReport evaluate_attention(const Model& model,
                                   const std::vector<PairSample>& split,
                                   const AttentionConfig& attention,
                                   const MetricThresholds& thresholds);

struct EvalReport {
  RetrievalReport retrieval;
  AttentionReport attention;
};

EvalReport evaluate(const Model& model, const std::vector<PairSample>& split,
                    const AttentionConfig& attention,
                    const MetricThresholds& thresholds);

// CSV of per-word attention rows: pair_id,query_index,token,w_0..w_{K-1},
// then box_x/box_y/box_w/box_h per key, so rows plot without the dataset.
void dump_attention(const Model& model, const std::vector<PairSample>& split,
                    const AttentionConfig& attention, const std::string& path);

}  // namespace ccattn
