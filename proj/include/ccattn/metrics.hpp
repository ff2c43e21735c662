#pragma once

#include <string>
#include <vector>

#include "ccattn/attention.hpp"
#include "ccattn/fragments.hpp"
#include "ccattn/tensor.hpp"

namespace ccattn {

// Ground-truth links for one image-caption pair: token span [start, end)
// mapped to the region indices it describes. A token sits in at most one phrase.
struct Phrase {
  int start = 0;
  int end = 0;
  std::vector<int> regions;
};

struct AlignmentAnnotation {
  std::vector<Phrase> phrases;
};

// halved: AP*AR/(AP+AR), half the usual harmonic mean (tops out at 0.5);
// standard doubles it back to the familiar F1
enum class F1Mode { halved, standard };

struct MetricThresholds {
  double t_iou = 0.5;
  bool t_att_uniform = true;  // attendedness threshold 1/|K|
  double t_att = 0.0;         // used when t_att_uniform is false
};

struct WordMetrics {
  double ap = 0.0;
  double ar = 0.0;
  double af_halved = 0.0;
  double af_standard = 0.0;
};

struct PhraseMetrics {
  int pair = 0;
  int phrase = 0;  // ordinal within the pair
  double ap = 0.0;
  double ar = 0.0;
  double af_halved = 0.0;
  double af_standard = 0.0;
};

struct AttentionReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1_halved = 0.0;
  double f1_standard = 0.0;
  std::vector<PhraseMetrics> breakdown;
};

struct RetrievalReport {
  std::vector<int> ks;
  std::vector<double> image_to_text;  // percent, aligned with ks
  std::vector<double> text_to_image;
  double rsum = 0.0;
};

// Everything the attention metrics need from one evaluated pair: the
// text-query x image-key weight matrix, the region boxes, and the links.
struct AnnotatedAttention {
  std::vector<std::vector<double>> weights;
  std::vector<Box> boxes;
  AlignmentAnnotation annotation;
};

double iou(const Box& a, const Box& b);

double resolve_t_att(const MetricThresholds& thresholds, int num_keys);

// R_j: regions whose best IoU against the word's linked regions exceeds t_iou.
// Words outside every phrase get an empty set (excluded from aggregates).
std::vector<int> relevant_set(const std::vector<Box>& regions,
                              const AlignmentAnnotation& annotation, int word_index,
                              double t_iou);

// A_j: keys whose weight for the word strictly exceeds t_att.
std::vector<int> attended_set(const std::vector<double>& weight_row, double t_att);
std::vector<int> attended_set(const AttentionMap& map, int word_index, double t_att);

// Requires a non-empty relevant set; empty attended set gives precision 0.
WordMetrics word_metrics(const std::vector<int>& attended,
                         const std::vector<int>& relevant);

// Phrase value = max over the phrase's words (words with empty R_j skipped),
// corpus value = mean over phrases of every pair. Phrases with no scoreable
// word are dropped; a corpus with none at all is an error.
AttentionReport corpus_attention_report(const std::vector<AnnotatedAttention>& items,
                                        const MetricThresholds& thresholds);

// Compensated (Neumaier) summation; the rsum reducer.
double neumaier_sum(const std::vector<double>& values);

// Retrieval recall over both directions of an NxM score matrix (rows: images,
// columns: texts). texts_of_image[i] lists i's ground-truth text indices; the
// transpose direction is derived from it. Ties rank by ascending index.
RetrievalReport recall_at_k(const Tensor& scores,
                            const std::vector<std::vector<int>>& texts_of_image,
                            const std::vector<int>& ks = {1, 5, 10});
// identity ground truth (pair i <-> i) for square matrices
RetrievalReport recall_at_k(const Tensor& scores, const std::vector<int>& ks = {1, 5, 10});

void write_phrase_csv(const std::string& path, const AttentionReport& report,
                      F1Mode mode);
void write_summary_json(const std::string& path, const AttentionReport& attention,
                        const RetrievalReport& retrieval);

}  // namespace ccattn
