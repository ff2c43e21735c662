#include "ccattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace ccattn {

double iou(const Box& a, const Box& b) {
  if (!(a.w > 0.0) || !(a.h > 0.0) || !(b.w > 0.0) || !(b.h > 0.0))
    throw std::invalid_argument("iou: boxes need positive area");
  const double ix =
      std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy =
      std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

double resolve_t_att(const MetricThresholds& thresholds, int num_keys) {
  if (thresholds.t_att_uniform) {
    if (num_keys < 1) throw std::invalid_argument("resolve_t_att: no keys");
    return 1.0 / num_keys;
  }
  if (thresholds.t_att < 0.0)
    throw std::invalid_argument("resolve_t_att: negative threshold");
  return thresholds.t_att;
}

std::vector<int> relevant_set(const std::vector<Box>& regions,
                              const AlignmentAnnotation& annotation, int word_index,
                              double t_iou) {
  const Phrase* owner = nullptr;
  for (const Phrase& p : annotation.phrases) {
    if (word_index >= p.start && word_index < p.end) {
      owner = &p;
      break;
    }
  }
  std::vector<int> out;
  if (!owner) return out;
  for (int i = 0; i < static_cast<int>(regions.size()); ++i) {
    double best = 0.0;
    for (int g : owner->regions) {
      if (g < 0 || g >= static_cast<int>(regions.size()))
        throw std::invalid_argument("relevant_set: linked region out of range");
      best = std::max(best, iou(regions[static_cast<std::size_t>(i)],
                                regions[static_cast<std::size_t>(g)]));
    }
    if (best > t_iou) out.push_back(i);
  }
  return out;
}

std::vector<int> attended_set(const std::vector<double>& weight_row, double t_att) {
  std::vector<int> out;
  for (int j = 0; j < static_cast<int>(weight_row.size()); ++j)
    if (weight_row[static_cast<std::size_t>(j)] > t_att) out.push_back(j);
  return out;
}

std::vector<int> attended_set(const AttentionMap& map, int word_index, double t_att) {
  if (word_index < 0 || word_index >= map.weights.rows())
    throw std::invalid_argument("attended_set: word index out of range");
  std::vector<double> row(static_cast<std::size_t>(map.weights.cols()));
  for (int j = 0; j < map.weights.cols(); ++j)
    row[static_cast<std::size_t>(j)] = map.weights.at(word_index, j);
  return attended_set(row, t_att);
}

WordMetrics word_metrics(const std::vector<int>& attended,
                         const std::vector<int>& relevant) {
  if (relevant.empty())
    throw std::invalid_argument("word_metrics: relevant set must be non-empty");
  std::size_t inter = 0;
  for (int a : attended)
    if (std::find(relevant.begin(), relevant.end(), a) != relevant.end()) ++inter;
  WordMetrics m;
  m.ap = attended.empty() ? 0.0
                          : static_cast<double>(inter) / static_cast<double>(attended.size());
  m.ar = static_cast<double>(inter) / static_cast<double>(relevant.size());
  m.af_halved = m.ap + m.ar == 0.0 ? 0.0 : m.ap * m.ar / (m.ap + m.ar);
  m.af_standard = 2.0 * m.af_halved;
  return m;
}

namespace {

// order-independent mean: sorts a copy, then compensated summation
double mean_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return neumaier_sum(values) / static_cast<double>(values.size());
}

}  // namespace

AttentionReport corpus_attention_report(const std::vector<AnnotatedAttention>& items,
                                        const MetricThresholds& thresholds) {
  AttentionReport report;
  std::vector<double> aps, ars, afs_halved, afs_standard;
  for (int pair = 0; pair < static_cast<int>(items.size()); ++pair) {
    const AnnotatedAttention& item = items[static_cast<std::size_t>(pair)];
    const double t_att = resolve_t_att(thresholds, static_cast<int>(item.boxes.size()));
    for (int ph = 0; ph < static_cast<int>(item.annotation.phrases.size()); ++ph) {
      const Phrase& phrase = item.annotation.phrases[static_cast<std::size_t>(ph)];
      PhraseMetrics best{pair, ph, 0.0, 0.0, 0.0, 0.0};
      bool scored = false;
      for (int j = phrase.start; j < phrase.end; ++j) {
        if (j < 0 || j >= static_cast<int>(item.weights.size()))
          throw std::invalid_argument("corpus_attention_report: span outside caption");
        std::vector<int> rel = relevant_set(item.boxes, item.annotation, j, thresholds.t_iou);
        if (rel.empty()) continue;
        std::vector<int> att =
            attended_set(item.weights[static_cast<std::size_t>(j)], t_att);
        WordMetrics wm = word_metrics(att, rel);
        best.ap = std::max(best.ap, wm.ap);
        best.ar = std::max(best.ar, wm.ar);
        best.af_halved = std::max(best.af_halved, wm.af_halved);
        best.af_standard = std::max(best.af_standard, wm.af_standard);
        scored = true;
      }
      if (!scored) continue;
      report.breakdown.push_back(best);
      aps.push_back(best.ap);
      ars.push_back(best.ar);
      afs_halved.push_back(best.af_halved);
      afs_standard.push_back(best.af_standard);
    }
  }
  if (aps.empty())
    throw std::runtime_error("corpus_attention_report: zero annotated phrases");
  report.precision = mean_of(aps);
  report.recall = mean_of(ars);
  report.f1_halved = mean_of(afs_halved);
  report.f1_standard = mean_of(afs_standard);
  return report;
}

double neumaier_sum(const std::vector<double>& values) {
  double sum = 0.0, comp = 0.0;
  for (double x : values) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  return sum + comp;
}

namespace {

// best (lowest) rank of any ground-truth candidate under descending score,
// ties resolved toward lower index
int best_match_rank(const std::vector<double>& scores, const std::vector<int>& matches) {
  int best = static_cast<int>(scores.size());
  for (int m : matches) {
    int rank = 0;
    for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
      if (j == m) continue;
      const double sj = scores[static_cast<std::size_t>(j)];
      const double sm = scores[static_cast<std::size_t>(m)];
      if (sj > sm || (sj == sm && j < m)) ++rank;
    }
    best = std::min(best, rank);
  }
  return best;
}

}  // namespace

RetrievalReport recall_at_k(const Tensor& scores,
                            const std::vector<std::vector<int>>& texts_of_image,
                            const std::vector<int>& ks) {
  if (scores.rank() != 2) throw std::invalid_argument("recall_at_k: expects a matrix");
  const int n = scores.rows(), m = scores.cols();
  if (static_cast<int>(texts_of_image.size()) != n)
    throw std::invalid_argument("recall_at_k: ground truth size disagrees with rows");
  if (ks.empty()) throw std::invalid_argument("recall_at_k: no cutoffs");

  std::vector<std::vector<int>> images_of_text(static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i) {
    if (texts_of_image[static_cast<std::size_t>(i)].empty())
      throw std::invalid_argument("recall_at_k: image without ground-truth text");
    for (int t : texts_of_image[static_cast<std::size_t>(i)]) {
      if (t < 0 || t >= m)
        throw std::invalid_argument("recall_at_k: ground-truth text out of range");
      images_of_text[static_cast<std::size_t>(t)].push_back(i);
    }
  }
  for (const std::vector<int>& v : images_of_text)
    if (v.empty()) throw std::invalid_argument("recall_at_k: text without ground-truth image");

  std::vector<int> i2t_rank(static_cast<std::size_t>(n)), t2i_rank(static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] = scores.at(i, j);
    i2t_rank[static_cast<std::size_t>(i)] =
        best_match_rank(row, texts_of_image[static_cast<std::size_t>(i)]);
  }
  for (int t = 0; t < m; ++t) {
    std::vector<double> col(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = scores.at(i, t);
    t2i_rank[static_cast<std::size_t>(t)] =
        best_match_rank(col, images_of_text[static_cast<std::size_t>(t)]);
  }

  RetrievalReport report;
  report.ks = ks;
  std::vector<double> six;
  for (int k : ks) {
    int hits = 0;
    for (int r : i2t_rank) hits += r < k ? 1 : 0;
    report.image_to_text.push_back(100.0 * hits / n);
  }
  for (int k : ks) {
    int hits = 0;
    for (int r : t2i_rank) hits += r < k ? 1 : 0;
    report.text_to_image.push_back(100.0 * hits / m);
  }
  six = report.image_to_text;
  six.insert(six.end(), report.text_to_image.begin(), report.text_to_image.end());
  report.rsum = neumaier_sum(six);
  return report;
}

RetrievalReport recall_at_k(const Tensor& scores, const std::vector<int>& ks) {
  if (scores.rank() != 2 || scores.rows() != scores.cols())
    throw std::invalid_argument("recall_at_k: identity ground truth needs a square matrix");
  std::vector<std::vector<int>> gt(static_cast<std::size_t>(scores.rows()));
  for (int i = 0; i < scores.rows(); ++i) gt[static_cast<std::size_t>(i)] = {i};
  return recall_at_k(scores, gt, ks);
}

void write_phrase_csv(const std::string& path, const AttentionReport& report,
                      F1Mode mode) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_phrase_csv: cannot open " + path);
  out << "phrase_id,ap,ar,af\n";
  char buf[96];
  for (std::size_t i = 0; i < report.breakdown.size(); ++i) {
    const PhraseMetrics& p = report.breakdown[i];
    const double af = mode == F1Mode::halved ? p.af_halved : p.af_standard;
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", i, p.ap, p.ar, af);
    out << buf;
  }
  if (!out) throw std::runtime_error("write_phrase_csv: write failed on " + path);
}

void write_summary_json(const std::string& path, const AttentionReport& attention,
                        const RetrievalReport& retrieval) {
  nlohmann::json recall_at;
  for (std::size_t i = 0; i < retrieval.ks.size(); ++i) {
    const std::string k = std::to_string(retrieval.ks[i]);
    recall_at["image_to_text"][k] = retrieval.image_to_text[i];
    recall_at["text_to_image"][k] = retrieval.text_to_image[i];
  }
  nlohmann::json summary = {
      {"precision", attention.precision},
      {"recall", attention.recall},
      {"f1_halved", attention.f1_halved},
      {"f1_standard", attention.f1_standard},
      {"recall_at", recall_at},
      {"rsum", retrieval.rsum},
  };
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_summary_json: cannot open " + path);
  out << summary.dump(2) << "\n";
  if (!out) throw std::runtime_error("write_summary_json: write failed on " + path);
}

}  // namespace ccattn
