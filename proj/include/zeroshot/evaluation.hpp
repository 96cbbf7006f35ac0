#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "zeroshot/dataset.hpp"
#include "zeroshot/errors.hpp"
#include "zeroshot/model.hpp"
#include "zeroshot/tensor.hpp"

namespace zeroshot {

/// Mann-Whitney ROC-AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counted one half. Requires both label values.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw contract_error("roc_auc: scores and labels differ in length");
  std::size_t positives = 0;
  for (int l : labels) positives += l ? 1 : 0;
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw metric_error("roc_auc is undefined without both positive and negative samples");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double numerator = 0.0;
  std::size_t negatives_seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    std::size_t group_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) {
        ++group_pos;
      } else {
        ++group_neg;
      }
      ++j;
    }
    const double negatives_below = static_cast<double>(negatives - negatives_seen - group_neg);
    numerator += static_cast<double>(group_pos) * (negatives_below + 0.5 * static_cast<double>(group_neg));
    negatives_seen += group_neg;
    i = j;
  }
  return numerator / (static_cast<double>(positives) * static_cast<double>(negatives));
}

/// PR-AUC by trapezoidal integration over the all-ranks precision/recall
/// points, with (0, precision at rank 1) prepended. Ties are broken by
/// stable input order.
inline double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw contract_error("pr_auc: scores and labels differ in length");
  std::size_t positives = 0;
  for (int l : labels) positives += l ? 1 : 0;
  if (positives == 0) throw metric_error("pr_auc is undefined without positive samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double area = 0.0;
  double prev_recall = 0.0;
  double prev_precision = 1.0;  // replaced by precision at rank 1 below
  std::size_t true_positives = 0;
  for (std::size_t rank = 1; rank <= order.size(); ++rank) {
    if (labels[order[rank - 1]]) ++true_positives;
    const double recall = static_cast<double>(true_positives) / static_cast<double>(positives);
    const double precision = static_cast<double>(true_positives) / static_cast<double>(rank);
    if (rank == 1) prev_precision = precision;  // the prepended (0, p1) point
    area += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    prev_recall = recall;
    prev_precision = precision;
  }
  return area;
}

/// Fraction of rows whose true class ranks among the K best scores; ties
/// are broken by ascending class id.
inline double top_k_accuracy(const Tensor& scores, std::span<const std::uint32_t> labels, std::size_t k) {
  if (scores.rank() != 2) throw contract_error("top_k_accuracy expects a [N,C] score matrix");
  const std::size_t n = scores.extent(0);
  const std::size_t classes = scores.extent(1);
  if (labels.size() != n) throw contract_error("top_k_accuracy: label count does not match rows");
  if (k == 0 || k > classes) {
    throw contract_error("top_k_accuracy: K must lie in [1, " + std::to_string(classes) + "]");
  }
  if (n == 0) throw contract_error("top_k_accuracy needs at least one row");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t truth = labels[i];
    if (truth >= classes) throw contract_error("top_k_accuracy: label outside score columns");
    const double s_true = scores(i, truth);
    std::size_t position = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (scores(i, c) > s_true || (scores(i, c) == s_true && c < truth)) ++position;
    }
    if (position < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---- protocol ----

struct EvalReport {
  struct PerClass {
    std::uint32_t class_id = 0;
    bool unseen = false;
    double roc_auc = 0.0;
    double pr_auc = 0.0;
  };

  std::vector<PerClass> per_class;
  std::optional<double> roc_auc_unseen;
  double roc_auc_seen = 0.0;
  double roc_auc_mean = 0.0;
  std::optional<double> pr_auc_unseen;
  double pr_auc_seen = 0.0;
  double pr_auc_mean = 0.0;
  double top1_seen = 0.0;
  double top5_seen = 0.0;
  std::optional<double> top1_unseen;
  std::optional<double> top5_unseen;
};

/// Builds the report from a precomputed [pool x all classes] score matrix.
/// Each class's binary task takes its images as positives and every other
/// pooled test image (seen and unseen alike) as negatives. Top-K ranks each
/// image against all class columns.
inline EvalReport build_report(const Tensor& scores, std::span<const std::uint32_t> pool_labels,
                               std::span<const std::uint8_t> pool_assignment,
                               std::span<const std::uint32_t> unseen_classes) {
  if (scores.rank() != 2) throw contract_error("build_report expects a [N,C] score matrix");
  const std::size_t n = scores.extent(0);
  const std::size_t classes = scores.extent(1);
  if (pool_labels.size() != n || pool_assignment.size() != n) {
    throw contract_error("build_report: pool annotation lengths do not match the score matrix");
  }
  if (n == 0) throw config_error("evaluation pool is empty");
  auto is_unseen = [&](std::uint32_t c) {
    return std::binary_search(unseen_classes.begin(), unseen_classes.end(), c);
  };
  std::size_t seen_class_count = 0;
  for (std::size_t c = 0; c < classes; ++c) seen_class_count += is_unseen(static_cast<std::uint32_t>(c)) ? 0 : 1;
  if (seen_class_count == 0) throw config_error("evaluation requires at least one seen class");

  EvalReport report;
  std::vector<double> column(n);
  std::vector<int> binary(n);
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = scores(i, c);
      binary[i] = pool_labels[i] == c ? 1 : 0;
      positives += binary[i];
    }
    if (positives == 0 || positives == n) continue;  // class absent from the pool
    EvalReport::PerClass entry;
    entry.class_id = static_cast<std::uint32_t>(c);
    entry.unseen = is_unseen(entry.class_id);
    entry.roc_auc = roc_auc(column, binary);
    entry.pr_auc = pr_auc(column, binary);
    report.per_class.push_back(entry);
  }
  if (report.per_class.empty()) throw config_error("no class has test images in the pool");

  double roc_seen = 0.0, roc_unseen = 0.0, pr_seen = 0.0, pr_unseen = 0.0;
  std::size_t n_seen = 0, n_unseen = 0;
  for (const auto& e : report.per_class) {
    if (e.unseen) {
      roc_unseen += e.roc_auc;
      pr_unseen += e.pr_auc;
      ++n_unseen;
    } else {
      roc_seen += e.roc_auc;
      pr_seen += e.pr_auc;
      ++n_seen;
    }
  }
  if (n_seen == 0) throw config_error("no seen class has test images in the pool");
  report.roc_auc_seen = roc_seen / static_cast<double>(n_seen);
  report.pr_auc_seen = pr_seen / static_cast<double>(n_seen);
  report.roc_auc_mean = (roc_seen + roc_unseen) / static_cast<double>(n_seen + n_unseen);
  report.pr_auc_mean = (pr_seen + pr_unseen) / static_cast<double>(n_seen + n_unseen);
  if (n_unseen > 0) {
    report.roc_auc_unseen = roc_unseen / static_cast<double>(n_unseen);
    report.pr_auc_unseen = pr_unseen / static_cast<double>(n_unseen);
  }

  const std::size_t k5 = std::min<std::size_t>(5, classes);
  std::vector<std::size_t> seen_rows, unseen_rows;
  for (std::size_t i = 0; i < n; ++i) {
    (pool_assignment[i] == SplitSpec::kUnseenTest ? unseen_rows : seen_rows).push_back(i);
  }
  auto subset_accuracy = [&](const std::vector<std::size_t>& rows, std::size_t k) {
    Tensor sub({rows.size(), classes});
    std::vector<std::uint32_t> sub_labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < classes; ++c) sub(i, c) = scores(rows[i], c);
      sub_labels[i] = pool_labels[rows[i]];
    }
    return top_k_accuracy(sub, sub_labels, k);
  };
  if (seen_rows.empty()) throw config_error("evaluation pool has no seen-class test images");
  report.top1_seen = subset_accuracy(seen_rows, 1);
  report.top5_seen = subset_accuracy(seen_rows, k5);
  if (!unseen_rows.empty()) {
    report.top1_unseen = subset_accuracy(unseen_rows, 1);
    report.top5_unseen = subset_accuracy(unseen_rows, k5);
  }
  return report;
}

/// Scores the pooled test images of a split against every class text and
/// assembles the report.
inline EvalReport evaluate_protocol(const Model& model, const FeatureStore& store, const SplitSpec& split,
                                    const std::vector<TextFeature>& texts) {
  if (texts.size() != store.c_total) {
    throw contract_error("evaluation needs one text feature per class (" + std::to_string(store.c_total) +
                         " classes, " + std::to_string(texts.size()) + " texts)");
  }
  std::vector<std::uint32_t> pool = split.test_pool_indices();
  if (pool.empty()) throw config_error("split has no test images");
  std::vector<std::uint32_t> all_classes(store.c_total);
  std::iota(all_classes.begin(), all_classes.end(), 0);
  Tensor scores = model.score_batch(batch_inputs(model, store, pool, texts, all_classes));
  std::vector<std::uint32_t> pool_labels(pool.size());
  std::vector<std::uint8_t> pool_assignment(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    pool_labels[i] = store.records[pool[i]].label;
    pool_assignment[i] = split.assignment[pool[i]];
  }
  return build_report(scores, pool_labels, pool_assignment, split.unseen_classes);
}

/// Mean of several reports (cross-validation folds). Per-class entries are
/// dropped because folds partition classes differently; optional fields are
/// averaged over the folds that carry them.
inline EvalReport average_reports(std::span<const EvalReport> reports) {
  if (reports.empty()) throw contract_error("average_reports needs at least one report");
  EvalReport mean;
  auto avg = [&](auto getter) {
    double acc = 0.0;
    for (const EvalReport& r : reports) acc += getter(r);
    return acc / static_cast<double>(reports.size());
  };
  auto avg_opt = [&](auto getter) -> std::optional<double> {
    double acc = 0.0;
    std::size_t count = 0;
    for (const EvalReport& r : reports) {
      if (auto v = getter(r)) {
        acc += *v;
        ++count;
      }
    }
    if (count == 0) return std::nullopt;
    return acc / static_cast<double>(count);
  };
  mean.roc_auc_seen = avg([](const EvalReport& r) { return r.roc_auc_seen; });
  mean.roc_auc_mean = avg([](const EvalReport& r) { return r.roc_auc_mean; });
  mean.pr_auc_seen = avg([](const EvalReport& r) { return r.pr_auc_seen; });
  mean.pr_auc_mean = avg([](const EvalReport& r) { return r.pr_auc_mean; });
  mean.top1_seen = avg([](const EvalReport& r) { return r.top1_seen; });
  mean.top5_seen = avg([](const EvalReport& r) { return r.top5_seen; });
  mean.roc_auc_unseen = avg_opt([](const EvalReport& r) { return r.roc_auc_unseen; });
  mean.pr_auc_unseen = avg_opt([](const EvalReport& r) { return r.pr_auc_unseen; });
  mean.top1_unseen = avg_opt([](const EvalReport& r) { return r.top1_unseen; });
  mean.top5_unseen = avg_opt([](const EvalReport& r) { return r.top5_unseen; });
  return mean;
}

// ---- serialization ----

inline nlohmann::json to_json(const EvalReport& report, const std::string& config_digest = {}) {
  nlohmann::json j;
  if (!config_digest.empty()) j["config_digest"] = config_digest;
  j["per_class"] = nlohmann::json::array();
  for (const auto& e : report.per_class) {
    j["per_class"].push_back({{"class_id", e.class_id},
                              {"unseen", e.unseen},
                              {"roc_auc", e.roc_auc},
                              {"pr_auc", e.pr_auc}});
  }
  nlohmann::json roc{{"seen", report.roc_auc_seen}, {"mean", report.roc_auc_mean}};
  nlohmann::json pr{{"seen", report.pr_auc_seen}, {"mean", report.pr_auc_mean}};
  if (report.roc_auc_unseen) roc["unseen"] = *report.roc_auc_unseen;
  if (report.pr_auc_unseen) pr["unseen"] = *report.pr_auc_unseen;
  j["roc_auc"] = roc;
  j["pr_auc"] = pr;
  nlohmann::json top1{{"seen", report.top1_seen}};
  nlohmann::json top5{{"seen", report.top5_seen}};
  if (report.top1_unseen) top1["unseen"] = *report.top1_unseen;
  if (report.top5_unseen) top5["unseen"] = *report.top5_unseen;
  j["top1"] = top1;
  j["top5"] = top5;
  return j;
}

inline void save_eval_report(const EvalReport& report, const std::filesystem::path& path,
                             const std::string& config_digest = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write report " + path.string());
  out << to_json(report, config_digest).dump(2) << '\n';
}

}  // namespace zeroshot
