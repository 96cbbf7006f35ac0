#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "zeroshot/dataset.hpp"
#include "zeroshot/errors.hpp"
#include "zeroshot/evaluation.hpp"
#include "zeroshot/model.hpp"
#include "zeroshot/text_features.hpp"

namespace zeroshot {

/// Pseudo-attributes of one class: the article terms whose deletion (with
/// norm-preserving rescale) most reduces the class's binary PR-AUC on the
/// test pool.
struct SensitivityReport {
  struct Entry {
    std::string term;
    double pr_auc_drop = 0.0;
  };

  std::uint32_t class_id = 0;
  double baseline_pr_auc = 0.0;
  std::vector<Entry> entries;  // descending by drop; ties broken by term
};

namespace detail {

/// Column of scores for one text against a fixed image pool.
inline std::vector<double> pool_scores(const Model& model, const FeatureStore& store,
                                       std::span<const std::uint32_t> pool, const TextFeature& text) {
  Model::BatchInputs in;
  in.texts = Tensor({1, text.weights.size()},
                    std::vector<double>(text.weights.values().begin(), text.weights.values().end()));
  if (model.config().uses_fc_branch()) in.images = feature_matrix(store, pool);
  if (model.config().uses_conv_branch()) in.maps = map_tensors(store, pool);
  Tensor scores = model.score_batch(in);
  std::vector<double> column(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) column[i] = scores(i, 0);
  return column;
}

inline std::vector<int> binary_labels(const FeatureStore& store, std::span<const std::uint32_t> pool,
                                      std::uint32_t class_id) {
  std::vector<int> labels(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) labels[i] = store.records[pool[i]].label == class_id ? 1 : 0;
  return labels;
}

}  // namespace detail

/// Perturbs each nonzero-weight term of the article feature in turn and
/// records the PR-AUC drop relative to the unperturbed baseline. Zero-weight
/// terms are skipped: deleting them cannot change the vector.
inline SensitivityReport word_sensitivity(const Model& model, const Vocabulary& vocabulary,
                                          const TextFeature& feature, const FeatureStore& store,
                                          std::span<const std::uint32_t> pool, std::size_t top_count) {
  if (feature.weights.size() != vocabulary.size()) {
    throw contract_error("article feature length does not match the vocabulary");
  }
  const std::vector<int> labels = detail::binary_labels(store, pool, feature.class_id);
  if (std::find(labels.begin(), labels.end(), 1) == labels.end()) {
    throw metric_error("word sensitivity needs test images of class " + std::to_string(feature.class_id));
  }
  SensitivityReport report;
  report.class_id = feature.class_id;
  report.baseline_pr_auc = pr_auc(detail::pool_scores(model, store, pool, feature), labels);
  for (std::size_t term = 0; term < feature.weights.size(); ++term) {
    if (feature.weights[term] == 0.0) continue;
    const TextFeature perturbed = delete_term_rescaled(feature, term);
    const double perturbed_auc = pr_auc(detail::pool_scores(model, store, pool, perturbed), labels);
    report.entries.push_back({vocabulary.terms[term], report.baseline_pr_auc - perturbed_auc});
  }
  std::sort(report.entries.begin(), report.entries.end(),
            [](const SensitivityReport::Entry& a, const SensitivityReport::Entry& b) {
              if (a.pr_auc_drop != b.pr_auc_drop) return a.pr_auc_drop > b.pr_auc_drop;
              return a.term < b.term;
            });
  if (report.entries.size() > top_count) report.entries.resize(top_count);
  return report;
}

struct NeighborResult {
  std::vector<std::uint32_t> image_ids;  // best first
  std::vector<double> scores;            // matching dot products
  bool truncated = false;                // count exceeded the candidate pool
};

/// Ranks pool images by the dot product between the class's predicted fc
/// weights and their visual embeddings. With within_class set, candidates
/// are restricted to the class's own images.
inline NeighborResult nearest_images(const Model& model, const TextFeature& text, const FeatureStore& store,
                                     std::span<const std::uint32_t> pool, std::size_t count,
                                     bool within_class) {
  if (!model.config().uses_fc_branch()) {
    throw contract_error("nearest_images requires an fc or joint model");
  }
  const Tensor weights = model.predict_fc_weights(text.weights);
  struct Scored {
    std::uint32_t image_id;
    double score;
  };
  std::vector<Scored> scored;
  for (std::uint32_t row : pool) {
    if (within_class && store.records[row].label != text.class_id) continue;
    const Tensor g = model.visual_embedding(store.feature_tensor(row));
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * weights[i];
    scored.push_back({store.records[row].image_id, s});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
  });
  NeighborResult result;
  result.truncated = count > scored.size();
  const std::size_t take = std::min(count, scored.size());
  for (std::size_t i = 0; i < take; ++i) {
    result.image_ids.push_back(scored[i].image_id);
    result.scores.push_back(scored[i].score);
  }
  return result;
}

// ---- serialization ----

inline nlohmann::json to_json(const SensitivityReport& report, const std::string& config_digest = {}) {
  nlohmann::json j;
  if (!config_digest.empty()) j["config_digest"] = config_digest;
  j["class_id"] = report.class_id;
  j["baseline_pr_auc"] = report.baseline_pr_auc;
  j["terms"] = nlohmann::json::array();
  for (const auto& e : report.entries) {
    j["terms"].push_back({{"term", e.term}, {"pr_auc_drop", e.pr_auc_drop}});
  }
  return j;
}

/// Aligned plain-text table for human reading.
inline std::string to_table(const SensitivityReport& report) {
  std::size_t width = 4;
  for (const auto& e : report.entries) width = std::max(width, e.term.size());
  std::ostringstream out;
  out << "class " << report.class_id << "  baseline PR-AUC " << std::fixed << std::setprecision(4)
      << report.baseline_pr_auc << '\n';
  out << std::left << std::setw(static_cast<int>(width)) << "term" << "  pr_auc_drop\n";
  for (const auto& e : report.entries) {
    out << std::left << std::setw(static_cast<int>(width)) << e.term << "  " << std::showpos
        << std::setprecision(6) << e.pr_auc_drop << std::noshowpos << '\n';
  }
  return out.str();
}

inline void save_sensitivity_report(const SensitivityReport& report, const std::filesystem::path& json_path,
                                    const std::filesystem::path& table_path,
                                    const std::string& config_digest = {}) {
  std::ofstream json_out(json_path, std::ios::binary | std::ios::trunc);
  if (!json_out) throw io_error("cannot write " + json_path.string());
  json_out << to_json(report, config_digest).dump(2) << '\n';
  std::ofstream table_out(table_path, std::ios::binary | std::ios::trunc);
  if (!table_out) throw io_error("cannot write " + table_path.string());
  table_out << to_table(report);
}

}  // namespace zeroshot
