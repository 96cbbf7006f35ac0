#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zeroshot/dataset.hpp"
#include "zeroshot/errors.hpp"
#include "zeroshot/model.hpp"
#include "zeroshot/rng.hpp"
#include "zeroshot/tape.hpp"
#include "zeroshot/tensor.hpp"

namespace zeroshot {

enum class LossKind { bce, hinge, euclidean };

inline std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::bce: return "bce";
    case LossKind::hinge: return "hinge";
    case LossKind::euclidean: return "euclidean";
  }
  return "?";
}

/// A minibatch of images paired with the distinct classes present in it.
/// indicators(i,j) = 1 iff image i's label equals class_ids[j]; every row
/// has exactly one positive. Hinge and Euclidean losses consume the +-1
/// remapping from signed_indicators().
struct PairBatch {
  std::vector<std::uint32_t> image_rows;  // store row per image
  std::vector<std::uint32_t> class_ids;   // distinct labels, ascending
  Tensor indicators;                      // [B, C'] of 0/1

  std::size_t size() const { return image_rows.size(); }
};

inline Tensor signed_indicators(const Tensor& indicators01) {
  Tensor out = indicators01;
  for (double& v : out.values()) v = v > 0.5 ? 1.0 : -1.0;
  return out;
}

/// Assembles the batch for a fixed set of store rows: the class set is
/// exactly the distinct labels among them.
inline PairBatch make_pair_batch(const FeatureStore& store, std::span<const std::uint32_t> rows) {
  if (rows.empty()) throw contract_error("a pair batch needs at least one image");
  PairBatch batch;
  batch.image_rows.assign(rows.begin(), rows.end());
  batch.class_ids.assign(rows.begin(), rows.end());
  for (std::size_t i = 0; i < rows.size(); ++i) batch.class_ids[i] = store.records[rows[i]].label;
  std::sort(batch.class_ids.begin(), batch.class_ids.end());
  batch.class_ids.erase(std::unique(batch.class_ids.begin(), batch.class_ids.end()), batch.class_ids.end());
  batch.indicators = Tensor({rows.size(), batch.class_ids.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::uint32_t label = store.records[rows[i]].label;
    const auto it = std::lower_bound(batch.class_ids.begin(), batch.class_ids.end(), label);
    batch.indicators(i, static_cast<std::size_t>(it - batch.class_ids.begin())) = 1.0;
  }
  return batch;
}

/// Monte-Carlo minibatch: B images drawn uniformly without replacement from
/// the candidate rows; scoring the batch against its own label set costs
/// O(B x B) instead of O(N x C).
inline PairBatch sample_minibatch(const FeatureStore& store, std::span<const std::uint32_t> candidates,
                                  std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw config_error("minibatch size must be positive");
  if (batch_size > candidates.size()) {
    throw config_error("minibatch size " + std::to_string(batch_size) + " exceeds the " +
                       std::to_string(candidates.size()) + " available images");
  }
  std::vector<std::size_t> picks = rng.sample_without_replacement(candidates.size(), batch_size);
  std::vector<std::uint32_t> rows(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) rows[i] = candidates[picks[i]];
  return make_pair_batch(store, rows);
}

namespace detail {

inline void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw contract_error(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline void require_binary(const Tensor& indicators) {
  for (double v : indicators.values()) {
    if (v != 0.0 && v != 1.0) {
      throw contract_error("BCE indicators must be 0 or 1, got " + std::to_string(v));
    }
  }
}

/// Summed negated log-likelihood of Bernoulli targets under logits, in the
/// stable softplus form: sum softplus(s) - I*s.
inline double bce_forward(const Tensor& scores, const Tensor& indicators) {
  double loss = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    loss += softplus(scores[i]) - indicators[i] * scores[i];
  }
  return loss;
}

inline double hinge_forward(const Tensor& scores, const Tensor& signed_ind, double margin) {
  double loss = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    loss += std::fmax(0.0, margin - signed_ind[i] * scores[i]);
  }
  return loss;
}

}  // namespace detail

/// Negative Bernoulli log-likelihood of the score matrix, summed over all
/// image/class pairs. The underlying likelihood is maximized; this returns
/// its negation for minimization.
inline double bce_loss(const Tensor& scores, const Tensor& indicators01) {
  detail::require_same_shape("bce_loss", scores, indicators01);
  detail::require_binary(indicators01);
  return detail::bce_forward(scores, indicators01);
}

/// sum max(0, margin - I * score) with I in {-1, +1}.
inline double hinge_loss(const Tensor& scores, const Tensor& signed_indicators, double margin = 1.0) {
  detail::require_same_shape("hinge_loss", scores, signed_indicators);
  if (margin <= 0.0) throw config_error("hinge margin must be positive");
  return detail::hinge_forward(scores, signed_indicators, margin);
}

/// Hinge loss on the surrogate score s_ij = -1/2 ||w_j - g_i||^2. The
/// equivalent augmented form (dot product minus half squared norms) is what
/// the training path uses; this direct form keeps the two routes
/// independent.
inline double euclidean_loss(const Tensor& fc_weights, const Tensor& embeddings,
                             const Tensor& signed_indicators, double margin = 1.0) {
  if (fc_weights.rank() != 2 || embeddings.rank() != 2 || fc_weights.extent(1) != embeddings.extent(1)) {
    throw contract_error("euclidean_loss expects [C,k] weights and [B,k] embeddings, got " +
                         shape_string(fc_weights.shape()) + " and " + shape_string(embeddings.shape()));
  }
  const std::size_t classes = fc_weights.extent(0);
  const std::size_t batch = embeddings.extent(0);
  const std::size_t k = embeddings.extent(1);
  if (signed_indicators.rank() != 2 || signed_indicators.extent(0) != batch ||
      signed_indicators.extent(1) != classes) {
    throw contract_error("euclidean_loss indicator shape mismatch");
  }
  if (margin <= 0.0) throw config_error("hinge margin must be positive");
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < classes; ++j) {
      double dist_sq = 0.0;
      for (std::size_t q = 0; q < k; ++q) {
        const double diff = fc_weights(j, q) - embeddings(i, q);
        dist_sq += diff * diff;
      }
      const double surrogate = -0.5 * dist_sq;
      loss += std::fmax(0.0, margin - signed_indicators(i, j) * surrogate);
    }
  }
  return loss;
}

// ---- tape ops ----

/// BCE loss node over a recorded score matrix. Gradient: sigmoid(s) - I.
inline Var bce_loss_op(Tape& tape, Var scores, Tensor indicators01) {
  detail::require_same_shape("bce_loss", tape.value(scores), indicators01);
  detail::require_binary(indicators01);
  const double loss = detail::bce_forward(tape.value(scores), indicators01);
  return tape.custom({scores}, Tensor::scalar(loss),
                     [ind = std::move(indicators01)](Tape& t, const Tensor& up, std::span<const Var> inputs) {
                       const Tensor& s = t.value(inputs[0]);
                       t.accumulate(inputs[0], [&](Tensor& g) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           g[i] += up[0] * (stable_sigmoid(s[i]) - ind[i]);
                         }
                       });
                     });
}

/// Hinge loss node. Gradient is -I on violated pairs, 0 on satisfied ones.
inline Var hinge_loss_op(Tape& tape, Var scores, Tensor signed_ind, double margin) {
  detail::require_same_shape("hinge_loss", tape.value(scores), signed_ind);
  if (margin <= 0.0) throw config_error("hinge margin must be positive");
  const double loss = detail::hinge_forward(tape.value(scores), signed_ind, margin);
  return tape.custom({scores}, Tensor::scalar(loss),
                     [ind = std::move(signed_ind), margin](Tape& t, const Tensor& up, std::span<const Var> inputs) {
                       const Tensor& s = t.value(inputs[0]);
                       t.accumulate(inputs[0], [&](Tensor& g) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (margin - ind[i] * s[i] > 0.0) g[i] -= up[0] * ind[i];
                         }
                       });
                     });
}

/// Augments a recorded score matrix with -1/2 ||text side||^2 - 1/2
/// ||image side||^2 row/column penalties, turning dot-product scores into
/// the Euclidean surrogate of the hinge objective.
inline Var norm_augmented_scores_op(Tape& tape, Var scores, std::span<const Var> image_sides,
                                    std::span<const Var> text_sides) {
  Var image_pen;
  for (Var side : image_sides) {
    Var n = tape.row_sqnorm(side);
    image_pen = image_pen.valid() ? tape.add(image_pen, n) : n;
  }
  Var text_pen;
  for (Var side : text_sides) {
    Var n = tape.row_sqnorm(side);
    text_pen = text_pen.valid() ? tape.add(text_pen, n) : n;
  }
  Var penalty = tape.outer_sum(tape.scale(image_pen, -0.5), tape.scale(text_pen, -0.5));
  return tape.add(scores, penalty);
}

/// Builds the training objective for a recorded forward pass.
inline Var batch_loss_op(Tape& tape, const Model& model, const Model::BatchForward& fwd,
                         const PairBatch& batch, LossKind kind, double margin) {
  if (tape.value(fwd.scores).extent(0) != batch.size() ||
      tape.value(fwd.scores).extent(1) != batch.class_ids.size()) {
    throw contract_error("score matrix does not match the pair batch");
  }
  switch (kind) {
    case LossKind::bce:
      return bce_loss_op(tape, fwd.scores, batch.indicators);
    case LossKind::hinge:
      return hinge_loss_op(tape, fwd.scores, signed_indicators(batch.indicators), margin);
    case LossKind::euclidean: {
      std::vector<Var> image_sides;
      std::vector<Var> text_sides;
      if (model.config().uses_fc_branch()) {
        image_sides.push_back(fwd.fc_image_embed);
        text_sides.push_back(fwd.fc_text_weights);
      }
      if (model.config().uses_conv_branch()) {
        image_sides.push_back(fwd.conv_image_rows);
        text_sides.push_back(fwd.conv_filters);
      }
      Var surrogate = norm_augmented_scores_op(tape, fwd.scores, image_sides, text_sides);
      return hinge_loss_op(tape, surrogate, signed_indicators(batch.indicators), margin);
    }
  }
  throw contract_error("unknown loss kind");
}

}  // namespace zeroshot
