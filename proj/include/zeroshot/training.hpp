#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "zeroshot/dataset.hpp"
#include "zeroshot/errors.hpp"
#include "zeroshot/losses.hpp"
#include "zeroshot/model.hpp"
#include "zeroshot/optimizer.hpp"
#include "zeroshot/rng.hpp"

namespace zeroshot {

struct TrainConfig {
  ModelKind kind = ModelKind::fc;
  LossKind loss = LossKind::bce;
  std::size_t batch_size = 200;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  AdamConfig adam;
  double margin = 1.0;
  std::uint32_t k = 50;
  std::uint32_t k_reduced = 5;
  std::uint32_t filter_size = 3;
  PoolMode pool = PoolMode::average;
};

struct TrainResult {
  Model model;
  std::vector<double> loss_trace;  // one summed batch loss per step
};

/// Records one scoring pass over the batch and returns the loss node.
inline Var record_batch_loss(Tape& tape, const Model& model, const Model::TapeParams& bound,
                             const FeatureStore& store, const PairBatch& batch,
                             const std::vector<TextFeature>& texts, LossKind loss, double margin) {
  Model::BatchInputs inputs = batch_inputs(model, store, batch.image_rows, texts, batch.class_ids);
  Model::BatchForward fwd = model.forward_batch(tape, bound, inputs);
  return batch_loss_op(tape, model, fwd, batch, loss, margin);
}

/// Loss of the full objective (every image against every class present in
/// the given rows) under the current parameters.
inline double dataset_loss(const Model& model, const FeatureStore& store,
                           std::span<const std::uint32_t> rows, const std::vector<TextFeature>& texts,
                           LossKind loss, double margin = 1.0) {
  Tape tape;
  Model::TapeParams bound = model.bind(tape, false);
  PairBatch batch = make_pair_batch(store, rows);
  Var objective = record_batch_loss(tape, model, bound, store, batch, texts, loss, margin);
  return tape.value(objective).item();
}

/// Scalar objective and per-parameter gradients at the current parameters;
/// the contract behind the optimizer and the finite-difference checks.
struct ObjectiveEvaluation {
  double loss = 0.0;
  std::vector<Tensor> gradients;  // aligned with model.parameters()
};

inline ObjectiveEvaluation evaluate_batch_objective(const Model& model, const FeatureStore& store,
                                                    const PairBatch& batch,
                                                    const std::vector<TextFeature>& texts, LossKind loss,
                                                    double margin = 1.0) {
  Tape tape;
  Model::TapeParams bound = model.bind(tape, true);
  Var objective = record_batch_loss(tape, model, bound, store, batch, texts, loss, margin);
  tape.backward(objective);
  ObjectiveEvaluation eval;
  eval.loss = tape.value(objective).item();
  eval.gradients.reserve(bound.vars.size());
  for (Var v : bound.vars) eval.gradients.push_back(tape.gradient(v));
  return eval;
}

/// Runs epochs x ceil(N/B) Adam steps. Each epoch reshuffles the training
/// rows and slices them into batches without replacement; the trailing
/// batch of an epoch may be smaller than B. Deterministic per seed: the
/// same seed drives initialization and batch order.
inline TrainResult train(const FeatureStore& store, std::span<const std::uint32_t> train_rows,
                         const std::vector<TextFeature>& texts, const TrainConfig& config) {
  if (train_rows.empty()) throw config_error("training requires a nonempty training set");
  if (config.batch_size == 0) throw config_error("batch size must be positive");
  if (config.epochs == 0) throw config_error("epoch count must be positive");
  if (config.batch_size > train_rows.size()) {
    throw config_error("batch size " + std::to_string(config.batch_size) + " exceeds the training set size " +
                       std::to_string(train_rows.size()));
  }
  if (texts.empty()) throw config_error("training requires text features");

  ModelConfig mc;
  mc.kind = config.kind;
  mc.p = static_cast<std::uint32_t>(texts.front().weights.size());
  mc.d = store.d;
  mc.m = store.m;
  mc.map_w = store.map_w;
  mc.map_h = store.map_h;
  mc.k = config.k;
  mc.k_reduced = config.k_reduced;
  mc.filter_size = config.filter_size;
  mc.pool = config.pool;

  TrainResult result{Model(mc, config.seed), {}};
  Model& model = result.model;
  AdamState adam = AdamState::init(model.parameters(), config.adam);
  Rng rng(config.seed + 1);  // batch order; init consumed the base seed

  std::vector<std::uint32_t> order(train_rows.begin(), train_rows.end());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      PairBatch batch = make_pair_batch(store, std::span<const std::uint32_t>(order).subspan(start, count));
      ObjectiveEvaluation eval =
          evaluate_batch_objective(model, store, batch, texts, config.loss, config.margin);
      ++step;
      if (!std::isfinite(eval.loss)) {
        throw training_error("non-finite loss at step " + std::to_string(step));
      }
      adam_step(model.parameters(), eval.gradients, model.parameter_names(), adam);
      result.loss_trace.push_back(eval.loss);
    }
  }
  return result;
}

/// `step,loss` rows, steps counted from 1. An optional provenance digest
/// goes into a leading comment line.
inline void save_loss_trace_csv(const std::vector<double>& trace, const std::filesystem::path& path,
                                const std::string& config_digest = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write loss trace " + path.string());
  if (!config_digest.empty()) out << "# config_digest=" << config_digest << '\n';
  out << "step,loss\n";
  out.precision(17);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << (i + 1) << ',' << trace[i] << '\n';
  }
}

}  // namespace zeroshot
