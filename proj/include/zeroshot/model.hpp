#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zeroshot/dataset.hpp"
#include "zeroshot/errors.hpp"
#include "zeroshot/rng.hpp"
#include "zeroshot/tape.hpp"
#include "zeroshot/tensor.hpp"
#include "zeroshot/text_features.hpp"

namespace zeroshot {

enum class ModelKind { fc, conv, joint };

/// Identity is a test configuration that turns every mapper into a plain
/// linear map; checkpoints only store ReLU models.
enum class Activation { relu, identity };

inline std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::fc: return "fc";
    case ModelKind::conv: return "conv";
    case ModelKind::joint: return "joint";
  }
  return "?";
}

inline std::string to_string(PoolMode mode) {
  return mode == PoolMode::average ? "average" : "max";
}

/// Width of every mapper's hidden layer.
inline constexpr std::uint32_t kHiddenUnits = 300;
/// Spatial size of the map-reduction convolution.
inline constexpr std::uint32_t kReducerFilterSize = 3;

struct ModelConfig {
  ModelKind kind = ModelKind::fc;
  std::uint32_t p = 0;        // text feature dimension
  std::uint32_t d = 0;        // flat visual feature dimension
  std::uint32_t m = 0;        // input feature-map channels
  std::uint32_t map_w = 0;
  std::uint32_t map_h = 0;
  std::uint32_t k = 50;           // predicted fc weight length
  std::uint32_t k_reduced = 5;    // K': reduced channel count
  std::uint32_t filter_size = 3;  // s: predicted filter size
  PoolMode pool = PoolMode::average;
  Activation activation = Activation::relu;

  bool uses_fc_branch() const { return kind != ModelKind::conv; }
  bool uses_conv_branch() const { return kind != ModelKind::fc; }
};

/// Classifier-weight prediction model. The text mapper turns a tf-idf
/// vector into fc classifier weights; the filter predictor turns it into
/// convolutional filters applied to reduced CNN feature maps; the joint
/// model sums both branch scores, predicting both weight sets from one
/// shared text hidden layer.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    validate_config(cfg_);
    Rng rng(seed);
    if (cfg_.uses_fc_branch()) {
      if (cfg_.kind == ModelKind::fc) {
        roles_.text_hidden_w = add_glorot(rng, "text.hidden.weight", {kHiddenUnits, cfg_.p});
        roles_.text_hidden_b = add_zeros("text.hidden.bias", {kHiddenUnits});
        roles_.text_out_w = add_glorot(rng, "text.out.weight", {cfg_.k, kHiddenUnits});
        roles_.text_out_b = add_zeros("text.out.bias", {cfg_.k});
      } else {  // joint: shared hidden feeds both heads
        roles_.text_hidden_w = add_glorot(rng, "text.hidden.weight", {kHiddenUnits, cfg_.p});
        roles_.text_hidden_b = add_zeros("text.hidden.bias", {kHiddenUnits});
        roles_.text_out_w = add_glorot(rng, "text.out.weight", {cfg_.k, kHiddenUnits});
        roles_.text_out_b = add_zeros("text.out.bias", {cfg_.k});
        roles_.filter_out_w = add_glorot(rng, "filter.out.weight", {filter_outputs(), kHiddenUnits});
        roles_.filter_out_b = add_zeros("filter.out.bias", {filter_outputs()});
      }
    }
    if (cfg_.kind == ModelKind::conv) {
      roles_.filter_hidden_w = add_glorot(rng, "filter.hidden.weight", {kHiddenUnits, cfg_.p});
      roles_.filter_hidden_b = add_zeros("filter.hidden.bias", {kHiddenUnits});
      roles_.filter_out_w = add_glorot(rng, "filter.out.weight", {filter_outputs(), kHiddenUnits});
      roles_.filter_out_b = add_zeros("filter.out.bias", {filter_outputs()});
    }
    if (cfg_.uses_fc_branch()) {
      roles_.vis_hidden_w = add_glorot(rng, "visual.hidden.weight", {kHiddenUnits, cfg_.d});
      roles_.vis_hidden_b = add_zeros("visual.hidden.bias", {kHiddenUnits});
      roles_.vis_out_w = add_glorot(rng, "visual.out.weight", {cfg_.k, kHiddenUnits});
      roles_.vis_out_b = add_zeros("visual.out.bias", {cfg_.k});
    }
    if (cfg_.uses_conv_branch()) {
      roles_.reducer_w = add_glorot(rng, "reducer.weight",
                                    {cfg_.k_reduced, cfg_.m, kReducerFilterSize, kReducerFilterSize});
      roles_.reducer_b = add_zeros("reducer.bias", {cfg_.k_reduced});
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  std::size_t parameter_count() const { return params_.size(); }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  const Tensor& parameter(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return params_[i];
    throw contract_error("no parameter named " + name);
  }
  Tensor& parameter(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const Model*>(this)->parameter(name));
  }

  std::size_t scalar_parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : params_) n += t.size();
    return n;
  }

  std::vector<double> flatten_parameters() const {
    std::vector<double> flat;
    flat.reserve(scalar_parameter_count());
    for (const Tensor& t : params_) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
  }

  void set_parameters_from_flat(std::span<const double> flat) {
    if (flat.size() != scalar_parameter_count()) {
      throw contract_error("flat parameter vector has wrong length");
    }
    std::size_t offset = 0;
    for (Tensor& t : params_) {
      std::copy(flat.begin() + offset, flat.begin() + offset + t.size(), t.values().begin());
      offset += t.size();
    }
  }

  // ---- tape forward ----

  struct TapeParams {
    std::vector<Var> vars;  // aligned with parameters()
  };

  TapeParams bind(Tape& tape, bool trainable) const {
    TapeParams bound;
    bound.vars.reserve(params_.size());
    for (const Tensor& t : params_) {
      bound.vars.push_back(trainable ? tape.parameter(t) : tape.constant(t));
    }
    return bound;
  }

  struct BatchInputs {
    Tensor texts;              // [C', p]
    Tensor images;             // [B, d]; fc and joint models
    std::vector<Tensor> maps;  // B entries of [M, w, h]; conv and joint models
  };

  struct BatchForward {
    std::size_t batch = 0;
    std::size_t classes = 0;
    Var scores;          // [B, C']
    Var fc_text_weights; // [C', k]
    Var fc_image_embed;  // [B, k]
    Var conv_filters;    // [C', K'*s*s]
    Var conv_image_rows; // [B, K'*w*h]
  };

  /// Records a full scoring pass: every text row is mapped once and reused
  /// for all images.
  BatchForward forward_batch(Tape& tape, const TapeParams& bound, const BatchInputs& in) const {
    if (in.texts.rank() != 2 || in.texts.extent(1) != cfg_.p) {
      throw contract_error("text batch must be [C'," + std::to_string(cfg_.p) + "], got " +
                           shape_string(in.texts.shape()));
    }
    const std::size_t classes = in.texts.extent(0);
    std::size_t batch = 0;
    BatchForward out;
    Var texts = tape.constant(in.texts);

    Var fc_scores;
    if (cfg_.uses_fc_branch()) {
      if (in.images.rank() != 2 || in.images.extent(1) != cfg_.d) {
        throw contract_error("image batch must be [B," + std::to_string(cfg_.d) + "], got " +
                             shape_string(in.images.shape()));
      }
      batch = in.images.extent(0);
      Var hidden = activation(tape, tape.linear(texts, v(bound, roles_.text_hidden_w), v(bound, roles_.text_hidden_b)));
      out.fc_text_weights = tape.linear(hidden, v(bound, roles_.text_out_w), v(bound, roles_.text_out_b));
      Var images = tape.constant(in.images);
      Var vh = activation(tape, tape.linear(images, v(bound, roles_.vis_hidden_w), v(bound, roles_.vis_hidden_b)));
      out.fc_image_embed = tape.linear(vh, v(bound, roles_.vis_out_w), v(bound, roles_.vis_out_b));
      fc_scores = tape.matmul_nt(out.fc_image_embed, out.fc_text_weights);
      if (cfg_.kind == ModelKind::joint) {
        out.conv_filters = tape.linear(hidden, v(bound, roles_.filter_out_w), v(bound, roles_.filter_out_b));
      }
    }

    Var conv_scores;
    if (cfg_.uses_conv_branch()) {
      if (in.maps.empty()) throw contract_error("conv scoring requires feature maps");
      if (batch == 0) {
        batch = in.maps.size();
      } else if (in.maps.size() != batch) {
        throw contract_error("feature-map count does not match the image batch");
      }
      if (cfg_.kind == ModelKind::conv) {
        Var hidden = activation(
            tape, tape.linear(texts, v(bound, roles_.filter_hidden_w), v(bound, roles_.filter_hidden_b)));
        out.conv_filters = tape.linear(hidden, v(bound, roles_.filter_out_w), v(bound, roles_.filter_out_b));
      }
      Var filters4d = tape.reshape(out.conv_filters, {classes, cfg_.k_reduced, cfg_.filter_size, cfg_.filter_size});
      std::vector<Var> score_rows;
      std::vector<Var> flat_rows;
      score_rows.reserve(batch);
      flat_rows.reserve(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        const Tensor& a = in.maps[i];
        if (a.rank() != 3 || a.extent(0) != cfg_.m || a.extent(1) != cfg_.map_w || a.extent(2) != cfg_.map_h) {
          throw contract_error("feature map must be [" + std::to_string(cfg_.m) + "," +
                               std::to_string(cfg_.map_w) + "," + std::to_string(cfg_.map_h) + "], got " +
                               shape_string(a.shape()));
        }
        Var reduced = activation(
            tape, tape.conv2d(tape.constant(a), v(bound, roles_.reducer_w), v(bound, roles_.reducer_b)));
        Var class_maps = tape.conv2d(reduced, filters4d);  // [C', w, h]
        score_rows.push_back(tape.channel_pool(class_maps, cfg_.pool));
        flat_rows.push_back(tape.reshape(reduced, {static_cast<std::size_t>(cfg_.k_reduced) * cfg_.map_w * cfg_.map_h}));
      }
      conv_scores = tape.stack_rows(score_rows);
      out.conv_image_rows = tape.stack_rows(flat_rows);
    }

    out.batch = batch;
    out.classes = classes;
    if (cfg_.kind == ModelKind::fc) {
      out.scores = fc_scores;
    } else if (cfg_.kind == ModelKind::conv) {
      out.scores = conv_scores;
    } else {
      out.scores = tape.add(fc_scores, conv_scores);
    }
    return out;
  }

  // ---- plain inference ----

  /// w_c = f_t(t_c).
  Tensor predict_fc_weights(const Tensor& text) const {
    if (!cfg_.uses_fc_branch()) throw contract_error("conv-only model predicts no fc weights");
    require_vector("text feature", text, cfg_.p);
    Tape tape;
    TapeParams bound = bind(tape, false);
    Var t = tape.constant(text);
    Var hidden = activation(tape, tape.linear(t, v(bound, roles_.text_hidden_w), v(bound, roles_.text_hidden_b)));
    Var w = tape.linear(hidden, v(bound, roles_.text_out_w), v(bound, roles_.text_out_b));
    return tape.value(w);
  }

  /// w'_c = f'_t(t_c), reshaped to [K', s, s].
  Tensor predict_filters(const Tensor& text) const {
    if (!cfg_.uses_conv_branch()) throw contract_error("fc-only model predicts no convolutional filters");
    require_vector("text feature", text, cfg_.p);
    Tape tape;
    TapeParams bound = bind(tape, false);
    Var t = tape.constant(text);
    Var hidden = cfg_.kind == ModelKind::conv
                     ? activation(tape, tape.linear(t, v(bound, roles_.filter_hidden_w), v(bound, roles_.filter_hidden_b)))
                     : activation(tape, tape.linear(t, v(bound, roles_.text_hidden_w), v(bound, roles_.text_hidden_b)));
    Var w = tape.linear(hidden, v(bound, roles_.filter_out_w), v(bound, roles_.filter_out_b));
    Var shaped = tape.reshape(w, {cfg_.k_reduced, cfg_.filter_size, cfg_.filter_size});
    return tape.value(shaped);
  }

  /// g_v(x).
  Tensor visual_embedding(const Tensor& image) const {
    if (!cfg_.uses_fc_branch()) throw contract_error("conv-only model has no flat visual mapper");
    require_vector("image feature", image, cfg_.d);
    Tape tape;
    TapeParams bound = bind(tape, false);
    Var x = tape.constant(image);
    Var hidden = activation(tape, tape.linear(x, v(bound, roles_.vis_hidden_w), v(bound, roles_.vis_hidden_b)));
    Var g = tape.linear(hidden, v(bound, roles_.vis_out_w), v(bound, roles_.vis_out_b));
    return tape.value(g);
  }

  /// a' = g'_v(a).
  Tensor reduced_maps(const Tensor& maps) const {
    if (!cfg_.uses_conv_branch()) throw contract_error("fc-only model has no map reducer");
    Tape tape;
    TapeParams bound = bind(tape, false);
    Var reduced = activation(
        tape, tape.conv2d(tape.constant(maps), v(bound, roles_.reducer_w), v(bound, roles_.reducer_b)));
    return tape.value(reduced);
  }

  /// yhat_c = w_c' g_v(x).
  double score_fc(const Tensor& image, const Tensor& fc_weights) const {
    Tensor g = visual_embedding(image);
    if (fc_weights.size() != g.size()) {
      throw contract_error("fc weight vector " + shape_string(fc_weights.shape()) +
                           " does not match embedding length " + std::to_string(g.size()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * fc_weights[i];
    return acc;
  }

  /// yhat'_c: reduce the maps, convolve with the predicted filters, sum the
  /// per-channel responses, pool globally.
  double score_conv(const Tensor& maps, const Tensor& filters) const {
    if (!cfg_.uses_conv_branch()) throw contract_error("fc-only model cannot score feature maps");
    if (filters.rank() != 3 || filters.extent(0) != cfg_.k_reduced || filters.extent(1) != cfg_.filter_size ||
        filters.extent(2) != cfg_.filter_size) {
      throw contract_error("predicted filters must be [" + std::to_string(cfg_.k_reduced) + "," +
                           std::to_string(cfg_.filter_size) + "," + std::to_string(cfg_.filter_size) + "], got " +
                           shape_string(filters.shape()));
    }
    Tape tape;
    TapeParams bound = bind(tape, false);
    Var reduced = activation(
        tape, tape.conv2d(tape.constant(maps), v(bound, roles_.reducer_w), v(bound, roles_.reducer_b)));
    Tensor f({1, cfg_.k_reduced, cfg_.filter_size, cfg_.filter_size},
             std::vector<double>(filters.values().begin(), filters.values().end()));
    Var summed = tape.conv2d(reduced, tape.constant(f));  // [1, w, h]
    Var pooled = tape.channel_pool(summed, cfg_.pool);
    return tape.value(pooled)[0];
  }

  /// Joint score: fc branch plus conv branch, both predicted from the same
  /// text feature.
  double score_joint(const Tensor& image, const Tensor& maps, const Tensor& text) const {
    if (cfg_.kind != ModelKind::joint) throw contract_error("score_joint requires a joint model");
    return score_fc(image, predict_fc_weights(text)) + score_conv(maps, predict_filters(text));
  }

  /// [B, C'] score matrix; text mappers run once per class.
  Tensor score_batch(const BatchInputs& inputs) const {
    if (inputs.texts.size() == 0) throw contract_error("score_batch requires at least one text");
    if (cfg_.uses_fc_branch() && inputs.images.size() == 0) throw contract_error("score_batch requires images");
    if (cfg_.uses_conv_branch() && inputs.maps.empty()) throw contract_error("score_batch requires feature maps");
    Tape tape;
    TapeParams bound = bind(tape, false);
    BatchForward fwd = forward_batch(tape, bound, inputs);
    return tape.value(fwd.scores);
  }

  Var activation(Tape& tape, Var x) const {
    return cfg_.activation == Activation::relu ? tape.relu(x) : x;
  }

  struct Roles {
    int text_hidden_w = -1, text_hidden_b = -1, text_out_w = -1, text_out_b = -1;
    int vis_hidden_w = -1, vis_hidden_b = -1, vis_out_w = -1, vis_out_b = -1;
    int filter_hidden_w = -1, filter_hidden_b = -1, filter_out_w = -1, filter_out_b = -1;
    int reducer_w = -1, reducer_b = -1;
  };
  const Roles& roles() const { return roles_; }
  static Var v(const TapeParams& bound, int role) {
    if (role < 0) throw contract_error("model role not present for this kind");
    return bound.vars[static_cast<std::size_t>(role)];
  }

 private:
  std::size_t filter_outputs() const {
    return static_cast<std::size_t>(cfg_.k_reduced) * cfg_.filter_size * cfg_.filter_size;
  }

  static void validate_config(const ModelConfig& cfg) {
    if (cfg.p < 1) throw config_error("model requires a positive text dimension p");
    if (cfg.uses_fc_branch()) {
      if (cfg.d < 1) throw config_error("fc branch requires a positive visual dimension d");
      if (cfg.k < 1) throw config_error("fc branch requires a positive embedding size k");
    }
    if (cfg.uses_conv_branch()) {
      if (cfg.m < 1 || cfg.map_w < 1 || cfg.map_h < 1) {
        throw config_error("conv branch requires positive feature-map dimensions");
      }
      if (cfg.k_reduced < 1) throw config_error("conv branch requires a positive reduced channel count");
      if (cfg.k_reduced >= cfg.m) {
        throw config_error("reduced channel count K'=" + std::to_string(cfg.k_reduced) +
                           " must be smaller than the input channel count M=" + std::to_string(cfg.m));
      }
      if (cfg.filter_size < 1 || cfg.filter_size % 2 == 0) {
        throw config_error("predicted filter size must be odd, got " + std::to_string(cfg.filter_size));
      }
    }
  }

  int add_glorot(Rng& rng, std::string name, Shape shape) {
    // fan_in/fan_out: affine [m,n] -> (n, m); conv [K,M,s,s] -> (M s s, K s s).
    std::size_t fan_in, fan_out;
    if (shape.size() == 2) {
      fan_in = shape[1];
      fan_out = shape[0];
    } else {
      fan_in = shape[1] * shape[2] * shape[3];
      fan_out = shape[0] * shape[2] * shape[3];
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(shape);
    for (double& x : t.values()) x = rng.uniform(-bound, bound);
    names_.push_back(std::move(name));
    params_.push_back(std::move(t));
    return static_cast<int>(params_.size() - 1);
  }

  int add_zeros(std::string name, Shape shape) {
    names_.push_back(std::move(name));
    params_.push_back(Tensor(shape));
    return static_cast<int>(params_.size() - 1);
  }

  static void require_vector(const char* what, const Tensor& t, std::size_t n) {
    if (t.rank() != 1 || t.size() != n) {
      throw contract_error(std::string(what) + " must be a vector of length " + std::to_string(n) + ", got " +
                           shape_string(t.shape()));
    }
  }

  ModelConfig cfg_;
  Roles roles_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

/// Stacks per-class tf-idf vectors (ordered by class id) into a [C, p] matrix.
inline Tensor text_matrix(const std::vector<TextFeature>& features, std::span<const std::uint32_t> class_ids) {
  if (class_ids.empty()) throw contract_error("text_matrix requires at least one class");
  const std::size_t p = features.at(0).weights.size();
  Tensor out({class_ids.size(), p});
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    const TextFeature& f = features.at(class_ids[i]);
    if (f.class_id != class_ids[i]) {
      throw contract_error("text features are not indexed by class id");
    }
    if (f.weights.size() != p) throw contract_error("text features have inconsistent lengths");
    for (std::size_t j = 0; j < p; ++j) out(i, j) = f.weights[j];
  }
  return out;
}

/// Per-image [M,w,h] tensors for the given store rows.
inline std::vector<Tensor> map_tensors(const FeatureStore& store, std::span<const std::uint32_t> rows) {
  std::vector<Tensor> maps;
  maps.reserve(rows.size());
  for (std::uint32_t r : rows) maps.push_back(store.map_tensor(r));
  return maps;
}

/// Assembles score_batch inputs for the given store rows and class set.
inline Model::BatchInputs batch_inputs(const Model& model, const FeatureStore& store,
                                       std::span<const std::uint32_t> rows,
                                       const std::vector<TextFeature>& texts,
                                       std::span<const std::uint32_t> class_ids) {
  Model::BatchInputs in;
  in.texts = text_matrix(texts, class_ids);
  if (model.config().uses_fc_branch()) in.images = feature_matrix(store, rows);
  if (model.config().uses_conv_branch()) in.maps = map_tensors(store, rows);
  return in;
}

// ---- checkpoint io ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const ModelConfig& cfg = model.config();
  if (cfg.activation != Activation::relu) {
    throw config_error("checkpoints store ReLU models only; identity activation is a test configuration");
  }
  std::string buf;
  buf.append("ZSMP", 4);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(cfg.kind));
  for (std::uint32_t v : {cfg.p, cfg.d, cfg.m, cfg.map_w, cfg.map_h, cfg.k, cfg.k_reduced, cfg.filter_size}) {
    detail::put_u32(buf, v);
  }
  detail::put_u32(buf, cfg.pool == PoolMode::average ? 0u : 1u);
  for (const Tensor& t : model.parameters()) {
    detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(e));
    for (double x : t.values()) detail::put_f64(buf, x);
  }
  detail::write_file(path, buf);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path), path.string());
  r.expect_magic("ZSMP");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw io_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t kind = r.u32();
  if (kind > 2) throw io_error(path.string() + ": unknown model kind " + std::to_string(kind));
  ModelConfig cfg;
  cfg.kind = static_cast<ModelKind>(kind);
  cfg.p = r.u32();
  cfg.d = r.u32();
  cfg.m = r.u32();
  cfg.map_w = r.u32();
  cfg.map_h = r.u32();
  cfg.k = r.u32();
  cfg.k_reduced = r.u32();
  cfg.filter_size = r.u32();
  const std::uint32_t pool = r.u32();
  if (pool > 1) throw io_error(path.string() + ": unknown pooling mode " + std::to_string(pool));
  cfg.pool = pool == 0 ? PoolMode::average : PoolMode::max;

  Model model(cfg, 0);
  for (Tensor& t : model.parameters()) {
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = r.u32();
    if (shape != t.shape()) {
      throw io_error(path.string() + ": checkpoint tensor shape " + shape_string(shape) +
                     " does not match model layout " + shape_string(t.shape()));
    }
    for (double& x : t.values()) x = r.f64();
  }
  if (!r.exhausted()) throw io_error(path.string() + ": trailing data after parameters");
  return model;
}

}  // namespace zeroshot
