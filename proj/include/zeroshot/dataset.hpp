#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "zeroshot/errors.hpp"
#include "zeroshot/rng.hpp"
#include "zeroshot/tensor.hpp"
#include "zeroshot/text_features.hpp"

namespace zeroshot {

/// Per-image visual features: a flat vector of length d and, when m > 0, a
/// feature-map stack of m channels of map_w x map_h cells. Values are kept
/// as 32-bit floats to match the on-disk ZSFB encoding exactly.
struct FeatureStore {
  struct Record {
    std::uint32_t image_id = 0;
    std::uint32_t label = 0;
  };

  std::uint32_t c_total = 0;
  std::uint32_t d = 0;
  std::uint32_t m = 0;
  std::uint32_t map_w = 0;
  std::uint32_t map_h = 0;
  std::vector<Record> records;
  std::vector<float> features;  // N * d
  std::vector<float> maps;      // N * m * map_w * map_h

  std::size_t size() const { return records.size(); }
  bool has_maps() const { return m > 0; }
  std::size_t map_block_size() const { return static_cast<std::size_t>(m) * map_w * map_h; }

  std::span<const float> feature_row(std::size_t i) const {
    return std::span<const float>(features).subspan(i * d, d);
  }
  std::span<const float> map_block(std::size_t i) const {
    return std::span<const float>(maps).subspan(i * map_block_size(), map_block_size());
  }

  Tensor feature_tensor(std::size_t i) const {
    Tensor t({d});
    auto row = feature_row(i);
    for (std::size_t j = 0; j < d; ++j) t[j] = row[j];
    return t;
  }

  Tensor map_tensor(std::size_t i) const {
    if (!has_maps()) throw contract_error("feature store holds no feature maps");
    Tensor t({m, map_w, map_h});
    auto block = map_block(i);
    for (std::size_t j = 0; j < block.size(); ++j) t[j] = block[j];
    return t;
  }
};

/// [B, d] matrix of flat features for the given store rows.
inline Tensor feature_matrix(const FeatureStore& store, std::span<const std::uint32_t> rows) {
  if (rows.empty()) throw contract_error("feature_matrix requires a nonempty row set");
  Tensor out({rows.size(), store.d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = store.feature_row(rows[i]);
    for (std::size_t j = 0; j < store.d; ++j) out(i, j) = src[j];
  }
  return out;
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

inline void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

/// Byte-level reader that reports the offset of any truncation.
class ByteReader {
 public:
  ByteReader(std::string data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}

  std::size_t offset() const { return pos_; }
  bool exhausted() const { return pos_ >= data_.size(); }

  void expect_magic(const char (&magic)[5]) {
    if (data_.size() < 4 || std::memcmp(data_.data(), magic, 4) != 0) {
      throw bad_magic_error(name_ + ": expected magic \"" + magic + "\"");
    }
    pos_ = 4;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw truncated_file_error(name_ + ": truncated at byte offset " + std::to_string(pos_) + " (need " +
                                 std::to_string(n) + " more bytes, file has " + std::to_string(data_.size()) + ")");
    }
  }

  std::string data_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw io_error("short write to " + path.string());
}

}  // namespace detail

inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline void save_features(const FeatureStore& store, const std::filesystem::path& path) {
  std::string buf;
  buf.append("ZSFB", 4);
  detail::put_u32(buf, kFeatureFileVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(store.size()));
  detail::put_u32(buf, store.c_total);
  detail::put_u32(buf, store.d);
  detail::put_u32(buf, store.m);
  detail::put_u32(buf, store.map_w);
  detail::put_u32(buf, store.map_h);
  const std::size_t block = store.map_block_size();
  for (std::size_t i = 0; i < store.size(); ++i) {
    detail::put_u32(buf, store.records[i].image_id);
    detail::put_u32(buf, store.records[i].label);
    for (std::size_t j = 0; j < store.d; ++j) detail::put_f32(buf, store.features[i * store.d + j]);
    for (std::size_t j = 0; j < block; ++j) detail::put_f32(buf, store.maps[i * block + j]);
  }
  detail::write_file(path, buf);
}

inline FeatureStore load_features(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path), path.string());
  r.expect_magic("ZSFB");
  const std::uint32_t version = r.u32();
  if (version != kFeatureFileVersion) {
    throw io_error(path.string() + ": unsupported ZSFB version " + std::to_string(version));
  }
  FeatureStore store;
  const std::uint32_t n = r.u32();
  store.c_total = r.u32();
  store.d = r.u32();
  store.m = r.u32();
  store.map_w = r.u32();
  store.map_h = r.u32();
  if (store.m > 0 && (store.map_w == 0 || store.map_h == 0)) {
    throw io_error(path.string() + ": feature maps declared with zero spatial extent");
  }
  const std::size_t block = store.map_block_size();
  store.records.reserve(n);
  store.features.reserve(static_cast<std::size_t>(n) * store.d);
  store.maps.reserve(static_cast<std::size_t>(n) * block);
  for (std::uint32_t i = 0; i < n; ++i) {
    FeatureStore::Record rec;
    rec.image_id = r.u32();
    rec.label = r.u32();
    if (rec.label >= store.c_total) {
      throw bad_label_error(path.string() + ": record " + std::to_string(i) + " labels missing class " +
                            std::to_string(rec.label) + " (declared classes: " + std::to_string(store.c_total) + ")");
    }
    store.records.push_back(rec);
    for (std::uint32_t j = 0; j < store.d; ++j) store.features.push_back(r.f32());
    for (std::size_t j = 0; j < block; ++j) store.maps.push_back(r.f32());
  }
  if (!r.exhausted()) {
    throw io_error(path.string() + ": " + std::to_string(r.offset()) + " bytes of payload followed by trailing data");
  }
  return store;
}

/// `image_id,class_id` lines; a header row is tolerated.
inline std::vector<std::pair<std::uint32_t, std::uint32_t>> load_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open labels file " + path.string());
  std::vector<std::pair<std::uint32_t, std::uint32_t>> labels;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) throw io_error("malformed labels line: " + line);
    try {
      labels.emplace_back(static_cast<std::uint32_t>(std::stoul(line.substr(0, comma))),
                          static_cast<std::uint32_t>(std::stoul(line.substr(comma + 1))));
    } catch (const std::exception&) {
      if (first) {
        first = false;
        continue;  // header row
      }
      throw io_error("malformed labels line: " + line);
    }
    first = false;
  }
  return labels;
}

/// Overrides store labels from an `image_id,class_id` table.
inline void apply_labels(FeatureStore& store, std::span<const std::pair<std::uint32_t, std::uint32_t>> labels) {
  std::map<std::uint32_t, std::uint32_t> by_id(labels.begin(), labels.end());
  for (FeatureStore::Record& rec : store.records) {
    auto it = by_id.find(rec.image_id);
    if (it == by_id.end()) {
      throw bad_label_error("labels file has no entry for image " + std::to_string(rec.image_id));
    }
    if (it->second >= store.c_total) {
      throw bad_label_error("labels file references missing class " + std::to_string(it->second));
    }
    rec.label = it->second;
  }
}

// ---- splits ----

/// Seen/unseen class partition plus a per-image train/test assignment.
struct SplitSpec {
  enum Assignment : std::uint8_t { kTrain = 0, kSeenTest = 1, kUnseenTest = 2 };

  std::uint64_t seed = 0;
  std::vector<std::uint32_t> unseen_classes;  // sorted
  std::vector<std::uint8_t> assignment;       // aligned with store records

  bool is_unseen_class(std::uint32_t c) const {
    return std::binary_search(unseen_classes.begin(), unseen_classes.end(), c);
  }

  std::vector<std::uint32_t> indices_of(Assignment a) const {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == a) out.push_back(static_cast<std::uint32_t>(i));
    return out;
  }

  std::vector<std::uint32_t> train_indices() const { return indices_of(kTrain); }
  std::vector<std::uint32_t> seen_test_indices() const { return indices_of(kSeenTest); }
  std::vector<std::uint32_t> unseen_test_indices() const { return indices_of(kUnseenTest); }

  /// Seen test plus unseen test, in store order.
  std::vector<std::uint32_t> test_pool_indices() const {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != kTrain) out.push_back(static_cast<std::uint32_t>(i));
    return out;
  }
};

/// Draws n_unseen classes uniformly, then assigns train_fraction of each
/// seen class's images to training and the rest to testing. Unseen-class
/// images are all test. Deterministic per seed.
inline SplitSpec make_split(const FeatureStore& store, std::uint32_t n_unseen, double train_fraction,
                            std::uint64_t seed) {
  if (n_unseen >= store.c_total) {
    throw config_error("n_unseen = " + std::to_string(n_unseen) + " must be smaller than the class count " +
                       std::to_string(store.c_total));
  }
  if (!(train_fraction > 0.0) || !(train_fraction < 1.0)) {
    throw config_error("train fraction must lie strictly between 0 and 1 (got " +
                       std::to_string(train_fraction) + "); every seen class needs both train and test images");
  }
  Rng rng(seed);
  SplitSpec split;
  split.seed = seed;
  std::vector<std::size_t> drawn = rng.sample_without_replacement(store.c_total, n_unseen);
  split.unseen_classes.assign(drawn.begin(), drawn.end());
  std::sort(split.unseen_classes.begin(), split.unseen_classes.end());

  std::vector<std::vector<std::uint32_t>> by_class(store.c_total);
  for (std::size_t i = 0; i < store.size(); ++i) {
    by_class[store.records[i].label].push_back(static_cast<std::uint32_t>(i));
  }
  split.assignment.assign(store.size(), SplitSpec::kTrain);
  for (std::uint32_t c = 0; c < store.c_total; ++c) {
    std::vector<std::uint32_t>& rows = by_class[c];
    if (split.is_unseen_class(c)) {
      for (std::uint32_t row : rows) split.assignment[row] = SplitSpec::kUnseenTest;
      continue;
    }
    if (rows.size() < 2) {
      throw config_error("seen class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                         " images; at least 2 are needed for a train/test split");
    }
    rng.shuffle(rows);
    const auto m = static_cast<std::size_t>(rows.size());
    std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(m)));
    n_train = std::clamp<std::size_t>(n_train, 1, m - 1);
    for (std::size_t i = n_train; i < m; ++i) split.assignment[rows[i]] = SplitSpec::kSeenTest;
  }
  return split;
}

// ---- synthetic benchmark ----

struct SyntheticConfig {
  std::uint32_t classes = 30;
  std::uint32_t per_class = 25;
  std::uint32_t vocab_size = 200;  // p
  std::uint32_t dim = 64;          // d
  std::uint32_t map_channels = 0;  // M; 0 disables feature maps
  std::uint32_t map_w = 0;
  std::uint32_t map_h = 0;
  double noise = 0.3;  // sigma
  std::uint64_t seed = 0;
};

struct SyntheticData {
  FeatureStore store;
  Corpus corpus;
};

namespace detail {

/// Fixed-width base-26 code; lexicographic order matches index order.
inline std::string term_code(std::uint32_t index, std::uint32_t width) {
  std::string code(width, 'a');
  for (std::uint32_t i = width; i-- > 0 && index > 0;) {
    code[i] = static_cast<char>('a' + index % 26);
    index /= 26;
  }
  return code;
}

inline std::uint32_t term_code_width(std::uint32_t vocab_size) {
  std::uint32_t width = 2;
  std::uint64_t capacity = 26ull * 26ull;
  while (capacity < vocab_size) {
    capacity *= 26ull;
    ++width;
  }
  return width;
}

}  // namespace detail

/// Builds a desk-scale zero-shot task with a known linear structure. Every
/// class owns one heavily repeated signal term; articles also share lightly
/// repeated terms drawn from the whole vocabulary, so each coordinate of
/// the text space is exercised by several classes and unseen-class vectors
/// stay inside the trained span. Images are a fixed random linear map of
/// the unit-normalized tf-idf vector plus Gaussian noise; feature-map
/// channel means come from a second fixed map. Articles are literal token
/// repetitions, so the tf-idf pipeline itself produces the class vectors
/// (1 + ln(count) quantizes the achievable term weights).
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes < 2) throw config_error("synthetic generator needs at least 2 classes");
  if (cfg.per_class < 1) throw config_error("synthetic generator needs at least 1 image per class");
  if (cfg.vocab_size < cfg.classes) {
    throw config_error("synthetic vocabulary size " + std::to_string(cfg.vocab_size) +
                       " must be at least the class count " + std::to_string(cfg.classes));
  }
  if (cfg.dim < 1) throw config_error("synthetic feature dimension must be positive");
  if (cfg.map_channels > 0 && (cfg.map_w < 1 || cfg.map_h < 1)) {
    throw config_error("synthetic feature maps need positive spatial extents");
  }

  // Each article is one heavily repeated signal term plus single-occurrence
  // background terms. Backgrounds are drawn half from other classes' signal
  // terms and half from the filler block, so every text coordinate occurs in
  // several training articles with a weight well below the signal weight.
  constexpr std::uint32_t kSignalRepeats = 24;
  constexpr std::uint32_t kBackgroundDraws = 12;

  Rng rng(cfg.seed);
  const std::uint32_t width = detail::term_code_width(cfg.vocab_size);

  // Term usage per class: counts[class][term] -> repeats.
  std::vector<std::map<std::uint32_t, std::uint32_t>> counts(cfg.classes);
  std::vector<bool> used(cfg.vocab_size, false);
  for (std::uint32_t c = 0; c < cfg.classes; ++c) {
    counts[c][c] = kSignalRepeats;
    used[c] = true;
    for (std::uint32_t j = 0; j < kBackgroundDraws; ++j) {
      std::uint32_t term;
      const bool filler_available = cfg.vocab_size > cfg.classes;
      const bool from_signal_block = !filler_available || (j % 2 == 0);
      if (from_signal_block) {
        term = static_cast<std::uint32_t>(rng.integer(cfg.classes - 1));
        if (term >= c) ++term;  // skip own signal term
      } else {
        term = cfg.classes + static_cast<std::uint32_t>(rng.integer(cfg.vocab_size - cfg.classes));
      }
      counts[c].emplace(term, 1);
      used[term] = true;
    }
  }
  // Touch every vocabulary slot so the realized vocabulary has exactly
  // vocab_size terms. Each missed filler term is spread over three classes
  // to keep its document frequency above 1 (a df-1 background term would
  // rival a signal term's idf).
  for (std::uint32_t term = cfg.classes; term < cfg.vocab_size; ++term) {
    if (used[term]) continue;
    for (std::uint32_t hop : {0u, 7u, 13u}) {
      counts[(term + hop) % cfg.classes].emplace(term, 1);
    }
  }

  SyntheticData data;
  data.corpus.reserve(cfg.classes);
  for (std::uint32_t c = 0; c < cfg.classes; ++c) {
    std::string text;
    for (const auto& [term, repeats] : counts[c]) {
      const std::string code = detail::term_code(term, width);
      for (std::uint32_t rcount = 0; rcount < repeats; ++rcount) {
        text += code;
        text += ' ';
      }
    }
    data.corpus.push_back(Article{c, std::move(text)});
  }

  const Vocabulary vocab = build_vocabulary(data.corpus);
  if (vocab.size() != cfg.vocab_size) {
    throw config_error("synthetic corpus realized " + std::to_string(vocab.size()) +
                       " terms instead of the requested " + std::to_string(cfg.vocab_size));
  }
  std::vector<Tensor> directions;  // unit tf-idf vector per class
  directions.reserve(cfg.classes);
  for (std::uint32_t c = 0; c < cfg.classes; ++c) {
    Tensor t = compute_tfidf(data.corpus[c], vocab).weights;
    double norm_sq = 0.0;
    for (double v : t.values()) norm_sq += v * v;
    const double inv = norm_sq > 0.0 ? 1.0 / std::sqrt(norm_sq) : 0.0;
    for (double& v : t.values()) v *= inv;
    directions.push_back(std::move(t));
  }

  // Fixed random linear maps from text space to feature / map-channel space.
  Tensor flat_map({cfg.dim, cfg.vocab_size});
  for (double& v : flat_map.values()) v = rng.normal();
  Tensor channel_map;
  if (cfg.map_channels > 0) {
    channel_map = Tensor({cfg.map_channels, cfg.vocab_size});
    for (double& v : channel_map.values()) v = rng.normal();
  }

  FeatureStore& store = data.store;
  store.c_total = cfg.classes;
  store.d = cfg.dim;
  store.m = cfg.map_channels;
  store.map_w = cfg.map_channels > 0 ? cfg.map_w : 0;
  store.map_h = cfg.map_channels > 0 ? cfg.map_h : 0;
  const std::size_t block = store.map_block_size();
  std::uint32_t next_id = 0;
  for (std::uint32_t c = 0; c < cfg.classes; ++c) {
    const Tensor& t = directions[c];
    std::vector<double> proto(cfg.dim, 0.0);
    for (std::uint32_t i = 0; i < cfg.dim; ++i) {
      double acc = 0.0;
      for (std::uint32_t j = 0; j < cfg.vocab_size; ++j) acc += flat_map(i, j) * t[j];
      proto[i] = acc;
    }
    std::vector<double> channel_means(cfg.map_channels, 0.0);
    for (std::uint32_t i = 0; i < cfg.map_channels; ++i) {
      double acc = 0.0;
      for (std::uint32_t j = 0; j < cfg.vocab_size; ++j) acc += channel_map(i, j) * t[j];
      channel_means[i] = acc;
    }
    for (std::uint32_t img = 0; img < cfg.per_class; ++img) {
      store.records.push_back({next_id++, c});
      for (std::uint32_t i = 0; i < cfg.dim; ++i) {
        store.features.push_back(static_cast<float>(proto[i] + cfg.noise * rng.normal()));
      }
      if (block > 0) {
        for (std::uint32_t ch = 0; ch < cfg.map_channels; ++ch)
          for (std::uint32_t cell = 0; cell < cfg.map_w * cfg.map_h; ++cell)
            store.maps.push_back(static_cast<float>(channel_means[ch] + cfg.noise * rng.normal()));
      }
    }
  }
  return data;
}

/// Writes the synthetic corpus as a `<class_id>.txt` directory.
inline void save_corpus_dir(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const Article& article : corpus) {
    std::ofstream out(dir / (std::to_string(article.class_id) + ".txt"), std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write corpus article in " + dir.string());
    out << article.text;
  }
}

}  // namespace zeroshot
