#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "zeroshot/errors.hpp"
#include "zeroshot/tensor.hpp"

namespace zeroshot {

struct Article {
  std::uint32_t class_id = 0;
  std::string text;
};

using Corpus = std::vector<Article>;

/// Lowercases, splits on any non-alphabetic byte, drops tokens shorter than
/// two characters. No stemming and no stop-word list; idf already
/// downweights ubiquitous words.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (current.size() >= 2) tokens.push_back(current);
    current.clear();
  };
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalpha(u)) {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

/// Term list (lexicographically sorted), per-term document frequency, and
/// the corpus size the frequencies were counted against.
struct Vocabulary {
  std::vector<std::string> terms;
  std::vector<std::uint32_t> doc_frequency;
  std::size_t corpus_size = 0;

  std::size_t size() const { return terms.size(); }

  std::optional<std::size_t> find(std::string_view term) const {
    auto it = index_.find(std::string(term));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  void rebuild_index() {
    index_.clear();
    index_.reserve(terms.size());
    for (std::size_t i = 0; i < terms.size(); ++i) index_.emplace(terms[i], i);
  }

  double idf(std::size_t term_index) const {
    return std::log(static_cast<double>(corpus_size) / static_cast<double>(doc_frequency[term_index]));
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

/// Builds the term list and document frequencies from a corpus of C >= 2
/// articles. Output is independent of article order.
inline Vocabulary build_vocabulary(const Corpus& corpus) {
  if (corpus.size() < 2) {
    throw config_error("vocabulary needs at least 2 articles, got " + std::to_string(corpus.size()) +
                       " (idf is degenerate otherwise)");
  }
  std::map<std::string, std::uint32_t> df;
  for (const Article& article : corpus) {
    std::vector<std::string> tokens = tokenize(article.text);
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    for (const std::string& t : tokens) ++df[t];
  }
  Vocabulary vocab;
  vocab.corpus_size = corpus.size();
  vocab.terms.reserve(df.size());
  vocab.doc_frequency.reserve(df.size());
  for (const auto& [term, count] : df) {
    vocab.terms.push_back(term);
    vocab.doc_frequency.push_back(count);
  }
  vocab.rebuild_index();
  return vocab;
}

/// One class's tf-idf vector over a fixed vocabulary.
struct TextFeature {
  std::uint32_t class_id = 0;
  Tensor weights;  // [vocabulary size]
};

/// tf-idf with sublinear term frequency: TF = 1 + ln(count) for count > 0,
/// idf = ln(C / df). A term present in every article gets weight 0; terms
/// outside the vocabulary are ignored.
inline TextFeature compute_tfidf(const Article& article, const Vocabulary& vocabulary) {
  std::unordered_map<std::size_t, std::uint32_t> counts;
  for (const std::string& token : tokenize(article.text)) {
    if (auto idx = vocabulary.find(token)) ++counts[*idx];
  }
  TextFeature feature;
  feature.class_id = article.class_id;
  feature.weights = vocabulary.size() ? Tensor({vocabulary.size()}) : Tensor();
  for (const auto& [idx, count] : counts) {
    const double tf = 1.0 + std::log(static_cast<double>(count));
    feature.weights[idx] = tf * vocabulary.idf(idx);
  }
  return feature;
}

/// Zeroes one entry, then rescales the whole vector so its L2 norm matches
/// the input's. Deleting a zero entry is a no-op; deleting all the mass
/// returns the zeroed vector unscaled.
inline TextFeature delete_term_rescaled(const TextFeature& feature, std::size_t term_index) {
  if (term_index >= feature.weights.size()) {
    throw contract_error("delete_term_rescaled: index " + std::to_string(term_index) +
                         " out of range for vector of length " + std::to_string(feature.weights.size()));
  }
  TextFeature out = feature;
  double before_sq = 0.0;
  for (double v : out.weights.values()) before_sq += v * v;
  out.weights[term_index] = 0.0;
  double after_sq = 0.0;
  for (double v : out.weights.values()) after_sq += v * v;
  if (after_sq == 0.0) return out;
  const double ratio = std::sqrt(before_sq / after_sq);
  for (double& v : out.weights.values()) v *= ratio;
  return out;
}

// ---- persistence ----

/// Reads a corpus directory holding one `<class_id>.txt` file per class.
/// Files whose stem is not a nonnegative integer are rejected.
inline Corpus load_corpus_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw io_error("corpus directory does not exist: " + dir.string());
  }
  Corpus corpus;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    const std::string stem = entry.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return std::isdigit((unsigned char)c); })) {
      throw io_error("corpus file name is not a nonnegative class id: " + entry.path().string());
    }
    std::ifstream in(entry.path(), std::ios::binary);
    if (!in) throw io_error("cannot open corpus file " + entry.path().string());
    Article article;
    article.class_id = static_cast<std::uint32_t>(std::stoul(stem));
    article.text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    corpus.push_back(std::move(article));
  }
  if (corpus.empty()) throw io_error("no <class_id>.txt articles found in " + dir.string());
  std::sort(corpus.begin(), corpus.end(),
            [](const Article& a, const Article& b) { return a.class_id < b.class_id; });
  return corpus;
}

/// One `term<TAB>df` line per term, in index order.
inline void save_vocabulary(const Vocabulary& vocabulary, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write vocabulary file " + path.string());
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    out << vocabulary.terms[i] << '\t' << vocabulary.doc_frequency[i] << '\n';
  }
}

/// Reads the `term<TAB>df` format back. The corpus size is not stored in
/// the file, so the caller must supply it before computing idf.
inline Vocabulary load_vocabulary(const std::filesystem::path& path, std::size_t corpus_size = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open vocabulary file " + path.string());
  Vocabulary vocab;
  vocab.corpus_size = corpus_size;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) throw io_error("malformed vocabulary line: " + line);
    vocab.terms.push_back(line.substr(0, tab));
    vocab.doc_frequency.push_back(static_cast<std::uint32_t>(std::stoul(line.substr(tab + 1))));
  }
  vocab.rebuild_index();
  return vocab;
}

/// Featurizes every article against a shared vocabulary, ordered by class id.
inline std::vector<TextFeature> featurize_corpus(const Corpus& corpus, const Vocabulary& vocabulary) {
  std::vector<TextFeature> features;
  features.reserve(corpus.size());
  for (const Article& article : corpus) features.push_back(compute_tfidf(article, vocabulary));
  return features;
}

}  // namespace zeroshot
