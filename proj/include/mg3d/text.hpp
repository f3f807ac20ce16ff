#pragma once

// Report side: sentence splitting, tokenized reports, the frozen toy text
// encoder, sentence pooling, self-attention pooling and word masking.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mg3d/nn.hpp"
#include "mg3d/numerics.hpp"
#include "mg3d/random.hpp"

namespace mg3d {

using Span = std::pair<std::size_t, std::size_t>;

inline constexpr std::size_t kDefaultMaxSentences = 8;

// Splits at '.', ';', '!' and '?'. Fragments are whitespace-trimmed and empty
// ones dropped.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto flush = [&out](std::string_view frag) {
    const auto b = frag.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return;
    const auto e = frag.find_last_not_of(" \t\r\n");
    out.emplace_back(frag.substr(b, e - b + 1));
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '.' || c == ';' || c == '!' || c == '?') {
      flush(text.substr(start, i - start));
      start = i + 1;
    }
  }
  flush(text.substr(start));
  if (out.empty()) throw EmptyInputError("report contains no sentences");
  return out;
}

struct TokenizedReport {
  std::string patient_id;
  std::vector<int> word_ids;
  std::vector<Span> sentence_spans;

  std::size_t sentence_count() const { return sentence_spans.size(); }
  std::size_t length() const { return word_ids.size(); }

  std::vector<int> sentence(std::size_t s) const {
    const auto [a, b] = sentence_spans.at(s);
    return {word_ids.begin() + static_cast<std::ptrdiff_t>(a), word_ids.begin() + static_cast<std::ptrdiff_t>(b)};
  }

  std::vector<std::vector<int>> sentences() const {
    std::vector<std::vector<int>> out;
    for (std::size_t s = 0; s < sentence_count(); ++s) out.push_back(sentence(s));
    return out;
  }

  // Builds spans from per-sentence token lists. Sentences beyond
  // `max_sentences` are dropped with a warning on std::clog.
  static TokenizedReport from_sentences(std::string id, const std::vector<std::vector<int>>& sentences,
                                        std::size_t max_sentences = kDefaultMaxSentences) {
    TokenizedReport r;
    r.patient_id = std::move(id);
    std::size_t n = sentences.size();
    if (n > max_sentences) {
      std::clog << "warning: report " << r.patient_id << " has " << n << " sentences, keeping the first "
                << max_sentences << '\n';
      n = max_sentences;
    }
    for (std::size_t s = 0; s < n; ++s) {
      if (sentences[s].empty()) throw EmptyInputError("report " + r.patient_id + " has an empty sentence");
      const std::size_t a = r.word_ids.size();
      r.word_ids.insert(r.word_ids.end(), sentences[s].begin(), sentences[s].end());
      r.sentence_spans.emplace_back(a, r.word_ids.size());
    }
    if (r.word_ids.empty()) throw EmptyInputError("report " + r.patient_id + " has no tokens");
    return r;
  }

  void validate(std::size_t vocab_size, std::size_t max_sentences) const {
    if (word_ids.empty() || sentence_spans.empty()) throw EmptyInputError("empty report " + patient_id);
    if (sentence_spans.size() > max_sentences) throw DimensionError("too many sentences in " + patient_id);
    std::size_t expect = 0;
    for (const auto& [a, b] : sentence_spans) {
      if (a != expect || b <= a) throw DimensionError("sentence spans do not partition report " + patient_id);
      expect = b;
    }
    if (expect != word_ids.size()) throw DimensionError("sentence spans do not cover report " + patient_id);
    for (int id : word_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
      }
    }
  }
};

// Per-sentence features padded to a fixed row count. Valid rows form a prefix.
struct SentenceFeatures {
  Tensor features;
  std::vector<bool> valid;

  std::size_t count() const {
    std::size_t n = 0;
    for (bool v : valid) n += v ? 1 : 0;
    return n;
  }

  std::vector<std::size_t> valid_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < valid.size(); ++i)
      if (valid[i]) idx.push_back(i);
    return idx;
  }

  Tensor valid_rows() const {
    const auto idx = valid_indices();
    if (idx.empty()) throw EmptyInputError("no valid sentence rows");
    if (idx.size() == features.rows()) return features;
    return take_rows(features, idx);
  }

  // Pads a dense n x d tensor of valid rows up to `rows` rows with zeros.
  static SentenceFeatures padded(const Tensor& dense, std::size_t rows) {
    const std::size_t n = dense.rows();
    if (n > rows) throw DimensionError("sentence count exceeds padded size");
    SentenceFeatures out;
    out.valid.assign(rows, false);
    for (std::size_t i = 0; i < n; ++i) out.valid[i] = true;
    out.features = n == rows ? dense : concat_rows({dense, Tensor::zeros({rows - n, dense.cols()})});
    return out;
  }
};

struct TextEncoderConfig {
  std::size_t vocab_size = 64;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t max_positions = 256;
  std::uint64_t seed = 7;
};

// Seeded random stand-in for a pretrained report encoder. Every parameter is
// created with requires_grad = false and is never handed to the optimizer.
class FrozenTextEncoder {
 public:
  FrozenTextEncoder() = default;
  explicit FrozenTextEncoder(const TextEncoderConfig& cfg) : cfg_(cfg) {
    Rng rng(mix_seed(cfg.seed, 0x7e47));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.width));
    token_embedding = init_truncated_normal({cfg.vocab_size, cfg.width}, rng, 1.0, false);
    position_embedding = init_truncated_normal({cfg.max_positions, cfg.width}, rng, 0.5, false);
    for (std::size_t l = 0; l < cfg.layers; ++l) blocks.emplace_back(cfg.width, cfg.heads, rng, proj_std, false);
    final_norm = LayerNorm(cfg.width, false);
  }

  const TextEncoderConfig& config() const { return cfg_; }
  std::size_t width() const { return cfg_.width; }
  std::size_t vocab_size() const { return cfg_.vocab_size; }

  // Contextual features, one row per token.
  Tensor encode(const std::vector<int>& ids) const {
    if (ids.empty()) throw EmptyInputError("text encoder: empty token sequence");
    if (ids.size() > cfg_.max_positions) throw DimensionError("text encoder: sequence longer than max_positions");
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab_size));
      }
      rows.push_back(static_cast<std::size_t>(id));
    }
    Tensor x = add(take_rows(token_embedding, rows), slice_rows(position_embedding, 0, ids.size()));
    for (const auto& b : blocks) x = b.forward(x);
    return final_norm.forward(x);
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    dst.push_back({prefix + ".token_embedding", token_embedding});
    dst.push_back({prefix + ".position_embedding", position_embedding});
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(dst, prefix + ".blocks." + std::to_string(l));
    final_norm.collect(dst, prefix + ".final_norm");
  }

  // FNV-1a over the raw bytes of every parameter.
  std::uint64_t fingerprint() const {
    ParamList ps;
    collect(ps, "text");
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : ps) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor.data().data());
      for (std::size_t i = 0; i < p.tensor.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;

 private:
  TextEncoderConfig cfg_;
};

inline Tensor encode_words(const TokenizedReport& report, const FrozenTextEncoder& enc) {
  return enc.encode(report.word_ids);
}

// Row s is the mean of the rows of `word_features` inside span s.
inline SentenceFeatures pool_sentences(const Tensor& word_features, const std::vector<Span>& spans,
                                       std::size_t max_sentences = kDefaultMaxSentences) {
  if (spans.empty()) throw EmptyInputError("pool_sentences: no spans");
  std::size_t expect = 0;
  for (const auto& [a, b] : spans) {
    if (b <= a) throw EmptyInputError("pool_sentences: empty span");
    if (a != expect) throw DimensionError("pool_sentences: spans do not partition the word rows");
    expect = b;
  }
  if (expect != word_features.rows()) throw DimensionError("pool_sentences: spans do not cover the word rows");
  if (spans.size() > max_sentences) throw DimensionError("pool_sentences: more spans than sentence slots");
  return SentenceFeatures::padded(segment_mean_rows(word_features, spans), max_sentences);
}

// Every sentence is encoded as its own sequence, then mean-pooled.
inline SentenceFeatures encode_sentences_isolated(const TokenizedReport& report, const FrozenTextEncoder& enc,
                                                  std::size_t max_sentences = kDefaultMaxSentences) {
  if (report.sentence_count() == 0) throw EmptyInputError("encode_sentences_isolated: report has no sentences");
  std::vector<Tensor> rows;
  for (std::size_t s = 0; s < report.sentence_count(); ++s) rows.push_back(mean_rows(enc.encode(report.sentence(s))));
  return SentenceFeatures::padded(concat_rows(rows), max_sentences);
}

// Learned-query attention pooling: softmax over valid rows of
// q . (W_k x_r) / sqrt(d), applied to W_v x_r + b_v.
class SelfAttentionPool {
 public:
  SelfAttentionPool() = default;
  SelfAttentionPool(std::size_t d, Rng& rng, double stddev)
      : query(init_truncated_normal({1, d}, rng, stddev, true)),
        key(d, d, rng, stddev, false),
        value(d, d, rng, stddev, true) {}

  Tensor forward(const Tensor& rows, const std::vector<bool>& valid = {}, Tensor* weights = nullptr) const {
    Tensor x = rows;
    if (!valid.empty()) {
      if (valid.size() != rows.rows()) throw DimensionError("attention pool: mask length mismatch");
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) keep.push_back(i);
      if (keep.empty()) throw EmptyInputError("attention pool: all rows invalid");
      if (keep.size() != rows.rows()) x = take_rows(rows, keep);
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(query.cols()));
    const Tensor w = softmax_rows(scale(matmul_nt(query, key.forward(x)), inv_sqrt));
    if (weights) *weights = w;
    return matmul(w, value.forward(x));
  }

  Tensor forward(const SentenceFeatures& s, Tensor* weights = nullptr) const {
    return forward(s.features, s.valid, weights);
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    dst.push_back({prefix + ".query", query});
    key.collect(dst, prefix + ".key");
    value.collect(dst, prefix + ".value");
  }

  Tensor query;
  Linear key, value;
};

struct WordMask {
  std::vector<int> masked_ids;
  std::vector<std::size_t> positions;  // ascending
  std::vector<int> originals;          // ids at `positions` before masking
};

// Replaces ceil(ratio * D_T) uniformly chosen positions (at least one) by
// `mask_id`.
inline WordMask mask_words(const TokenizedReport& report, double ratio, Rng& rng, int mask_id) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("word mask ratio must lie in (0, 1)");
  if (report.word_ids.empty()) throw EmptyInputError("mask_words: empty report");
  WordMask m;
  m.masked_ids = report.word_ids;
  m.positions = rng.sample_indices(report.word_ids.size(), masked_count(ratio, report.word_ids.size()));
  for (std::size_t p : m.positions) {
    m.originals.push_back(m.masked_ids[p]);
    m.masked_ids[p] = mask_id;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Report corpus, JSON Lines. First line {"vocab_size": V, "mask_id": m}, then
// one {"id": ..., "sentences": [[...], ...]} object per patient.

struct ReportCorpus {
  std::size_t vocab_size = 0;
  int mask_id = 0;
  std::vector<TokenizedReport> reports;
};

inline void write_report_corpus(const std::string& path, const ReportCorpus& corpus) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << nlohmann::json{{"vocab_size", corpus.vocab_size}, {"mask_id", corpus.mask_id}}.dump() << '\n';
  for (const auto& r : corpus.reports) {
    os << nlohmann::json{{"id", r.patient_id}, {"sentences", r.sentences()}}.dump() << '\n';
  }
  if (!os) throw FormatError("write failed for " + path);
}

inline ReportCorpus read_report_corpus(const std::string& path, std::size_t max_sentences = kDefaultMaxSentences) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open report corpus " + path);
  ReportCorpus corpus;
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path + ": missing header line");
  try {
    const auto header = nlohmann::json::parse(line);
    corpus.vocab_size = header.at("vocab_size").get<std::size_t>();
    corpus.mask_id = header.at("mask_id").get<int>();
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto obj = nlohmann::json::parse(line);
      auto r = TokenizedReport::from_sentences(obj.at("id").get<std::string>(),
                                               obj.at("sentences").get<std::vector<std::vector<int>>>(),
                                               max_sentences);
      r.validate(corpus.vocab_size, max_sentences);
      corpus.reports.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return corpus;
}

}  // namespace mg3d
