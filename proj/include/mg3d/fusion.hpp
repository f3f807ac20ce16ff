#pragma once

// Cross-modal attention. The proposed variant keeps the dominant modality as
// keys and values: every guide row produces its own attention distribution
// over dominant positions, the distributions are averaged over valid guide
// rows, and each dominant value row is weighted by its averaged attention.
// The classical variant is ordinary cross attention with the guide supplying
// keys and values.

#include <cmath>
#include <string>
#include <vector>

#include "mg3d/nn.hpp"
#include "mg3d/numerics.hpp"
#include "mg3d/text.hpp"

namespace mg3d {

enum class AttentionVariant { proposed, classical };

inline AttentionVariant parse_attention_variant(const std::string& s) {
  if (s == "proposed") return AttentionVariant::proposed;
  if (s == "classical") return AttentionVariant::classical;
  throw ConfigError("unknown attention variant '" + s + "' (expected proposed or classical)");
}

inline std::string to_string(AttentionVariant v) {
  return v == AttentionVariant::proposed ? "proposed" : "classical";
}

struct CrossAttentionConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  AttentionVariant variant = AttentionVariant::proposed;
};

// Projections: `query` acts on the query role (the guide in the proposed
// variant, the dominant sequence in the classical one); `key`/`value` act on
// the attended role.
class CrossModalAttention {
 public:
  CrossModalAttention() = default;
  CrossModalAttention(const CrossAttentionConfig& cfg, Rng& rng, double stddev)
      : variant_(cfg.variant), mha(cfg.width, cfg.heads, rng, stddev) {}

  AttentionVariant variant() const { return variant_; }

  void collect(ParamList& dst, const std::string& prefix) const { mha.collect(dst, prefix); }

 private:
  AttentionVariant variant_ = AttentionVariant::proposed;

 public:
  MultiHeadAttention mha;
};

namespace detail {

inline std::vector<std::size_t> valid_index(const std::vector<bool>& valid, std::size_t rows) {
  std::vector<std::size_t> idx;
  if (valid.empty()) {
    for (std::size_t i = 0; i < rows; ++i) idx.push_back(i);
    return idx;
  }
  if (valid.size() != rows) throw DimensionError("validity mask length does not match row count");
  for (std::size_t i = 0; i < rows; ++i)
    if (valid[i]) idx.push_back(i);
  return idx;
}

}  // namespace detail

// One output row per dominant position. `averaged_maps`, when given,
// receives one 1 x D_dom map per head (the guide-averaged distribution).
inline Tensor proposed_cross_attention(const Tensor& dominant, const Tensor& guide, const std::vector<bool>& guide_valid,
                                       const CrossModalAttention& attn,
                                       std::vector<Tensor>* averaged_maps = nullptr) {
  if (attn.variant() != AttentionVariant::proposed) throw ConfigError("proposed_cross_attention on a classical module");
  const MultiHeadAttention& m = attn.mha;
  if (dominant.rank() != 2 || guide.rank() != 2 || dominant.cols() != m.width() || guide.cols() != m.width()) {
    throw DimensionError("cross attention: width mismatch " + shape_str(dominant.shape()) + " / " +
                         shape_str(guide.shape()));
  }
  const auto idx = detail::valid_index(guide_valid, guide.rows());
  if (idx.empty()) throw EmptyInputError("cross attention: zero valid guide rows");
  const Tensor g = idx.size() == guide.rows() ? guide : take_rows(guide, idx);

  const Tensor q = m.query.forward(g);
  const Tensor k = m.key.forward(dominant);
  const Tensor v = m.value.forward(dominant);
  const std::size_t heads = m.heads();
  const std::size_t dh = m.width() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    const Tensor maps = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));  // D_g x D_dom
    const Tensor avg = mean_rows(maps);                                      // 1 x D_dom
    if (averaged_maps) averaged_maps->push_back(avg);
    head_out.push_back(mul_rows(vh, avg));
  }
  return m.out.forward(heads == 1 ? head_out.front() : concat_cols(head_out));
}

// Standard cross attention: queries from `query_side`, keys and values from
// the valid rows of `kv_side`. Output length equals the query length.
inline Tensor classical_cross_attention(const Tensor& query_side, const Tensor& kv_side,
                                        const std::vector<bool>& kv_valid, const CrossModalAttention& attn,
                                        std::vector<Tensor>* maps = nullptr) {
  if (attn.variant() != AttentionVariant::classical) throw ConfigError("classical_cross_attention on a proposed module");
  if (!kv_side.defined() || kv_side.rank() != 2) throw EmptyInputError("cross attention: empty key/value side");
  if (detail::valid_index(kv_valid, kv_side.rows()).empty()) throw EmptyInputError("cross attention: no valid keys");
  return attn.mha.attend(query_side, kv_side, kv_valid, maps);
}

// Dispatches on the module's variant. `dominant` is the sequence whose length
// the output keeps; `guide` is the complementary modality.
inline Tensor cross_modal_attention(const Tensor& dominant, const Tensor& guide, const std::vector<bool>& guide_valid,
                                    const CrossModalAttention& attn, std::vector<Tensor>* maps = nullptr) {
  if (attn.variant() == AttentionVariant::proposed) {
    return proposed_cross_attention(dominant, guide, guide_valid, attn, maps);
  }
  return classical_cross_attention(dominant, guide, guide_valid, attn, maps);
}

// Sentence-specific global visual features: each valid sentence row queries
// the visual token sequence. Invalid sentence rows stay invalid.
inline SentenceFeatures sentence_specific_global(const SentenceFeatures& sentences, const Tensor& visual_tokens,
                                                 const MultiHeadAttention& attn) {
  if (!visual_tokens.defined() || visual_tokens.rank() != 2) {
    throw EmptyInputError("sentence_specific_global: empty visual sequence");
  }
  const Tensor rows = attn.attend(sentences.valid_rows(), visual_tokens);
  return SentenceFeatures::padded(rows, sentences.valid.size());
}

// Pre-norm block: self attention, cross-modal attention against the guide,
// feed-forward; each sub-layer residual.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(const CrossAttentionConfig& cfg, Rng& rng, double stddev)
      : ln_self(cfg.width),
        self_attn(cfg.width, cfg.heads, rng, stddev),
        ln_cross(cfg.width),
        cross(cfg, rng, stddev),
        ln_ffn(cfg.width),
        ffn(cfg.width, 4 * cfg.width, rng, stddev) {}

  Tensor forward(const Tensor& dominant, const Tensor& guide, const std::vector<bool>& guide_valid = {},
                 std::vector<Tensor>* maps = nullptr) const {
    if (dominant.cols() != guide.cols()) {
      throw DimensionError("fusion block: width mismatch " + shape_str(dominant.shape()) + " / " +
                           shape_str(guide.shape()));
    }
    const Tensor n1 = ln_self.forward(dominant);
    Tensor x = add(dominant, self_attn.attend(n1, n1));
    x = add(x, cross_modal_attention(ln_cross.forward(x), guide, guide_valid, cross, maps));
    return add(x, ffn.forward(ln_ffn.forward(x)));
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    ln_self.collect(dst, prefix + ".ln_self");
    self_attn.collect(dst, prefix + ".self_attn");
    ln_cross.collect(dst, prefix + ".ln_cross");
    cross.collect(dst, prefix + ".cross");
    ln_ffn.collect(dst, prefix + ".ln_ffn");
    ffn.collect(dst, prefix + ".ffn");
  }

  LayerNorm ln_self;
  MultiHeadAttention self_attn;
  LayerNorm ln_cross;
  CrossModalAttention cross;
  LayerNorm ln_ffn;
  FeedForward ffn;
};

inline Tensor fusion_block_forward(const Tensor& dominant, const Tensor& guide, const FusionBlock& block,
                                   const std::vector<bool>& guide_valid = {}) {
  return block.forward(dominant, guide, guide_valid);
}

class FusionStack {
 public:
  FusionStack() = default;
  FusionStack(const CrossAttentionConfig& cfg, std::size_t layers, Rng& rng, double stddev) : final_norm(cfg.width) {
    for (std::size_t l = 0; l < layers; ++l) blocks.emplace_back(cfg, rng, stddev);
  }

  // `maps` collects the cross-attention maps of the last block.
  Tensor forward(const Tensor& dominant, const Tensor& guide, const std::vector<bool>& guide_valid = {},
                 std::vector<Tensor>* maps = nullptr) const {
    Tensor x = dominant;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      x = blocks[l].forward(x, guide, guide_valid, l + 1 == blocks.size() ? maps : nullptr);
    }
    return final_norm.forward(x);
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(dst, prefix + ".blocks." + std::to_string(l));
    final_norm.collect(dst, prefix + ".final_norm");
  }

  std::vector<FusionBlock> blocks;
  LayerNorm final_norm;
};

}  // namespace mg3d
