#pragma once

// Parameterized building blocks shared by the encoders and fusion stacks.

#include <cmath>
#include <string>
#include <vector>

#include "mg3d/numerics.hpp"
#include "mg3d/random.hpp"

namespace mg3d {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline Tensor init_truncated_normal(Shape shape, Rng& rng, double stddev, bool trainable) {
  Tensor t = Tensor::zeros(std::move(shape), trainable);
  for (double& v : t.mutable_data()) v = rng.truncated_normal(stddev);
  return t;
}

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev, bool with_bias = true, bool trainable = true)
      : weight(init_truncated_normal({in, out}, rng, stddev, trainable)) {
    if (with_bias) bias = Tensor::zeros({out}, trainable);
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add_row(y, bias) : y;
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }

  Tensor weight;
  Tensor bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::size_t d, bool trainable = true)
      : gain(Tensor::full({d}, 1.0, trainable)), bias(Tensor::zeros({d}, trainable)) {}

  Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gain, bias); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }

  Tensor gain;
  Tensor bias;
};

// Scaled dot-product attention with `heads` heads and an output projection.
// Query/key/value projections carry no bias.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t heads, Rng& rng, double stddev, bool trainable = true)
      : heads_(heads),
        query(d, d, rng, stddev, false, trainable),
        key(d, d, rng, stddev, false, trainable),
        value(d, d, rng, stddev, false, trainable),
        out(d, d, rng, stddev, true, trainable) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
  }

  std::size_t heads() const { return heads_; }
  std::size_t width() const { return query.in_features(); }

  // Query rows from `query_src`, keys/values from `kv_src`. When `kv_valid`
  // is non-empty, invalid key rows are removed before the softmax. Per-head
  // attention maps are appended to `maps` when given.
  Tensor attend(const Tensor& query_src, const Tensor& kv_src, const std::vector<bool>& kv_valid = {},
                std::vector<Tensor>* maps = nullptr) const {
    if (query_src.cols() != width() || kv_src.cols() != width()) {
      throw DimensionError("attention: feature width mismatch " + shape_str(query_src.shape()) + " / " +
                           shape_str(kv_src.shape()));
    }
    Tensor kv = kv_src;
    if (!kv_valid.empty()) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < kv_valid.size(); ++i)
        if (kv_valid[i]) keep.push_back(i);
      if (keep.empty()) throw EmptyInputError("attention: no valid key rows");
      if (keep.size() != kv_src.rows()) kv = take_rows(kv_src, keep);
    }
    const Tensor q = query.forward(query_src);
    const Tensor k = key.forward(kv);
    const Tensor v = value.forward(kv);
    const std::size_t dh = width() / heads_;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_out;
    head_out.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      const Tensor qh = heads_ == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
      const Tensor kh = heads_ == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
      const Tensor vh = heads_ == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
      const Tensor a = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
      if (maps) maps->push_back(a);
      head_out.push_back(matmul(a, vh));
    }
    return out.forward(heads_ == 1 ? head_out.front() : concat_cols(head_out));
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    query.collect(dst, prefix + ".query");
    key.collect(dst, prefix + ".key");
    value.collect(dst, prefix + ".value");
    out.collect(dst, prefix + ".out");
  }

 private:
  std::size_t heads_ = 1;

 public:
  Linear query, key, value, out;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t hidden, Rng& rng, double stddev, bool trainable = true)
      : fc1(d, hidden, rng, stddev, true, trainable), fc2(hidden, d, rng, stddev, true, trainable) {}

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void collect(ParamList& dst, const std::string& prefix) const {
    fc1.collect(dst, prefix + ".fc1");
    fc2.collect(dst, prefix + ".fc2");
  }

  Linear fc1, fc2;
};

// Pre-norm encoder block: x + MHSA(LN(x)), then + FFN(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads, Rng& rng, double stddev, bool trainable = true)
      : ln1(d, trainable),
        attn(d, heads, rng, stddev, trainable),
        ln2(d, trainable),
        ffn(d, 4 * d, rng, stddev, trainable) {}

  Tensor forward(const Tensor& x) const {
    const Tensor n1 = ln1.forward(x);
    const Tensor h = add(x, attn.attend(n1, n1));
    return add(h, ffn.forward(ln2.forward(h)));
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    ln1.collect(dst, prefix + ".ln1");
    attn.collect(dst, prefix + ".attn");
    ln2.collect(dst, prefix + ".ln2");
    ffn.collect(dst, prefix + ".ffn");
  }

  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  FeedForward ffn;
};

}  // namespace mg3d
