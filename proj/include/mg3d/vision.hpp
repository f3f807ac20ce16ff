#pragma once

// Volume side: preprocessing, patch tokens, the trainable 3D encoder, patch
// masking, the reconstruction head and the MGV1 volume file format.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mg3d/nn.hpp"
#include "mg3d/numerics.hpp"
#include "mg3d/random.hpp"

namespace mg3d {

using Dims3 = std::array<std::size_t, 3>;

inline std::string dims_str(const Dims3& d) {
  return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) + ")";
}

struct Volume {
  Dims3 dims{0, 0, 0};
  Tensor voxels;  // shape {D, H, W}

  static Volume zeros(const Dims3& d) { return {d, Tensor::zeros({d[0], d[1], d[2]})}; }

  static Volume from(const Dims3& d, std::vector<double> values) {
    return {d, Tensor::from({d[0], d[1], d[2]}, std::move(values))};
  }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return voxels.data()[index(z, y, x)]; }
  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
};

// Centered crop; extent per axis is round(ratio * extent).
inline Volume center_crop(const Volume& v, const std::array<double, 3>& ratios) {
  Dims3 out{};
  Dims3 off{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(ratios[a] > 0.0 && ratios[a] <= 1.0)) throw ConfigError("crop ratio must lie in (0, 1]");
    out[a] = static_cast<std::size_t>(std::lround(ratios[a] * static_cast<double>(v.dims[a])));
    if (out[a] == 0) throw DimensionError("center_crop: axis " + std::to_string(a) + " cropped to zero extent");
    off[a] = (v.dims[a] - out[a]) / 2;
  }
  std::vector<double> data;
  data.reserve(out[0] * out[1] * out[2]);
  for (std::size_t z = 0; z < out[0]; ++z)
    for (std::size_t y = 0; y < out[1]; ++y)
      for (std::size_t x = 0; x < out[2]; ++x) data.push_back(v.at(z + off[0], y + off[1], x + off[2]));
  return Volume::from(out, std::move(data));
}

inline Dims3 patch_grid(const Dims3& dims, std::size_t p) {
  if (p == 0) throw ConfigError("patch size must be positive");
  for (std::size_t a = 0; a < 3; ++a) {
    if (dims[a] % p != 0) {
      throw DimensionError("volume " + dims_str(dims) + " not divisible by patch size " + std::to_string(p));
    }
  }
  return {dims[0] / p, dims[1] / p, dims[2] / p};
}

// D_I x p^3 tokens; patches in lexicographic (z, y, x) grid order, voxels
// inside a patch in (z, y, x) order.
inline Tensor patchify(const Volume& v, std::size_t p) {
  const Dims3 g = patch_grid(v.dims, p);
  const std::size_t n = g[0] * g[1] * g[2], len = p * p * p;
  std::vector<double> out(n * len);
  std::size_t t = 0;
  for (std::size_t gz = 0; gz < g[0]; ++gz)
    for (std::size_t gy = 0; gy < g[1]; ++gy)
      for (std::size_t gx = 0; gx < g[2]; ++gx, ++t) {
        std::size_t k = 0;
        for (std::size_t z = 0; z < p; ++z)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x, ++k) out[t * len + k] = v.at(gz * p + z, gy * p + y, gx * p + x);
      }
  return Tensor::from({n, len}, std::move(out));
}

inline Volume unpatchify(const Tensor& tokens, const Dims3& dims, std::size_t p) {
  const Dims3 g = patch_grid(dims, p);
  const std::size_t n = g[0] * g[1] * g[2], len = p * p * p;
  if (tokens.rank() != 2 || tokens.rows() != n || tokens.cols() != len) {
    throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match grid of " +
                         dims_str(dims));
  }
  Volume v = Volume::zeros(dims);
  auto out = v.voxels.mutable_data();
  std::size_t t = 0;
  for (std::size_t gz = 0; gz < g[0]; ++gz)
    for (std::size_t gy = 0; gy < g[1]; ++gy)
      for (std::size_t gx = 0; gx < g[2]; ++gx, ++t) {
        std::size_t k = 0;
        for (std::size_t z = 0; z < p; ++z)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x, ++k)
              out[v.index(gz * p + z, gy * p + y, gx * p + x)] = tokens.data()[t * len + k];
      }
  return v;
}

struct VisionConfig {
  Dims3 dims{16, 16, 16};
  std::size_t patch = 4;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t blocks = 4;
  double init_std = 0.02;

  std::size_t token_count() const {
    const Dims3 g = patch_grid(dims, patch);
    return g[0] * g[1] * g[2];
  }
  std::size_t patch_len() const { return patch * patch * patch; }
};

struct MaskedVisualTokens {
  Tensor features;         // D_I x d, embedded (mask substituted, positions added)
  std::vector<bool> mask;  // true = masked
  Tensor mask_token;       // 1 x d

  std::size_t masked() const {
    std::size_t n = 0;
    for (bool m : mask) n += m ? 1 : 0;
    return n;
  }
};

// Plain pre-norm transformer over patch tokens with learned positions.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
    const std::size_t n = cfg.token_count();
    patch_embed = Linear(cfg.patch_len(), cfg.width, rng, cfg.init_std);
    position_embedding = init_truncated_normal({n, cfg.width}, rng, cfg.init_std, true);
    mask_token = init_truncated_normal({1, cfg.width}, rng, cfg.init_std, true);
    for (std::size_t b = 0; b < cfg.blocks; ++b) blocks.emplace_back(cfg.width, cfg.heads, rng, cfg.init_std);
    final_norm = LayerNorm(cfg.width);
  }

  const VisionConfig& config() const { return cfg_; }

  Tensor embed(const Tensor& patches) const {
    check_patches(patches);
    return add(patch_embed.forward(patches), position_embedding);
  }

  Tensor embed_masked(const Tensor& patches, const std::vector<bool>& mask) const {
    check_patches(patches);
    return add(replace_rows(patch_embed.forward(patches), mask_token, mask), position_embedding);
  }

  // Runs the blocks over already embedded tokens.
  Tensor forward_embedded(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.cols() != cfg_.width) {
      throw DimensionError("vision encoder: token width mismatch " + shape_str(tokens.shape()));
    }
    Tensor x = tokens;
    for (const auto& b : blocks) x = b.forward(x);
    return final_norm.forward(x);
  }

  void collect(ParamList& dst, const std::string& prefix) const {
    patch_embed.collect(dst, prefix + ".patch_embed");
    dst.push_back({prefix + ".position_embedding", position_embedding});
    dst.push_back({prefix + ".mask_token", mask_token});
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].collect(dst, prefix + ".blocks." + std::to_string(b));
    final_norm.collect(dst, prefix + ".final_norm");
  }

  Linear patch_embed;
  Tensor position_embedding;
  Tensor mask_token;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;

 private:
  void check_patches(const Tensor& patches) const {
    if (patches.rank() != 2 || patches.rows() != cfg_.token_count() || patches.cols() != cfg_.patch_len()) {
      throw DimensionError("vision encoder: expected " + std::to_string(cfg_.token_count()) + "x" +
                           std::to_string(cfg_.patch_len()) + " patch tokens, got " + shape_str(patches.shape()));
    }
  }

  VisionConfig cfg_;
};

inline std::vector<bool> sample_patch_mask(std::size_t tokens, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("visual mask ratio must lie in (0, 1)");
  std::vector<bool> mask(tokens, false);
  for (std::size_t i : rng.sample_indices(tokens, masked_count(ratio, tokens))) mask[i] = true;
  return mask;
}

inline MaskedVisualTokens mask_patches(const Tensor& patches, double ratio, Rng& rng, const VisionEncoder& enc) {
  MaskedVisualTokens out;
  out.mask = sample_patch_mask(patches.rows(), ratio, rng);
  out.features = enc.embed_masked(patches, out.mask);
  out.mask_token = enc.mask_token;
  return out;
}

// Contextual visual features F_I from raw patch tokens.
inline Tensor encode_visual(const Tensor& patches, const VisionEncoder& enc) {
  return enc.forward_embedded(enc.embed(patches));
}

// Features of the masked view, I_M.
inline Tensor encode_visual(const MaskedVisualTokens& tokens, const VisionEncoder& enc) {
  return enc.forward_embedded(tokens.features);
}

inline Tensor pool_visual_global(const Tensor& features) {
  if (!features.defined() || features.rank() != 2) throw EmptyInputError("pool_visual_global: empty sequence");
  return mean_rows(features);
}

// Per-token linear head d -> p^3 followed by unpatchify.
class VolumeDecoder {
 public:
  VolumeDecoder() = default;
  VolumeDecoder(std::size_t width, std::size_t patch, Rng& rng, double stddev)
      : patch_(patch), head(width, patch * patch * patch, rng, stddev) {}

  // Reconstructed patch tokens, D_I x p^3; differentiable.
  Tensor decode_tokens(const Tensor& features) const { return head.forward(features); }

  Volume decode_volume(const Tensor& features, const Dims3& dims) const {
    const Dims3 g = patch_grid(dims, patch_);
    if (features.rows() != g[0] * g[1] * g[2]) {
      throw DimensionError("decode_volume: " + std::to_string(features.rows()) + " tokens do not match the grid of " +
                           dims_str(dims));
    }
    return unpatchify(decode_tokens(features), dims, patch_);
  }

  void collect(ParamList& dst, const std::string& prefix) const { head.collect(dst, prefix + ".head"); }

  std::size_t patch() const { return patch_; }

 private:
  std::size_t patch_ = 1;

 public:
  Linear head;
};

// ---------------------------------------------------------------------------
// MGV1: "MGV1", three u32 LE extents D, H, W, then D*H*W f32 LE, row-major.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline void write_mgv1(const std::string& path, const Volume& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write("MGV1", 4);
  for (std::size_t a = 0; a < 3; ++a) detail::put_u32(os, static_cast<std::uint32_t>(v.dims[a]));
  for (double x : v.voxels.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  if (!os) throw FormatError("write failed for " + path);
}

inline Volume read_mgv1(const std::string& path) {
  const auto buf = detail::read_all(path);
  if (buf.size() < 16 || std::memcmp(buf.data(), "MGV1", 4) != 0) throw FormatError(path + ": not an MGV1 volume");
  Dims3 d{detail::get_u32(buf.data() + 4), detail::get_u32(buf.data() + 8), detail::get_u32(buf.data() + 12)};
  if (d[0] == 0 || d[1] == 0 || d[2] == 0) throw FormatError(path + ": zero extent");
  const std::size_t n = d[0] * d[1] * d[2];
  if (buf.size() != 16 + 4 * n) {
    throw FormatError(path + ": expected " + std::to_string(16 + 4 * n) + " bytes, found " +
                      std::to_string(buf.size()));
  }
  std::vector<double> vals(n);
  for (std::size_t i = 0; i < n; ++i)
    vals[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(buf.data() + 16 + 4 * i)));
  return Volume::from(d, std::move(vals));
}

}  // namespace mg3d
