#pragma once

// MGCK checkpoints: "MGCK", u32 version, u32 parameter count, then per
// parameter: u32 name length, name bytes, u32 rank, rank x u64 extents,
// u64 payload byte length, payload of little-endian f64 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mg3d/model.hpp"
#include "mg3d/vision.hpp"

namespace mg3d {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  const unsigned char* take(std::size_t n) {
    if (buf_.size() - pos_ < n) throw FormatError(path_ + ": corrupt checkpoint (truncated)");
    const unsigned char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint64_t u64() {
    const unsigned char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<unsigned char>& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const ParamList& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write("MGCK", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) detail::put_u64(os, e);
    detail::put_u64(os, p.tensor.size() * 8);
    for (double x : p.tensor.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(x));
  }
  if (!os) throw FormatError("write failed for " + path);
}

inline void save_checkpoint(const Mg3dModel& model, const std::string& path) {
  save_checkpoint(model.parameters(), path);
}

// Overwrites the values of `params` in place. Every stored name must exist
// with an identical shape and every parameter must be present in the file.
inline void load_checkpoint(ParamList params, const std::string& path) {
  const auto buf = detail::read_all(path);
  detail::ByteReader r(buf, path);
  if (buf.size() < 4 || std::memcmp(buf.data(), "MGCK", 4) != 0) {
    throw FormatError(path + ": corrupt checkpoint (bad magic)");
  }
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<bool> seen(params.size(), false);
  std::vector<std::pair<std::size_t, const unsigned char*>> staged;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = r.u32();
    const unsigned char* name_bytes = r.take(name_len);
    const std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::uint64_t bytes = r.u64();
    const unsigned char* payload = r.take(static_cast<std::size_t>(bytes));
    std::size_t idx = params.size();
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) idx = i;
    if (idx == params.size()) throw FormatError(path + ": unknown parameter '" + name + "'");
    Tensor& t = params[idx].tensor;
    if (shape != t.shape()) {
      throw ShapeMismatchError(path + ": parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                               shape_str(t.shape()));
    }
    if (bytes != t.size() * 8) throw FormatError(path + ": corrupt checkpoint (payload length of '" + name + "')");
    if (seen[idx]) throw FormatError(path + ": duplicate parameter '" + name + "'");
    seen[idx] = true;
    staged.emplace_back(idx, payload);
  }
  if (!r.done()) throw FormatError(path + ": corrupt checkpoint (trailing bytes)");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!seen[i]) throw FormatError(path + ": checkpoint lacks parameter '" + params[i].name + "'");
  // Nothing is modified until the whole file has been validated.
  for (const auto& [idx, payload] : staged) {
    auto dst = params[idx].tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint64_t v = 0;
      for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(payload[i * 8 + b]) << (8 * b);
      dst[i] = std::bit_cast<double>(v);
    }
  }
}

inline void load_checkpoint(Mg3dModel& model, const std::string& path) { load_checkpoint(model.parameters(), path); }

}  // namespace mg3d
