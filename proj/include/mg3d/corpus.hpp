#pragma once

// Synthetic volume-report corpora with planted factors.
//
// Each factor k owns a canonical location and a pattern (Gaussian blob for
// even k, striped blob for odd k) plus two report motifs ("present" and
// "absent"). A patient's report has one motif sentence per factor plus filler
// sentences drawn from a small pool of fixed templates, in random order. When
// noise > 0 the volume also carries nuisance: canonical patterns are jittered,
// every absent factor contributes the same pattern at a random non-canonical
// location, and Gaussian noise is added. Patient i draws from its own stream
// mix_seed(seed, i).

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mg3d/random.hpp"
#include "mg3d/text.hpp"
#include "mg3d/vision.hpp"

namespace mg3d {

struct SyntheticSpec {
  std::size_t patients = 8;
  std::size_t vocab_size = 64;
  std::size_t factors = 2;
  std::size_t filler_min = 1;
  std::size_t filler_max = 3;
  std::size_t filler_templates = 8;
  double noise = 0.3;
  Dims3 dims{16, 16, 16};
  std::size_t max_sentences = kDefaultMaxSentences;
  double blob_sigma = 2.0;
  double amplitude = 4.0;
  std::uint64_t seed = 0;

  static constexpr std::size_t kMotifLen = 3;
  static constexpr std::size_t kMaxFactors = 8;

  int mask_id() const { return static_cast<int>(vocab_size) - 1; }
  std::size_t first_filler() const { return 2 * kMotifLen * factors; }

  void validate() const {
    if (factors < 2 || factors > kMaxFactors) throw ConfigError("factor count must lie in [2, 8]");
    if (patients == 0) throw ConfigError("corpus needs at least one patient");
    if (filler_min > filler_max) throw ConfigError("filler range is empty");
    if (factors + filler_max > max_sentences) throw ConfigError("reports would exceed the sentence limit");
    if (filler_templates == 0) throw ConfigError("need at least one filler template");
    if (first_filler() + filler_token_count() > vocab_size - 1) throw ConfigError("vocabulary too small for motifs and fillers");
    if (noise < 0.0) throw ConfigError("noise must be nonnegative");
    for (std::size_t a = 0; a < 3; ++a)
      if (dims[a] < 8) throw ConfigError("volume extents must be at least 8");
  }

  // Template t has 3 + t % 3 tokens; templates occupy consecutive ids after the motifs.
  std::size_t filler_token_count() const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < filler_templates; ++t) n += 3 + t % 3;
    return n;
  }

  std::vector<int> filler_template(std::size_t t) const {
    std::size_t first = first_filler();
    for (std::size_t u = 0; u < t; ++u) first += 3 + u % 3;
    std::vector<int> s(3 + t % 3);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<int>(first + i);
    return s;
  }

  std::vector<int> present_motif(std::size_t k) const { return motif(2 * k); }
  std::vector<int> absent_motif(std::size_t k) const { return motif(2 * k + 1); }

  // Canonical center of factor k, in voxel coordinates.
  std::array<double, 3> center(std::size_t k) const {
    static constexpr double kFrac[kMaxFactors][3] = {
        {0.25, 0.25, 0.25}, {0.75, 0.75, 0.75}, {0.25, 0.75, 0.5},  {0.75, 0.25, 0.5},
        {0.5, 0.25, 0.75},  {0.5, 0.75, 0.25},  {0.25, 0.5, 0.75}, {0.75, 0.5, 0.25}};
    std::array<double, 3> c{};
    for (std::size_t a = 0; a < 3; ++a) c[a] = std::floor(kFrac[k][a] * static_cast<double>(dims[a]));
    return c;
  }

 private:
  std::vector<int> motif(std::size_t slot) const {
    std::vector<int> m;
    for (std::size_t i = 0; i < kMotifLen; ++i) m.push_back(static_cast<int>(slot * kMotifLen + i));
    return m;
  }
};

struct SyntheticCorpus {
  ReportCorpus reports;
  std::vector<Volume> volumes;
  std::vector<std::vector<int>> labels;

  std::size_t size() const { return volumes.size(); }
};

namespace detail {

inline void add_pattern(std::vector<double>& vox, const Dims3& dims, const std::array<double, 3>& c, double sigma,
                        double amplitude, bool striped) {
  for (std::size_t z = 0; z < dims[0]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[2]; ++x) {
        const double dz = static_cast<double>(z) - c[0], dy = static_cast<double>(y) - c[1],
                     dx = static_cast<double>(x) - c[2];
        double v = amplitude * std::exp(-(dz * dz + dy * dy + dx * dx) / (2.0 * sigma * sigma));
        if (striped) v *= 1.0 + 0.5 * std::cos(M_PI * dz);
        vox[(z * dims[1] + y) * dims[2] + x] += v;
      }
}

inline std::string patient_name(std::size_t i) {
  std::string s = std::to_string(i);
  return "p" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

}  // namespace detail

inline SyntheticCorpus generate_corpus(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus out;
  out.reports.vocab_size = spec.vocab_size;
  out.reports.mask_id = spec.mask_id();
  for (std::size_t i = 0; i < spec.patients; ++i) {
    Rng rng(mix_seed(spec.seed, i));
    std::vector<int> factors(spec.factors);
    for (auto& f : factors) f = rng.bernoulli(0.5) ? 1 : 0;

    // Report.
    std::vector<std::vector<int>> sentences;
    for (std::size_t k = 0; k < spec.factors; ++k) sentences.push_back(factors[k] ? spec.present_motif(k) : spec.absent_motif(k));
    const std::size_t fillers = spec.filler_min + rng.below(spec.filler_max - spec.filler_min + 1);
    for (std::size_t f = 0; f < fillers; ++f) sentences.push_back(spec.filler_template(rng.below(spec.filler_templates)));
    rng.shuffle(sentences);
    const std::string id = detail::patient_name(i);
    out.reports.reports.push_back(TokenizedReport::from_sentences(id, sentences, spec.max_sentences));

    // Volume.
    std::vector<double> vox(spec.dims[0] * spec.dims[1] * spec.dims[2], 0.0);
    const bool nuisance = spec.noise > 0.0;
    for (std::size_t k = 0; k < spec.factors; ++k) {
      const bool striped = (k % 2) == 1;
      if (factors[k]) {
        auto c = spec.center(k);
        if (nuisance)
          for (auto& ci : c) ci += static_cast<double>(rng.below(4)) - 2.0;
        detail::add_pattern(vox, spec.dims, c, spec.blob_sigma, spec.amplitude, striped);
      } else if (nuisance) {
        std::array<double, 3> c{};
        for (;;) {
          for (std::size_t a = 0; a < 3; ++a) c[a] = 2.0 + static_cast<double>(rng.below(spec.dims[a] - 4));
          double nearest = 1e9;
          for (std::size_t j = 0; j < spec.factors; ++j) {
            const auto cj = spec.center(j);
            double d2 = 0.0;
            for (std::size_t a = 0; a < 3; ++a) d2 += (c[a] - cj[a]) * (c[a] - cj[a]);
            nearest = std::min(nearest, std::sqrt(d2));
          }
          if (nearest >= 5.0) break;
        }
        detail::add_pattern(vox, spec.dims, c, spec.blob_sigma, spec.amplitude, striped);
      }
    }
    for (auto& v : vox) {
      if (nuisance) v += spec.noise * rng.normal();
      v = static_cast<double>(static_cast<float>(v));  // values stay exactly representable in MGV1
    }
    out.volumes.push_back(Volume::from(spec.dims, std::move(vox)));
    out.labels.push_back(std::move(factors));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/reports.jsonl, <dir>/labels.jsonl, <dir>/volumes/<id>.mgv

inline void write_labels(const std::string& path, const std::vector<std::string>& ids,
                         const std::vector<std::vector<int>>& labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < ids.size(); ++i) os << nlohmann::json{{"id", ids[i]}, {"factors", labels[i]}}.dump() << '\n';
}

inline std::vector<std::pair<std::string, std::vector<int>>> read_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open labels " + path);
  std::vector<std::pair<std::string, std::vector<int>>> out;
  std::string line;
  try {
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      out.emplace_back(j.at("id").get<std::string>(), j.at("factors").get<std::vector<int>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return out;
}

inline void write_corpus(const SyntheticCorpus& c, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "volumes");
  write_report_corpus((fs::path(dir) / "reports.jsonl").string(), c.reports);
  std::vector<std::string> ids;
  for (const auto& r : c.reports.reports) ids.push_back(r.patient_id);
  write_labels((fs::path(dir) / "labels.jsonl").string(), ids, c.labels);
  for (std::size_t i = 0; i < c.size(); ++i) write_mgv1((fs::path(dir) / "volumes" / (ids[i] + ".mgv")).string(), c.volumes[i]);
}

// Labels are optional on read; a missing labels file leaves them empty.
inline SyntheticCorpus read_corpus(const std::string& dir, std::size_t max_sentences = kDefaultMaxSentences) {
  namespace fs = std::filesystem;
  SyntheticCorpus c;
  c.reports = read_report_corpus((fs::path(dir) / "reports.jsonl").string(), max_sentences);
  if (c.reports.reports.empty()) throw EmptyInputError(dir + ": corpus has no patients");
  for (const auto& r : c.reports.reports) c.volumes.push_back(read_mgv1((fs::path(dir) / "volumes" / (r.patient_id + ".mgv")).string()));
  const fs::path lp = fs::path(dir) / "labels.jsonl";
  if (fs::exists(lp)) {
    const auto labels = read_labels(lp.string());
    if (labels.size() != c.reports.reports.size()) throw FormatError(lp.string() + ": label count differs from reports");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].first != c.reports.reports[i].patient_id) throw FormatError(lp.string() + ": label ids out of order");
      c.labels.push_back(labels[i].second);
    }
  }
  return c;
}

}  // namespace mg3d
