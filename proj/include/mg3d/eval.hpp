#pragma once

// Read-only evaluations over a finished model: report-to-volume retrieval and
// linear probes on the global volume feature.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mg3d/model.hpp"
#include "mg3d/random.hpp"

namespace mg3d {

struct RecallAt {
  std::size_t k = 0;
  double recall = 0.0;
};

// Rank of the paired column for each query row of a similarity matrix. Ties
// are broken toward the lower column index.
inline std::vector<std::size_t> paired_ranks(const std::vector<std::vector<double>>& sim) {
  std::vector<std::size_t> ranks;
  for (std::size_t i = 0; i < sim.size(); ++i) {
    const double s = sim[i][i];
    std::size_t r = 1;
    for (std::size_t j = 0; j < sim[i].size(); ++j)
      if (j != i && (sim[i][j] > s || (sim[i][j] == s && j < i))) ++r;
    ranks.push_back(r);
  }
  return ranks;
}

inline std::vector<RecallAt> recall_at_k(const std::vector<std::vector<double>>& sim, const std::vector<std::size_t>& ks) {
  if (sim.empty()) throw EmptyInputError("retrieval: empty corpus");
  const auto ranks = paired_ranks(sim);
  std::vector<RecallAt> out;
  for (std::size_t k : ks) {
    if (k == 0) throw ConfigError("retrieval: K must be positive");
    std::size_t hit = 0;
    for (std::size_t r : ranks) hit += r <= k ? 1 : 0;
    out.push_back({k, static_cast<double>(hit) / static_cast<double>(ranks.size())});
  }
  return out;
}

// sim[i][j] = cos(report global of i, volume global of j).
inline std::vector<std::vector<double>> report_volume_similarity(const Mg3dModel& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw EmptyInputError("retrieval: empty corpus");
  std::vector<Tensor> reports, volumes;
  for (const auto& s : samples) {
    reports.push_back(report_global_feature(model, s).detach());
    volumes.push_back(volume_global_feature(model, s).detach());
  }
  const Tensor c = cosine_matrix(concat_rows(reports), concat_rows(volumes));
  std::vector<std::vector<double>> sim(samples.size(), std::vector<double>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = 0; j < samples.size(); ++j) sim[i][j] = c.at(i, j);
  return sim;
}

inline std::vector<RecallAt> eval_retrieval(const Mg3dModel& model, const std::vector<Sample>& samples,
                                            const std::vector<std::size_t>& ks) {
  return recall_at_k(report_volume_similarity(model, samples), ks);
}

// ---------------------------------------------------------------------------
// Linear probe: L2-regularized logistic regression on standardized features,
// fitted by Newton iterations.

struct ProbeSplit {
  double train_fraction = 0.5;
  std::uint64_t seed = 0;
  double ridge = 1e-2;
};

struct ProbeResult {
  std::vector<double> accuracy;  // held-out, one per factor

  double mean() const {
    double s = 0.0;
    for (double a : accuracy) s += a;
    return accuracy.empty() ? 0.0 : s / static_cast<double>(accuracy.size());
  }
};

namespace detail {

inline Eigen::VectorXd fit_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double ridge) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd z = x * w;
    Eigen::VectorXd p(n), r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = 1.0 / (1.0 + std::exp(-z(i)));
      r(i) = p(i) * (1.0 - p(i));
    }
    Eigen::VectorXd reg = ridge * w;
    reg(d - 1) = 0.0;  // bias column is not penalized
    const Eigen::VectorXd g = x.transpose() * (p - y) / static_cast<double>(n) + reg;
    Eigen::MatrixXd h = x.transpose() * r.asDiagonal() * x / static_cast<double>(n);
    for (Eigen::Index k = 0; k + 1 < d; ++k) h(k, k) += ridge;
    h(d - 1, d - 1) += 1e-10;
    const Eigen::VectorXd step = h.ldlt().solve(g);
    w -= step;
    if (step.norm() < 1e-10) break;
  }
  return w;
}

}  // namespace detail

// features: one row per patient. labels[i][k] in {0, 1}.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& features, const std::vector<std::vector<int>>& labels,
                                const ProbeSplit& split = {}) {
  const std::size_t n = features.size();
  if (n == 0) throw EmptyInputError("probe: no patients");
  if (labels.size() != n) throw DimensionError("probe: one label row per patient required");
  if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0)) throw ConfigError("probe: train fraction must lie in (0, 1)");
  const std::size_t d = features[0].size();
  const std::size_t factors = labels[0].size();

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(split.seed, 0x9b0be));
  rng.shuffle(order);
  const std::size_t n_train = static_cast<std::size_t>(std::lround(split.train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n) throw EmptyInputError("probe: split leaves an empty side");

  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t t = 0; t < n_train; ++t)
    for (std::size_t k = 0; k < d; ++k) mu[k] += features[order[t]][k] / static_cast<double>(n_train);
  for (std::size_t t = 0; t < n_train; ++t)
    for (std::size_t k = 0; k < d; ++k) {
      const double c = features[order[t]][k] - mu[k];
      sd[k] += c * c / static_cast<double>(n_train);
    }
  for (auto& s : sd) s = std::sqrt(s);

  auto design = [&](std::size_t from, std::size_t to) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(to - from), static_cast<Eigen::Index>(d + 1));
    for (std::size_t t = from; t < to; ++t) {
      const auto& f = features[order[t]];
      if (f.size() != d) throw DimensionError("probe: ragged feature rows");
      for (std::size_t k = 0; k < d; ++k)
        x(static_cast<Eigen::Index>(t - from), static_cast<Eigen::Index>(k)) = sd[k] > 1e-12 ? (f[k] - mu[k]) / sd[k] : 0.0;
      x(static_cast<Eigen::Index>(t - from), static_cast<Eigen::Index>(d)) = 1.0;
    }
    return x;
  };
  const Eigen::MatrixXd x_train = design(0, n_train), x_test = design(n_train, n);

  ProbeResult out;
  for (std::size_t f = 0; f < factors; ++f) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(n_train));
    std::size_t positives = 0;
    for (std::size_t t = 0; t < n_train; ++t) {
      const int v = labels[order[t]].at(f);
      if (v != 0 && v != 1) throw ConfigError("probe: labels must be 0 or 1");
      y(static_cast<Eigen::Index>(t)) = v;
      positives += static_cast<std::size_t>(v);
    }
    if (positives == 0 || positives == n_train) {
      throw EmptyInputError("probe: factor " + std::to_string(f) + " has a single class in the training split");
    }
    const Eigen::VectorXd w = detail::fit_logistic(x_train, y, split.ridge);
    const Eigen::VectorXd z = x_test * w;
    std::size_t correct = 0;
    for (std::size_t t = n_train; t < n; ++t) {
      const int pred = z(static_cast<Eigen::Index>(t - n_train)) >= 0.0 ? 1 : 0;
      correct += pred == labels[order[t]][f] ? 1 : 0;
    }
    out.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n - n_train));
  }
  return out;
}

inline std::vector<std::vector<double>> volume_global_features(const Mg3dModel& model, const std::vector<Sample>& samples) {
  std::vector<std::vector<double>> out;
  for (const auto& s : samples) out.push_back(volume_global_feature(model, s).values());
  return out;
}

// Floor baseline: the mean voxel intensity of every patch, no encoder.
inline std::vector<std::vector<double>> patch_mean_features(const std::vector<Sample>& samples) {
  std::vector<std::vector<double>> out;
  for (const auto& s : samples) out.push_back(mean_rows(transpose(s.patches)).values());
  return out;
}

inline std::vector<std::vector<int>> sample_labels(const std::vector<Sample>& samples) {
  std::vector<std::vector<int>> out;
  for (const auto& s : samples) {
    if (s.factors.empty()) throw EmptyInputError("probe: sample " + s.id + " has no labels");
    out.push_back(s.factors);
  }
  return out;
}

inline ProbeResult eval_linear_probe(const Mg3dModel& model, const std::vector<Sample>& samples, const ProbeSplit& split = {}) {
  return linear_probe(volume_global_features(model, samples), sample_labels(samples), split);
}

}  // namespace mg3d
