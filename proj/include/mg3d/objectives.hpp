#pragma once

// The six pre-training losses and their weighted composition.
//
//   intra = alpha (mim + mlm) + beta (sfr + cml)
//   inter = gamma (ssm + dfa)
//   total = intra + inter

#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "mg3d/numerics.hpp"
#include "mg3d/text.hpp"

namespace mg3d {

struct LossWeights {
  double lambda_alpha = 1.0;
  double lambda_beta = 0.1;
  double lambda_gamma = 0.1;
  double tau = 0.07;

  void validate() const {
    if (!(lambda_alpha >= 0.0 && lambda_beta >= 0.0 && lambda_gamma >= 0.0)) {
      throw ConfigError("loss weights must be nonnegative");
    }
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  }
};

inline double intra_loss(double mim, double mlm, double sfr, double cml, const LossWeights& w) {
  w.validate();
  return w.lambda_alpha * (mim + mlm) + w.lambda_beta * (sfr + cml);
}

inline double inter_loss(double ssm, double dfa, const LossWeights& w) {
  w.validate();
  return w.lambda_gamma * (ssm + dfa);
}

inline double total_loss(double intra, double inter) { return intra + inter; }

// Batch mean of per-item voxel MSE.
inline Tensor mim_loss(const std::vector<Tensor>& volumes, const std::vector<Tensor>& reconstructions) {
  if (volumes.empty()) throw EmptyInputError("mim_loss: empty batch");
  if (volumes.size() != reconstructions.size()) throw DimensionError("mim_loss: batch size mismatch");
  Tensor acc;
  for (std::size_t b = 0; b < volumes.size(); ++b) {
    Tensor l = mse(reconstructions[b], volumes[b]);
    acc = acc.defined() ? add(acc, l) : l;
  }
  return scale(acc, 1.0 / static_cast<double>(volumes.size()));
}

// Per item: mean cross-entropy over its masked positions. Batch mean.
inline Tensor mlm_loss(const std::vector<Tensor>& logits, const std::vector<std::vector<std::size_t>>& targets) {
  if (logits.empty()) throw EmptyInputError("mlm_loss: empty batch");
  if (logits.size() != targets.size()) throw DimensionError("mlm_loss: batch size mismatch");
  Tensor acc;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    if (targets[b].empty()) throw EmptyInputError("mlm_loss: no masked positions");
    Tensor l = cross_entropy(logits[b], targets[b]);
    acc = acc.defined() ? add(acc, l) : l;
  }
  return scale(acc, 1.0 / static_cast<double>(logits.size()));
}

namespace detail {

inline Tensor identity(std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

}  // namespace detail

// Cross cosine-similarity matrix between original and reconstructed sentence
// features, driven toward the identity: mean |M - I| over the valid block.
inline Tensor sfr_loss(const std::vector<SentenceFeatures>& original, const std::vector<SentenceFeatures>& reconstructed) {
  if (original.empty()) throw EmptyInputError("sfr_loss: empty batch");
  if (original.size() != reconstructed.size()) throw DimensionError("sfr_loss: batch size mismatch");
  Tensor acc;
  for (std::size_t b = 0; b < original.size(); ++b) {
    if (original[b].valid != reconstructed[b].valid) throw DimensionError("sfr_loss: validity patterns differ");
    const Tensor m = cosine_matrix(original[b].valid_rows(), reconstructed[b].valid_rows());
    Tensor l = mean(abs(sub(m, detail::identity(m.rows()))));
    acc = acc.defined() ? add(acc, l) : l;
  }
  return scale(acc, 1.0 / static_cast<double>(original.size()));
}

// sum_i -log( exp(a_i . c_i / tau) / sum_j exp(a_i . c_j / tau) ), rows L2
// normalized first when `normalize` is set.
inline Tensor info_nce_sum(const Tensor& anchors, const Tensor& candidates, double tau, bool normalize = true) {
  if (anchors.rank() != 2 || candidates.rank() != 2 || anchors.rows() == 0) throw EmptyInputError("contrastive loss: empty batch");
  if (anchors.shape() != candidates.shape()) {
    throw DimensionError("contrastive loss: " + shape_str(anchors.shape()) + " vs " + shape_str(candidates.shape()));
  }
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t n = anchors.rows();
  const Tensor a = normalize ? l2_normalize_rows(anchors) : anchors;
  const Tensor c = normalize ? l2_normalize_rows(candidates) : candidates;
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  return scale(cross_entropy(scale(matmul_nt(a, c), 1.0 / tau), diag), static_cast<double>(n));
}

// Rows are patients (B x d each). Volume-side term anchors on the
// sentence-informed global H_I and contrasts volume globals F_I; report-side
// term anchors on H_T and contrasts report globals F_T.
inline Tensor cml_loss(const Tensor& volume_global, const Tensor& informed_volume_global, const Tensor& report_global,
                       const Tensor& informed_report_global, double tau, bool normalize = true) {
  return add(info_nce_sum(informed_volume_global, volume_global, tau, normalize),
             info_nce_sum(informed_report_global, report_global, tau, normalize));
}

// Anchor: volume global of patient i; positive: pooled sentence-specific
// global of patient i; negatives: those of the other patients.
inline Tensor dfa_loss(const Tensor& sentence_specific_global, const Tensor& volume_global, double tau,
                       bool normalize = true) {
  return info_nce_sum(volume_global, sentence_specific_global, tau, normalize);
}

// Inter-patient similarity matching: for every patient pair, the cosine
// matrix between their report sentences versus that between their
// sentence-specific visual features; mean |difference| over valid entries,
// averaged over pairs. Fewer than two patients gives 0 with a warning.
inline Tensor ssm_loss(const std::vector<SentenceFeatures>& text, const std::vector<SentenceFeatures>& visual) {
  if (text.size() != visual.size()) throw DimensionError("ssm_loss: batch size mismatch");
  const std::size_t b = text.size();
  if (b < 2) {
    std::clog << "warning: ssm_loss needs at least two patients, returning 0\n";
    return Tensor::scalar(0.0);
  }
  std::vector<Tensor> t_rows, v_rows;
  for (std::size_t i = 0; i < b; ++i) {
    if (text[i].valid != visual[i].valid) throw DimensionError("ssm_loss: validity patterns differ");
    t_rows.push_back(text[i].valid_rows());
    v_rows.push_back(visual[i].valid_rows());
  }
  Tensor acc;
  for (std::size_t i = 0; i + 1 < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      Tensor l = mean(abs(sub(cosine_matrix(t_rows[i], t_rows[j]), cosine_matrix(v_rows[i], v_rows[j]))));
      acc = acc.defined() ? add(acc, l) : l;
    }
  return scale(acc, 2.0 / static_cast<double>(b * (b - 1)));
}

struct LossBundle {
  double mim = 0, mlm = 0, sfr = 0, cml = 0, ssm = 0, dfa = 0;
  double intra = 0, inter = 0, total = 0;
  Tensor total_tensor;  // differentiable total; terms with zero weight are left out of the graph

  bool consistent(const LossWeights& w, double tol = 1e-12) const {
    const double i2 = w.lambda_alpha * (mim + mlm) + w.lambda_beta * (sfr + cml);
    const double e2 = w.lambda_gamma * (ssm + dfa);
    return std::fabs(i2 - intra) <= tol && std::fabs(e2 - inter) <= tol && std::fabs(intra + inter - total) <= tol;
  }

  // Name of the first non-finite component, or empty.
  std::string first_non_finite() const {
    const std::pair<const char*, double> items[] = {{"mim", mim}, {"mlm", mlm},     {"sfr", sfr},
                                                    {"cml", cml}, {"ssm", ssm},     {"dfa", dfa},
                                                    {"intra", intra}, {"inter", inter}, {"total", total}};
    for (const auto& [name, v] : items)
      if (!std::isfinite(v)) return name;
    return {};
  }
};

struct LossTerms {
  Tensor mim, mlm, sfr, cml, ssm, dfa;
};

inline LossBundle compose_losses(const LossTerms& t, const LossWeights& w) {
  w.validate();
  LossBundle b;
  b.mim = t.mim.item();
  b.mlm = t.mlm.item();
  b.sfr = t.sfr.item();
  b.cml = t.cml.item();
  b.ssm = t.ssm.item();
  b.dfa = t.dfa.item();
  b.intra = intra_loss(b.mim, b.mlm, b.sfr, b.cml, w);
  b.inter = inter_loss(b.ssm, b.dfa, w);
  b.total = total_loss(b.intra, b.inter);

  Tensor acc;
  auto accumulate = [&acc](double weight, const Tensor& a, const Tensor& c) {
    if (weight == 0.0) return;
    Tensor part = scale(add(a, c), weight);
    acc = acc.defined() ? add(acc, part) : part;
  };
  accumulate(w.lambda_alpha, t.mim, t.mlm);
  accumulate(w.lambda_beta, t.sfr, t.cml);
  accumulate(w.lambda_gamma, t.ssm, t.dfa);
  b.total_tensor = acc.defined() ? acc : Tensor::scalar(0.0);
  return b;
}

}  // namespace mg3d
