#pragma once

// AdamW with parameter groups. Parameters whose gradient slot is absent are
// skipped entirely for that step (no moment update, no decay).

#include <cmath>
#include <vector>

#include "mg3d/nn.hpp"
#include "mg3d/numerics.hpp"

namespace mg3d {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
  };

  AdamW(std::vector<Group> groups, AdamWOptions opt = {}) : groups_(std::move(groups)), opt_(opt) {
    for (const auto& g : groups_) {
      if (!(g.lr > 0.0)) throw ConfigError("learning rates must be positive");
      for (const auto& p : g.params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
        t_.push_back(0);
      }
    }
  }

  static Group group(const ParamList& ps, double lr) {
    Group g;
    g.lr = lr;
    for (const auto& p : ps)
      if (p.tensor.requires_grad()) g.params.push_back(p.tensor);
    return g;
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  void step() {
    std::size_t slot = 0;
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        const std::size_t k = slot++;
        if (!p.has_grad()) continue;
        const std::uint64_t t = ++t_[k];
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t));
        auto w = p.mutable_data();
        auto grad = p.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
          w[i] -= g.lr * opt_.weight_decay * w[i];
          m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * grad[i];
          v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * grad[i] * grad[i];
          w[i] -= g.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        }
      }
    }
  }

  // L2 norm over every present gradient.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& g : groups_)
      for (const auto& p : g.params)
        if (p.has_grad())
          for (double x : p.grad()) s += x * x;
    return std::sqrt(s);
  }

 private:
  std::vector<Group> groups_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::uint64_t> t_;
};

}  // namespace mg3d
