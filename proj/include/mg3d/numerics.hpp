#pragma once

// Dense float64 tensors with tape-free reverse-mode accumulation.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record their parents and a local backward rule; backward()
// walks the graph in reverse topological order (fixed by construction order)
// and accumulates into every reachable node that requires gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mg3d/errors.hpp"

namespace mg3d {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "absent"
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = checked_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = checked_size(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = checked_size(shape);
    if (values.size() != n) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
  }

  // Row-major 2-D literal: Tensor::matrix({{1,2},{3,4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return from({rows.size(), cols}, std::move(v), requires_grad);
  }

  static Tensor row(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from({1, n}, std::move(values), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const {
    static const Shape empty;
    return node_ ? node_->shape : empty;
  }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return node_ ? node_->data.size() : 0; }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    node_->grad.clear();
    node_->backward_done = false;
  }

  // Same values, no history, no gradient requirement.
  Tensor detach() const { return from(shape(), node_->data, false); }
  Tensor clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  static std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    return shape_size(shape);
  }

  static std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data, bool rg) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = rg;
    return n;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_list(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                               std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
  return detail::make_result(a.shape(), std::move(out), {&a}, [c](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.data()[i]);
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = p->data[i];
      g[i] += (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)) * self.grad[i];
    }
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.data[i] * self.grad[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.data()[i] > 0.0)) throw NumericError("log: non-positive input");
    out[i] = std::log(a.data()[i]);
  }
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p->data[i];
  });
}

// Gaussian error linear unit, exact erf form.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  }
  return detail::make_result(a.shape(), std::move(out), {&a}, [](detail::Node& self) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = p->data[i];
      const double d = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * std::exp(-0.5 * x * x) * inv_sqrt_2pi;
      g[i] += d * self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result({1}, {s}, {&a}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (double& gi : g) gi += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Column means of a 2-D tensor, returned as 1 x n.
inline Tensor mean_rows(const Tensor& x) {
  detail::require_rank2(x, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  for (double& v : out) v /= static_cast<double>(m);
  return detail::make_result({1, n}, std::move(out), {&x}, [m, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// Row-major kernels in axpy form (contiguous inner loops, fixed summation
// order). All accumulate into C.

// C[m x n] += A[m x k] B[k x n]
inline void gemm_nn(const double* __restrict A, const double* __restrict B, double* __restrict C, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* __restrict brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[k x m]^T B[k x n]
inline void gemm_tn(const double* __restrict A, const double* __restrict B, double* __restrict C, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* __restrict brow = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = A[p * m + i];
      double* __restrict crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] B[n x k]^T
inline void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
  gemm_nn(A, bt.data(), C, m, k, n);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) detail::gemm_nt(self.grad.data(), pb->data.data(), pa->grad_buffer().data(), m, n, k);
    if (pb->requires_grad) detail::gemm_tn(pa->data.data(), self.grad.data(), pb->grad_buffer().data(), k, m, n);
  });
}

// a [m x k] times b^T where b is [n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) detail::gemm_nn(self.grad.data(), pb->data.data(), pa->grad_buffer().data(), m, n, k);
    if (pb->requires_grad) detail::gemm_tn(self.grad.data(), pa->data.data(), pb->grad_buffer().data(), n, m, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result({n, m}, std::move(out), {&a}, [m, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

// x [m x n] + b broadcast over rows (b has n elements).
inline Tensor add_row(const Tensor& x, const Tensor& b) {
  detail::require_rank2(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.size() != n) {
    throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + b.data()[j];
  return detail::make_result({m, n}, std::move(out), {&x, &b}, [m, n](detail::Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

// Row i of x scaled by w[i] (w has m elements).
inline Tensor mul_rows(const Tensor& x, const Tensor& w) {
  detail::require_rank2(x, "mul_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (w.size() != m) {
    throw DimensionError("mul_rows: weights " + shape_str(w.shape()) + " do not fit " + shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * w.data()[i];
  return detail::make_result({m, n}, std::move(out), {&x, &w}, [m, n](detail::Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * pw->data[i];
    }
    if (pw->requires_grad) {
      auto& g = pw->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * px->data[i * n + j];
        g[i] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank2(x, "softmax_rows");
  detail::require_finite(x.data(), "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data().data() + i * n;
    double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(xr[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return detail::make_result({m, n}, std::move(out), {&x}, [m, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* dy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

inline constexpr double kNormEpsilon = 1e-12;

// Each row divided by its L2 norm. Rows with norm <= 1e-12 are an error.
inline Tensor l2_normalize_rows(const Tensor& x) {
  detail::require_rank2(x, "l2_normalize_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.data()[i * n + j] * x.data()[i * n + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > kNormEpsilon)) {
      throw DegenerateVectorError("l2 normalization of a row with norm " + std::to_string(norms[i]));
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] / norms[i];
  }
  return detail::make_result({m, n}, std::move(out), {&x},
                             [m, n, norms = std::move(norms)](detail::Node& self) {
                               auto& g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double* y = self.data.data() + i * n;
                                 const double* dy = self.grad.data() + i * n;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += (dy[j] - y[j] * dot) / norms[i];
                               }
                             });
}

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) throw DimensionError("layer_norm_rows: affine width mismatch");
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xr[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), {&x, &gain, &bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (pg->requires_grad) {
          auto& g = pg->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xhat[i * n + j];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          std::vector<double> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = self.grad[i * n + j] * pg->data[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              g[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor take_rows(const Tensor& x, std::vector<std::size_t> idx) {
  detail::require_rank2(x, "take_rows");
  if (idx.empty()) throw EmptyInputError("take_rows: empty index list");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) throw IndexError("take_rows: row " + std::to_string(idx[r]) + " out of range");
    std::copy_n(x.data().data() + idx[r] * n, n, out.data() + r * n);
  }
  const std::size_t rows = idx.size();
  return detail::make_result({rows, n}, std::move(out), {&x}, [n, idx = std::move(idx)](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return take_rows(x, std::move(idx));
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: width mismatch");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result_list({m, n}, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->data.size();
    }
  });
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (!(begin < end && end <= n)) throw IndexError("slice_cols: bad column range");
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + begin, w, out.data() + i * w);
  return detail::make_result({m, w}, std::move(out), {&x}, [m, n, w, begin](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_cols: nothing to concatenate");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * n + off);
    off += w;
  }
  return detail::make_result_list({m, n}, std::move(out), parts, [m, n](detail::Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->shape.back();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

// Rows where mask[i] is true are replaced by the row vector v.
inline Tensor replace_rows(const Tensor& x, const Tensor& v, const std::vector<bool>& mask) {
  detail::require_rank2(x, "replace_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (v.size() != n || mask.size() != m) throw DimensionError("replace_rows: shape mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    if (mask[i]) std::copy_n(v.data().data(), n, out.data() + i * n);
  return detail::make_result({m, n}, std::move(out), {&x, &v}, [m, n, mask](detail::Node& self) {
    auto& px = self.parents[0];
    auto& pv = self.parents[1];
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        if (!mask[i])
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j];
    }
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        if (mask[i])
          for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

// Mean of the rows inside each half-open span, one output row per span.
inline Tensor segment_mean_rows(const Tensor& x, const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
  detail::require_rank2(x, "segment_mean_rows");
  if (spans.empty()) throw EmptyInputError("segment_mean_rows: no spans");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(spans.size() * n, 0.0);
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const auto [a, b] = spans[s];
    if (a >= b) throw EmptyInputError("segment_mean_rows: empty span");
    if (b > m) throw IndexError("segment_mean_rows: span exceeds row count");
    for (std::size_t i = a; i < b; ++i)
      for (std::size_t j = 0; j < n; ++j) out[s * n + j] += x.data()[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= static_cast<double>(b - a);
  }
  return detail::make_result({spans.size(), n}, std::move(out), {&x}, [n, spans](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t s = 0; s < spans.size(); ++s) {
      const auto [a, b] = spans[s];
      const double inv = 1.0 / static_cast<double>(b - a);
      for (std::size_t i = a; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[s * n + j] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses and similarities

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return detail::make_result({1}, {s / static_cast<double>(n)}, {&a, &b}, [n](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double c = 2.0 * self.grad[0] / static_cast<double>(n);
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += c * (pa->data[i] - pb->data[i]);
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= c * (pa->data[i] - pb->data[i]);
    }
  });
}

// Mean over rows of -log softmax(logits)[row, target[row]].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  detail::require_rank2(logits, "cross_entropy");
  detail::require_finite(logits.data(), "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) throw DimensionError("cross_entropy: one target per logit row required");
  std::vector<double> probs(m * v);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " out of range for " +
                       std::to_string(v) + " classes");
    }
    const double* xr = logits.data().data() + i * v;
    const double mx = *std::max_element(xr, xr + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(xr[j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    loss += (mx + std::log(z)) - xr[targets[i]];
  }
  loss /= static_cast<double>(m);
  return detail::make_result({1}, {loss}, {&logits},
                             [m, v, targets, probs = std::move(probs)](detail::Node& self) {
                               auto& g = self.parents[0]->grad_buffer();
                               const double c = self.grad[0] / static_cast<double>(m);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < v; ++j)
                                   g[i * v + j] += c * (probs[i * v + j] - (j == targets[i] ? 1.0 : 0.0));
                             });
}

// a.b / (|a||b|); both operands are flattened.
inline Tensor cosine_sim(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_sim: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a.data()[i] * b.data()[i];
    na += a.data()[i] * a.data()[i];
    nb += b.data()[i] * b.data()[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (!(na > kNormEpsilon) || !(nb > kNormEpsilon)) {
    throw DegenerateVectorError("cosine_sim: operand norm below 1e-12");
  }
  const double c = dot / (na * nb);
  return detail::make_result({1}, {c}, {&a, &b}, [n, na, nb, c](detail::Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const double gout = self.grad[0];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        g[i] += gout * (pb->data[i] / (na * nb) - c * pa->data[i] / (na * na));
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        g[i] += gout * (pa->data[i] / (na * nb) - c * pb->data[i] / (nb * nb));
    }
  });
}

// M[s,t] = cosine(a[s], b[t]).
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  return matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b));
}

// ---------------------------------------------------------------------------
// Reverse accumulation

// Runs reverse accumulation from a one-element tensor. A second call on the
// same root is a StateError.
inline void backward(const Tensor& root) {
  if (!root.defined()) throw StateError("backward on an undefined tensor");
  if (root.size() != 1) throw DimensionError("backward requires a scalar, got " + shape_str(root.shape()));
  detail::Node* r = root.node().get();
  if (r->backward_done) throw StateError("backward already ran on this loss");
  r->backward_done = true;
  if (!r->requires_grad) return;

  // Iterative post-order DFS; parents visited in recorded order so the
  // resulting order is fixed by construction.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(r, 0);
  seen.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  r->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// A scalar produced by a tracked computation, with single-use backward.
class ScalarLoss {
 public:
  ScalarLoss() = default;
  explicit ScalarLoss(Tensor t) : tensor_(std::move(t)) {
    if (tensor_.size() != 1) throw DimensionError("ScalarLoss requires a one-element tensor");
  }
  double value() const { return tensor_.item(); }
  const Tensor& tensor() const { return tensor_; }
  void backward() const { mg3d::backward(tensor_); }

 private:
  Tensor tensor_;
};

inline void backward(const ScalarLoss& loss) { loss.backward(); }

inline void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_element = 0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central differences for every element of every parameter that requires
// gradients; parameters that do not are skipped. f must rebuild its graph on
// each call and be deterministic.
inline FdReport fd_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-6) {
  if (!(h >= 1e-7 && h <= 1e-4)) throw ConfigError("fd_check: step must lie in [1e-7, 1e-4]");
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
  }
  FdReport rep;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (!p.requires_grad()) continue;
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x0 = d[i];
      d[i] = x0 + h;
      const double fp = f().item();
      d[i] = x0 - h;
      const double fm = f().item();
      d[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[k][i];
      const double err = std::fabs(num - ana) / std::max({std::fabs(num), std::fabs(ana), 1e-8});
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = k;
        rep.worst_element = i;
        rep.worst_analytic = ana;
        rep.worst_numeric = num;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return rep;
}

}  // namespace mg3d
