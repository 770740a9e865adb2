#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "regformer/rng.hpp"

namespace regformer {

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= size_t(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace autograd {

inline bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

// Disables graph recording for the current thread (inference, validation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// Gradients accumulate in walk-local buffers during backward, then flush to
// the nodes (or to a GradSink for shared leaves). Keeps concurrent backward
// passes over shared parameters race-free.
struct BackwardContext {
  std::unordered_map<TensorNode*, std::vector<double>> grads;
  std::vector<double>& grad_of(TensorNode* n);
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily; empty means all-zero
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&, const std::vector<double>&, BackwardContext&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline std::vector<double>& BackwardContext::grad_of(TensorNode* n) {
  auto& g = grads[n];
  if (g.size() != n->data.size()) g.assign(n->data.size(), 0.0);
  return g;
}

// Dense n-d tensor of doubles participating in a dynamically recorded
// reverse-mode graph. Value-semantics handle over a shared node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->data.assign(numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.n_->data) x = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size())
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.n_->data) x = rng.normal() * stddev;
    return t;
  }

  bool defined() const { return bool(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(size_t i) const { return n_->shape[i]; }
  size_t size() const { return n_->data.size(); }
  const std::vector<double>& data() const { return n_->data; }
  std::vector<double>& data_mut() { return n_->data; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  const std::vector<double>& grad() const { return n_->ensure_grad(); }
  void zero_grad() {
    auto& g = n_->ensure_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }

  double item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return n_->data[0];
  }

  TensorNode* node() const { return n_.get(); }
  const NodePtr& node_ptr() const { return n_; }

  // Drops graph history; the returned tensor shares no autograd state.
  Tensor detached() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = n_->shape;
    n->data = n_->data;
    return Tensor(std::move(n));
  }

 private:
  NodePtr n_;
};

namespace detail {

using BackwardFn = std::function<void(TensorNode&, const std::vector<double>&, BackwardContext&)>;

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_op(Shape shape, std::initializer_list<const Tensor*> parents, BackwardFn fn) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(numel(shape), 0.0);
  n->shape = std::move(shape);
  if (autograd::grad_enabled() && any_requires_grad(parents)) {
    n->requires_grad = true;
    for (const Tensor* p : parents) n->parents.push_back(p->node_ptr());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

// ---- raw kernels (C accumulates) ----

// C(m,n) += A(m,k) * B(k,n)
inline void mm_nn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + size_t(i) * k;
    double* c = C + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + size_t(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C(m,q) += A(m,k) * B(q,k)^T
inline void mm_nt(const double* A, const double* B, double* C, int m, int k, int q) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + size_t(i) * k;
    double* c = C + size_t(i) * q;
    for (int j = 0; j < q; ++j) {
      const double* b = B + size_t(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C(k,n) += A(m,k)^T * D(m,n)
inline void mm_tn(const double* A, const double* D, double* C, int m, int k, int n) {
  for (int p = 0; p < m; ++p) {
    const double* a = A + size_t(p) * k;
    const double* d = D + size_t(p) * n;
    for (int i = 0; i < k; ++i) {
      const double av = a[i];
      double* c = C + size_t(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * d[j];
    }
  }
}

inline void check_rank2(const Tensor& t, const char* who) {
  if (t.shape().size() != 2)
    throw std::invalid_argument(std::string(who) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- operations ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul dimension mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Tensor out = detail::make_op(
      {m, n}, {&a, &b},
      [an = a.node_ptr(), bn = b.node_ptr(), m, k, n](TensorNode&, const std::vector<double>& g,
                                                      BackwardContext& ctx) {
        if (an->requires_grad)
          detail::mm_nt(g.data(), bn->data.data(), ctx.grad_of(an.get()).data(), m, n, k);
        if (bn->requires_grad)
          detail::mm_tn(an->data.data(), g.data(), ctx.grad_of(bn.get()).data(), m, k, n);
      });
  detail::mm_nn(a.data().data(), b.data().data(), out.data_mut().data(), m, k, n);
  return out;
}

// a(m,k) * b(q,k)^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::check_rank2(a, "matmul_nt");
  detail::check_rank2(b, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), q = b.dim(0);
  if (k != b.dim(1))
    throw std::invalid_argument("matmul_nt dimension mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  Tensor out = detail::make_op(
      {m, q}, {&a, &b},
      [an = a.node_ptr(), bn = b.node_ptr(), m, k, q](TensorNode&, const std::vector<double>& g,
                                                      BackwardContext& ctx) {
        if (an->requires_grad)
          detail::mm_nn(g.data(), bn->data.data(), ctx.grad_of(an.get()).data(), m, q, k);
        if (bn->requires_grad)
          detail::mm_tn(g.data(), an->data.data(), ctx.grad_of(bn.get()).data(), m, q, k);
      });
  detail::mm_nt(a.data().data(), b.data().data(), out.data_mut().data(), m, k, q);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor out = detail::make_op(a.shape(), {&a, &b},
                               [an = a.node_ptr(), bn = b.node_ptr()](TensorNode&, const std::vector<double>& g,
                                                                      BackwardContext& ctx) {
                                 if (an->requires_grad) {
                                   auto& ga = ctx.grad_of(an.get());
                                   for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                 }
                                 if (bn->requires_grad) {
                                   auto& gb = ctx.grad_of(bn.get());
                                   for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                                 }
                               });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return out;
}

// x(m,d) + bias(d) broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::check_rank2(x, "add_row_bias");
  const int m = x.dim(0), d = x.dim(1);
  if (bias.shape() != Shape{d})
    throw std::invalid_argument("add_row_bias: bias " + shape_str(bias.shape()) + " vs row width " +
                                std::to_string(d));
  Tensor out = detail::make_op(
      x.shape(), {&x, &bias},
      [xn = x.node_ptr(), bn = bias.node_ptr(), m, d](TensorNode&, const std::vector<double>& g,
                                                      BackwardContext& ctx) {
        if (xn->requires_grad) {
          auto& gx = ctx.grad_of(xn.get());
          for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& gb = ctx.grad_of(bn.get());
          for (int i = 0; i < m; ++i) {
            const double* gr = g.data() + size_t(i) * d;
            for (int j = 0; j < d; ++j) gb[j] += gr[j];
          }
        }
      });
  const auto& xv = x.data();
  const auto& bv = bias.data();
  auto& ov = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) ov[size_t(i) * d + j] = xv[size_t(i) * d + j] + bv[j];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor out = detail::make_op(a.shape(), {&a, &b},
                               [an = a.node_ptr(), bn = b.node_ptr()](TensorNode&, const std::vector<double>& g,
                                                                      BackwardContext& ctx) {
                                 if (an->requires_grad) {
                                   auto& ga = ctx.grad_of(an.get());
                                   for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
                                 }
                                 if (bn->requires_grad) {
                                   auto& gb = ctx.grad_of(bn.get());
                                   for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
                                 }
                               });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_op(a.shape(), {&a},
                               [an = a.node_ptr(), c](TensorNode&, const std::vector<double>& g,
                                                      BackwardContext& ctx) {
                                 if (!an->requires_grad) return;
                                 auto& ga = ctx.grad_of(an.get());
                                 for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                               });
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  return out;
}

// Exact (erf-form) GELU; smooth everywhere, which keeps finite-difference
// gradient checks clean.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Tensor out = detail::make_op(a.shape(), {&a},
                               [an = a.node_ptr()](TensorNode&, const std::vector<double>& g,
                                                   BackwardContext& ctx) {
                                 if (!an->requires_grad) return;
                                 auto& ga = ctx.grad_of(an.get());
                                 for (size_t i = 0; i < g.size(); ++i) {
                                   const double x = an->data[i];
                                   const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                                   const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                                   ga[i] += g[i] * (cdf + x * pdf);
                                 }
                               });
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = detail::make_op(a.shape(), {&a},
                               [an = a.node_ptr()](TensorNode& self, const std::vector<double>& g,
                                                   BackwardContext& ctx) {
                                 if (!an->requires_grad) return;
                                 auto& ga = ctx.grad_of(an.get());
                                 for (size_t i = 0; i < g.size(); ++i)
                                   if (self.data[i] > 0.0) ga[i] += g[i];
                               });
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  return out;
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  detail::check_rank2(x, "slice_cols");
  const int m = x.dim(0), d = x.dim(1);
  if (c0 < 0 || c1 > d || c0 >= c1)
    throw std::invalid_argument("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") out of range for width " + std::to_string(d));
  const int w = c1 - c0;
  Tensor out = detail::make_op({m, w}, {&x},
                               [xn = x.node_ptr(), m, d, c0, w](TensorNode&, const std::vector<double>& g,
                                                                BackwardContext& ctx) {
                                 if (!xn->requires_grad) return;
                                 auto& gx = ctx.grad_of(xn.get());
                                 for (int i = 0; i < m; ++i)
                                   for (int j = 0; j < w; ++j)
                                     gx[size_t(i) * d + c0 + j] += g[size_t(i) * w + j];
                               });
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) ov[size_t(i) * w + j] = xv[size_t(i) * d + c0 + j];
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0].dim(0);
  int d = 0;
  for (const auto& p : parts) {
    detail::check_rank2(p, "concat_cols");
    if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row count mismatch");
    d += p.dim(1);
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = {m, d};
  n->data.assign(size_t(m) * d, 0.0);
  bool rg = false;
  if (autograd::grad_enabled())
    for (const auto& p : parts) rg = rg || p.requires_grad();
  std::vector<int> widths;
  widths.reserve(parts.size());
  for (const auto& p : parts) widths.push_back(p.dim(1));
  if (rg) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node_ptr());
    n->backward_fn = [widths, m, d](TensorNode& self, const std::vector<double>& g, BackwardContext& ctx) {
      int off = 0;
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        const int w = widths[pi];
        auto& pn = self.parents[pi];
        if (pn->requires_grad) {
          auto& gp = ctx.grad_of(pn.get());
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) gp[size_t(i) * w + j] += g[size_t(i) * d + off + j];
        }
        off += w;
      }
    };
  }
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    const auto& pv = p.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) n->data[size_t(i) * d + off + j] = pv[size_t(i) * w + j];
    off += w;
  }
  return Tensor(std::move(n));
}

// Gathers rows of table (V,d) at the given ids; backward scatter-adds.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  detail::check_rank2(table, "embedding_lookup");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::out_of_range("embedding id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(v));
  const int m = int(ids.size());
  Tensor out = detail::make_op({m, d}, {&table},
                               [tn = table.node_ptr(), ids, d](TensorNode&, const std::vector<double>& g,
                                                               BackwardContext& ctx) {
                                 if (!tn->requires_grad) return;
                                 auto& gt = ctx.grad_of(tn.get());
                                 for (size_t i = 0; i < ids.size(); ++i) {
                                   double* row = gt.data() + size_t(ids[i]) * d;
                                   const double* gr = g.data() + i * d;
                                   for (int j = 0; j < d; ++j) row[j] += gr[j];
                                 }
                               });
  const auto& tv = table.data();
  auto& ov = out.data_mut();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) ov[size_t(i) * d + j] = tv[size_t(ids[i]) * d + j];
  return out;
}

// Per-row standardization with epsilon, then elementwise affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::check_rank2(x, "layer_norm");
  const int m = x.dim(0), d = x.dim(1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw std::invalid_argument("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  auto mean = std::make_shared<std::vector<double>>(m);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Tensor out = detail::make_op(
      x.shape(), {&x, &gain, &bias},
      [xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), mean, inv_std, m,
       d](TensorNode&, const std::vector<double>& g, BackwardContext& ctx) {
        for (int i = 0; i < m; ++i) {
          const double* xr = xn->data.data() + size_t(i) * d;
          const double* gr = g.data() + size_t(i) * d;
          const double mu = (*mean)[i], is = (*inv_std)[i];
          // dl/dxhat, plus the two row reductions the chain rule needs
          double sum_gxh = 0.0, sum_gxh_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mu) * is;
            const double gxh = gr[j] * gn->data[j];
            sum_gxh += gxh;
            sum_gxh_xhat += gxh * xhat;
          }
          if (xn->requires_grad) {
            auto& gx = ctx.grad_of(xn.get());
            double* gxr = gx.data() + size_t(i) * d;
            for (int j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mu) * is;
              const double gxh = gr[j] * gn->data[j];
              gxr[j] += is * (gxh - (sum_gxh + xhat * sum_gxh_xhat) / d);
            }
          }
          if (gn->requires_grad) {
            auto& gg = ctx.grad_of(gn.get());
            for (int j = 0; j < d; ++j) gg[j] += gr[j] * ((xr[j] - mu) * is);
          }
          if (bn->requires_grad) {
            auto& gb = ctx.grad_of(bn.get());
            for (int j = 0; j < d; ++j) gb[j] += gr[j];
          }
        }
      });
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.data_mut();
  for (int i = 0; i < m; ++i) {
    const double* xr = xv.data() + size_t(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*mean)[i] = mu;
    (*inv_std)[i] = is;
    double* orow = ov.data() + size_t(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = gv[j] * ((xr[j] - mu) * is) + bv[j];
  }
  return out;
}

// Softmax over the last axis of (..., L, L) scores with a shared LxL
// visibility matrix. Hidden cells get -1e9 added to their logit before
// normalization; their probability underflows to exactly zero.
inline constexpr double kMaskFill = -1e9;

inline Tensor masked_softmax(const Tensor& scores, const std::vector<uint8_t>& visible, int L) {
  const auto& sh = scores.shape();
  if (sh.size() < 2 || sh[sh.size() - 1] != L || sh[sh.size() - 2] != L)
    throw std::invalid_argument("masked_softmax: scores " + shape_str(sh) + " do not end in [" +
                                std::to_string(L) + "x" + std::to_string(L) + "]");
  if (visible.size() != size_t(L) * L)
    throw std::invalid_argument("masked_softmax: mask size mismatch");
  for (int r = 0; r < L; ++r) {
    bool any = false;
    for (int c = 0; c < L; ++c) any = any || visible[size_t(r) * L + c];
    if (!any)
      throw std::runtime_error("masked_softmax: fully masked row " + std::to_string(r));
  }
  const size_t batch = numel(sh) / (size_t(L) * L);
  Tensor out = detail::make_op(
      sh, {&scores},
      [sn = scores.node_ptr(), L, batch](TensorNode& self, const std::vector<double>& g,
                                         BackwardContext& ctx) {
        if (!sn->requires_grad) return;
        auto& gs = ctx.grad_of(sn.get());
        for (size_t b = 0; b < batch; ++b) {
          const size_t base = b * size_t(L) * L;
          for (int r = 0; r < L; ++r) {
            const double* p = self.data.data() + base + size_t(r) * L;
            const double* gr = g.data() + base + size_t(r) * L;
            double dot = 0.0;
            for (int c = 0; c < L; ++c) dot += p[c] * gr[c];
            double* gsr = gs.data() + base + size_t(r) * L;
            for (int c = 0; c < L; ++c) gsr[c] += p[c] * (gr[c] - dot);
          }
        }
      });
  const auto& sv = scores.data();
  auto& ov = out.data_mut();
  for (size_t b = 0; b < batch; ++b) {
    const size_t base = b * size_t(L) * L;
    for (int r = 0; r < L; ++r) {
      const double* srow = sv.data() + base + size_t(r) * L;
      const uint8_t* vrow = visible.data() + size_t(r) * L;
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < L; ++c) {
        const double z = srow[c] + (vrow[c] ? 0.0 : kMaskFill);
        if (z > mx) mx = z;
      }
      double* orow = ov.data() + base + size_t(r) * L;
      double sum = 0.0;
      for (int c = 0; c < L; ++c) {
        const double z = srow[c] + (vrow[c] ? 0.0 : kMaskFill);
        const double e = std::exp(z - mx);
        orow[c] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int c = 0; c < L; ++c) orow[c] *= inv;
    }
  }
  return out;
}

// Plain softmax over the last axis of a rank-2 tensor (decode steps).
inline Tensor softmax_rows(const Tensor& scores) {
  detail::check_rank2(scores, "softmax_rows");
  const int m = scores.dim(0), n = scores.dim(1);
  Tensor out = detail::make_op(
      scores.shape(), {&scores},
      [sn = scores.node_ptr(), m, n](TensorNode& self, const std::vector<double>& g, BackwardContext& ctx) {
        if (!sn->requires_grad) return;
        auto& gs = ctx.grad_of(sn.get());
        for (int r = 0; r < m; ++r) {
          const double* p = self.data.data() + size_t(r) * n;
          const double* gr = g.data() + size_t(r) * n;
          double dot = 0.0;
          for (int c = 0; c < n; ++c) dot += p[c] * gr[c];
          double* gsr = gs.data() + size_t(r) * n;
          for (int c = 0; c < n; ++c) gsr[c] += p[c] * (gr[c] - dot);
        }
      });
  const auto& sv = scores.data();
  auto& ov = out.data_mut();
  for (int r = 0; r < m; ++r) {
    const double* srow = sv.data() + size_t(r) * n;
    double mx = srow[0];
    for (int c = 1; c < n; ++c) mx = std::max(mx, srow[c]);
    double* orow = ov.data() + size_t(r) * n;
    double sum = 0.0;
    for (int c = 0; c < n; ++c) {
      const double e = std::exp(srow[c] - mx);
      orow[c] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int c = 0; c < n; ++c) orow[c] *= inv;
  }
  return out;
}

// Inverted dropout; draws one uniform per element from rng in row-major
// order so streams are reproducible.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const double keep = 1.0 - rate;
  const double inv_keep = 1.0 / keep;
  auto mask = std::make_shared<std::vector<uint8_t>>(x.size());
  for (auto& m : *mask) m = rng.uniform() < keep ? 1 : 0;
  Tensor out = detail::make_op(x.shape(), {&x},
                               [xn = x.node_ptr(), mask, inv_keep](TensorNode&, const std::vector<double>& g,
                                                                   BackwardContext& ctx) {
                                 if (!xn->requires_grad) return;
                                 auto& gx = ctx.grad_of(xn.get());
                                 for (size_t i = 0; i < g.size(); ++i)
                                   if ((*mask)[i]) gx[i] += g[i] * inv_keep;
                               });
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = (*mask)[i] ? xv[i] * inv_keep : 0.0;
  return out;
}

inline Tensor sum(const Tensor& x) {
  Tensor out = detail::make_op({1}, {&x},
                               [xn = x.node_ptr()](TensorNode&, const std::vector<double>& g,
                                                   BackwardContext& ctx) {
                                 if (!xn->requires_grad) return;
                                 auto& gx = ctx.grad_of(xn.get());
                                 for (auto& v : gx) v += g[0];
                               });
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.data_mut()[0] = s;
  return out;
}

// Mean over non-ignored rows of the label-smoothed negative log-likelihood.
// Ignored rows contribute nothing and receive exactly zero logit gradient.
inline Tensor cross_entropy_label_smoothed(const Tensor& logits, const std::vector<int>& targets,
                                          double smoothing,
                                          const std::vector<uint8_t>& ignore_mask) {
  detail::check_rank2(logits, "cross_entropy_label_smoothed");
  const int t = logits.dim(0), v = logits.dim(1);
  if (int(targets.size()) != t || int(ignore_mask.size()) != t)
    throw std::invalid_argument("cross_entropy: targets/ignore_mask length must equal " +
                                std::to_string(t));
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw std::invalid_argument("cross_entropy: smoothing must be in [0,1)");
  int kept = 0;
  for (int i = 0; i < t; ++i) {
    if (ignore_mask[i]) continue;
    ++kept;
    if (targets[i] < 0 || targets[i] >= v)
      throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) +
                              " outside vocabulary of " + std::to_string(v));
  }
  if (kept == 0) throw std::runtime_error("cross_entropy: every position is ignored, loss is empty");

  // log-probabilities cached for backward
  auto logp = std::make_shared<std::vector<double>>(size_t(t) * v);
  const auto& lv = logits.data();
  double total = 0.0;
  for (int i = 0; i < t; ++i) {
    if (ignore_mask[i]) continue;
    const double* row = lv.data() + size_t(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    double* lp = logp->data() + size_t(i) * v;
    double smooth_term = 0.0;
    for (int j = 0; j < v; ++j) {
      lp[j] = row[j] - lse;
      smooth_term += lp[j];
    }
    total += -(1.0 - smoothing) * lp[targets[i]] - smoothing / v * smooth_term;
  }
  Tensor out = detail::make_op(
      {1}, {&logits},
      [ln = logits.node_ptr(), logp, targets, ignore_mask, smoothing, kept, t,
       v](TensorNode&, const std::vector<double>& g, BackwardContext& ctx) {
        if (!ln->requires_grad) return;
        auto& gl = ctx.grad_of(ln.get());
        const double w = g[0] / kept;
        for (int i = 0; i < t; ++i) {
          if (ignore_mask[i]) continue;
          const double* lp = logp->data() + size_t(i) * v;
          double* gr = gl.data() + size_t(i) * v;
          for (int j = 0; j < v; ++j) {
            const double p = std::exp(lp[j]);
            const double q = smoothing / v + (j == targets[i] ? 1.0 - smoothing : 0.0);
            gr[j] += w * (p - q);
          }
        }
      });
  out.data_mut()[0] = total / kept;
  return out;
}

// Absolute sin/cos positional encodings for positions offset..offset+count-1.
inline Tensor sinusoidal_positions(int offset, int count, int d) {
  if (d % 2 != 0)
    throw std::invalid_argument("sinusoidal_positions: dimension must be even, got " + std::to_string(d));
  if (offset < 0 || count < 0) throw std::invalid_argument("sinusoidal_positions: negative argument");
  Tensor out = Tensor::zeros({count, d});
  auto& ov = out.data_mut();
  for (int i = 0; i < count; ++i) {
    const double p = double(offset + i);
    double* row = ov.data() + size_t(i) * d;
    for (int j = 0; j < d / 2; ++j) {
      const double freq = std::pow(10000.0, -2.0 * j / d);
      row[2 * j] = std::sin(p * freq);
      row[2 * j + 1] = std::cos(p * freq);
    }
  }
  return out;
}

// ---- backward ----

// Per-worker accumulator for gradients of shared leaf tensors; lets several
// instance graphs run backward concurrently and be reduced in a fixed order.
struct GradSink {
  std::unordered_map<TensorNode*, std::vector<double>> leaf_grads;

  void add(TensorNode* n, const std::vector<double>& g) {
    auto& buf = leaf_grads[n];
    if (buf.size() != g.size()) buf.assign(g.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  // Flushes into the nodes' own grad accumulators.
  void flush() {
    for (auto& [node, buf] : leaf_grads) {
      auto& g = node->ensure_grad();
      for (size_t i = 0; i < buf.size(); ++i) g[i] += buf[i];
    }
    leaf_grads.clear();
  }
};

inline void backward_seeded(const Tensor& loss, double seed, GradSink* sink = nullptr) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward expects a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad() || loss.node()->is_leaf())
    throw std::invalid_argument("backward: loss was not produced by recorded operations");

  // iterative post-order over the recorded graph
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !p->is_leaf() && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  BackwardContext ctx;
  ctx.grad_of(loss.node())[0] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    auto found = ctx.grads.find(node);
    if (found == ctx.grads.end()) continue;
    node->backward_fn(*node, found->second, ctx);
  }
  for (auto& [node, buf] : ctx.grads) {
    if (sink && node->is_leaf()) {
      sink->add(node, buf);
    } else {
      auto& g = node->ensure_grad();
      for (size_t i = 0; i < buf.size(); ++i) g[i] += buf[i];
    }
  }
}

inline void backward(const Tensor& loss) { backward_seeded(loss, 1.0); }

}  // namespace regformer
