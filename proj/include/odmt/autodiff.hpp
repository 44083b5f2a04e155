#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "odmt/parameter.hpp"
#include "odmt/tensor.hpp"

namespace odmt {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Parameters that received a gradient from one backward pass.
using GradientSet = std::vector<Parameter*>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep over node ids is a valid topological order for backpropagation.
/// A tape is single-use: record one forward pass, call backward once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  /// With gradients disabled, parameters enter as constants and no
  /// backward closures are kept (inference passes).
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push("constant", std::move(value), false, nullptr, false); }

  /// Leaf bound to a parameter; repeated calls for the same parameter share one node.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Var v = push("parameter", p.value, grad_enabled_, nullptr, false);
    param_nodes_[&p] = v.id();
    return v;
  }

  /// Records an op result. `allow_neg_inf` lets masking ops emit the blocked sentinel.
  Var record(const char* op, Tensor value, bool needs_grad, BackwardFn fn, bool allow_neg_inf = false) {
    return push(op, std::move(value), needs_grad, std::move(fn), allow_neg_inf);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-allocated on first touch.
  Tensor& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.data.empty(); }
  const Tensor& grad(Var v) const { return nodes_[v.id()].grad; }

  GradientSet backward(Var root) {
    if (!grad_enabled_) throw Error("backward: tape was recorded with gradients disabled");
    if (root.value().size() != 1) throw Error("backward: root must be a scalar, got shape " + shape_str(root.value().shape));
    GradientSet touched;
    if (!nodes_[root.id()].needs_grad) return touched;
    grad_of(root.id()).data[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.data.empty()) continue;
      if (!n.grad.all_finite()) throw Error(std::string("non-finite gradient at '") + n.op + "'");
      if (n.backward) n.backward(*this, n.grad);
    }
    for (auto& [param, id] : param_nodes_) {
      if (!has_grad(id)) continue;
      const Tensor& g = nodes_[id].grad;
      for (std::size_t j = 0; j < g.size(); ++j) param->grad.data[j] += g.data[j];
      touched.push_back(param);
    }
    std::sort(touched.begin(), touched.end(), [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
    return touched;
  }

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool needs_grad;
    BackwardFn backward;
  };

  Var push(const char* op, Tensor value, bool needs_grad, BackwardFn fn, bool allow_neg_inf) {
    for (double x : value.data) {
      if (std::isfinite(x)) continue;
      if (allow_neg_inf && x == -std::numeric_limits<double>::infinity()) continue;
      throw Error(std::string("non-finite value produced by '") + op + "'");
    }
    nodes_.push_back(Node{op, std::move(value), Tensor{}, needs_grad, needs_grad ? std::move(fn) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

inline constexpr double kBlocked = -std::numeric_limits<double>::infinity();

/// Additive attention mask: 0 = visible, kBlocked = forbidden.
/// Either one [L,L] mask shared by every group, or one per group.
struct AttentionMask {
  std::size_t seq_len = 0;
  std::size_t groups = 1;
  std::vector<double> additive;

  static AttentionMask open(std::size_t len) { return {len, 1, std::vector<double>(len * len, 0.0)}; }

  bool shared() const { return groups == 1; }
  double at(std::size_t g, std::size_t i, std::size_t j) const {
    const std::size_t base = shared() ? 0 : g * seq_len * seq_len;
    return additive[base + i * seq_len + j];
  }
  bool blocked(std::size_t g, std::size_t i, std::size_t j) const { return at(g, i, j) == kBlocked; }
  std::size_t blocked_count() const {
    return static_cast<std::size_t>(std::count(additive.begin(), additive.end(), kBlocked));
  }
};

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("vars recorded on different tapes");
  return a.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

template <class F, class D>
Var unary(Var a, const char* op, F f, D df) {
  Tape& t = a.tape();
  Tensor out(a.value().shape);
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.record(op, std::move(out), a.needs_grad(), [ia, df](Tape& tp, const Tensor& g) {
    const auto& xv = tp.value(ia).data;
    auto& ga = tp.grad_of(ia).data;
    for (std::size_t i = 0; i < xv.size(); ++i) ga[i] += g.data[i] * df(xv[i]);
  });
}

}  // namespace detail

inline Var detach(Var a) { return a.tape().record("detach", a.value(), false, nullptr, true); }

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) throw Error("matmul: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nn(m, n, k, A.data.data(), B.data.data(), out.data.data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(ia))
      kernels::gemm_nt(m, k, n, g.data.data(), tp.value(ib).data.data(), tp.grad_of(ia).data.data(), true);
    if (tp.needs_grad(ib))
      kernels::gemm_tn(k, n, m, tp.value(ia).data.data(), g.data.data(), tp.grad_of(ib).data.data(), true);
  });
}

/// a [M,K] times b^T where b is [N,K].
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) throw Error("matmul_nt: dims " + shape_str(A.shape) + " x " + shape_str(B.shape) + "^T");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm_nt(m, n, k, A.data.data(), B.data.data(), out.data.data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_nt", std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(ia))
      kernels::gemm_nn(m, k, n, g.data.data(), tp.value(ib).data.data(), tp.grad_of(ia).data.data(), true);
    if (tp.needs_grad(ib))
      kernels::gemm_tn(n, k, m, g.data.data(), tp.value(ia).data.data(), tp.grad_of(ib).data.data(), true);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape& tp, const Tensor& g) {
    for (std::size_t id : {ia, ib}) {
      if (!tp.needs_grad(id)) continue;
      auto& gd = tp.grad_of(id).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(ia)) {
      auto& gd = tp.grad_of(ia).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gd = tp.grad_of(ib).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] -= g.data[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(ia)) {
      auto& gd = tp.grad_of(ia).data;
      const auto& bv = tp.value(ib).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i] * bv[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gd = tp.grad_of(ib).data;
      const auto& av = tp.value(ia).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i] * av[i];
    }
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

inline Var scale(Var a, double s) {
  return detail::unary(a, "scale", [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Var add_scalar(Var a, double s) {
  return detail::unary(a, "add_scalar", [s](double x) { return x + s; }, [](double) { return 1.0; });
}

/// Broadcast-add a length-N vector to every row of a [M,N] matrix.
inline Var add_row(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias);
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  if (b.size() != A.cols()) throw Error("add_row: bias " + shape_str(b.shape) + " vs " + shape_str(A.shape));
  Tensor out = A;
  const std::size_t m = A.rows(), n = A.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += b.data[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return t.record("add_row", std::move(out), a.needs_grad() || bias.needs_grad(), [=](Tape& tp, const Tensor& g) {
    if (tp.needs_grad(ia)) {
      auto& gd = tp.grad_of(ia).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i];
    }
    if (tp.needs_grad(ib)) {
      auto& gd = tp.grad_of(ib).data;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gd[c] += g.data[r * n + c];
    }
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), a.needs_grad(), [ia](Tape& tp, const Tensor& g) {
    for (double& x : tp.grad_of(ia).data) x += g.data[0];
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

inline Var log(Var a) {
  for (double x : a.value().data)
    if (!(x > 0.0)) throw Error("log: non-positive input");
  return detail::unary(a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var exp(Var a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Var leaky_relu(Var a, double slope = 0.01) {
  return detail::unary(
      a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x) { return x > 0.0 ? 1.0 : slope; });
}

inline Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x); });
}

inline Var sigmoid(Var a) {
  auto s = [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
  return detail::unary(a, "sigmoid", s, [s](double x) {
    const double y = s(x);
    return y * (1.0 - y);
  });
}

inline Var tanh(Var a) {
  return detail::unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double x) {
    const double y = std::tanh(x);
    return 1.0 - y * y;
  });
}

/// Row-wise layer normalization of a [M,N] matrix with learned gain/shift.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gamma);
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (gamma.value().size() != n || beta.value().size() != n) throw Error("layer_norm: gain/shift size mismatch");
  Tensor out(X.shape);
  std::vector<double> xhat(X.size()), rstd(m);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = X.data.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (xr[c] - mu) * rstd[r];
      out.data[r * n + c] = xhat[r * n + c] * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
  return t.record("layer_norm", std::move(out), ng,
                  [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tp, const Tensor& g) {
                    const auto& gam = tp.value(ig).data;
                    if (tp.needs_grad(ig)) {
                      auto& gg = tp.grad_of(ig).data;
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < n; ++c) gg[c] += g.data[r * n + c] * xhat[r * n + c];
                    }
                    if (tp.needs_grad(ib)) {
                      auto& gb = tp.grad_of(ib).data;
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < n; ++c) gb[c] += g.data[r * n + c];
                    }
                    if (tp.needs_grad(ix)) {
                      auto& gx = tp.grad_of(ix).data;
                      std::vector<double> dxhat(n);
                      for (std::size_t r = 0; r < m; ++r) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < n; ++c) {
                          dxhat[c] = g.data[r * n + c] * gam[c];
                          mean_d += dxhat[c];
                          mean_dx += dxhat[c] * xhat[r * n + c];
                        }
                        mean_d /= static_cast<double>(n);
                        mean_dx /= static_cast<double>(n);
                        for (std::size_t c = 0; c < n; ++c)
                          gx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                      }
                    }
                  });
}

/// Row softmax; kBlocked entries get probability exactly 0. A row with no
/// visible entry yields all zeros.
inline Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  Tensor out(X.shape);
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = X.data.data() + r * n;
    double mx = kBlocked;
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, xr[c]);
    if (mx == kBlocked) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c)
      if (xr[c] != kBlocked) z += (out.data[r * n + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] /= z;
  }
  const std::size_t ix = x.id();
  const std::size_t self = x.tape().size();
  return x.tape().record("softmax_rows", std::move(out), x.needs_grad(), [=](Tape& tp, const Tensor& g) {
    const auto& p = tp.value(self).data;
    auto& gx = tp.grad_of(ix).data;
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += p[r * n + c] * g.data[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += p[r * n + c] * (g.data[r * n + c] - dot);
    }
  });
}

/// Multi-head scaled dot-product attention over `groups` independent
/// sequences of length L packed as [groups*L, D] rows. Blocked keys are
/// skipped outright, so they contribute exactly nothing forward or backward.
inline Var masked_attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads) {
  Tape& t = detail::same_tape(q, k);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  detail::require_same_shape(Q, K, "masked_attention");
  detail::require_same_shape(Q, V, "masked_attention");
  const std::size_t L = mask.seq_len, D = Q.cols();
  if (L == 0 || Q.rows() % L != 0) throw Error("masked_attention: rows not a multiple of mask side");
  const std::size_t G = Q.rows() / L;
  if (!mask.shared() && mask.groups != G) throw Error("masked_attention: per-group mask count mismatch");
  if (heads == 0 || D % heads != 0) throw Error("masked_attention: model dim not divisible by heads");
  const std::size_t dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out(Q.shape);
  std::vector<double> probs(G * heads * L * L, 0.0);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = Q.data.data() + (g * L + i) * D + h * dh;
        double* p = probs.data() + ((g * heads + h) * L + i) * L;
        double mx = kBlocked;
        for (std::size_t j = 0; j < L; ++j) {
          if (mask.blocked(g, i, j)) continue;
          const double* kj = K.data.data() + (g * L + j) * D + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * sc + mask.at(g, i, j);
          mx = std::max(mx, p[j]);
        }
        if (mx == kBlocked) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (mask.blocked(g, i, j)) continue;
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        double* oi = out.data.data() + (g * L + i) * D + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          if (mask.blocked(g, i, j)) continue;
          p[j] /= z;
          const double* vj = V.data.data() + (g * L + j) * D + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const bool ng = q.needs_grad() || k.needs_grad() || v.needs_grad();
  return t.record("masked_attention", std::move(out), ng,
                  [=, probs = std::move(probs), mask = mask](Tape& tp, const Tensor& g) {
                    const auto& Qd = tp.value(iq).data;
                    const auto& Kd = tp.value(ik).data;
                    const auto& Vd = tp.value(iv).data;
                    const bool gq = tp.needs_grad(iq), gk = tp.needs_grad(ik), gv = tp.needs_grad(iv);
                    double* dQ = gq ? tp.grad_of(iq).data.data() : nullptr;
                    double* dK = gk ? tp.grad_of(ik).data.data() : nullptr;
                    double* dV = gv ? tp.grad_of(iv).data.data() : nullptr;
                    std::vector<double> dp(L);
                    for (std::size_t gi = 0; gi < G; ++gi) {
                      for (std::size_t h = 0; h < heads; ++h) {
                        for (std::size_t i = 0; i < L; ++i) {
                          const double* p = probs.data() + ((gi * heads + h) * L + i) * L;
                          const double* go = g.data.data() + (gi * L + i) * D + h * dh;
                          double acc = 0.0;
                          for (std::size_t j = 0; j < L; ++j) {
                            dp[j] = 0.0;
                            if (mask.blocked(gi, i, j)) continue;
                            const double* vj = Vd.data() + (gi * L + j) * D + h * dh;
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                            dp[j] = s;
                            acc += p[j] * s;
                            if (dV) {
                              double* dvj = dV + (gi * L + j) * D + h * dh;
                              for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * go[c];
                            }
                          }
                          const double* qi = Qd.data() + (gi * L + i) * D + h * dh;
                          for (std::size_t j = 0; j < L; ++j) {
                            if (mask.blocked(gi, i, j)) continue;
                            const double ds = p[j] * (dp[j] - acc) * sc;
                            const double* kj = Kd.data() + (gi * L + j) * D + h * dh;
                            if (dQ) {
                              double* dqi = dQ + (gi * L + i) * D + h * dh;
                              for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                            }
                            if (dK) {
                              double* dkj = dK + (gi * L + j) * D + h * dh;
                              for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                            }
                          }
                        }
                      }
                    }
                  });
}

/// Gathers rows of a [M,N] matrix; index -1 produces a zero row.
inline Var gather_rows(Var a, std::vector<std::ptrdiff_t> index) {
  const Tensor& A = a.value();
  const std::size_t n = A.cols();
  Tensor out = Tensor::matrix(index.size(), n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    if (static_cast<std::size_t>(index[r]) >= A.rows()) throw Error("gather_rows: index out of range");
    std::copy_n(A.data.data() + static_cast<std::size_t>(index[r]) * n, n, out.data.data() + r * n);
  }
  const std::size_t ia = a.id();
  return a.tape().record("gather_rows", std::move(out), a.needs_grad(),
                         [=, index = std::move(index)](Tape& tp, const Tensor& g) {
                           auto& ga = tp.grad_of(ia).data;
                           for (std::size_t r = 0; r < index.size(); ++r) {
                             if (index[r] < 0) continue;
                             double* dst = ga.data() + static_cast<std::size_t>(index[r]) * n;
                             for (std::size_t c = 0; c < n; ++c) dst[c] += g.data[r * n + c];
                           }
                         });
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t n = parts.front().value().cols();
  std::size_t rows = 0;
  bool ng = false;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw Error("vars recorded on different tapes");
    if (p.value().cols() != n) throw Error("concat_rows: column mismatch");
    rows += p.value().rows();
    ng = ng || p.needs_grad();
  }
  Tensor out = Tensor::matrix(rows, n);
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (node id, row offset)
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off * n));
    spans.emplace_back(p.id(), off);
    off += p.value().rows();
  }
  return t.record("concat_rows", std::move(out), ng, [spans = std::move(spans), n](Tape& tp, const Tensor& g) {
    for (auto [id, offset] : spans) {
      if (!tp.needs_grad(id)) continue;
      auto& gd = tp.grad_of(id).data;
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[offset * n + i];
    }
  });
}

/// Row-wise select: row r comes from `a` when take_a[r], else from `b`.
inline Var blend_rows(Var a, Var b, std::vector<char> take_a) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "blend_rows");
  const std::size_t n = a.value().cols();
  if (take_a.size() != a.value().rows()) throw Error("blend_rows: selector length mismatch");
  Tensor out = b.value();
  for (std::size_t r = 0; r < take_a.size(); ++r)
    if (take_a[r]) std::copy_n(a.value().data.data() + r * n, n, out.data.data() + r * n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("blend_rows", std::move(out), a.needs_grad() || b.needs_grad(),
                  [=, take_a = std::move(take_a)](Tape& tp, const Tensor& g) {
                    for (std::size_t r = 0; r < take_a.size(); ++r) {
                      const std::size_t id = take_a[r] ? ia : ib;
                      if (!tp.needs_grad(id)) continue;
                      double* dst = tp.grad_of(id).data.data() + r * n;
                      for (std::size_t c = 0; c < n; ++c) dst[c] += g.data[r * n + c];
                    }
                  });
}

/// Inverted dropout with a mask drawn from `rng`. p == 0 is the identity.
inline Var dropout(Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw Error("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> m(a.value().size());
  for (double& x : m) x = keep(rng) ? s : 0.0;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= m[i];
  const std::size_t ia = a.id();
  return a.tape().record("dropout", std::move(out), a.needs_grad(), [ia, m = std::move(m)](Tape& tp, const Tensor& g) {
    auto& gd = tp.grad_of(ia).data;
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i] * m[i];
  });
}

/// Replaces entries flagged in `blocked` (row-major, same size) with kBlocked.
/// Blocked entries pass no gradient back.
inline Var block_entries(Var scores, std::vector<char> blocked) {
  if (blocked.size() != scores.value().size()) throw Error("block_entries: mask size mismatch");
  Tensor out = scores.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (blocked[i]) out.data[i] = kBlocked;
  const std::size_t is = scores.id();
  return scores.tape().record(
      "block_entries", std::move(out), scores.needs_grad(),
      [is, blocked = std::move(blocked)](Tape& tp, const Tensor& g) {
        auto& gd = tp.grad_of(is).data;
        for (std::size_t i = 0; i < gd.size(); ++i)
          if (!blocked[i]) gd[i] += g.data[i];
      },
      true);
}

/// Elementwise mean of same-shaped vars; kBlocked entries stay blocked.
inline Var average(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("average: no inputs");
  Tape& t = parts.front().tape();
  const Shape shape = parts.front().value().shape;
  Tensor out(shape);
  bool ng = false;
  for (const Var& p : parts) {
    if (p.value().shape != shape) throw Error("average: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += p.value().data[i];
    ng = ng || p.needs_grad();
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (double& x : out.data) x *= inv;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return t.record(
      "average", std::move(out), ng,
      [ids = std::move(ids), inv](Tape& tp, const Tensor& g) {
        for (std::size_t id : ids) {
          if (!tp.needs_grad(id)) continue;
          auto& gd = tp.grad_of(id).data;
          for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[i] * inv;
        }
      },
      true);
}

/// Per-row log-softmax over visible (non-blocked) entries of a score row.
inline std::vector<double> log_softmax_visible(std::span<const double> row, double temperature = 1.0) {
  std::vector<double> out(row.size(), kBlocked);
  double mx = kBlocked;
  for (double x : row)
    if (x != kBlocked) mx = std::max(mx, x / temperature);
  if (mx == kBlocked) return out;
  double z = 0.0;
  for (double x : row)
    if (x != kBlocked) z += std::exp(x / temperature - mx);
  const double lz = mx + std::log(z);
  for (std::size_t c = 0; c < row.size(); ++c)
    if (row[c] != kBlocked) out[c] = row[c] / temperature - lz;
  return out;
}

/// Sum over rows of -log softmax(scores[r])[target[r]], the softmax running
/// over visible entries only. Values at blocked entries are never read.
inline Var softmax_cross_entropy(Var scores, std::vector<std::size_t> targets) {
  const Tensor& S = scores.value();
  const std::size_t m = S.rows(), n = S.cols();
  if (targets.size() != m) throw Error("softmax_cross_entropy: one target per row required");
  double loss = 0.0;
  std::vector<double> probs(m * n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= n) throw Error("softmax_cross_entropy: target out of range");
    auto row = S.row(r);
    if (row[targets[r]] == kBlocked) throw Error("softmax_cross_entropy: target column is blocked");
    const auto ls = log_softmax_visible(row);
    loss -= ls[targets[r]];
    for (std::size_t c = 0; c < n; ++c)
      if (ls[c] != kBlocked) probs[r * n + c] = std::exp(ls[c]);
  }
  const std::size_t is = scores.id();
  return scores.tape().record("softmax_cross_entropy", Tensor::scalar(loss), scores.needs_grad(),
                              [=, probs = std::move(probs), targets = std::move(targets)](Tape& tp, const Tensor& g) {
                                auto& gd = tp.grad_of(is).data;
                                const auto& sv = tp.value(is).data;
                                for (std::size_t r = 0; r < m; ++r)
                                  for (std::size_t c = 0; c < n; ++c) {
                                    if (sv[r * n + c] == kBlocked) continue;
                                    const double y = c == targets[r] ? 1.0 : 0.0;
                                    gd[r * n + c] += g.data[0] * (probs[r * n + c] - y);
                                  }
                              });
}

/// T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T)) over visible
/// entries. The teacher is a constant: no gradient flows into it.
inline Var distill_kl(const Tensor& teacher, Var student, double temperature) {
  if (!(temperature > 0.0)) throw Error("distill_kl: temperature must be positive");
  const Tensor& S = student.value();
  detail::require_same_shape(teacher, S, "distill_kl");
  const std::size_t m = S.rows(), n = S.cols();
  double total = 0.0;
  std::vector<double> diff(m * n, 0.0);  // q - p per visible entry
  for (std::size_t r = 0; r < m; ++r) {
    auto srow = S.row(r);
    auto trow = teacher.row(r);
    for (std::size_t c = 0; c < n; ++c)
      if ((srow[c] == kBlocked) != (trow[c] == kBlocked))
        throw Error("distill_kl: teacher and student blocked entries differ");
    const auto lt = log_softmax_visible(trow, temperature);
    const auto ls = log_softmax_visible(srow, temperature);
    double kl = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (srow[c] == kBlocked) continue;
      const double p = std::exp(lt[c]);
      kl += p * (lt[c] - ls[c]);
      diff[r * n + c] = std::exp(ls[c]) - p;
    }
    total += kl;
  }
  const double t2 = temperature * temperature;
  const double loss = t2 * total / static_cast<double>(m);
  const std::size_t is = student.id();
  const double coef = temperature / static_cast<double>(m);
  return student.tape().record("distill_kl", Tensor::scalar(loss), student.needs_grad(),
                               [=, diff = std::move(diff)](Tape& tp, const Tensor& g) {
                                 auto& gd = tp.grad_of(is).data;
                                 for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g.data[0] * coef * diff[i];
                               });
}

}  // namespace odmt
