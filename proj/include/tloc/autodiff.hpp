#pragma once

// Reverse-mode differentiation over a dynamic tape.
//
// Every op appends one node holding its output value and a closure that maps
// the output gradient onto its inputs. Nodes are appended in evaluation order,
// so the tape is already topologically sorted and backward() is a single
// reverse sweep. backward() never mutates the tape; running it twice gives
// identical gradients.
//
// Broadcasting is limited to a row vector over a matrix (add_row / mul_row).

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tloc/error.hpp"
#include "tloc/tensor.hpp"

namespace tloc {

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] Tape* tape() const noexcept { return tape_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of a backward pass: gradient per node id (empty when the node does
/// not depend on any requires_grad leaf).
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> g) : g_(std::move(g)) {}

  [[nodiscard]] bool has(std::size_t id) const { return id < g_.size() && !g_[id].empty(); }
  [[nodiscard]] bool has(Var v) const { return has(v.id()); }

  /// Gradient of `v`; zeros of the right shape when `v` did not receive any.
  [[nodiscard]] Tensor of(Var v) const {
    if (has(v)) return g_[v.id()];
    return Tensor::zeros(v.shape());
  }
  [[nodiscard]] const Tensor& operator[](Var v) const {
    if (!has(v)) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
    return g_[v.id()];
  }

 private:
  std::vector<Tensor> g_;
};

/// Lazily materialized gradient buffers of an op's inputs.
class GradSink {
 public:
  GradSink(std::vector<Tensor>& grads, const std::vector<std::size_t>& inputs,
           const std::vector<bool>& wants, const Tape& tape)
      : grads_(grads), inputs_(inputs), wants_(wants), tape_(tape) {}

  [[nodiscard]] bool wants(std::size_t k) const { return wants_[k]; }
  Tensor& operator()(std::size_t k);

 private:
  std::vector<Tensor>& grads_;
  const std::vector<std::size_t>& inputs_;
  const std::vector<bool>& wants_;
  const Tape& tape_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& in)>;

  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.op = "leaf";
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    n.value.set_requires_grad(requires_grad);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(std::string op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(op), std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(std::string op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (const Var& v : inputs) {
      if (v.tape() != this) throw ContractError("op '" + n.op + "' mixes nodes from different tapes");
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  [[nodiscard]] const Node& node(std::size_t id) const { return nodes_.at(id); }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  [[nodiscard]] Gradients backward(Var loss) const {
    if (loss.tape() != this) throw ContractError("loss node belongs to another tape");
    const Node& ln = nodes_.at(loss.id());
    if (ln.value.size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_str(ln.value.shape()));
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[loss.id()] = Tensor::ones(ln.value.shape());
    std::vector<bool> wants;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || grads[i].empty()) continue;
      wants.assign(n.inputs.size(), false);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) wants[k] = nodes_[n.inputs[k]].requires_grad;
      GradSink sink(grads, n.inputs, wants, *this);
      n.backward(grads[i], sink);
    }
    return Gradients(std::move(grads));
  }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

inline Tensor& GradSink::operator()(std::size_t k) {
  Tensor& g = grads_[inputs_[k]];
  if (g.empty()) g = Tensor::zeros(tape_.node(inputs_[k]).value.shape());
  return g;
}

// ---------------------------------------------------------------------------
// GEMM helpers (accumulate into `out`).

namespace detail {

// out[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(std::span<double> out, std::span<const double> a, std::span<const double> b,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* br = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
inline void gemm_nt(std::span<double> out, std::span<const double> a, std::span<const double> b,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out[i * n + j] += s;
    }
  }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn(std::span<double> out, std::span<const double> a, std::span<const double> b,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* ar = a.data() + p * k;
    const double* br = b.data() + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ar[i];
      double* o = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_row_for(const Tensor& m, const Tensor& r, const char* op) {
  require_matrix(m, op);
  if (r.size() != m.cols()) {
    throw DimensionError(std::string(op) + ": row of " + shape_str(r.shape()) + " vs matrix " +
                         shape_str(m.shape()));
  }
}

template <typename F, typename DF>
Var unary(const char* name, Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  Tensor yc = y;
  return x.tape()->record(name, std::move(y), {x},
                          [xv, yc = std::move(yc), df](const Tensor& g, GradSink& in) {
                            Tensor& gx = in(0);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yc[i]);
                          });
}

inline bool in_clamp(double x) { return x >= -kClamp && x <= kClamp; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops.

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor y({m, n});
  detail::gemm_nn(y.data(), av.data(), bv.data(), m, k, n);
  return a.tape()->record("matmul", std::move(y), {a, b}, [a, b, m, k, n](const Tensor& g, GradSink& in) {
    if (in.wants(0)) detail::gemm_nt(in(0).data(), g.data(), b.value().data(), m, n, k);
    if (in.wants(1)) detail::gemm_tn(in(1).data(), a.value().data(), g.data(), m, k, n);
  });
}

inline Var add(Var a, Var b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return a.tape()->record("add", std::move(y), {a, b}, [](const Tensor& g, GradSink& in) {
    if (in.wants(0)) in(0) += g;
    if (in.wants(1)) in(1) += g;
  });
}

inline Var sub(Var a, Var b) {
  a.value().require_same_shape(b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape()->record("sub", std::move(y), {a, b}, [](const Tensor& g, GradSink& in) {
    if (in.wants(0)) in(0) += g;
    if (in.wants(1)) {
      Tensor& gb = in(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape()->record("mul", std::move(y), {a, b}, [a, b](const Tensor& g, GradSink& in) {
    if (in.wants(0)) {
      Tensor& ga = in(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (in.wants(1)) {
      Tensor& gb = in(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.data()) v *= s;
  return a.tape()->record("scale", std::move(y), {a}, [s](const Tensor& g, GradSink& in) {
    Tensor& ga = in(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.data()) v += s;
  return a.tape()->record("add_scalar", std::move(y), {a}, [](const Tensor& g, GradSink& in) { in(0) += g; });
}

/// m[T×n] + row[n], the row broadcast over every row of m.
inline Var add_row(Var m, Var row) {
  detail::require_row_for(m.value(), row.value(), "add_row");
  Tensor y = m.value();
  const std::size_t r = y.rows(), c = y.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) += row.value()[j];
  return m.tape()->record("add_row", std::move(y), {m, row}, [r, c](const Tensor& g, GradSink& in) {
    if (in.wants(0)) in(0) += g;
    if (in.wants(1)) {
      Tensor& gr = in(1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g(i, j);
    }
  });
}

/// m[T×n] ⊙ row[n], the row broadcast over every row of m.
inline Var mul_row(Var m, Var row) {
  detail::require_row_for(m.value(), row.value(), "mul_row");
  Tensor y = m.value();
  const std::size_t r = y.rows(), c = y.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(i, j) *= row.value()[j];
  return m.tape()->record("mul_row", std::move(y), {m, row}, [m, row, r, c](const Tensor& g, GradSink& in) {
    if (in.wants(0)) {
      Tensor& gm = in(0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gm(i, j) += g(i, j) * row.value()[j];
    }
    if (in.wants(1)) {
      Tensor& gr = in(1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g(i, j) * m.value()(i, j);
    }
  });
}

inline Var exp(Var x) {
  return detail::unary("exp", x, [](double v) { return safe_exp(v); },
                       [](double v, double y) { return detail::in_clamp(v) ? y : 0.0; });
}

/// Natural log; inputs must be positive.
inline Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw ContractError("log of non-positive value");
  }
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var softplus(Var x) {
  return detail::unary("softplus", x, [](double v) { return tloc::softplus(v); },
                       [](double v, double) { return detail::in_clamp(v) ? tloc::sigmoid(v) : 0.0; });
}

inline Var sigmoid(Var x) {
  return detail::unary("sigmoid", x, [](double v) { return tloc::sigmoid(v); },
                       [](double v, double y) { return detail::in_clamp(v) ? y * (1.0 - y) : 0.0; });
}

inline Var tanh(Var x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var square(Var x) {
  return detail::unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var abs(Var x) {
  return detail::unary("abs", x, [](double v) { return std::abs(v); },
                       [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Var relu(Var x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// sqrt(x + eps); eps keeps the derivative finite at 0.
inline Var sqrt_eps(Var x, double eps = 1e-12) {
  return detail::unary("sqrt", x, [eps](double v) { return std::sqrt(v + eps); },
                       [](double, double y) { return 0.5 / y; });
}

/// 0.5 e² for |e| < 1, |e| − 0.5 otherwise.
inline Var smooth_l1(Var x) {
  return detail::unary("smooth_l1", x,
                       [](double e) { return std::abs(e) < 1.0 ? 0.5 * e * e : std::abs(e) - 0.5; },
                       [](double e, double) { return std::abs(e) < 1.0 ? e : (e > 0 ? 1.0 : -1.0); });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record("sum", Tensor::scalar(s), {x}, [](const Tensor& g, GradSink& in) {
    Tensor& gx = in(0);
    for (double& v : gx.data()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Column means of a matrix, shape [1×n].
inline Var mean_rows(Var x) {
  detail::require_matrix(x.value(), "mean_rows");
  const std::size_t r = x.value().rows(), c = x.value().cols();
  Tensor y({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j] += x.value()(i, j);
  const double inv = 1.0 / static_cast<double>(r);
  for (double& v : y.data()) v *= inv;
  return x.tape()->record("mean_rows", std::move(y), {x}, [r, c, inv](const Tensor& g, GradSink& in) {
    Tensor& gx = in(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx(i, j) += g[j] * inv;
  });
}

// ---------------------------------------------------------------------------
// Structural ops.

inline Var reshape(Var x, Shape s) {
  Tensor y = x.value().reshaped(std::move(s));
  return x.tape()->record("reshape", std::move(y), {x}, [](const Tensor& g, GradSink& in) {
    Tensor& gx = in(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Var concat_cols(Var a, Var b) {
  detail::require_matrix(a.value(), "concat_cols");
  detail::require_matrix(b.value(), "concat_cols");
  if (a.value().rows() != b.value().rows()) throw DimensionError("concat_cols: row count mismatch");
  const std::size_t r = a.value().rows(), ca = a.value().cols(), cb = b.value().cols();
  Tensor y({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) y(i, j) = a.value()(i, j);
    for (std::size_t j = 0; j < cb; ++j) y(i, ca + j) = b.value()(i, j);
  }
  return a.tape()->record("concat_cols", std::move(y), {a, b}, [r, ca, cb](const Tensor& g, GradSink& in) {
    if (in.wants(0)) {
      Tensor& ga = in(0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga(i, j) += g(i, j);
    }
    if (in.wants(1)) {
      Tensor& gb = in(1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb(i, j) += g(i, ca + j);
    }
  });
}

/// Rows picked by index (repeats allowed).
inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  detail::require_matrix(x.value(), "gather_rows");
  if (idx.empty()) throw ContractError("gather_rows: empty index list");
  const std::size_t c = x.value().cols();
  Tensor y({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.value().rows()) throw DimensionError("gather_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) y(i, j) = x.value()(idx[i], j);
  }
  return x.tape()->record("gather_rows", std::move(y), {x}, [idx = std::move(idx), c](const Tensor& g, GradSink& in) {
    Tensor& gx = in(0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx(idx[i], j) += g(i, j);
  });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.value().rows()) throw DimensionError("slice_rows: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, std::move(idx));
}

inline Var reverse_rows(Var x) {
  const std::size_t r = x.value().rows();
  std::vector<std::size_t> idx(r);
  for (std::size_t i = 0; i < r; ++i) idx[i] = r - 1 - i;
  return gather_rows(x, std::move(idx));
}

// ---------------------------------------------------------------------------
// Fused ops.

/// Row-wise layer normalization: gamma ⊙ (x − mean) / sqrt(var + eps) + beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  detail::require_row_for(xv, gamma.value(), "layer_norm");
  detail::require_row_for(xv, beta.value(), "layer_norm");
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor xhat({r, c});
  std::vector<double> inv_std(r);
  Tensor y({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - mu) * inv_std[i];
      y(i, j) = gamma.value()[j] * xhat(i, j) + beta.value()[j];
    }
  }
  return x.tape()->record(
      "layer_norm", std::move(y), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](const Tensor& g, GradSink& in) {
        if (in.wants(1)) {
          Tensor& gg = in(1);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g(i, j) * xhat(i, j);
        }
        if (in.wants(2)) {
          Tensor& gb = in(2);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g(i, j);
        }
        if (in.wants(0)) {
          Tensor& gx = in(0);
          const double invc = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = g(i, j) * gamma.value()[j];
              m1 += dxh;
              m2 += dxh * xhat(i, j);
            }
            m1 *= invc;
            m2 *= invc;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = g(i, j) * gamma.value()[j];
              gx(i, j) += inv_std[i] * (dxh - m1 - xhat(i, j) * m2);
            }
          }
        }
      });
}

/// Σ_t t_t · softmax(p / temperature)_t over a probability track of shape [T] or [T×1].
inline Var soft_argmax(Var p, std::vector<double> times, double temperature) {
  const Tensor& pv = p.value();
  if (pv.size() != times.size()) throw AlignmentError("soft_argmax: track and time axis differ in length");
  if (!(temperature > 0)) throw ContractError("soft_argmax: temperature must be positive");
  const std::size_t n = pv.size();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : pv.data()) mx = std::max(mx, v / temperature);
  std::vector<double> w(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += (w[i] = std::exp(pv[i] / temperature - mx));
  double th = 0.0;
  for (std::size_t i = 0; i < n; ++i) th += (w[i] /= z) * times[i];
  return p.tape()->record("soft_argmax", Tensor::scalar(th), {p},
                          [w = std::move(w), times = std::move(times), th, temperature](const Tensor& g,
                                                                                        GradSink& in) {
                            Tensor& gp = in(0);
                            for (std::size_t i = 0; i < w.size(); ++i)
                              gp[i] += g[0] * w[i] * (times[i] - th) / temperature;
                          });
}

/// Largest entry of a tensor as a scalar; the gradient flows to the first maximum.
inline Var max_all(Var x) {
  const Tensor& xv = x.value();
  if (xv.empty()) throw ContractError("max_all: empty tensor");
  const auto it = std::ranges::max_element(xv.data());
  const auto at = static_cast<std::size_t>(it - xv.data().begin());
  return x.tape()->record("max_all", Tensor::scalar(*it), {x},
                          [at](const Tensor& g, GradSink& in) { in(0)[at] += g[0]; });
}

/// Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 − 1e-7].
inline Var bce(Var p, const std::vector<double>& labels) {
  const Tensor& pv = p.value();
  if (pv.size() != labels.size()) throw AlignmentError("bce: probabilities and labels differ in length");
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  const std::size_t n = pv.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(pv[i], lo, hi);
    s -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  s /= static_cast<double>(n);
  return p.tape()->record("bce", Tensor::scalar(s), {p}, [p, labels, n](const Tensor& g, GradSink& in) {
    Tensor& gp = in(0);
    for (std::size_t i = 0; i < n; ++i) {
      const double q = p.value()[i];
      if (q < lo || q > hi) continue;
      gp[i] += g[0] * (q - labels[i]) / (q * (1.0 - q)) / static_cast<double>(n);
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient checking.

/// Scalar-valued function built on a tape from one input leaf.
using TapeFn = std::function<Var(Tape&, Var)>;

/// Max over `coords` (all coordinates when empty) of
/// |analytic − central| / (|analytic| + |central| + 1e-12), with central
/// differences of step h. Throws EvaluationError when f is not finite.
inline double finite_diff_check(const TapeFn& f, const Tensor& x, double h = 1e-5,
                                std::span<const std::size_t> coords = {}) {
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var y = f(tape, xv);
  if (y.value().size() != 1) throw ContractError("finite_diff_check: f must be scalar");
  if (!std::isfinite(y.value()[0])) throw EvaluationError("finite_diff_check: f(x) is not finite");
  const Tensor grad = tape.backward(y).of(xv);

  auto eval_at = [&](const Tensor& xp) {
    Tape t;
    const double v = f(t, t.constant(xp)).value()[0];
    if (!std::isfinite(v)) throw EvaluationError("finite_diff_check: f(x ± h) is not finite");
    return v;
  };

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  double worst = 0.0;
  Tensor xp = x;
  for (std::size_t i : coords) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = eval_at(xp);
    xp[i] = orig - h;
    const double fm = eval_at(xp);
    xp[i] = orig;
    const double central = (fp - fm) / (2.0 * h);
    const double err = std::abs(grad[i] - central) / (std::abs(grad[i]) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace tloc
