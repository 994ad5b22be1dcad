#pragma once

// Parameter plumbing shared by every trainable component.
//
// Parameter structs own their tensors and expose
//   template <class F> void visit(const std::string& prefix, F&& f)
// calling f(name, Tensor&) in a fixed order. That single traversal drives
// checkpointing, the optimizer, regularization and gradient checks.
//
// A Binder places parameters on a tape lazily, one leaf per tensor, and keeps
// the tensor → node association so gradients can be collected afterwards.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tloc/autodiff.hpp"
#include "tloc/rng.hpp"
#include "tloc/tensor.hpp"

namespace tloc {

class Binder {
 public:
  explicit Binder(Tape& tape, bool trainable = true) : tape_(tape), trainable_(trainable) {}

  /// Leaf for a trainable parameter.
  Var operator()(const Tensor& p) { return bind(p, trainable_); }
  /// Leaf for a frozen parameter (never receives gradient).
  Var frozen(const Tensor& p) { return bind(p, false); }

  /// Binds `p` to an existing node instead of a fresh leaf (gradient checks).
  void set(const Tensor& p, Var v) { bound_.insert_or_assign(&p, v); }

  [[nodiscard]] Tape& tape() const noexcept { return tape_; }
  [[nodiscard]] bool trainable() const noexcept { return trainable_; }

  /// Node bound to `p`, if `p` was used in the forward pass.
  [[nodiscard]] const Var* find(const Tensor& p) const {
    auto it = bound_.find(&p);
    return it == bound_.end() ? nullptr : &it->second;
  }

  /// Gradient of `p` (zeros when `p` did not take part in the loss).
  [[nodiscard]] Tensor grad(const Gradients& g, const Tensor& p) const {
    const Var* v = find(p);
    return v ? g.of(*v) : Tensor::zeros(p.shape());
  }

 private:
  Var bind(const Tensor& p, bool grad) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var v = tape_.leaf(p, grad);
    bound_.emplace(&p, v);
    return v;
  }

  Tape& tape_;
  bool trainable_;
  std::map<const Tensor*, Var> bound_;
};

/// y = x·W + b with W [in×out].
struct Affine {
  Tensor w;
  Tensor b;

  Affine() = default;
  Affine(std::size_t in, std::size_t out) : w({in, out}), b({out}) {}

  /// W ~ uniform(±1/√in), b = bias_init.
  static Affine uniform(std::size_t in, std::size_t out, Rng& rng, double bias_init = 0.0) {
    Affine a(in, out);
    const double lim = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : a.w.data()) v = rng.uniform(-lim, lim);
    for (double& v : a.b.data()) v = bias_init;
    return a;
  }

  [[nodiscard]] std::size_t in_dim() const { return w.rows(); }
  [[nodiscard]] std::size_t out_dim() const { return w.cols(); }

  Var operator()(Binder& bind, Var x) const { return add_row(matmul(x, bind(w)), bind(b)); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

/// Number of scalars in a parameter struct.
template <typename P>
std::size_t param_count(P& p) {
  std::size_t n = 0;
  p.visit("", [&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

}  // namespace tloc
