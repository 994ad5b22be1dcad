#pragma once

// Selective state-space layer.
//
// Per layer:  x' = LayerNorm(x)
//             δ  = softplus(Proj_Δ(x')),  B = Proj_B(x'),  C = Proj_C(x')
//             Ā_t = exp(δ_t ⊙ diag(A)),   B̄_t = δ_t ⊙ B_t
//             h_t[c] = Ā_t ⊙ h_{t-1}[c] + B̄_t · x'_t[c]      (one N-vector per channel c)
//             y_t[c] = C_t · h_t[c] + D[c] · x'_t[c] + x_t[c]
//
// A is the HiPPO-LegS matrix shifted by λ·I; only its diagonal enters the
// recurrence. The recurrence runs in O(T·N·d) and returns its final state so
// a sequence can be scanned in chunks.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tloc/autodiff.hpp"
#include "tloc/error.hpp"
#include "tloc/params.hpp"
#include "tloc/rng.hpp"
#include "tloc/tensor.hpp"

namespace tloc {

/// HiPPO-LegS transition matrix (0-indexed):
/// −√(2n+1)·√(2k+1) below the diagonal, −(n+1) on it, 0 above.
inline Tensor hippo_init(std::size_t n) {
  if (n == 0) throw DimensionError("hippo_init: N must be >= 1");
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      a(i, k) = -std::sqrt(2.0 * static_cast<double>(i) + 1.0) * std::sqrt(2.0 * static_cast<double>(k) + 1.0);
    }
    a(i, i) = -(static_cast<double>(i) + 1.0);
  }
  return a;
}

/// A + λ·I.
inline Tensor crash_aware_shift(const Tensor& a, double lambda_shift) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw DimensionError("crash_aware_shift: expected a square matrix, got " + shape_str(a.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) out(i, i) += lambda_shift;
  return out;
}

inline Tensor diagonal(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols()) throw DimensionError("diagonal: expected a square matrix");
  Tensor d({a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) d[i] = a(i, i);
  return d;
}

struct Discretized {
  Tensor abar;  ///< [T×N], diagonal form of exp(δ_t A)
  Tensor bbar;  ///< [T×N]
};

/// Ā_t = exp(δ_t ⊙ diag(A)), B̄_t = δ_t ⊙ B_t. δ must be strictly positive.
inline Discretized discretize(const Tensor& a, const Tensor& delta, const Tensor& bp) {
  const Tensor diag = diagonal(a);
  if (delta.rank() != 2 || delta.cols() != diag.size()) {
    throw DimensionError("discretize: delta " + shape_str(delta.shape()) + " vs N=" + std::to_string(diag.size()));
  }
  delta.require_same_shape(bp, "discretize");
  Discretized out{Tensor(delta.shape()), Tensor(delta.shape())};
  for (std::size_t t = 0; t < delta.rows(); ++t) {
    for (std::size_t n = 0; n < delta.cols(); ++n) {
      const double dt = delta(t, n);
      if (!(dt > 0.0)) throw ContractError("discretize: step sizes must be positive");
      out.abar(t, n) = safe_exp(dt * diag[n]);
      out.bbar(t, n) = dt * bp(t, n);
    }
  }
  return out;
}

/// Running hidden state of one layer: an N-vector per channel.
struct SsmState {
  Tensor h;            ///< [d×N]
  std::size_t t = 0;   ///< steps consumed so far

  SsmState() = default;
  SsmState(std::size_t d, std::size_t n) : h({d, n}) {}

  void reset() {
    for (double& v : h.data()) v = 0.0;
    t = 0;
  }
  [[nodiscard]] bool finite() const { return h.empty() || h.all_finite(); }
};

namespace detail {

struct ScanView {
  std::span<const double> xp, abar, bbar, c, dskip;
  std::size_t steps, d, n;
};

/// The recurrence itself. `h` is [d×N], updated in place. When `hist` is not
/// empty it receives h after every step, [T×d×N]. `y` receives C·h + D·x'.
inline void scan_kernel(const ScanView& v, std::span<double> h, std::span<double> y, std::span<double> hist) {
  const std::size_t d = v.d, n = v.n;
  for (std::size_t t = 0; t < v.steps; ++t) {
    const double* ab = v.abar.data() + t * n;
    const double* bb = v.bbar.data() + t * n;
    const double* cc = v.c.data() + t * n;
    for (std::size_t ch = 0; ch < d; ++ch) {
      const double x = v.xp[t * d + ch];
      double* hc = h.data() + ch * n;
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        hc[k] = ab[k] * hc[k] + bb[k] * x;
        acc += cc[k] * hc[k];
      }
      y[t * d + ch] = acc + v.dskip[ch] * x;
    }
    if (!hist.empty()) std::copy(h.begin(), h.end(), hist.begin() + static_cast<std::ptrdiff_t>(t * d * n));
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw ContractError(std::string("selective_scan: non-finite values in ") + what);
}

}  // namespace detail

struct ScanOutput {
  Tensor y;        ///< [T×d]
  SsmState final;  ///< state after the last step
};

/// Forward recurrence with residual: y_t = C_t·h_t + D ⊙ x'_t + x_t.
/// `residual` is the pre-norm input x; pass an empty tensor to omit it.
inline ScanOutput selective_scan(const Tensor& xprime, const Tensor& residual, const Discretized& disc,
                                 const Tensor& c, const Tensor& d_skip, const SsmState& init) {
  if (xprime.empty()) throw EmptySequenceError("selective_scan: empty sequence");
  detail::require_matrix(xprime, "selective_scan");
  const std::size_t steps = xprime.rows(), d = xprime.cols(), n = disc.abar.cols();
  if (disc.abar.rows() != steps || disc.bbar.shape() != disc.abar.shape() || c.shape() != disc.abar.shape()) {
    throw DimensionError("selective_scan: Ā/B̄/C must all be [T×N]");
  }
  if (d_skip.size() != d) throw DimensionError("selective_scan: D must have d entries");
  if (init.h.rows() != d || init.h.cols() != n) throw DimensionError("selective_scan: state must be [d×N]");
  detail::require_finite(xprime, "x'");
  detail::require_finite(c, "C");
  detail::require_finite(disc.abar, "Ā");
  detail::require_finite(disc.bbar, "B̄");
  if (!init.finite()) throw ContractError("selective_scan: initial state is not finite");

  ScanOutput out{Tensor({steps, d}), init};
  detail::scan_kernel({xprime.data(), disc.abar.data(), disc.bbar.data(), c.data(), d_skip.data(), steps, d, n},
                      out.final.h.data(), out.y.data(), {});
  out.final.t = init.t + steps;
  if (!residual.empty()) {
    residual.require_same_shape(xprime, "selective_scan residual");
    out.y += residual;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable scan.

struct ScanVarOutput {
  Var y;                        ///< C·h + D·x' (no residual)
  SsmState final;
  std::vector<SsmState> captured;  ///< states after `capture_steps[i]` steps
  Tensor contribution;             ///< [N] mean |C_t[k]·h_t[c,k]| over t and c, when requested
};

/// Tape op for the recurrence. The initial state is a constant. States after
/// the step counts in `capture_steps` (each in [0, T]) are returned as well.
inline ScanVarOutput selective_scan(Var xp, Var abar, Var bbar, Var c, Var dskip, const SsmState& init,
                                    const std::vector<std::size_t>& capture_steps = {},
                                    bool track_contribution = false) {
  const Tensor& xv = xp.value();
  const std::size_t steps = xv.rows(), d = xv.cols(), n = abar.value().cols();
  if (abar.value().rows() != steps || bbar.shape() != abar.shape() || c.shape() != abar.shape()) {
    throw DimensionError("selective_scan: Ā/B̄/C must all be [T×N]");
  }
  if (dskip.value().size() != d) throw DimensionError("selective_scan: D must have d entries");
  if (init.h.rows() != d || init.h.cols() != n) throw DimensionError("selective_scan: state must be [d×N]");
  detail::require_finite(xv, "x'");

  std::vector<double> hist(steps * d * n);
  SsmState fin = init;
  Tensor y({steps, d});
  detail::scan_kernel({xv.data(), abar.value().data(), bbar.value().data(), c.value().data(), dskip.value().data(),
                       steps, d, n},
                      fin.h.data(), y.data(), hist);
  fin.t = init.t + steps;

  std::vector<SsmState> captured;
  for (std::size_t k : capture_steps) {
    if (k > steps) throw DimensionError("selective_scan: capture step beyond sequence end");
    SsmState s = init;
    if (k > 0) std::copy_n(hist.begin() + static_cast<std::ptrdiff_t>((k - 1) * d * n), d * n, s.h.data().begin());
    s.t = init.t + k;
    captured.push_back(std::move(s));
  }

  Tensor contribution;
  if (track_contribution) {
    contribution = Tensor({n});
    const Tensor& cv = c.value();
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t ch = 0; ch < d; ++ch)
        for (std::size_t k = 0; k < n; ++k) contribution[k] += std::abs(cv(t, k) * hist[(t * d + ch) * n + k]);
    for (double& v : contribution.data()) v /= static_cast<double>(steps * d);
  }

  Tensor h0 = init.h;
  Var out = xp.tape()->record(
      "selective_scan", std::move(y), {xp, abar, bbar, c, dskip},
      [xp, abar, bbar, c, dskip, hist = std::move(hist), h0 = std::move(h0), steps, d, n](const Tensor& gy,
                                                                                          GradSink& in) {
        const Tensor& x = xp.value();
        const Tensor& ab = abar.value();
        const Tensor& bb = bbar.value();
        const Tensor& cc = c.value();
        const Tensor& ds = dskip.value();
        Tensor gx(x.shape()), gab(ab.shape()), gbb(bb.shape()), gc(cc.shape()), gd(ds.shape());
        std::vector<double> gh(d * n, 0.0);
        for (std::size_t t = steps; t-- > 0;) {
          const double* ht = hist.data() + t * d * n;
          const double* hprev = t > 0 ? hist.data() + (t - 1) * d * n : h0.data().data();
          for (std::size_t ch = 0; ch < d; ++ch) {
            const double g = gy(t, ch);
            const double xv = x(t, ch);
            gd[ch] += g * xv;
            double gxv = g * ds[ch];
            double* ghc = gh.data() + ch * n;
            const double* hc = ht + ch * n;
            const double* hp = hprev + ch * n;
            for (std::size_t k = 0; k < n; ++k) {
              const double ghv = ghc[k] + g * cc(t, k);
              gc(t, k) += g * hc[k];
              gbb(t, k) += ghv * xv;
              gxv += ghv * bb(t, k);
              gab(t, k) += ghv * hp[k];
              ghc[k] = ghv * ab(t, k);
            }
            gx(t, ch) += gxv;
          }
        }
        if (in.wants(0)) in(0) += gx;
        if (in.wants(1)) in(1) += gab;
        if (in.wants(2)) in(2) += gbb;
        if (in.wants(3)) in(3) += gc;
        if (in.wants(4)) in(4) += gd;
      });
  return {out, std::move(fin), std::move(captured), std::move(contribution)};
}

// ---------------------------------------------------------------------------
// Layer parameters.

struct MambaBlockConfig {
  std::size_t layers = 2;
  std::size_t n = 32;  ///< state dimension
  std::size_t d = 64;  ///< model dimension
  bool bidirectional = true;
  double lambda_shift = 0.1;

  void validate() const {
    if (layers < 1) throw ContractError("MambaBlockConfig: layers must be >= 1");
    if (n < 1 || d < 1) throw ContractError("MambaBlockConfig: N and d must be >= 1");
  }
  [[nodiscard]] std::size_t out_dim() const { return bidirectional ? 2 * d : d; }
};

/// One Mamba layer: norm, projections, transition matrix, skip.
struct SsmParams {
  std::size_t n = 0;
  std::size_t d = 0;
  Tensor ln_gamma, ln_beta;  ///< [d]
  Tensor a;                  ///< [N×N], frozen
  Affine proj_delta, proj_b, proj_c;  ///< d → N
  Tensor d_skip;             ///< [d]

  SsmParams() = default;

  /// HiPPO + λ·I transition, projections ~ uniform(±1/√d), D = 1.
  static SsmParams init(std::size_t d, std::size_t n, double lambda_shift, Rng& rng) {
    SsmParams p;
    p.n = n;
    p.d = d;
    p.ln_gamma = Tensor::ones({d});
    p.ln_beta = Tensor::zeros({d});
    p.a = crash_aware_shift(hippo_init(n), lambda_shift);
    p.proj_delta = Affine::uniform(d, n, rng);
    p.proj_b = Affine::uniform(d, n, rng);
    p.proj_c = Affine::uniform(d, n, rng);
    p.d_skip = Tensor::ones({d});
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".ln_gamma", ln_gamma);
    f(prefix + ".ln_beta", ln_beta);
    f(prefix + ".a", a);
    proj_delta.visit(prefix + ".proj_delta", f);
    proj_b.visit(prefix + ".proj_b", f);
    proj_c.visit(prefix + ".proj_c", f);
    f(prefix + ".d_skip", d_skip);
  }

  /// Names of tensors that are never trained.
  static bool is_frozen(const std::string& name) { return name.size() >= 2 && name.substr(name.size() - 2) == ".a"; }
};

struct LayerOutput {
  Var y;  ///< [T×d], residual included
  SsmState final;
  std::vector<SsmState> captured;
  Tensor contribution;
};

/// Differentiable discretization: Ā = exp(δ ⊙ diag(A)) row-broadcast, B̄ = δ ⊙ B.
inline std::pair<Var, Var> discretize(Binder& bind, Var delta, Var bp, const Tensor& a) {
  Var diag = bind.tape().constant(diagonal(a));
  return {exp(mul_row(delta, diag)), mul(delta, bp)};
}

/// Full layer on a tape.
inline LayerOutput ssm_layer(Binder& bind, const SsmParams& p, Var x, const SsmState& init,
                             const std::vector<std::size_t>& capture_steps = {}, bool track_contribution = false) {
  if (x.value().cols() != p.d) {
    throw DimensionError("ssm_layer: input width " + std::to_string(x.value().cols()) + " vs d=" + std::to_string(p.d));
  }
  Var xp = layer_norm(x, bind(p.ln_gamma), bind(p.ln_beta));
  Var delta = softplus(p.proj_delta(bind, xp));
  Var bp = p.proj_b(bind, xp);
  Var cp = p.proj_c(bind, xp);
  auto [abar, bbar] = discretize(bind, delta, bp, p.a);
  ScanVarOutput s = selective_scan(xp, abar, bbar, cp, bind(p.d_skip), init, capture_steps, track_contribution);
  return {add(s.y, x), std::move(s.final), std::move(s.captured), std::move(s.contribution)};
}

/// Forward scan ++ time-reversed backward scan along the feature axis: [T×2d].
inline Var bidirectional_scan(Binder& bind, Var x, const SsmParams& fwd, const SsmParams& bwd) {
  if (fwd.d != bwd.d) throw DimensionError("bidirectional_scan: forward and backward d differ");
  SsmState zf(fwd.d, fwd.n), zb(bwd.d, bwd.n);
  Var yf = ssm_layer(bind, fwd, x, zf).y;
  Var yb = reverse_rows(ssm_layer(bind, bwd, reverse_rows(x), zb).y);
  return concat_cols(yf, yb);
}

// ---------------------------------------------------------------------------
// Stacked encoder.

/// Per-layer states of one direction.
using StackState = std::vector<SsmState>;

struct MambaParams {
  MambaBlockConfig cfg;
  std::vector<SsmParams> fwd;
  std::vector<SsmParams> bwd;  ///< empty unless bidirectional

  static MambaParams init(const MambaBlockConfig& cfg, Rng& rng) {
    cfg.validate();
    MambaParams m;
    m.cfg = cfg;
    for (std::size_t l = 0; l < cfg.layers; ++l) m.fwd.push_back(SsmParams::init(cfg.d, cfg.n, cfg.lambda_shift, rng));
    if (cfg.bidirectional) {
      for (std::size_t l = 0; l < cfg.layers; ++l) m.bwd.push_back(SsmParams::init(cfg.d, cfg.n, cfg.lambda_shift, rng));
    }
    return m;
  }

  [[nodiscard]] StackState zero_state() const { return StackState(cfg.layers, SsmState(cfg.d, cfg.n)); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < fwd.size(); ++l) fwd[l].visit(prefix + ".fwd" + std::to_string(l), f);
    for (std::size_t l = 0; l < bwd.size(); ++l) bwd[l].visit(prefix + ".bwd" + std::to_string(l), f);
  }
};

struct StackOutput {
  Var y;
  StackState final;
  std::vector<StackState> captured;  ///< one StackState per capture step
  std::vector<Tensor> contribution;  ///< per layer, when requested
};

/// Runs one direction's layer stack over x (already time-reversed for the
/// backward direction), carrying per-layer state.
inline StackOutput run_stack(Binder& bind, const std::vector<SsmParams>& layers, Var x, const StackState& init,
                             const std::vector<std::size_t>& capture_steps = {}, bool track_contribution = false) {
  if (init.size() != layers.size()) throw DimensionError("run_stack: state/layer count mismatch");
  StackOutput out;
  out.captured.assign(capture_steps.size(), StackState{});
  Var h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerOutput lo = ssm_layer(bind, layers[l], h, init[l], capture_steps, track_contribution);
    h = lo.y;
    if (track_contribution) out.contribution.push_back(std::move(lo.contribution));
    out.final.push_back(std::move(lo.final));
    for (std::size_t k = 0; k < capture_steps.size(); ++k) out.captured[k].push_back(std::move(lo.captured[k]));
  }
  out.y = h;
  return out;
}

/// Stacked layers, and when bidirectional, [fwd stack(x) ; reverse(bwd stack(reverse x))].
inline Var mamba_block(Binder& bind, const MambaParams& m, Var x) {
  Var yf = run_stack(bind, m.fwd, x, m.zero_state()).y;
  if (!m.cfg.bidirectional) return yf;
  Var yb = reverse_rows(run_stack(bind, m.bwd, reverse_rows(x), m.zero_state()).y);
  return concat_cols(yf, yb);
}

}  // namespace tloc
