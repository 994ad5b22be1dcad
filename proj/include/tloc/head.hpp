#pragma once

// Temporal localization head: banded multi-scale attention, per-frame
// probabilities, peak picking and sub-frame refinement.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tloc/autodiff.hpp"
#include "tloc/error.hpp"
#include "tloc/params.hpp"
#include "tloc/rng.hpp"

namespace tloc {

struct AttentionScales {
  std::vector<double> scales_s{0.2, 1.0, 5.0};

  void validate() const {
    if (scales_s.empty()) throw ContractError("attention needs at least one scale");
    for (std::size_t i = 0; i < scales_s.size(); ++i) {
      if (!(scales_s[i] > 0.0)) throw ContractError("attention scales must be positive");
      if (i > 0 && !(scales_s[i] > scales_s[i - 1])) throw ContractError("attention scales must be ascending");
    }
  }
};

/// Index range [lo, hi) of frames within `width/2` seconds of each frame.
struct Band {
  std::vector<std::size_t> lo, hi;
  bool self_only = true;
};

[[nodiscard]] inline Band make_band(std::span<const double> times, double width) {
  const std::size_t n = times.size();
  Band b;
  b.lo.resize(n);
  b.hi.resize(n);
  const double half = 0.5 * width + 1e-9;
  std::size_t lo = 0, hi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (times[i] - times[lo] > half) ++lo;
    hi = std::max(hi, i + 1);
    while (hi < n && times[hi] - times[i] <= half) ++hi;
    b.lo[i] = lo;
    b.hi[i] = hi;
    if (hi - lo > 1) b.self_only = false;
  }
  return b;
}

/// Softmax attention restricted to a band: y_i = Σ_{j∈band(i)} softmax_j(q_i·k_j/√k) v_j.
inline Var banded_attention(Var q, Var k, Var v, const Band& band) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t n = qv.rows(), dk = qv.cols(), dv = vv.cols();
  if (kv.rows() != n || vv.rows() != n || kv.cols() != dk || band.lo.size() != n) {
    throw DimensionError("banded_attention: Q/K/V/band lengths disagree");
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<std::size_t> offset(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) offset[i + 1] = offset[i] + (band.hi[i] - band.lo[i]);
  std::vector<double> att(offset[n]);
  Tensor y({n, dv});
  for (std::size_t i = 0; i < n; ++i) {
    double* a = att.data() + offset[i];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = band.lo[i]; j < band.hi[i]; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < dk; ++c) s += qv(i, c) * kv(j, c);
      a[j - band.lo[i]] = s * inv;
      mx = std::max(mx, s * inv);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < band.hi[i] - band.lo[i]; ++j) z += (a[j] = std::exp(a[j] - mx));
    for (std::size_t j = 0; j < band.hi[i] - band.lo[i]; ++j) a[j] /= z;
    for (std::size_t j = band.lo[i]; j < band.hi[i]; ++j) {
      const double w = a[j - band.lo[i]];
      for (std::size_t c = 0; c < dv; ++c) y(i, c) += w * vv(j, c);
    }
  }
  return q.tape()->record(
      "banded_attention", std::move(y), {q, k, v},
      [q, k, v, band, att = std::move(att), offset = std::move(offset), n, dk, dv, inv](const Tensor& g,
                                                                                      GradSink& in) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
        std::vector<double> gs;
        for (std::size_t i = 0; i < n; ++i) {
          const double* a = att.data() + offset[i];
          const std::size_t lo = band.lo[i], w = band.hi[i] - lo;
          gs.assign(w, 0.0);
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) {
            double ga = 0.0;
            for (std::size_t c = 0; c < dv; ++c) {
              ga += g(i, c) * vv(lo + j, c);
              gv(lo + j, c) += a[j] * g(i, c);
            }
            gs[j] = ga;
            dot += a[j] * ga;
          }
          for (std::size_t j = 0; j < w; ++j) {
            const double s = a[j] * (gs[j] - dot) * inv;
            for (std::size_t c = 0; c < dk; ++c) {
              gq(i, c) += s * kv(lo + j, c);
              gk(lo + j, c) += s * qv(i, c);
            }
          }
        }
        if (in.wants(0)) in(0) += gq;
        if (in.wants(1)) in(1) += gk;
        if (in.wants(2)) in(2) += gv;
      });
}

struct HeadConfig {
  std::size_t in_dim = 131;
  std::size_t key_dim = 16;
  std::size_t hidden = 32;
  AttentionScales scales{};
  double p_min = 0.5;
};

struct ScaleHead {
  Tensor wq, wk, wv;  ///< [in×key], [in×key], [in×in]
};

struct HeadParams {
  HeadConfig cfg;
  std::vector<ScaleHead> heads;
  Affine mlp1, mlp2;

  static HeadParams init(const HeadConfig& cfg, Rng& rng) {
    cfg.scales.validate();
    HeadParams h;
    h.cfg = cfg;
    const double lim = 1.0 / std::sqrt(static_cast<double>(cfg.in_dim));
    auto draw = [&](Shape s, double scale) {
      Tensor t(std::move(s));
      for (double& v : t.data()) v = rng.uniform(-scale, scale);
      return t;
    };
    for (std::size_t s = 0; s < cfg.scales.scales_s.size(); ++s) {
      h.heads.push_back({draw({cfg.in_dim, cfg.key_dim}, lim), draw({cfg.in_dim, cfg.key_dim}, lim),
                         draw({cfg.in_dim, cfg.in_dim}, 0.1 * lim)});
    }
    h.mlp1 = Affine::uniform(cfg.in_dim, cfg.hidden, rng);
    h.mlp2 = Affine::uniform(cfg.hidden, 1, rng);
    return h;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t s = 0; s < heads.size(); ++s) {
      const std::string p = prefix + ".att" + std::to_string(s);
      f(p + ".wq", heads[s].wq);
      f(p + ".wk", heads[s].wk);
      f(p + ".wv", heads[s].wv);
    }
    mlp1.visit(prefix + ".mlp1", f);
    mlp2.visit(prefix + ".mlp2", f);
  }
};

struct AttentionOutput {
  Var y;
  std::size_t degenerate_scales = 0;  ///< scales whose band held only the frame itself
};

/// x + mean over scales of banded attention at that scale's window width.
inline AttentionOutput multi_scale_attention(Binder& bind, const HeadParams& p, Var x, std::span<const double> times) {
  const std::size_t rows = x.value().rows();
  if (rows == 0 || rows != times.size()) throw AlignmentError("attention: features and times differ");
  if (x.value().cols() != p.cfg.in_dim) throw DimensionError("attention: input width does not match head");
  AttentionOutput out;
  Var acc;
  for (std::size_t s = 0; s < p.heads.size(); ++s) {
    const Band band = make_band(times, p.cfg.scales.scales_s[s]);
    if (band.self_only && rows > 1) ++out.degenerate_scales;
    const auto& h = p.heads[s];
    Var ys = banded_attention(matmul(x, bind(h.wq)), matmul(x, bind(h.wk)), matmul(x, bind(h.wv)), band);
    acc = acc.valid() ? add(acc, ys) : ys;
  }
  out.y = add(x, scale(acc, 1.0 / static_cast<double>(p.heads.size())));
  return out;
}

/// sigmoid(mlp2(tanh(mlp1(x)))) per frame, [T×1].
inline Var frame_probabilities(Binder& bind, const HeadParams& p, Var x) {
  return sigmoid(p.mlp2(bind, tanh(p.mlp1(bind, x))));
}

inline Var head_forward(Binder& bind, const HeadParams& p, Var x, std::span<const double> times) {
  return frame_probabilities(bind, p, multi_scale_attention(bind, p, x, times).y);
}

// ---------------------------------------------------------------------------
// Peak picking and refinement (inference side, plain values).

struct ProbTrack {
  std::vector<double> t;
  std::vector<double> p;

  [[nodiscard]] std::size_t size() const noexcept { return t.size(); }
  [[nodiscard]] bool empty() const noexcept { return t.empty(); }
};

struct Peak {
  std::size_t index = 0;
  double t = 0.0;
  double confidence = 0.0;
  bool valid = false;
};

/// Global maximum, earliest on ties; valid when confidence ≥ p_min.
[[nodiscard]] inline Peak detect_peak(const ProbTrack& track, double p_min = 0.5) {
  if (track.empty()) throw ContractError("detect_peak: empty track");
  if (track.p.size() != track.t.size()) throw AlignmentError("detect_peak: malformed track");
  std::size_t best = 0;
  for (std::size_t i = 1; i < track.size(); ++i)
    if (track.p[i] > track.p[best]) best = i;
  return {best, track.t[best], track.p[best], track.p[best] >= p_min};
}

/// Local maxima at or above p_min (debug listing for multi-event tracks).
[[nodiscard]] inline std::vector<double> local_peaks(const ProbTrack& track, double p_min = 0.5) {
  std::vector<double> out;
  for (std::size_t i = 0; i < track.size(); ++i) {
    const double l = i > 0 ? track.p[i - 1] : -1.0;
    const double r = i + 1 < track.size() ? track.p[i + 1] : -1.0;
    if (track.p[i] >= p_min && track.p[i] > l && track.p[i] >= r) out.push_back(track.t[i]);
  }
  return out;
}

/// Learned sub-frame offset over the ±2-frame probability neighbourhood.
struct RefineParams {
  Affine l1, l2;
  bool trained = false;

  static constexpr std::size_t kInputs = 5;

  static RefineParams init(Rng& rng, std::size_t hidden = 8) {
    return {Affine::uniform(kInputs, hidden, rng), Affine::uniform(hidden, 1, rng), false};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    l1.visit(prefix + ".l1", f);
    l2.visit(prefix + ".l2", f);
  }
};

/// Half the smaller spacing to the peak's neighbours, and the allowed offset range.
struct OffsetBounds {
  double half_interval = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

[[nodiscard]] inline OffsetBounds offset_bounds(const ProbTrack& track, std::size_t k) {
  const std::size_t n = track.size();
  if (n < 2) return {};
  double spacing = std::numeric_limits<double>::infinity();
  if (k > 0) spacing = std::min(spacing, track.t[k] - track.t[k - 1]);
  if (k + 1 < n) spacing = std::min(spacing, track.t[k + 1] - track.t[k]);
  const double half = 0.5 * spacing;
  return {half, k == 0 ? 0.0 : -half, k + 1 == n ? 0.0 : half};
}

/// Probabilities at k−2..k+2 minus p_k (edges replicated).
[[nodiscard]] inline Tensor refine_inputs(const ProbTrack& track, std::size_t k) {
  Tensor x({1, RefineParams::kInputs});
  const auto n = static_cast<std::ptrdiff_t>(track.size());
  for (std::ptrdiff_t o = -2; o <= 2; ++o) {
    const auto j = std::clamp(static_cast<std::ptrdiff_t>(k) + o, std::ptrdiff_t{0}, n - 1);
    x[static_cast<std::size_t>(o + 2)] = track.p[static_cast<std::size_t>(j)] - track.p[k];
  }
  return x;
}

/// Raw network output in (−1, 1) on a tape (scaled by the caller).
inline Var refine_unit(Binder& bind, const RefineParams& r, Var inputs) {
  return tanh(r.l2(bind, tanh(r.l1(bind, inputs))));
}

/// Vertex of the parabola through the three probabilities around k, in seconds.
[[nodiscard]] inline double parabolic_offset(const ProbTrack& track, std::size_t k) {
  if (k == 0 || k + 1 >= track.size()) return 0.0;
  const double a = track.p[k - 1], b = track.p[k], c = track.p[k + 1];
  const double den = a - 2.0 * b + c;
  if (den >= 0.0) return 0.0;
  const double spacing = 0.5 * (track.t[k + 1] - track.t[k - 1]);
  return 0.5 * (a - c) / den * spacing;
}

[[nodiscard]] inline double refine_boundary(const ProbTrack& track, std::size_t k, const RefineParams* refine) {
  if (k >= track.size()) throw ContractError("refine_boundary: peak index outside track");
  const OffsetBounds b = offset_bounds(track, k);
  double off;
  if (refine && refine->trained) {
    Tape tape;
    Binder bind(tape, false);
    off = b.half_interval * refine_unit(bind, *refine, tape.constant(refine_inputs(track, k))).value()[0];
  } else {
    off = parabolic_offset(track, k);
  }
  return std::clamp(off, b.lo, b.hi);
}

struct TemporalPrediction {
  ProbTrack track;
  std::optional<double> t_coarse_s;
  std::optional<double> t_refined_s;
  double delta_offset_s = 0.0;
  double confidence = 0.0;
  bool valid = false;
  std::vector<double> peaks;  ///< all local maxima ≥ p_min
};

[[nodiscard]] inline TemporalPrediction predict_from_track(ProbTrack track, const RefineParams* refine,
                                                           double p_min = 0.5) {
  TemporalPrediction out;
  const Peak pk = detect_peak(track, p_min);
  out.confidence = pk.confidence;
  out.valid = pk.valid;
  out.peaks = local_peaks(track, p_min);
  if (pk.valid) {
    out.delta_offset_s = refine_boundary(track, pk.index, refine);
    out.t_coarse_s = pk.t;
    out.t_refined_s = pk.t + out.delta_offset_s;
  }
  out.track = std::move(track);
  return out;
}

}  // namespace tloc
