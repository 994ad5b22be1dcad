#pragma once

// Hierarchical three-tier inference.
//
// Raw features are standardized per video and projected by a shared adapter.
// Each tier (LOW, MED, HIGH) owns a bidirectional encoder with its own state
// size plus a localization head. The head sees the encoder output together
// with the per-video robust z-score of the motion profile,
// ṽ = (v − median)/(1.4826·MAD), and two soft gates σ((ṽ − τ)/T) built from
// the learned thresholds.
//
// Inference: the LOW tier scans the whole video at the coarse rate. Plan
// segments at MED or above whose coarse probability clears the MED trigger are
// re-run at the MED rate, and plan HIGH segments clearing the HIGH trigger at
// the fine rate. At each time the finest tier that ran provides the track.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tloc/autodiff.hpp"
#include "tloc/error.hpp"
#include "tloc/hash.hpp"
#include "tloc/head.hpp"
#include "tloc/params.hpp"
#include "tloc/rng.hpp"
#include "tloc/sampler.hpp"
#include "tloc/sequence.hpp"
#include "tloc/ssm.hpp"
#include "tloc/synthgen.hpp"
#include "tloc/tensor.hpp"
#include "tloc/tensor_io.hpp"

namespace tloc {

// ---------------------------------------------------------------------------
// Configuration.

struct ModelConfig {
  std::size_t feature_dim = FeatureLayout::kDim;
  std::size_t d = 64;
  std::size_t layers = 2;
  std::array<std::size_t, 3> state_dims{16, 32, 64};
  double lambda_shift = 0.1;
  std::size_t key_dim = 16;
  std::size_t hidden = 32;
  std::vector<double> scales_s{0.2, 1.0, 5.0};
  double p_min = 0.5;
  double gate_temperature = 0.5;
  double tau_med_init = 0.84;  ///< robust z-score units
  double tau_high_init = 1.64;
  double tau_upper = 12.0;     ///< τ_high stays below this bound
  double med_trigger = 0.3;
  double high_trigger = 0.6;
  double med_pad_s = 2.0;
  double alpha = 0.7;
  double segment_s = 1.0;
  TierRates rates{};
  double backtrack_s = 2.0;
  std::uint64_t seed = 1;

  [[nodiscard]] std::size_t head_in_dim() const { return 2 * d + 3; }
  [[nodiscard]] double max_scale() const { return *std::max_element(scales_s.begin(), scales_s.end()); }

  void validate() const {
    if (feature_dim == 0 || d == 0 || layers == 0) throw ContractError("model: dimensions must be positive");
    for (auto n : state_dims)
      if (n < 4) throw ContractError("model: state dims must be at least 4");
    AttentionScales{scales_s}.validate();
    rates.validate();
    if (!(tau_med_init > 0.0 && tau_med_init < tau_high_init && tau_high_init < tau_upper)) {
      throw ContractError("model: need 0 < tau_med_init < tau_high_init < tau_upper");
    }
    if (!(gate_temperature > 0.0)) throw ContractError("model: gate temperature must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("model: alpha must lie in [0, 1]");
    if (!(segment_s > 0.0)) throw ContractError("model: segment length must be positive");
  }

  [[nodiscard]] MotionOptions motion() const { return {alpha, segment_s, false}; }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"model.feature_dim", feature_dim},
            {"model.d", d},
            {"model.layers", layers},
            {"model.n_low", state_dims[0]},
            {"model.n_med", state_dims[1]},
            {"model.n_high", state_dims[2]},
            {"model.lambda_shift", lambda_shift},
            {"model.key_dim", key_dim},
            {"model.hidden", hidden},
            {"model.scales_s", scales_s},
            {"model.p_min", p_min},
            {"model.gate_temperature", gate_temperature},
            {"model.tau_med_init", tau_med_init},
            {"model.tau_high_init", tau_high_init},
            {"model.tau_upper", tau_upper},
            {"model.seed", seed},
            {"pipeline.med_trigger", med_trigger},
            {"pipeline.high_trigger", high_trigger},
            {"pipeline.med_pad_s", med_pad_s},
            {"sampler.alpha", alpha},
            {"sampler.segment_s", segment_s},
            {"sampler.rate_low", rates.low},
            {"sampler.rate_med", rates.med},
            {"sampler.rate_high", rates.high},
            {"sampler.backtrack_s", backtrack_s}};
  }

  /// Reads every key of to_json() that is present in `j`; other keys are ignored.
  void update(const nlohmann::json& j) {
    auto get = [&](const char* k, auto& v) {
      if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
    };
    get("model.feature_dim", feature_dim);
    get("model.d", d);
    get("model.layers", layers);
    get("model.n_low", state_dims[0]);
    get("model.n_med", state_dims[1]);
    get("model.n_high", state_dims[2]);
    get("model.lambda_shift", lambda_shift);
    get("model.key_dim", key_dim);
    get("model.hidden", hidden);
    get("model.scales_s", scales_s);
    get("model.p_min", p_min);
    get("model.gate_temperature", gate_temperature);
    get("model.tau_med_init", tau_med_init);
    get("model.tau_high_init", tau_high_init);
    get("model.tau_upper", tau_upper);
    get("model.seed", seed);
    get("pipeline.med_trigger", med_trigger);
    get("pipeline.high_trigger", high_trigger);
    get("pipeline.med_pad_s", med_pad_s);
    get("sampler.alpha", alpha);
    get("sampler.segment_s", segment_s);
    get("sampler.rate_low", rates.low);
    get("sampler.rate_med", rates.med);
    get("sampler.rate_high", rates.high);
    get("sampler.backtrack_s", backtrack_s);
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.update(j);
    c.validate();
    return c;
  }
};

struct WindowConfig {
  double window_s = 300.0;
  double overlap_s = 60.0;
  double reset_interval_s = 600.0;
  bool resets = true;

  void validate() const {
    if (!(overlap_s > 0.0 && overlap_s < window_s)) throw ContractError("window: need 0 < overlap_s < window_s");
    if (!(reset_interval_s >= window_s - overlap_s)) {
      throw ContractError("window: reset interval must be at least the window stride");
    }
  }
  [[nodiscard]] double stride_s() const { return window_s - overlap_s; }

  /// Window start times covering [0, duration).
  [[nodiscard]] std::vector<double> starts(double duration_s) const {
    validate();
    std::vector<double> out{0.0};
    while (out.back() + window_s < duration_s) out.push_back(out.back() + stride_s());
    return out;
  }
};

// ---------------------------------------------------------------------------
// Feature adapter.

/// Per-column standardization statistics of one video.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> scale;
  std::vector<std::size_t> flagged;  ///< zero-variance columns (passed through with unit scale)

  static Standardization fit(const Tensor& f) {
    detail::require_matrix(f, "standardize");
    if (f.rows() == 0) throw EmptySequenceError("standardize: no frames");
    const std::size_t n = f.rows(), d = f.cols();
    Standardization s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0), {}};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) s.mean[c] += f(i, c);
    for (double& m : s.mean) m /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) var[c] += (f(i, c) - s.mean[c]) * (f(i, c) - s.mean[c]);
    for (std::size_t c = 0; c < d; ++c) {
      const double sd = std::sqrt(var[c] / static_cast<double>(n));
      if (sd > 1e-12) {
        s.scale[c] = sd;
      } else {
        s.flagged.push_back(c);
      }
    }
    return s;
  }

  [[nodiscard]] Tensor apply(const Tensor& f) const {
    if (f.cols() != mean.size()) throw DimensionError("standardize: column count differs from fitted statistics");
    Tensor z = f;
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t c = 0; c < z.cols(); ++c) z(i, c) = (z(i, c) - mean[c]) / scale[c];
    return z;
  }
};

struct AdapterParams {
  Affine proj;

  static AdapterParams init(std::size_t in, std::size_t out, Rng& rng) { return {Affine::uniform(in, out, rng)}; }

  Var operator()(Binder& bind, Var z) const { return proj(bind, z); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(prefix + ".proj", f);
  }
};

struct AdaptedFeatures {
  FeatureSequence features;
  std::vector<std::size_t> flagged_columns;
};

/// Standardize per column, then project through the adapter.
[[nodiscard]] inline AdaptedFeatures adapt_features(const FeatureSequence& raw, const AdapterParams& adapter) {
  raw.validate();
  if (raw.dim() != adapter.proj.in_dim()) throw DimensionError("adapt_features: adapter expects a different width");
  const auto st = Standardization::fit(raw.features);
  Tape tape;
  Binder bind(tape, false);
  FeatureSequence out{raw.timestamps, adapter(bind, tape.constant(st.apply(raw.features))).value(), raw.source_fps,
                      raw.duration_s};
  return {std::move(out), st.flagged};
}

// ---------------------------------------------------------------------------
// Model.

struct TierModel {
  MambaParams encoder;
  HeadParams head;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    encoder.visit(prefix + ".enc", f);
    head.visit(prefix + ".head", f);
  }
};

struct HybridModel {
  ModelConfig cfg;
  AdapterParams adapter;
  std::array<TierModel, 3> tiers;
  RefineParams refine;
  Tensor theta;  ///< [2] threshold logits

  static HybridModel init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed, "init");
    HybridModel m;
    m.cfg = cfg;
    m.adapter = AdapterParams::init(cfg.feature_dim, cfg.d, rng);
    HeadConfig hc;
    hc.in_dim = cfg.head_in_dim();
    hc.key_dim = cfg.key_dim;
    hc.hidden = cfg.hidden;
    hc.scales = AttentionScales{cfg.scales_s};
    hc.p_min = cfg.p_min;
    for (std::size_t t = 0; t < 3; ++t) {
      MambaBlockConfig mc{cfg.layers, cfg.state_dims[t], cfg.d, true, cfg.lambda_shift};
      m.tiers[t].encoder = MambaParams::init(mc, rng);
      m.tiers[t].head = HeadParams::init(hc, rng);
    }
    m.refine = RefineParams::init(rng);
    m.theta = Tensor({2});
    m.set_thresholds(cfg.tau_med_init, cfg.tau_high_init);
    return m;
  }

  [[nodiscard]] const TierModel& tier(Tier t) const { return tiers[static_cast<std::size_t>(t)]; }

  /// (τ_med, τ_high) in robust z-score units:
  /// τ_med = U·σ(θ₀), τ_high = τ_med + (U − τ_med)·σ(θ₁).
  [[nodiscard]] std::pair<double, double> thresholds() const {
    const double u = cfg.tau_upper;
    const double med = u * sigmoid(theta[0]);
    return {med, med + (u - med) * sigmoid(theta[1])};
  }

  void set_thresholds(double med, double high) {
    const double u = cfg.tau_upper;
    if (!(med > 0.0 && med < high && high < u)) throw ContractError("thresholds must satisfy 0 < med < high < upper");
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    theta[0] = logit(med / u);
    theta[1] = logit((high - med) / (u - med));
  }

  /// Keeps the logits where the sigmoid is still numerically informative.
  void clamp_thresholds() {
    for (double& v : theta.data()) v = std::clamp(v, -30.0, 30.0);
  }

  template <typename F>
  void visit(F&& f) {
    adapter.visit("adapter", f);
    static constexpr const char* kNames[] = {"low", "med", "high"};
    for (std::size_t t = 0; t < 3; ++t) tiers[t].visit(kNames[t], f);
    refine.visit("refine", f);
    f("thresholds.theta", theta);
  }
};

/// Names of tensors excluded from optimization.
[[nodiscard]] inline bool is_frozen_param(const std::string& name) { return SsmParams::is_frozen(name); }

// ---------------------------------------------------------------------------
// Per-video context.

/// Motion profile for an arbitrary feature layout: the default layout uses
/// its grid and flow columns, anything else uses all columns with no flow.
[[nodiscard]] inline MotionProfile motion_profile_for(const FeatureSequence& f, const MotionOptions& opt) {
  if (f.dim() == FeatureLayout::kDim) return profile_from_features(f, opt);
  return motion_variance(f, FlowField(f.frames(), Tensor({1, 1})), opt);
}

struct VideoContext {
  const FeatureSequence* raw = nullptr;
  Tensor z;                     ///< standardized features
  std::vector<std::size_t> flagged;
  MotionProfile profile;
  double v_median = 0.0;
  double v_scale = 1.0;         ///< 1.4826·MAD of the segment scores
  std::vector<double> vtilde;   ///< per frame, robust z-score of the segment score

  VideoContext(const FeatureSequence& f, const ModelConfig& cfg) : raw(&f) {
    f.validate();
    if (f.dim() != cfg.feature_dim) throw DimensionError("video features do not match the model's feature_dim");
    auto st = Standardization::fit(f.features);
    z = st.apply(f.features);
    flagged = std::move(st.flagged);
    profile = motion_profile_for(f, cfg.motion());
    v_median = percentile(profile.v, 0.5);
    std::vector<double> dev;
    for (double v : profile.v) dev.push_back(std::abs(v - v_median));
    const double mad = 1.4826 * percentile(dev, 0.5);
    v_scale = mad > 1e-12 ? mad : 1.0;
    vtilde.resize(f.frames());
    for (std::size_t i = 0; i < f.frames(); ++i) vtilde[i] = (segment_value(f.timestamps[i]) - v_median) / v_scale;
  }

  [[nodiscard]] double segment_value(double t) const {
    const auto k = static_cast<std::ptrdiff_t>(std::floor((t - profile.t0) / profile.segment_length_s));
    const auto n = static_cast<std::ptrdiff_t>(profile.v.size());
    return profile.v[static_cast<std::size_t>(std::clamp(k, std::ptrdiff_t{0}, n - 1))];
  }

  [[nodiscard]] const std::vector<double>& times() const { return raw->timestamps; }
  [[nodiscard]] double duration() const { return raw->duration_s; }
  [[nodiscard]] double source_fps() const { return raw->source_fps; }

  /// Plan thresholds in raw motion units for the model's learned τ.
  [[nodiscard]] Thresholds thresholds(const HybridModel& m) const {
    auto [med, high] = m.thresholds();
    return {v_median + high * v_scale, v_median + med * v_scale, true, false};
  }

  [[nodiscard]] SamplingPlan plan(const HybridModel& m) const {
    PlanOptions po;
    po.rates = m.cfg.rates;
    po.backtrack_s = m.cfg.backtrack_s;
    po.source_fps = source_fps();
    return build_plan(profile, thresholds(m), duration() / 60.0, po);
  }
};

/// Frames of [t0, t1) sampled at `rate_fps` by nearest timestamp.
[[nodiscard]] inline std::vector<std::size_t> stream_indices(const std::vector<double>& times, double t0, double t1,
                                                             double rate_fps) {
  SamplingPlan p;
  p.segments.push_back({t0, t1, Tier::Low, rate_fps});
  return select_frames(times, p);
}

// ---------------------------------------------------------------------------
// Tier forward pass.

/// Soft gates [T×2] = σ((ṽ − τ_med)/T), σ((ṽ − τ_high)/T) with τ from θ.
inline Var threshold_gates(Var theta, std::vector<double> vtilde, double upper, double temperature) {
  const Tensor& th = theta.value();
  if (th.size() != 2) throw DimensionError("threshold_gates: theta must hold two logits");
  auto clamped = [](double x) { return x >= -30.0 && x <= 30.0; };
  const double s0 = sigmoid(th[0]), s1 = sigmoid(th[1]);
  const double med = upper * s0, high = med + (upper - med) * s1;
  const std::size_t n = vtilde.size();
  Tensor g({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    g(i, 0) = sigmoid((vtilde[i] - med) / temperature);
    g(i, 1) = sigmoid((vtilde[i] - high) / temperature);
  }
  const double dmed0 = clamped(th[0]) ? upper * s0 * (1.0 - s0) : 0.0;
  const double dhigh0 = dmed0 * (1.0 - s1);
  const double dhigh1 = clamped(th[1]) ? (upper - med) * s1 * (1.0 - s1) : 0.0;
  Tensor gv = g;
  return theta.tape()->record("threshold_gates", std::move(g), {theta},
                              [gv = std::move(gv), n, temperature, dmed0, dhigh0, dhigh1](const Tensor& go,
                                                                                         GradSink& in) {
                                double gmed = 0.0, ghigh = 0.0;
                                for (std::size_t i = 0; i < n; ++i) {
                                  gmed -= go(i, 0) * gv(i, 0) * (1.0 - gv(i, 0)) / temperature;
                                  ghigh -= go(i, 1) * gv(i, 1) * (1.0 - gv(i, 1)) / temperature;
                                }
                                Tensor& gt = in(0);
                                gt[0] += gmed * dmed0 + ghigh * dhigh0;
                                gt[1] += ghigh * dhigh1;
                              });
}

struct TierPassOptions {
  const StackState* fwd_init = nullptr;
  const StackState* bwd_init = nullptr;
  std::vector<std::size_t> fwd_capture;  ///< step counts from the first frame
  std::vector<std::size_t> bwd_capture;  ///< step counts from the last frame
  bool track_contribution = false;
};

struct TierPass {
  Var probs;  ///< [T×1]
  StackOutput fwd;
  StackOutput bwd;
  std::vector<double> times;
};

/// Encoder over adapted inputs `x` [T×d] with explicit initial states.
struct EncoderPass {
  Var y;
  StackOutput fwd;
  StackOutput bwd;
};

inline EncoderPass encode(Binder& bind, const MambaParams& enc, Var x, const TierPassOptions& opt = {}) {
  const StackState zero = enc.zero_state();
  EncoderPass out;
  out.fwd = run_stack(bind, enc.fwd, x, opt.fwd_init ? *opt.fwd_init : zero, opt.fwd_capture, opt.track_contribution);
  out.bwd = run_stack(bind, enc.bwd, reverse_rows(x), opt.bwd_init ? *opt.bwd_init : zero, opt.bwd_capture,
                      opt.track_contribution);
  out.y = concat_cols(out.fwd.y, reverse_rows(out.bwd.y));
  return out;
}

/// Tier model over the frames `idx` of a video: adapter → encoder → [y, ṽ, gates] → head.
inline TierPass tier_forward(Binder& bind, const HybridModel& m, Tier tier, const VideoContext& ctx,
                             const std::vector<std::size_t>& idx, const TierPassOptions& opt = {}) {
  if (idx.empty()) throw EmptySequenceError("tier_forward: no frames selected");
  const std::size_t n = idx.size(), dim = ctx.z.cols();
  Tensor z({n, dim});
  std::vector<double> vt(n), times(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(ctx.z.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * dim), dim,
                z.data().begin() + static_cast<std::ptrdiff_t>(i * dim));
    vt[i] = ctx.vtilde[idx[i]];
    times[i] = ctx.times()[idx[i]];
  }
  Tape& tape = bind.tape();
  Var x = m.adapter(bind, tape.constant(std::move(z)));
  const TierModel& tm = m.tier(tier);
  EncoderPass enc = encode(bind, tm.encoder, x, opt);
  Var gates = threshold_gates(bind(m.theta), vt, m.cfg.tau_upper, m.cfg.gate_temperature);
  Var extra = concat_cols(tape.constant(Tensor({n, 1}, vt)), gates);
  Var probs = head_forward(bind, tm.head, concat_cols(enc.y, extra), times);
  return {probs, std::move(enc.fwd), std::move(enc.bwd), std::move(times)};
}

[[nodiscard]] inline ProbTrack to_track(const TierPass& p) {
  const Tensor& v = p.probs.value();
  return {p.times, std::vector<double>(v.data().begin(), v.data().end())};
}

/// Inference-only tier track over frames `idx`.
[[nodiscard]] inline ProbTrack tier_track(const HybridModel& m, Tier tier, const VideoContext& ctx,
                                          const std::vector<std::size_t>& idx) {
  Tape tape;
  Binder bind(tape, false);
  return to_track(tier_forward(bind, m, tier, ctx, idx));
}

// ---------------------------------------------------------------------------
// Hierarchical processing.

struct Interval {
  double t0 = 0.0;
  double t1 = 0.0;
};

/// Union of intervals, sorted; touching intervals merge.
[[nodiscard]] inline std::vector<Interval> merge_intervals(std::vector<Interval> v) {
  std::sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) { return a.t0 < b.t0; });
  std::vector<Interval> out;
  for (const auto& iv : v) {
    if (!out.empty() && iv.t0 <= out.back().t1) {
      out.back().t1 = std::max(out.back().t1, iv.t1);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

[[nodiscard]] inline bool covered(const std::vector<Interval>& v, double t) {
  return std::any_of(v.begin(), v.end(), [t](const Interval& iv) { return t >= iv.t0 && t < iv.t1; });
}

/// Largest coarse probability within `reach_s` of [t0, t1).
[[nodiscard]] inline double coarse_max(const ProbTrack& coarse, double t0, double t1, double reach_s) {
  double best = 0.0;
  for (std::size_t i = 0; i < coarse.size(); ++i)
    if (coarse.t[i] >= t0 - reach_s && coarse.t[i] < t1 + reach_s) best = std::max(best, coarse.p[i]);
  return best;
}

struct HierarchicalResult {
  TemporalPrediction prediction;
  SamplingPlan plan;
  ProbTrack coarse;
  std::vector<Interval> med_regions;
  std::vector<Interval> high_regions;
  std::vector<std::string> tiers_used;
  std::size_t frames_processed = 0;
  double med_fraction = 0.0;   ///< seconds covered by MED regions / duration
  double high_fraction = 0.0;
};

/// Finest-tier-wins fusion of the coarse, MED and HIGH tracks.
[[nodiscard]] inline ProbTrack fuse_tiers(const ProbTrack& coarse, const ProbTrack& med, const ProbTrack& high,
                                          const std::vector<Interval>& med_regions,
                                          const std::vector<Interval>& high_regions) {
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < coarse.size(); ++i)
    if (!covered(med_regions, coarse.t[i]) && !covered(high_regions, coarse.t[i]))
      pts.emplace_back(coarse.t[i], coarse.p[i]);
  for (std::size_t i = 0; i < med.size(); ++i)
    if (!covered(high_regions, med.t[i])) pts.emplace_back(med.t[i], med.p[i]);
  for (std::size_t i = 0; i < high.size(); ++i) pts.emplace_back(high.t[i], high.p[i]);
  std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  ProbTrack out;
  for (const auto& [t, p] : pts) {
    if (!out.empty() && t <= out.t.back()) continue;
    out.t.push_back(t);
    out.p.push_back(p);
  }
  return out;
}

/// Runs the hierarchy given an already computed coarse track.
[[nodiscard]] inline HierarchicalResult refine_hierarchy(const HybridModel& m, const VideoContext& ctx,
                                                         const SamplingPlan& plan, ProbTrack coarse,
                                                         std::size_t coarse_frames) {
  HierarchicalResult r;
  r.plan = plan;
  r.coarse = std::move(coarse);
  r.frames_processed = coarse_frames;
  r.tiers_used.push_back("LOW");
  const double dur = ctx.duration();
  const double seg_reach = 0.5 * m.cfg.segment_s;

  std::vector<Interval> med, high;
  for (const auto& s : plan.segments) {
    if (s.tier == Tier::Low) continue;
    const double cp = coarse_max(r.coarse, s.t0, s.t1, seg_reach);
    if (cp > m.cfg.med_trigger) {
      med.push_back({std::max(0.0, s.t0 - m.cfg.med_pad_s), std::min(dur, s.t1 + m.cfg.med_pad_s)});
    }
    if (s.tier == Tier::High && cp > m.cfg.high_trigger) high.push_back({s.t0, std::min(dur, s.t1)});
  }
  r.med_regions = merge_intervals(std::move(med));
  r.high_regions = merge_intervals(std::move(high));

  auto run_regions = [&](Tier tier, const std::vector<Interval>& regions, double& fraction) {
    ProbTrack acc;
    double rate = m.cfg.rates.of(tier);
    if (ctx.source_fps() > 0.0) rate = std::min(rate, ctx.source_fps());
    for (const auto& iv : regions) {
      fraction += (iv.t1 - iv.t0) / dur;
      auto idx = stream_indices(ctx.times(), iv.t0, iv.t1, rate);
      if (idx.empty()) continue;
      ProbTrack tr = tier_track(m, tier, ctx, idx);
      r.frames_processed += idx.size();
      acc.t.insert(acc.t.end(), tr.t.begin(), tr.t.end());
      acc.p.insert(acc.p.end(), tr.p.begin(), tr.p.end());
    }
    if (!acc.empty()) r.tiers_used.push_back(tier_name(tier));
    return acc;
  };
  ProbTrack med_track = run_regions(Tier::Med, r.med_regions, r.med_fraction);
  ProbTrack high_track = run_regions(Tier::High, r.high_regions, r.high_fraction);

  ProbTrack fused = fuse_tiers(r.coarse, med_track, high_track, r.med_regions, r.high_regions);
  r.prediction = predict_from_track(std::move(fused), &m.refine, m.cfg.p_min);
  return r;
}

[[nodiscard]] inline std::vector<std::size_t> coarse_indices(const HybridModel& m, const VideoContext& ctx) {
  double rate = m.cfg.rates.low;
  if (ctx.source_fps() > 0.0) rate = std::min(rate, ctx.source_fps());
  return stream_indices(ctx.times(), ctx.times().front(), ctx.times().back() + 1e-6, rate);
}

[[nodiscard]] inline HierarchicalResult hierarchical_process(const HybridModel& m, const VideoContext& ctx,
                                                             const SamplingPlan& plan) {
  const auto idx = coarse_indices(m, ctx);
  return refine_hierarchy(m, ctx, plan, tier_track(m, Tier::Low, ctx, idx), idx.size());
}

[[nodiscard]] inline HierarchicalResult hierarchical_process(const HybridModel& m, const FeatureSequence& video) {
  VideoContext ctx(video, m.cfg);
  return hierarchical_process(m, ctx, ctx.plan(m));
}

// ---------------------------------------------------------------------------
// Sliding windows.

/// Elementwise max over tracks on a shared time axis (times matched exactly).
[[nodiscard]] inline ProbTrack fuse_max(const std::vector<ProbTrack>& tracks) {
  std::map<double, double> acc;
  for (const auto& tr : tracks)
    for (std::size_t i = 0; i < tr.size(); ++i) {
      auto [it, fresh] = acc.emplace(tr.t[i], tr.p[i]);
      if (!fresh) it->second = std::max(it->second, tr.p[i]);
    }
  ProbTrack out;
  for (const auto& [t, p] : acc) {
    out.t.push_back(t);
    out.p.push_back(p);
  }
  return out;
}

/// Zeroes every state dimension except the `keep` with the largest contribution.
inline void retain_top_states(StackState& states, const std::vector<Tensor>& contribution, std::size_t keep) {
  for (std::size_t l = 0; l < states.size(); ++l) {
    const Tensor& c = contribution.at(l);
    const std::size_t n = c.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return c[a] > c[b]; });
    std::vector<bool> kept(n, false);
    for (std::size_t k = 0; k < std::min(keep, n); ++k) kept[order[k]] = true;
    Tensor& h = states[l].h;
    for (std::size_t ch = 0; ch < h.rows(); ++ch)
      for (std::size_t k = 0; k < n; ++k)
        if (!kept[k]) h(ch, k) = 0.0;
  }
}

struct WindowedTrack {
  ProbTrack track;
  std::vector<double> starts;
  std::vector<double> resets;  ///< window starts where state was reset
};

/// Coarse-tier track computed window by window with carried encoder state.
[[nodiscard]] inline WindowedTrack windowed_coarse_track(const HybridModel& m, const VideoContext& ctx,
                                                         const WindowConfig& cfg) {
  WindowedTrack out;
  const double dur = ctx.duration();
  out.starts = cfg.starts(dur);
  const std::size_t nw = out.starts.size();
  const auto all = coarse_indices(m, ctx);
  const auto& times = ctx.times();

  std::vector<std::vector<std::size_t>> win(nw);
  for (std::size_t k = 0; k < nw; ++k) {
    const double s = out.starts[k], e = std::min(dur, s + cfg.window_s);
    for (std::size_t i : all)
      if (times[i] >= s && (times[i] < e || k + 1 == nw)) win[k].push_back(i);
    if (win[k].empty()) throw ContractError("sliding window: window without frames");
  }
  std::vector<bool> reset(nw, false);
  if (cfg.resets) {
    for (double mark = cfg.reset_interval_s; mark < dur; mark += cfg.reset_interval_s) {
      auto it = std::find_if(out.starts.begin(), out.starts.end(), [&](double s) { return s >= mark - 1e-9; });
      if (it == out.starts.end()) break;
      reset[static_cast<std::size_t>(it - out.starts.begin())] = true;
    }
  }
  for (std::size_t k = 0; k < nw; ++k)
    if (reset[k]) out.resets.push_back(out.starts[k]);

  const TierModel& tm = m.tier(Tier::Low);
  const std::size_t keep = tm.encoder.cfg.n / 4;
  auto steps_before = [&](const std::vector<std::size_t>& w, double t) {
    return static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [&](std::size_t i) { return times[i] < t; }));
  };

  // Forward direction, left to right: the state entering window k+1 is the
  // state after the frames of window k that precede its start.
  std::vector<StackState> fwd_init(nw, tm.encoder.zero_state());
  for (std::size_t k = 0; k + 1 < nw; ++k) {
    Tape tape;
    Binder bind(tape, false);
    TierPassOptions opt;
    opt.fwd_init = &fwd_init[k];
    opt.fwd_capture = {steps_before(win[k], out.starts[k + 1])};
    opt.track_contribution = reset[k + 1];
    auto pass = tier_forward(bind, m, Tier::Low, ctx, win[k], opt);
    fwd_init[k + 1] = std::move(pass.fwd.captured[0]);
    if (reset[k + 1]) retain_top_states(fwd_init[k + 1], pass.fwd.contribution, keep);
  }
  // Backward direction, right to left: the state entering window k from the
  // right is window k+1's backward state after the frames at or beyond window
  // k's end.
  std::vector<StackState> bwd_init(nw, tm.encoder.zero_state());
  for (std::size_t k = nw; k-- > 1;) {
    Tape tape;
    Binder bind(tape, false);
    TierPassOptions opt;
    opt.fwd_init = &fwd_init[k];
    opt.bwd_init = &bwd_init[k];
    const double end_prev = out.starts[k - 1] + cfg.window_s;
    opt.bwd_capture = {win[k].size() - steps_before(win[k], end_prev)};
    opt.track_contribution = reset[k];
    auto pass = tier_forward(bind, m, Tier::Low, ctx, win[k], opt);
    bwd_init[k - 1] = std::move(pass.bwd.captured[0]);
    if (reset[k]) retain_top_states(bwd_init[k - 1], pass.bwd.contribution, keep);
  }

  const double crop = 0.5 * m.cfg.max_scale();
  std::vector<ProbTrack> pieces;
  for (std::size_t k = 0; k < nw; ++k) {
    Tape tape;
    Binder bind(tape, false);
    TierPassOptions opt;
    opt.fwd_init = &fwd_init[k];
    opt.bwd_init = &bwd_init[k];
    ProbTrack tr = to_track(tier_forward(bind, m, Tier::Low, ctx, win[k], opt));
    const double lo = k == 0 ? -1e300 : out.starts[k] + crop;
    const double hi = k + 1 == nw ? 1e300 : out.starts[k] + cfg.window_s - crop;
    ProbTrack kept;
    for (std::size_t i = 0; i < tr.size(); ++i)
      if (tr.t[i] >= lo - 1e-9 && tr.t[i] < hi) {
        kept.t.push_back(tr.t[i]);
        kept.p.push_back(tr.p[i]);
      }
    pieces.push_back(std::move(kept));
  }
  out.track = fuse_max(pieces);
  return out;
}

[[nodiscard]] inline HierarchicalResult sliding_window_infer(const HybridModel& m, const VideoContext& ctx,
                                                             const SamplingPlan& plan, const WindowConfig& cfg) {
  cfg.validate();
  if (ctx.duration() <= cfg.window_s) return hierarchical_process(m, ctx, plan);
  auto wt = windowed_coarse_track(m, ctx, cfg);
  const std::size_t frames = wt.track.size();
  return refine_hierarchy(m, ctx, plan, std::move(wt.track), frames);
}

[[nodiscard]] inline HierarchicalResult sliding_window_infer(const HybridModel& m, const FeatureSequence& video,
                                                             const WindowConfig& cfg) {
  VideoContext ctx(video, m.cfg);
  return sliding_window_infer(m, ctx, ctx.plan(m), cfg);
}

// ---------------------------------------------------------------------------
// Prediction JSON.

[[nodiscard]] inline nlohmann::json prediction_json(const std::string& video_id, const HierarchicalResult& r) {
  const auto& p = r.prediction;
  nlohmann::json track = nlohmann::json::array();
  for (std::size_t i = 0; i < p.track.size(); ++i) track.push_back({{"t", p.track.t[i]}, {"p", p.track.p[i]}});
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"video_id", video_id},
          {"t_refined_s", opt(p.t_refined_s)},
          {"t_coarse_s", opt(p.t_coarse_s)},
          {"confidence", p.confidence},
          {"valid", p.valid},
          {"prob_track", track},
          {"tiers_used", r.tiers_used},
          {"frames_processed", r.frames_processed},
          {"reduction_pct", r.plan.reduction_pct}};
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of TLT1 tensors plus manifest.json.

inline void save_checkpoint(HybridModel& m, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  m.visit([&](const std::string& name, Tensor& t) {
    const auto bytes = encode_tensor(t);
    const std::string file = name + ".tlt";
    std::ofstream out(dir / file, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("checkpoint: cannot write " + (dir / file).string());
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}, {"sha256", sha256_hex(bytes)}});
  });
  nlohmann::json manifest{{"format", "tloc-checkpoint"},
                          {"version", 1},
                          {"config", m.cfg.to_json()},
                          {"layers", m.cfg.layers},
                          {"state_dims", m.cfg.state_dims},
                          {"d", m.cfg.d},
                          {"bidirectional", true},
                          {"lambda_shift", m.cfg.lambda_shift},
                          {"seed", m.cfg.seed},
                          {"refine_trained", m.refine.trained},
                          {"tensors", tensors}};
  if (!extra.is_null()) manifest["extra"] = extra;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

[[nodiscard]] inline HybridModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("checkpoint: no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  if (j.value("format", "") != "tloc-checkpoint") throw FormatError("checkpoint: not a tloc checkpoint manifest");
  HybridModel m;
  try {
    m = HybridModel::init(ModelConfig::from_json(j.at("config")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  m.refine.trained = j.value("refine_trained", false);
  std::map<std::string, nlohmann::json> entries;
  for (const auto& t : j.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  std::size_t seen = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("checkpoint: missing tensor " + name);
    const auto bytes = read_bytes(dir / it->second.at("file").get<std::string>());
    if (sha256_hex(bytes) != it->second.at("sha256").get<std::string>()) {
      throw FormatError("checkpoint: hash mismatch for " + name);
    }
    Tensor loaded = decode_tensor(bytes);
    if (loaded.shape() != t.shape()) throw FormatError("checkpoint: shape mismatch for " + name);
    t = std::move(loaded);
    ++seen;
  });
  if (seen != entries.size()) throw FormatError("checkpoint: manifest lists unknown tensors");
  return m;
}

}  // namespace tloc
