#pragma once

// Motion-variance scoring and the three-tier sampling plan.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tloc/error.hpp"
#include "tloc/sequence.hpp"
#include "tloc/tensor.hpp"

namespace tloc {

/// One entry per frame: the flow vectors observed at that frame, [M × components].
using FlowField = std::vector<Tensor>;

struct FlowEstimate {
  FlowField flows;
  bool single_frame = false;  ///< fewer than two frames: motion reported as zero
};

/// Pluggable flow backend.
class FlowProvider {
 public:
  virtual ~FlowProvider() = default;
  [[nodiscard]] virtual FlowEstimate compute(const VideoFrames& video) const = 0;
};

/// Per-frame mean absolute temporal intensity gradient, as a single 1-component vector.
[[nodiscard]] inline FlowEstimate flow_surrogate(const VideoFrames& video) {
  const std::size_t n = video.count();
  if (n == 0) throw EmptySequenceError("flow_surrogate: no frames");
  FlowEstimate out;
  out.flows.assign(n, Tensor::zeros({1, 1}));
  out.single_frame = n < 2;
  for (std::size_t t = 1; t < n; ++t) {
    auto a = video.frame(t - 1), b = video.frame(t);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(b[i] - a[i]);
    out.flows[t][0] = acc / static_cast<double>(a.size());
  }
  return out;
}

class TemporalGradientFlow final : public FlowProvider {
 public:
  [[nodiscard]] FlowEstimate compute(const VideoFrames& video) const override { return flow_surrogate(video); }
};

/// Scalar magnitudes (one per frame) wrapped as a FlowField.
[[nodiscard]] inline FlowField flow_from_magnitudes(std::span<const double> mags) {
  FlowField f;
  f.reserve(mags.size());
  for (double m : mags) f.push_back(Tensor({1, 1}, m));
  return f;
}

struct MotionOptions {
  double alpha = 0.7;
  double segment_length_s = 1.0;
  bool normalize_terms = false;  ///< z-score each term per video before mixing
};

struct MotionProfile {
  double segment_length_s = 1.0;
  double alpha = 0.7;
  double t0 = 0.0;                ///< start of the first segment
  std::vector<double> v;          ///< one score per segment
  std::vector<double> frame_v;    ///< per-frame scores before segment averaging

  [[nodiscard]] std::size_t segments() const noexcept { return v.size(); }
  [[nodiscard]] double duration_s() const noexcept { return segment_length_s * static_cast<double>(v.size()); }
};

namespace detail {

inline void zscore(std::vector<double>& x) {
  if (x.empty()) return;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(x.size()));
  for (double& v : x) v = sd > 0.0 ? (v - mean) / sd : 0.0;
}

}  // namespace detail

/// v_t = α·mean_i (f_{t,i} − f_{t−1,i})² + (1−α)·mean_j ‖o_{t,j}‖, averaged per segment.
///
/// Feature columns are the spatial locations i. With normalize_terms both terms are
/// z-scored over the video and the result is shifted so its minimum is zero.
[[nodiscard]] inline MotionProfile motion_variance(const FeatureSequence& features, const FlowField& flows,
                                                   const MotionOptions& opt = {}) {
  features.validate();
  if (flows.size() != features.frames()) {
    throw AlignmentError("motion_variance: " + std::to_string(flows.size()) + " flow frames for " +
                         std::to_string(features.frames()) + " feature frames");
  }
  if (!(opt.alpha >= 0.0 && opt.alpha <= 1.0)) throw ContractError("motion_variance: alpha must lie in [0, 1]");
  if (!(opt.segment_length_s > 0.0)) throw ContractError("motion_variance: segment length must be positive");

  const std::size_t n = features.frames(), d = features.dim();
  std::vector<double> feat(n, 0.0), flow(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      auto a = features.features.row(t - 1), b = features.features.row(t);
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += (b[i] - a[i]) * (b[i] - a[i]);
      feat[t] = acc / static_cast<double>(d);
    }
    const Tensor& o = flows[t];
    const std::size_t m = o.rows(), k = o.size() / o.rows();
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < k; ++c) sq += o[j * k + c] * o[j * k + c];
      acc += std::sqrt(sq);
    }
    flow[t] = acc / static_cast<double>(m);
  }
  if (opt.normalize_terms) {
    detail::zscore(feat);
    detail::zscore(flow);
  }

  MotionProfile p;
  p.alpha = opt.alpha;
  p.segment_length_s = opt.segment_length_s;
  p.t0 = 0.0;
  p.frame_v.resize(n);
  for (std::size_t t = 0; t < n; ++t) p.frame_v[t] = opt.alpha * feat[t] + (1.0 - opt.alpha) * flow[t];
  if (opt.normalize_terms) {
    const double lo = *std::min_element(p.frame_v.begin(), p.frame_v.end());
    for (double& v : p.frame_v) v -= lo;
  }

  const double span = std::max(features.duration_s, features.timestamps.back() + 1e-9);
  const auto nseg = static_cast<std::size_t>(std::ceil(span / opt.segment_length_s - 1e-9));
  std::vector<double> sum(std::max<std::size_t>(nseg, 1), 0.0);
  std::vector<std::size_t> cnt(sum.size(), 0);
  for (std::size_t t = 0; t < n; ++t) {
    auto s = static_cast<std::size_t>(std::floor(features.timestamps[t] / opt.segment_length_s));
    s = std::min(s, sum.size() - 1);
    sum[s] += p.frame_v[t];
    ++cnt[s];
  }
  p.v.resize(sum.size());
  double carry = 0.0;
  for (std::size_t s = 0; s < sum.size(); ++s) {
    if (cnt[s] > 0) carry = sum[s] / static_cast<double>(cnt[s]);
    p.v[s] = carry;
  }
  return p;
}

/// Linear-interpolation percentile (type 7), q in [0, 1].
[[nodiscard]] inline double percentile(std::vector<double> x, double q) {
  if (x.empty()) throw EmptySequenceError("percentile of empty data");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

struct Thresholds {
  double tau_high = 0.0;
  double tau_med = 0.0;
  bool learned = false;
  bool degenerate = false;

  void validate() const {
    if (!(tau_med < tau_high)) throw ContractError("thresholds require tau_med < tau_high");
  }
};

inline constexpr double kThresholdTieEps = 1e-9;

[[nodiscard]] inline Thresholds init_thresholds(const MotionProfile& profile, double q_med = 0.80,
                                                double q_high = 0.95) {
  if (profile.v.size() < 5) throw ContractError("init_thresholds needs at least 5 segments");
  Thresholds th;
  th.tau_med = percentile(profile.v, q_med);
  th.tau_high = percentile(profile.v, q_high);
  if (!(th.tau_med < th.tau_high)) {
    th.tau_high = th.tau_med + kThresholdTieEps;
    th.degenerate = true;
  }
  return th;
}

enum class Tier { Low = 0, Med = 1, High = 2 };

[[nodiscard]] inline const char* tier_name(Tier t) {
  switch (t) {
    case Tier::Low: return "LOW";
    case Tier::Med: return "MED";
    case Tier::High: return "HIGH";
  }
  return "?";
}

[[nodiscard]] inline Tier parse_tier(const std::string& s) {
  if (s == "LOW") return Tier::Low;
  if (s == "MED") return Tier::Med;
  if (s == "HIGH") return Tier::High;
  throw FormatError("unknown tier '" + s + "'");
}

struct TierRates {
  double low = 1.0;
  double med = 5.0;
  double high = 30.0;

  [[nodiscard]] double of(Tier t) const {
    switch (t) {
      case Tier::Low: return low;
      case Tier::Med: return med;
      case Tier::High: return high;
    }
    return low;
  }
  void validate() const {
    if (!(low > 0.0 && low < med && med < high)) throw ContractError("tier rates must satisfy 0 < low < med < high");
  }
};

/// Base LOW rate for a video of the given length, interpolating the 2/10/40-minute anchors
/// by geometric-midpoint brackets.
[[nodiscard]] inline double duration_adaptive_low_rate(double duration_min) {
  if (duration_min <= std::sqrt(2.0 * 10.0)) return 4.0;
  if (duration_min <= std::sqrt(10.0 * 40.0)) return 2.0;
  return 0.5;
}

struct PlanOptions {
  TierRates rates{};
  double backtrack_s = 2.0;
  bool duration_adaptive = false;
  double source_fps = 0.0;  ///< caps every tier rate when positive
};

struct PlanSegment {
  double t0 = 0.0;
  double t1 = 0.0;
  Tier tier = Tier::Low;
  double rate_fps = 0.0;  ///< effective rate after any source-fps cap
};

struct SamplingPlan {
  std::vector<PlanSegment> segments;
  TierRates rates{};
  double backtrack_s = 2.0;
  Thresholds thresholds{};
  double duration_s = 0.0;
  double retained_frames = 0.0;
  double uniform_frames = 0.0;
  double reduction_pct = 0.0;

  [[nodiscard]] std::size_t count(Tier t) const {
    return static_cast<std::size_t>(
        std::count_if(segments.begin(), segments.end(), [t](const PlanSegment& s) { return s.tier == t; }));
  }
  [[nodiscard]] double fraction(Tier t) const {
    return segments.empty() ? 0.0 : static_cast<double>(count(t)) / static_cast<double>(segments.size());
  }
  /// Tier of the segment containing time t (clamped to the plan range).
  [[nodiscard]] Tier tier_at(double t) const {
    if (segments.empty()) throw ContractError("empty sampling plan");
    auto it = std::upper_bound(segments.begin(), segments.end(), t,
                               [](double x, const PlanSegment& s) { return x < s.t1; });
    if (it == segments.end()) --it;
    return it->tier;
  }
};

namespace detail {

inline void finalize_budget(SamplingPlan& plan, double source_fps) {
  const double high = source_fps > 0.0 ? std::min(plan.rates.high, source_fps) : plan.rates.high;
  plan.retained_frames = 0.0;
  for (auto& s : plan.segments) {
    s.rate_fps = plan.rates.of(s.tier);
    if (source_fps > 0.0) s.rate_fps = std::min(s.rate_fps, source_fps);
    plan.retained_frames += s.rate_fps * (s.t1 - s.t0);
  }
  plan.uniform_frames = plan.duration_s * high;
  plan.reduction_pct =
      plan.uniform_frames > 0.0 ? 100.0 * (1.0 - plan.retained_frames / plan.uniform_frames) : 0.0;
}

}  // namespace detail

[[nodiscard]] inline SamplingPlan build_plan(const MotionProfile& profile, const Thresholds& th, double duration_min,
                                             const PlanOptions& opt = {}) {
  th.validate();
  if (profile.v.empty()) throw EmptySequenceError("build_plan: empty motion profile");
  if (opt.backtrack_s < 0.0) throw ContractError("backtrack must be non-negative");
  SamplingPlan plan;
  plan.rates = opt.rates;
  if (opt.duration_adaptive) plan.rates.low = duration_adaptive_low_rate(duration_min);
  plan.rates.validate();
  plan.backtrack_s = opt.backtrack_s;
  plan.thresholds = th;

  const std::size_t n = profile.v.size();
  const double len = profile.segment_length_s;
  std::vector<Tier> tiers(n, Tier::Low);
  for (std::size_t s = 0; s < n; ++s) {
    const double v = profile.v[s];
    if (v > th.tau_high) tiers[s] = Tier::High;
    else if (v > th.tau_med) tiers[s] = Tier::Med;
  }
  const auto back = static_cast<std::size_t>(std::ceil(opt.backtrack_s / len - 1e-9));
  std::vector<Tier> out = tiers;
  for (std::size_t s = 0; s < n; ++s) {
    if (tiers[s] != Tier::High) continue;
    for (std::size_t k = 1; k <= back && k <= s; ++k) out[s - k] = Tier::High;
  }

  plan.segments.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double t0 = profile.t0 + len * static_cast<double>(s);
    plan.segments.push_back({t0, t0 + len, out[s], 0.0});
  }
  plan.duration_s = len * static_cast<double>(n);
  detail::finalize_budget(plan, opt.source_fps);
  return plan;
}

/// Keeps frames at each segment's rate by nearest-timestamp selection.
[[nodiscard]] inline std::vector<std::size_t> select_frames(const std::vector<double>& timestamps,
                                                            const SamplingPlan& plan) {
  if (plan.segments.empty()) throw ContractError("compress_tokens: empty plan");
  if (timestamps.empty()) throw EmptySequenceError("compress_tokens: no frames");
  std::vector<std::size_t> keep;
  for (const auto& seg : plan.segments) {
    auto first = std::lower_bound(timestamps.begin(), timestamps.end(), seg.t0 - 1e-9);
    auto last = std::lower_bound(timestamps.begin(), timestamps.end(), seg.t1 - 1e-9);
    if (first == last) continue;
    const double step = 1.0 / seg.rate_fps;
    for (std::size_t k = 0;; ++k) {
      const double target = seg.t0 + step * static_cast<double>(k);
      if (target >= seg.t1 - 1e-9) break;
      auto it = std::lower_bound(first, last, target);
      std::size_t best;
      if (it == last) best = static_cast<std::size_t>(std::prev(last) - timestamps.begin());
      else if (it == first) best = static_cast<std::size_t>(it - timestamps.begin());
      else {
        const auto i = static_cast<std::size_t>(it - timestamps.begin());
        best = (timestamps[i] - target < target - timestamps[i - 1]) ? i : i - 1;
      }
      if (keep.empty() || keep.back() < best) keep.push_back(best);
    }
  }
  return keep;
}

[[nodiscard]] inline FeatureSequence compress_tokens(const FeatureSequence& features, const SamplingPlan& plan) {
  features.validate();
  return features.select(select_frames(features.timestamps, plan));
}

// JSON ----------------------------------------------------------------------

inline nlohmann::json to_json(const Thresholds& th) {
  return {{"tau_high", th.tau_high}, {"tau_med", th.tau_med}, {"learned", th.learned}};
}

inline nlohmann::json to_json(const SamplingPlan& plan) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : plan.segments) {
    segs.push_back({{"t0", s.t0}, {"t1", s.t1}, {"tier", tier_name(s.tier)}, {"rate_fps", s.rate_fps}});
  }
  return {{"segments", segs}, {"reduction_pct", plan.reduction_pct}, {"thresholds", to_json(plan.thresholds)}};
}

[[nodiscard]] inline SamplingPlan plan_from_json(const nlohmann::json& j) {
  SamplingPlan plan;
  const auto& th = j.at("thresholds");
  plan.thresholds = {th.at("tau_high").get<double>(), th.at("tau_med").get<double>(), th.value("learned", false),
                     false};
  for (const auto& s : j.at("segments")) {
    plan.segments.push_back({s.at("t0").get<double>(), s.at("t1").get<double>(),
                             parse_tier(s.at("tier").get<std::string>()), s.at("rate_fps").get<double>()});
  }
  plan.reduction_pct = j.at("reduction_pct").get<double>();
  if (!plan.segments.empty()) plan.duration_s = plan.segments.back().t1 - plan.segments.front().t0;
  return plan;
}

}  // namespace tloc
