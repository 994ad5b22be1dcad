#pragma once

// Synthetic traffic scenes with injected crash signatures, the default
// feature extractor, and corpus planning/persistence.
//
// A scene is a 32×32 intensity grid: a static road texture, three lanes of
// Gaussian "vehicles" drifting across, and for crash scenes one vehicle that
// stops dead with a sideways jolt at t_c while a flash decays over 1.5 s
// around it. Weather presets are noise models layered on top: night halves the
// gain and adds sensor noise, rain adds noise and falling streaks, snow adds
// impulse speckle, fog blurs and washes out contrast.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tloc/error.hpp"
#include "tloc/hash.hpp"
#include "tloc/rng.hpp"
#include "tloc/sampler.hpp"
#include "tloc/sequence.hpp"
#include "tloc/tensor_io.hpp"

namespace tloc {

inline constexpr std::array<std::string_view, 5> kConditions{"clear", "night", "rain", "snow", "fog"};

[[nodiscard]] inline bool is_condition(std::string_view c) {
  return std::find(kConditions.begin(), kConditions.end(), c) != kConditions.end();
}

struct ScenarioSpec {
  double duration_s = 120.0;
  double fps = 10.0;
  std::optional<double> crash_time_s;
  std::string condition = "clear";
  std::uint64_t seed = 1;
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const {
    if (!(duration_s > 0.0) || !(fps > 0.0)) throw ContractError("scenario: duration and fps must be positive");
    if (crash_time_s && !(*crash_time_s > 0.0 && *crash_time_s < duration_s)) {
      throw ContractError("scenario: crash time must lie strictly inside the video");
    }
    if (!is_condition(condition)) throw ContractError("scenario: unknown condition '" + condition + "'");
    if (height < 8 || width < 8) throw ContractError("scenario: frames must be at least 8×8");
  }
  [[nodiscard]] std::size_t frame_count() const {
    return static_cast<std::size_t>(std::llround(duration_s * fps));
  }
};

struct GroundTruth {
  std::optional<double> crash_time_s;
  double x = 0.0;  ///< crash location, pixels
  double y = 0.0;
};

struct Scenario {
  ScenarioSpec spec;
  VideoFrames frames;
  GroundTruth truth;
};

namespace detail {

struct Vehicle {
  double lane_y = 0.0;
  double x_entry = 0.0;
  double dir = 1.0;
  double speed = 5.0;  ///< px/s
  double t_spawn = 0.0;
  double amp = 0.6;
  double sigma = 1.5;
  double wobble = 0.3;
  double wobble_hz = 0.2;
  double phase = 0.0;
  std::optional<double> stop_t;  ///< crash vehicle: frozen from here on
  double jolt = 0.0;             ///< sideways displacement after the stop

  [[nodiscard]] std::pair<double, double> position(double t) const {
    const double te = stop_t ? std::min(t, *stop_t) : t;
    const double x = x_entry + dir * speed * (te - t_spawn);
    double y = lane_y + wobble * std::sin(2.0 * std::numbers::pi * wobble_hz * te + phase);
    if (stop_t && t >= *stop_t) y += jolt;
    return {x, y};
  }
};

inline void splat(std::vector<double>& img, std::size_t h, std::size_t w, double cx, double cy, double amp,
                  double sigma) {
  const double r = 3.5 * sigma;
  const auto x0 = static_cast<long>(std::floor(cx - r)), x1 = static_cast<long>(std::ceil(cx + r));
  const auto y0 = static_cast<long>(std::floor(cy - r)), y1 = static_cast<long>(std::ceil(cy + r));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (long y = std::max(0L, y0); y <= std::min<long>(static_cast<long>(h) - 1, y1); ++y) {
    for (long x = std::max(0L, x0); x <= std::min<long>(static_cast<long>(w) - 1, x1); ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] += amp * std::exp(-(dx * dx + dy * dy) * inv);
    }
  }
}

inline std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t h, std::size_t w, double sigma) {
  const int r = static_cast<int>(std::ceil(2.5 * sigma));
  std::vector<double> k(2 * static_cast<std::size_t>(r) + 1);
  double z = 0.0;
  for (int i = -r; i <= r; ++i) z += (k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= z;
  std::vector<double> tmp(img.size()), out(img.size());
  auto clampi = [](long v, long hi) { return static_cast<std::size_t>(std::clamp(v, 0L, hi)); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i)
        s += k[static_cast<std::size_t>(i + r)] * img[y * w + clampi(static_cast<long>(x) + i, static_cast<long>(w) - 1)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i)
        s += k[static_cast<std::size_t>(i + r)] * tmp[clampi(static_cast<long>(y) + i, static_cast<long>(h) - 1) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

}  // namespace detail

inline constexpr double kCrashSignatureS = 1.5;

[[nodiscard]] inline Scenario generate(const ScenarioSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, n = spec.frame_count();
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  Rng traffic(spec.seed, "traffic");
  Rng noise(spec.seed, "noise");

  const std::array<double, 3> lanes{hd * 0.25, hd * 0.5, hd * 0.75};
  std::vector<detail::Vehicle> vehicles;
  for (std::size_t l = 0; l < lanes.size(); ++l) {
    const double dir = l % 2 == 0 ? 1.0 : -1.0;
    const double lane_speed = traffic.uniform(3.0, 7.0);
    for (double t = -traffic.uniform(0.0, 12.0); t < spec.duration_s; t += traffic.uniform(3.0, 9.0)) {
      detail::Vehicle v;
      v.lane_y = lanes[l];
      v.dir = dir;
      v.x_entry = dir > 0 ? -5.0 : wd + 4.0;
      v.speed = lane_speed * traffic.uniform(0.85, 1.15);
      v.t_spawn = t;
      v.amp = traffic.uniform(0.35, 0.6);
      v.sigma = traffic.uniform(1.2, 1.8);
      v.wobble = traffic.uniform(0.1, 0.5);
      v.wobble_hz = traffic.uniform(0.05, 0.3);
      v.phase = traffic.uniform(0.0, 2.0 * std::numbers::pi);
      vehicles.push_back(v);
    }
  }

  Scenario out;
  out.spec = spec;
  out.truth.crash_time_s = spec.crash_time_s;
  if (spec.crash_time_s) {
    const double tc = *spec.crash_time_s;
    const std::size_t l = traffic.below(lanes.size());
    detail::Vehicle v;
    v.lane_y = lanes[l];
    v.dir = l % 2 == 0 ? 1.0 : -1.0;
    v.x_entry = v.dir > 0 ? -5.0 : wd + 4.0;
    v.speed = traffic.uniform(4.0, 7.0);
    const double xc = traffic.uniform(wd * 0.3, wd * 0.7);
    v.t_spawn = tc - std::abs(xc - v.x_entry) / v.speed;
    v.amp = traffic.uniform(0.45, 0.6);
    v.sigma = 1.6;
    v.wobble = 0.2;
    v.wobble_hz = 0.1;
    v.stop_t = tc;
    v.jolt = (traffic.uniform() < 0.5 ? -1.0 : 1.0) * traffic.uniform(1.5, 3.0);
    const auto [cx, cy] = v.position(tc + 1.0);
    out.truth.x = cx;
    out.truth.y = cy;
    vehicles.push_back(v);
  }

  std::vector<double> bg(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      double v = 0.22 + 0.03 * std::sin(0.35 * xd + 0.2 * yd) + 0.02 * std::cos(0.5 * yd);
      const bool marking = (y == h * 3 / 8 || y == h * 5 / 8) && (x / 3) % 2 == 0;
      bg[y * w + x] = v + (marking ? 0.08 : 0.0);
    }

  const std::string& cond = spec.condition;
  out.frames.fps = spec.fps;
  out.frames.pixels = Tensor({n, h, w});
  std::vector<double> img(h * w);
  for (std::size_t f = 0; f < n; ++f) {
    const double t = static_cast<double>(f) / spec.fps;
    img = bg;
    for (const auto& v : vehicles) {
      if (t < v.t_spawn) continue;
      const auto [x, y] = v.position(t);
      if (x < -6.0 || x > wd + 6.0) continue;
      detail::splat(img, h, w, x, y, v.amp, v.sigma);
    }
    if (spec.crash_time_s) {
      const double u = (t - *spec.crash_time_s) / kCrashSignatureS;
      if (u >= 0.0 && u < 1.0) {
        const double flash = 0.8 * (1.0 - u) * (0.75 + 0.25 * std::cos(2.0 * std::numbers::pi * 3.0 * u));
        detail::splat(img, h, w, out.truth.x, out.truth.y, flash, 3.5);
      }
    }

    if (cond == "fog") {
      img = detail::gaussian_blur(img, h, w, 1.5);
      for (double& v : img) v = 0.5 * v + 0.3 + noise.normal(0.0, 0.02);
    } else if (cond == "night") {
      for (double& v : img) v = 0.5 * v + noise.normal(0.0, 0.05);
    } else if (cond == "rain") {
      for (double& v : img) v += noise.normal(0.0, 0.03);
      for (int s = 0; s < 15; ++s) {
        const std::size_t x = noise.below(w), y0 = noise.below(h);
        for (std::size_t y = y0; y < std::min(h, y0 + 4); ++y) img[y * w + x] += 0.15;
      }
    } else if (cond == "snow") {
      for (double& v : img) v = noise.uniform() < 0.02 ? 0.95 : v + noise.normal(0.0, 0.01);
    } else {
      for (double& v : img) v += noise.normal(0.0, 0.01);
    }

    double* dst = out.frames.pixels.data().data() + f * h * w;
    for (std::size_t i = 0; i < h * w; ++i) dst[i] = std::round(std::clamp(img[i], 0.0, 1.0) * 255.0) / 255.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature extraction.

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual std::size_t dim() const = 0;
  [[nodiscard]] virtual FeatureSequence extract(const VideoFrames& frames) const = 0;
};

/// Column layout of the default extractor.
struct FeatureLayout {
  static constexpr std::size_t kGrid = 8;
  static constexpr std::size_t kGridEnd = kGrid * kGrid;  ///< pooled cells occupy [0, 64)
  static constexpr std::size_t kFlow = 64;                ///< mean |ΔI|
  static constexpr std::size_t kGradStd = 65;
  static constexpr std::size_t kGradMax = 66;
  static constexpr std::size_t kGradFrac = 67;           ///< share of pixels with |ΔI| > 0.1
  static constexpr std::size_t kGradMean = 68;           ///< signed mean ΔI
  static constexpr std::size_t kMotion = 69;             ///< per-frame motion variance
  static constexpr std::size_t kDim = 70;
};

/// 8×8 pooled intensities, temporal-gradient statistics, and the per-frame
/// motion-variance score (α = 0.7) as a hint channel.
class DefaultExtractor final : public FeatureExtractor {
 public:
  explicit DefaultExtractor(double alpha = 0.7) : alpha_(alpha) {}

  [[nodiscard]] std::string name() const override { return "pooled-grid-v1"; }
  [[nodiscard]] std::size_t dim() const override { return FeatureLayout::kDim; }

  [[nodiscard]] FeatureSequence extract(const VideoFrames& frames) const override {
    using L = FeatureLayout;
    const std::size_t n = frames.count();
    if (n == 0) throw EmptySequenceError("extract: no frames");
    const std::size_t h = frames.height(), w = frames.width();
    if (h < L::kGrid || w < L::kGrid) throw DimensionError("extract: frames smaller than the pooling grid");
    FeatureSequence out;
    out.source_fps = frames.fps;
    out.duration_s = frames.duration_s();
    out.features = Tensor({n, L::kDim});
    out.timestamps.resize(n);
    for (std::size_t f = 0; f < n; ++f) {
      out.timestamps[f] = static_cast<double>(f) / frames.fps;
      auto img = frames.frame(f);
      auto row = out.features.row(f);
      for (std::size_t gy = 0; gy < L::kGrid; ++gy)
        for (std::size_t gx = 0; gx < L::kGrid; ++gx) {
          const std::size_t y0 = gy * h / L::kGrid, y1 = (gy + 1) * h / L::kGrid;
          const std::size_t x0 = gx * w / L::kGrid, x1 = (gx + 1) * w / L::kGrid;
          double s = 0.0;
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) s += img[y * w + x];
          row[gy * L::kGrid + gx] = s / static_cast<double>((y1 - y0) * (x1 - x0));
        }
      if (f == 0) continue;
      auto prev = frames.frame(f - 1);
      double sa = 0.0, s1 = 0.0, s2 = 0.0, mx = 0.0, big = 0.0;
      for (std::size_t i = 0; i < img.size(); ++i) {
        const double d = img[i] - prev[i];
        sa += std::abs(d);
        s1 += d;
        s2 += d * d;
        mx = std::max(mx, std::abs(d));
        if (std::abs(d) > 0.1) big += 1.0;
      }
      const double np = static_cast<double>(img.size());
      row[L::kFlow] = sa / np;
      row[L::kGradMean] = s1 / np;
      row[L::kGradStd] = std::sqrt(std::max(0.0, s2 / np - (s1 / np) * (s1 / np)));
      row[L::kGradMax] = mx;
      row[L::kGradFrac] = big / np;
      auto prow = out.features.row(f - 1);
      double fd = 0.0;
      for (std::size_t i = 0; i < L::kGridEnd; ++i) fd += (row[i] - prow[i]) * (row[i] - prow[i]);
      row[L::kMotion] = alpha_ * fd / static_cast<double>(L::kGridEnd) + (1.0 - alpha_) * row[L::kFlow];
    }
    return out;
  }

 private:
  double alpha_;
};

/// Motion profile of an extracted sequence: pooled cells as locations, the
/// mean-|ΔI| column as flow magnitude.
[[nodiscard]] inline MotionProfile profile_from_features(const FeatureSequence& f, const MotionOptions& opt = {}) {
  using L = FeatureLayout;
  if (f.dim() != L::kDim) throw DimensionError("profile_from_features expects the default feature layout");
  std::vector<double> mags(f.frames());
  for (std::size_t i = 0; i < f.frames(); ++i) mags[i] = f.features(i, L::kFlow);
  return motion_variance(f.columns(0, L::kGridEnd), flow_from_magnitudes(mags), opt);
}

// ---------------------------------------------------------------------------
// Baseline detector.

struct BaselineDetection {
  bool valid = false;
  double t_s = 0.0;
};

/// First frame whose motion variance exceeds p95 + 3·median of the video; none → invalid.
[[nodiscard]] inline BaselineDetection threshold_baseline(const FeatureSequence& f) {
  using L = FeatureLayout;
  std::vector<double> v(f.frames());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f.features(i, L::kMotion);
  const double thr = percentile(v, 0.95) + 3.0 * percentile(v, 0.5);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] > thr) return {true, f.timestamps[i]};
  return {};
}

// ---------------------------------------------------------------------------
// Corpus.

struct CorpusOptions {
  std::size_t n_crash = 50;
  std::size_t n_clean = 50;
  std::uint64_t seed = 1;
  double duration_s = 120.0;
  double fps = 10.0;
  double margin_s = 5.0;  ///< crash times avoid the first and last margin_s seconds
  double test_fraction = 0.2;
};

struct VideoRecord {
  std::string id;
  std::string split;  ///< "train" | "test"
  std::string condition;
  std::optional<double> crash_time_s;
  std::uint64_t seed = 0;
  double duration_s = 0.0;
  double fps = 0.0;
  std::string frames_sha256;  ///< filled once frames are rendered
};

[[nodiscard]] inline ScenarioSpec spec_of(const VideoRecord& r) {
  ScenarioSpec s;
  s.duration_s = r.duration_s;
  s.fps = r.fps;
  s.crash_time_s = r.crash_time_s;
  s.condition = r.condition;
  s.seed = r.seed;
  return s;
}

struct CorpusManifest {
  CorpusOptions options;
  std::vector<VideoRecord> videos;

  [[nodiscard]] nlohmann::json body() const {
    nlohmann::json vids = nlohmann::json::array();
    for (const auto& v : videos) {
      vids.push_back({{"id", v.id},
                      {"split", v.split},
                      {"condition", v.condition},
                      {"crash_time_s", v.crash_time_s ? nlohmann::json(*v.crash_time_s) : nlohmann::json(nullptr)},
                      {"seed", v.seed},
                      {"duration_s", v.duration_s},
                      {"fps", v.fps},
                      {"frames", v.id + ".tlt"},
                      {"frames_sha256", v.frames_sha256}});
    }
    return {{"format", "tloc-corpus"},
            {"version", 1},
            {"seed", options.seed},
            {"n_crash", options.n_crash},
            {"n_clean", options.n_clean},
            {"duration_s", options.duration_s},
            {"fps", options.fps},
            {"margin_s", options.margin_s},
            {"test_fraction", options.test_fraction},
            {"videos", vids}};
  }

  [[nodiscard]] std::string hash() const { return sha256_hex(body().dump()); }

  [[nodiscard]] nlohmann::json to_json() const {
    auto j = body();
    j["sha256"] = hash();
    return j;
  }

  static CorpusManifest from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "tloc-corpus") throw FormatError("not a corpus manifest");
    CorpusManifest m;
    m.options.seed = j.at("seed").get<std::uint64_t>();
    m.options.n_crash = j.at("n_crash").get<std::size_t>();
    m.options.n_clean = j.at("n_clean").get<std::size_t>();
    m.options.duration_s = j.at("duration_s").get<double>();
    m.options.fps = j.at("fps").get<double>();
    m.options.margin_s = j.at("margin_s").get<double>();
    m.options.test_fraction = j.at("test_fraction").get<double>();
    for (const auto& v : j.at("videos")) {
      VideoRecord r;
      r.id = v.at("id").get<std::string>();
      r.split = v.at("split").get<std::string>();
      r.condition = v.at("condition").get<std::string>();
      if (!v.at("crash_time_s").is_null()) r.crash_time_s = v.at("crash_time_s").get<double>();
      r.seed = v.at("seed").get<std::uint64_t>();
      r.duration_s = v.at("duration_s").get<double>();
      r.fps = v.at("fps").get<double>();
      r.frames_sha256 = v.value("frames_sha256", "");
      m.videos.push_back(std::move(r));
    }
    if (j.contains("sha256") && j.at("sha256").get<std::string>() != m.hash()) {
      throw FormatError("corpus manifest hash mismatch");
    }
    return m;
  }

  [[nodiscard]] std::vector<const VideoRecord*> split(std::string_view which) const {
    std::vector<const VideoRecord*> out;
    for (const auto& v : videos)
      if (v.split == which) out.push_back(&v);
    return out;
  }
};

/// Ids, conditions, crash times, per-video seeds and the train/test split.
///
/// Each class gets round(test_fraction·n) test videos. Within a class,
/// conditions are assigned round-robin over a seeded preset order, and the test
/// picks walk that same order so every preset is represented when possible.
[[nodiscard]] inline CorpusManifest build_corpus(const CorpusOptions& opt) {
  if (opt.n_crash + opt.n_clean == 0) throw ContractError("build_corpus: need at least one video");
  if (!(opt.duration_s > 2.0 * opt.margin_s)) throw ContractError("build_corpus: duration too short for margin");
  Rng rng(opt.seed, "corpus");
  CorpusManifest m;
  m.options = opt;
  auto add_class = [&](const char* prefix, std::size_t count, bool crash) {
    std::vector<std::size_t> order(kConditions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const auto n_test = static_cast<std::size_t>(std::llround(opt.test_fraction * static_cast<double>(count)));
    for (std::size_t i = 0; i < count; ++i) {
      VideoRecord r;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s_%03zu", prefix, i);
      r.id = buf;
      r.condition = std::string(kConditions[order[i % order.size()]]);
      r.split = i < n_test ? "test" : "train";
      if (crash) r.crash_time_s = rng.uniform(opt.margin_s, opt.duration_s - opt.margin_s);
      r.seed = derive_seed(opt.seed, "video/" + r.id);
      r.duration_s = opt.duration_s;
      r.fps = opt.fps;
      m.videos.push_back(std::move(r));
    }
  };
  add_class("crash", opt.n_crash, true);
  add_class("clean", opt.n_clean, false);
  return m;
}

[[nodiscard]] inline CorpusManifest build_corpus(std::size_t n_crash, std::size_t n_clean, std::uint64_t seed) {
  CorpusOptions o;
  o.n_crash = n_crash;
  o.n_clean = n_clean;
  o.seed = seed;
  return build_corpus(o);
}

/// Frames of a scenario as a u8 TLT1 tensor (intensity × 255).
[[nodiscard]] inline std::vector<char> encode_frames(const VideoFrames& v) {
  Tensor q = v.pixels;
  for (double& x : q.data()) x = std::round(x * 255.0);
  return encode_tensor(q, Dtype::U8);
}

[[nodiscard]] inline VideoFrames decode_frames(const std::vector<char>& bytes, double fps) {
  VideoFrames v{decode_tensor(bytes), fps};
  if (v.pixels.rank() != 3) throw FormatError("frame tensor must be [frames × height × width]");
  for (double& x : v.pixels.data()) x /= 255.0;
  return v;
}

struct CorpusVideo {
  VideoRecord record;
  FeatureSequence features;
};

/// Renders every video, fills in frame hashes and extracts features. When
/// `dir` is given, frames, sidecars and the manifest are written there.
inline std::vector<CorpusVideo> materialize(CorpusManifest& m, const FeatureExtractor& extractor,
                                            const std::filesystem::path* dir = nullptr) {
  std::vector<CorpusVideo> out;
  out.reserve(m.videos.size());
  for (auto& rec : m.videos) {
    Scenario s = generate(spec_of(rec));
    const auto bytes = encode_frames(s.frames);
    rec.frames_sha256 = sha256_hex(std::span<const char>(bytes));
    if (dir) {
      std::ofstream(*dir / (rec.id + ".tlt"), std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      nlohmann::json side{{"id", rec.id},
                          {"condition", rec.condition},
                          {"seed", rec.seed},
                          {"duration_s", rec.duration_s},
                          {"fps", rec.fps},
                          {"crash_time_s", rec.crash_time_s ? nlohmann::json(*rec.crash_time_s) : nlohmann::json(nullptr)},
                          {"crash_xy", s.truth.crash_time_s ? nlohmann::json::array({s.truth.x, s.truth.y})
                                                            : nlohmann::json(nullptr)}};
      std::ofstream(*dir / (rec.id + ".json")) << side.dump(2) << '\n';
    }
    out.push_back({rec, extractor.extract(s.frames)});
  }
  if (dir) std::ofstream(*dir / "manifest.json") << m.to_json().dump(2) << '\n';
  return out;
}

[[nodiscard]] inline CorpusManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ContractError("no corpus manifest in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus manifest: ") + e.what());
  }
  return CorpusManifest::from_json(j);
}

/// Loads a rendered video's frames, verifying its hash against the manifest.
[[nodiscard]] inline VideoFrames load_frames(const std::filesystem::path& dir, const VideoRecord& rec) {
  const auto bytes = read_bytes(dir / (rec.id + ".tlt"));
  if (!rec.frames_sha256.empty() && sha256_hex(std::span<const char>(bytes)) != rec.frames_sha256) {
    throw FormatError("frame file for " + rec.id + " does not match the manifest hash");
  }
  return decode_frames(bytes, rec.fps);
}

}  // namespace tloc
