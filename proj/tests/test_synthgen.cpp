#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "tloc/synthgen.hpp"

namespace tloc {
namespace {

ScenarioSpec crash_spec(std::string cond, std::uint64_t seed, double tc) {
  ScenarioSpec s;
  s.condition = std::move(cond);
  s.seed = seed;
  s.crash_time_s = tc;
  return s;
}

double crash_time_for(std::uint64_t i) {
  Rng r(i, "test-crash-time");
  return r.uniform(5.0, 115.0);
}

TEST(Generate, SameSeedSameFrames) {
  auto s = crash_spec("rain", 42, 33.3);
  auto a = generate(s), b = generate(s);
  EXPECT_TRUE(std::ranges::equal(a.frames.pixels.data(), b.frames.pixels.data()));
  s.seed = 43;
  EXPECT_FALSE(std::ranges::equal(generate(s).frames.pixels.data(), a.frames.pixels.data()));
}

TEST(Generate, ShapeAndRange) {
  ScenarioSpec s;
  s.duration_s = 12.0;
  s.fps = 10.0;
  auto sc = generate(s);
  EXPECT_EQ(sc.frames.count(), 120u);
  EXPECT_EQ(sc.frames.height(), 32u);
  EXPECT_EQ(sc.frames.width(), 32u);
  EXPECT_FALSE(sc.truth.crash_time_s.has_value());
  for (double v : sc.frames.pixels.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Generate, InvalidSpecRejected) {
  auto s = crash_spec("clear", 1, 200.0);
  EXPECT_THROW((void)generate(s), ContractError);
  s.crash_time_s = 10.0;
  s.condition = "hail";
  EXPECT_THROW((void)generate(s), ContractError);
}

TEST(Generate, CleanVideosHaveNoBurst) {
  DefaultExtractor ex;
  int bursts = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ScenarioSpec s;
    s.seed = 7000 + seed;
    s.condition = std::string(kConditions[seed % kConditions.size()]);
    auto prof = profile_from_features(ex.extract(generate(s).frames));
    const double mx = *std::max_element(prof.v.begin(), prof.v.end());
    if (mx - percentile(prof.v, 0.95) > 3.0 * percentile(prof.v, 0.5)) ++bursts;
  }
  EXPECT_EQ(bursts, 0);
}

TEST(Generate, FlowPeakNearCrash) {
  DefaultExtractor ex;
  for (auto cond : kConditions) {
    for (std::uint64_t i = 0; i < 8; ++i) {
      const double tc = crash_time_for(i);
      auto f = ex.extract(generate(crash_spec(std::string(cond), 300 + i, tc)).frames);
      std::size_t arg = 0;
      for (std::size_t k = 1; k < f.frames(); ++k)
        if (f.features(k, FeatureLayout::kFlow) > f.features(arg, FeatureLayout::kFlow)) arg = k;
      EXPECT_LE(std::abs(f.timestamps[arg] - tc), 1.0) << cond << " seed " << i;
    }
  }
}

TEST(FlowSurrogate, MovingBlobPositiveOnlyAfterOnset) {
  const std::size_t n = 20, onset = 8, side = 16;
  VideoFrames v{Tensor({n, side, side}), 10.0};
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> img(side * side, 0.2);
    const double x = 4.0 + (t > onset ? 0.7 * static_cast<double>(t - onset) : 0.0);
    detail::splat(img, side, side, x, 8.0, 0.6, 1.5);
    std::copy(img.begin(), img.end(), v.pixels.data().begin() + static_cast<std::ptrdiff_t>(t * side * side));
  }
  const auto m = flow_surrogate(v).flows;
  for (std::size_t t = 0; t < n; ++t) {
    if (t <= onset) {
      EXPECT_EQ(m[t][0], 0.0) << t;
    } else {
      EXPECT_GT(m[t][0], 0.0) << t;
    }
  }
}

TEST(Extractor, StaticVideoHasZeroGradientChannels) {
  VideoFrames v{Tensor({15, 32, 32}, 0.4), 5.0};
  auto f = DefaultExtractor().extract(v);
  ASSERT_EQ(f.frames(), 15u);
  ASSERT_EQ(f.dim(), FeatureLayout::kDim);
  for (std::size_t i = 0; i < f.frames(); ++i)
    for (std::size_t c = FeatureLayout::kFlow; c < FeatureLayout::kDim; ++c) EXPECT_EQ(f.features(i, c), 0.0);
}

TEST(Extractor, RowsMatchFramesAndDeterministic) {
  auto sc = generate(crash_spec("snow", 5, 20.0));
  DefaultExtractor ex;
  auto a = ex.extract(sc.frames), b = ex.extract(sc.frames);
  EXPECT_EQ(a.frames(), sc.frames.count());
  EXPECT_TRUE(std::ranges::equal(a.features.data(), b.features.data()));
  for (double x : a.features.data()) EXPECT_TRUE(std::isfinite(x));
  EXPECT_NEAR(a.timestamps[10], 1.0, 1e-12);
}

// Cohen's d of the motion-hint column between the 10 s before the crash and
// the 1.5 s signature window.
double crash_effect_size(const FeatureSequence& f, double tc) {
  std::vector<double> pre, hit;
  for (std::size_t i = 0; i < f.frames(); ++i) {
    const double t = f.timestamps[i], v = f.features(i, FeatureLayout::kMotion);
    if (t >= tc - 10.0 && t < tc) pre.push_back(v);
    if (t >= tc && t <= tc + 1.5) hit.push_back(v);
  }
  auto mean_var = [](const std::vector<double>& x) {
    double m = 0.0, s = 0.0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    for (double v : x) s += (v - m) * (v - m);
    return std::pair{m, s / static_cast<double>(x.size() - 1)};
  };
  auto [m0, v0] = mean_var(pre);
  auto [m1, v1] = mean_var(hit);
  const double pooled = std::sqrt(((pre.size() - 1) * v0 + (hit.size() - 1) * v1) / (pre.size() + hit.size() - 2.0));
  return (m1 - m0) / pooled;
}

TEST(Extractor, CrashWindowDiffersFromPreCrash) {
  DefaultExtractor ex;
  for (auto cond : kConditions) {
    for (std::uint64_t i = 0; i < 4; ++i) {
      const double tc = 15.0 + 20.0 * static_cast<double>(i);
      auto f = ex.extract(generate(crash_spec(std::string(cond), 900 + i, tc)).frames);
      EXPECT_GT(crash_effect_size(f, tc), 0.5) << cond << " " << i;
    }
  }
}

TEST(Baseline, ClearPresetIsLearnable) {
  DefaultExtractor ex;
  int hits = 0;
  const int n = 20;
  for (int i = 0; i < n; ++i) {
    const double tc = crash_time_for(static_cast<std::uint64_t>(i) + 50);
    auto b = threshold_baseline(ex.extract(generate(crash_spec("clear", 1200 + i, tc)).frames));
    if (b.valid && std::abs(b.t_s - tc) <= 3.0) ++hits;
  }
  EXPECT_GT(hits, 0.6 * n);
}

TEST(Corpus, SplitArithmetic) {
  auto m = build_corpus(10, 10, 1);
  ASSERT_EQ(m.videos.size(), 20u);
  auto test = m.split("test");
  ASSERT_EQ(test.size(), 4u);
  EXPECT_EQ(std::count_if(test.begin(), test.end(), [](auto* v) { return v->crash_time_s.has_value(); }), 2);

  std::set<std::string> tr, te;
  for (auto* v : m.split("train")) tr.insert(v->id);
  for (auto* v : test) te.insert(v->id);
  EXPECT_EQ(tr.size() + te.size(), 20u);
  for (const auto& id : te) EXPECT_EQ(tr.count(id), 0u);
}

TEST(Corpus, ConditionsStratifiedAcrossSplits) {
  auto m = build_corpus(50, 50, 3);
  std::set<std::string> test_conds;
  for (auto* v : m.split("test")) test_conds.insert(v->condition);
  EXPECT_EQ(test_conds.size(), kConditions.size());
}

TEST(Corpus, CrashTimesUniform) {
  CorpusOptions o;
  o.n_crash = 1000;
  o.n_clean = 0;
  o.seed = 11;
  auto m = build_corpus(o);
  std::array<int, 10> bins{};
  const double lo = o.margin_s, span = o.duration_s - 2.0 * o.margin_s;
  for (const auto& v : m.videos) {
    ASSERT_TRUE(v.crash_time_s);
    const auto b = static_cast<std::size_t>((*v.crash_time_s - lo) / span * 10.0);
    ++bins[std::min<std::size_t>(b, 9)];
  }
  double chi2 = 0.0;
  for (int c : bins) chi2 += (c - 100.0) * (c - 100.0) / 100.0;
  EXPECT_LT(chi2, 21.666);  // chi-square critical value, 9 dof, p = 0.01
}

TEST(Corpus, ManifestHashReproducible) {
  auto a = build_corpus(6, 4, 9), b = build_corpus(6, 4, 9);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), build_corpus(6, 4, 10).hash());
  auto back = CorpusManifest::from_json(a.to_json());
  EXPECT_EQ(back.hash(), a.hash());

  auto j = a.to_json();
  j["videos"][0]["seed"] = 1;
  EXPECT_THROW((void)CorpusManifest::from_json(j), FormatError);
}

TEST(Corpus, MaterializeRoundTrip) {
  CorpusOptions o;
  o.n_crash = 2;
  o.n_clean = 1;
  o.duration_s = 15.0;
  o.margin_s = 2.0;
  auto m = build_corpus(o);
  const auto dir = std::filesystem::temp_directory_path() / "tloc_test_corpus";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  DefaultExtractor ex;
  auto vids = materialize(m, ex, &dir);
  ASSERT_EQ(vids.size(), 3u);
  auto loaded = load_manifest(dir);
  EXPECT_EQ(loaded.hash(), m.hash());
  auto frames = load_frames(dir, loaded.videos[0]);
  EXPECT_EQ(frames.count(), 150u);

  auto again = build_corpus(o);
  (void)materialize(again, ex);
  EXPECT_EQ(again.hash(), m.hash());

  auto tampered = loaded.videos[0];
  tampered.frames_sha256 = std::string(64, '0');
  EXPECT_THROW((void)load_frames(dir, tampered), FormatError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace tloc
