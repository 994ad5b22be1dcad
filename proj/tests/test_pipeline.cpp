#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tloc/pipeline.hpp"

namespace tloc {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 6;
  c.layers = 1;
  c.state_dims = {4, 4, 8};
  c.key_dim = 3;
  c.hidden = 4;
  return c;
}

FeatureSequence random_sequence(std::size_t frames, double fps, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  FeatureSequence f;
  f.features = Tensor({frames, dim});
  for (double& v : f.features.data()) v = rng.normal();
  for (std::size_t i = 0; i < frames; ++i) f.timestamps.push_back(static_cast<double>(i) / fps);
  f.source_fps = fps;
  f.duration_s = static_cast<double>(frames) / fps;
  return f;
}

TEST(Adapter, IdentityProjectionIsStandardizedPassthrough) {
  auto raw = random_sequence(30, 2.0, 5, 1);
  AdapterParams a{Affine(5, 5)};
  a.proj.w = Tensor::identity(5);
  auto out = adapt_features(raw, a);
  const auto z = Standardization::fit(raw.features).apply(raw.features);
  EXPECT_LT(max_abs_diff(out.features.features, z), 1e-15);
  for (std::size_t c = 0; c < 5; ++c) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = 0; i < 30; ++i) m += z(i, c) / 30.0;
    for (std::size_t i = 0; i < 30; ++i) s += (z(i, c) - m) * (z(i, c) - m) / 30.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Adapter, ConstantColumnIsFlaggedWithoutNaN) {
  auto raw = random_sequence(10, 1.0, 4, 2);
  for (std::size_t i = 0; i < 10; ++i) raw.features(i, 2) = 3.5;
  Rng rng(3);
  auto out = adapt_features(raw, AdapterParams::init(4, 3, rng));
  EXPECT_EQ(out.flagged_columns, std::vector<std::size_t>{2});
  EXPECT_TRUE(out.features.features.all_finite());
  const auto st = Standardization::fit(raw.features);
  EXPECT_EQ(st.scale[2], 1.0);
  EXPECT_EQ(st.apply(raw.features)(4, 2), 0.0);
}

TEST(Adapter, OutputColumnMeansEqualBias) {
  auto raw = random_sequence(25, 1.0, 4, 4);
  Rng rng(5);
  auto a = AdapterParams::init(4, 3, rng);
  a.proj.b = Tensor::vector({0.5, -1.25, 2.0});
  auto out = adapt_features(raw, a).features.features;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < 25; ++i) m += out(i, c) / 25.0;
    EXPECT_NEAR(m, a.proj.b[c], 1e-12);
  }
}

TEST(Thresholds, ReparameterizationKeepsOrder) {
  auto m = HybridModel::init(tiny_config());
  auto [med0, high0] = m.thresholds();
  EXPECT_NEAR(med0, m.cfg.tau_med_init, 1e-12);
  EXPECT_NEAR(high0, m.cfg.tau_high_init, 1e-12);
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    m.theta[0] = rng.uniform(-40, 40);
    m.theta[1] = rng.uniform(-40, 40);
    m.clamp_thresholds();
    auto [med, high] = m.thresholds();
    EXPECT_GT(med, 0.0);
    EXPECT_LE(med, high);
    EXPECT_LE(high, m.cfg.tau_upper);
  }
  EXPECT_THROW(m.set_thresholds(2.0, 1.0), ContractError);
}

TEST(Thresholds, GateGradients) {
  const std::vector<double> vt{0.5, 1.0, 1.2, 1.6, 3.0};
  const Tensor w = Tensor::matrix({{0.3, -1.0}, {1.0, 0.4}, {-0.2, 2.0}, {0.7, 0.1}, {1.5, -0.5}});
  auto f = [&](Tape& t, Var th) { return sum(mul(threshold_gates(th, vt, 4.0, 0.5), t.constant(w))); };
  EXPECT_LT(finite_diff_check(f, Tensor::vector({-0.8, 0.3})), 1e-6);
  EXPECT_LT(finite_diff_check(f, Tensor::vector({1.5, -2.0})), 1e-6);
}

TEST(Windows, DefaultStartsForFortyMinutes) {
  WindowConfig w;
  std::vector<double> expect;
  for (int k = 0; k <= 9; ++k) expect.push_back(240.0 * k);
  EXPECT_EQ(w.starts(2400.0), expect);
  EXPECT_EQ(w.starts(200.0), std::vector<double>{0.0});
  EXPECT_THROW((WindowConfig{300, 0, 600}.validate()), ContractError);
  EXPECT_THROW((WindowConfig{300, 300, 600}.validate()), ContractError);
  EXPECT_THROW((WindowConfig{300, 60, 200}.validate()), ContractError);
}

TEST(Windows, CarriedStateMatchesWholeSequence) {
  auto m = HybridModel::init(tiny_config());
  auto video = random_sequence(1000, 1.0, FeatureLayout::kDim, 7);
  VideoContext ctx(video, m.cfg);
  WindowConfig w;
  w.resets = false;
  auto windowed = windowed_coarse_track(m, ctx, w);
  auto whole = tier_track(m, Tier::Low, ctx, coarse_indices(m, ctx));
  ASSERT_EQ(windowed.track.t, whole.t);
  double worst = 0.0;
  for (std::size_t i = 0; i < whole.size(); ++i) worst = std::max(worst, std::abs(windowed.track.p[i] - whole.p[i]));
  EXPECT_LT(worst, 1e-8);
  EXPECT_TRUE(windowed.resets.empty());
}

TEST(Windows, ResetOnlyAffectsLaterFrames) {
  auto m = HybridModel::init(tiny_config());
  auto video = random_sequence(1000, 1.0, FeatureLayout::kDim, 8);
  VideoContext ctx(video, m.cfg);
  WindowConfig w;
  auto with = windowed_coarse_track(m, ctx, w);
  w.resets = false;
  auto without = windowed_coarse_track(m, ctx, w);
  ASSERT_EQ(with.resets, std::vector<double>{720.0});
  ASSERT_EQ(with.track.t, without.track.t);
  bool changed = false;
  for (std::size_t i = 0; i < with.track.size(); ++i) {
    const double diff = std::abs(with.track.p[i] - without.track.p[i]);
    if (with.track.t[i] >= 720.0) changed = changed || diff > 0.0;
    // The backward carry is reset at the same boundary, so frames of the
    // window before it can change too; frames well before it cannot.
    if (with.track.t[i] < 480.0 + 2.5) {
      EXPECT_EQ(diff, 0.0) << with.track.t[i];
    }
  }
  EXPECT_TRUE(changed);
}

TEST(Windows, ShortVideoFallsThrough) {
  auto m = HybridModel::init(tiny_config());
  auto video = random_sequence(200, 2.0, FeatureLayout::kDim, 9);
  VideoContext ctx(video, m.cfg);
  auto plan = ctx.plan(m);
  auto a = sliding_window_infer(m, ctx, plan, WindowConfig{});
  auto b = hierarchical_process(m, ctx, plan);
  EXPECT_EQ(prediction_json("v", a), prediction_json("v", b));
}

TEST(Windows, FusionIsIdempotent) {
  ProbTrack tr{{0, 1, 2, 3}, {0.1, 0.7, 0.3, 0.2}};
  auto f = fuse_max({tr, tr});
  EXPECT_EQ(f.t, tr.t);
  EXPECT_EQ(f.p, tr.p);
  auto g = fuse_max({ProbTrack{{0, 1}, {0.2, 0.5}}, ProbTrack{{1, 2}, {0.6, 0.1}}});
  EXPECT_EQ(g.p, (std::vector<double>{0.2, 0.6, 0.1}));
}

TEST(Windows, TopStatesRetained) {
  StackState s{SsmState(2, 4)};
  for (double& v : s[0].h.data()) v = 1.0;
  retain_top_states(s, {Tensor::vector({0.1, 0.9, 0.5, 0.2})}, 1);
  EXPECT_EQ(s[0].h, Tensor::matrix({{0, 1, 0, 0}, {0, 1, 0, 0}}));
}

TEST(Hierarchy, AllLowPlanUsesCoarseTrackOnly) {
  auto m = HybridModel::init(tiny_config());
  auto video = random_sequence(60, 5.0, FeatureLayout::kDim, 10);
  VideoContext ctx(video, m.cfg);
  SamplingPlan plan = ctx.plan(m);
  for (auto& s : plan.segments) s.tier = Tier::Low;
  auto r = hierarchical_process(m, ctx, plan);
  EXPECT_EQ(r.tiers_used, std::vector<std::string>{"LOW"});
  EXPECT_EQ(r.prediction.track.t, r.coarse.t);
  EXPECT_EQ(r.prediction.track.p, r.coarse.p);
  EXPECT_EQ(r.frames_processed, r.coarse.size());
}

TEST(Hierarchy, FinestTierWinsAndCostIsMonotone) {
  auto cfg = tiny_config();
  cfg.med_trigger = -1.0;
  cfg.high_trigger = -1.0;
  auto m = HybridModel::init(cfg);
  auto video = random_sequence(300, 10.0, FeatureLayout::kDim, 11);
  VideoContext ctx(video, m.cfg);
  SamplingPlan plan = ctx.plan(m);
  for (auto& s : plan.segments) s.tier = Tier::Low;
  std::size_t prev = hierarchical_process(m, ctx, plan).frames_processed;
  for (std::size_t k : {5u, 12u, 20u, 27u}) {
    plan.segments[k].tier = Tier::High;
    auto r = hierarchical_process(m, ctx, plan);
    EXPECT_GE(r.frames_processed, prev);
    prev = r.frames_processed;
    for (std::size_t i = 0; i < r.prediction.track.size(); ++i) {
      const double t = r.prediction.track.t[i];
      if (covered(r.high_regions, t)) {
        EXPECT_NEAR(std::fmod(t * 10.0 + 1e-6, 1.0), 0.0, 1e-5);
      }
    }
  }
  EXPECT_EQ(hierarchical_process(m, ctx, plan).tiers_used, (std::vector<std::string>{"LOW", "MED", "HIGH"}));
}

TEST(Hierarchy, PlanCoversInjectedCrash) {
  auto m = HybridModel::init(ModelConfig{});
  DefaultExtractor ex;
  for (std::uint64_t i = 0; i < 5; ++i) {
    ScenarioSpec s;
    s.seed = 40 + i;
    s.condition = std::string(kConditions[i]);
    s.crash_time_s = 20.0 + 17.0 * static_cast<double>(i);
    auto f = ex.extract(generate(s).frames);
    VideoContext ctx(f, m.cfg);
    EXPECT_EQ(ctx.plan(m).tier_at(*s.crash_time_s), Tier::High) << s.condition;
  }
}

TEST(Prediction, JsonFields) {
  auto m = HybridModel::init(tiny_config());
  auto video = random_sequence(40, 2.0, FeatureLayout::kDim, 12);
  auto r = hierarchical_process(m, video);
  auto j = prediction_json("vid", r);
  for (const char* k : {"video_id", "t_refined_s", "t_coarse_s", "confidence", "valid", "prob_track", "tiers_used",
                        "frames_processed", "reduction_pct"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["reduction_pct"].get<double>(), r.plan.reduction_pct);
  EXPECT_EQ(j["valid"].get<bool>(), !j["t_refined_s"].is_null());
}

TEST(Checkpoint, RoundTripAndCorruption) {
  auto m = HybridModel::init(tiny_config());
  m.theta[0] = 0.25;
  m.refine.trained = true;
  const auto dir = std::filesystem::temp_directory_path() / "tloc_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir);
  auto back = load_checkpoint(dir);
  EXPECT_TRUE(back.refine.trained);
  std::vector<Tensor> a, b;
  m.visit([&](const std::string&, Tensor& t) { a.push_back(t); });
  back.visit([&](const std::string&, Tensor& t) { b.push_back(t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

  {
    std::fstream f(dir / "thresholds.theta.tlt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW((void)load_checkpoint(dir), FormatError);
  std::filesystem::remove(dir / "thresholds.theta.tlt");
  EXPECT_THROW((void)load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
  EXPECT_THROW((void)load_checkpoint(dir), FormatError);
}

TEST(Config, FlatJsonRoundTrip) {
  ModelConfig c;
  c.d = 12;
  c.state_dims = {8, 12, 20};
  c.scales_s = {0.5, 2.0};
  c.rates.high = 15.0;
  auto back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  auto j = c.to_json();
  j["model.tau_med_init"] = 5.0;
  EXPECT_THROW((void)ModelConfig::from_json(j), ContractError);
}

}  // namespace
}  // namespace tloc
