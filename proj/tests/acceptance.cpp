// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion ids
// (e.g. `acceptance C1 C7`) to run a subset; the exit status is non-zero when
// any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "tloc/tloc.hpp"

namespace {

using namespace tloc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Shared end-to-end state: the default corpus and a model trained on it.

struct Workspace {
  fs::path root = fs::temp_directory_path() / "tloc_acceptance";
  std::optional<GenerateSummary> corpus;
  std::optional<fs::path> checkpoint;
  double train_seconds = 0.0;

  fs::path corpus_dir() const { return root / "corpus"; }

  const GenerateSummary& default_corpus() {
    if (!corpus) {
      fs::remove_all(corpus_dir());
      GenerateArgs g;
      g.out = corpus_dir();
      std::ostringstream sink;
      corpus = cmd_generate(g, sink);
    }
    return *corpus;
  }

  fs::path train(const std::string& name) {
    default_corpus();
    TrainArgs a;
    a.corpus = corpus_dir();
    a.out = root / name;
    a.config.seed = 1;
    fs::remove_all(a.out);
    std::ostringstream sink;
    return cmd_train(a, sink).final_checkpoint;
  }

  const fs::path& trained() {
    if (!checkpoint) {
      const auto t0 = Clock::now();
      checkpoint = train("run_a");
      train_seconds = seconds_since(t0);
    }
    return *checkpoint;
  }
};

Workspace ws;

// ---------------------------------------------------------------------------
// C1: the scan kernel against a step-by-step recurrence.

Outcome c1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed, "acceptance/c1");
    const std::size_t steps = 1 + rng.below(64), n = 1 + rng.below(32), d = 1 + rng.below(16);
    auto p = ScanProblem::random(steps, d, n, seed);
    SsmState init(d, n);
    for (double& v : init.h.data()) v = rng.uniform(-1.0, 1.0);
    const auto out = selective_scan(p.xprime, Tensor{}, p.disc, p.c, p.d_skip, init);

    std::vector<std::vector<double>> h(d, std::vector<double>(n));
    for (std::size_t ch = 0; ch < d; ++ch)
      for (std::size_t k = 0; k < n; ++k) h[ch][k] = init.h(ch, k);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t ch = 0; ch < d; ++ch) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          h[ch][k] = p.disc.abar(t, k) * h[ch][k] + p.disc.bbar(t, k) * p.xprime(t, ch);
          acc += p.c(t, k) * h[ch][k];
        }
        const double y = acc + p.d_skip[ch] * p.xprime(t, ch);
        worst = std::max(worst, std::abs(y - out.y(t, ch)));
      }
  }
  const double secs = seconds_since(t0);
  return {worst == 0.0 && secs < 10.0, fmt("max abs error %.3g over 50 seeds, %.2f s", worst, secs)};
}

// C2: doubling T roughly doubles scan time.
Outcome c2() {
  const auto t0 = Clock::now();
  const auto rows = bench_scan({4096, 8192}, 64, 16, 1, 9);
  const double ratio = rows[1].ratio, secs = seconds_since(t0);
  return {ratio <= 2.3 && secs < 60.0,
          fmt("cpu time T=4096 %.4f s, T=8192 %.4f s, ratio %.3f (bound 2.3), %.1f s", rows[0].seconds,
              rows[1].seconds, ratio, secs)};
}

// C3: chunked scans and windowed inference.
Outcome c3() {
  double scan_err = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed)
    for (std::size_t chunks : {2u, 3u, 7u})
      scan_err = std::max(scan_err, chunk_invariance_error(ScanProblem::random(500, 8, 16, seed), chunks));

  ModelConfig cfg;
  cfg.d = 16;
  cfg.state_dims = {8, 8, 8};
  const auto m = HybridModel::init(cfg);
  Rng rng(3, "acceptance/c3");
  FeatureSequence f;
  const std::size_t frames = 1200;  // 20 minutes at 1 fps
  f.features = Tensor({frames, cfg.feature_dim});
  for (double& v : f.features.data()) v = rng.normal();
  for (std::size_t i = 0; i < frames; ++i) f.timestamps.push_back(static_cast<double>(i));
  f.source_fps = 1.0;
  f.duration_s = static_cast<double>(frames);
  const VideoContext ctx(f, cfg);
  WindowConfig w;  // 5-minute windows, 1-minute overlap
  w.resets = false;
  const auto windowed = windowed_coarse_track(m, ctx, w);
  const auto whole = tier_track(m, Tier::Low, ctx, coarse_indices(m, ctx));
  double win_err = windowed.track.t == whole.t ? 0.0 : 1e300;
  for (std::size_t i = 0; i < whole.size() && win_err < 1e300; ++i)
    win_err = std::max(win_err, std::abs(windowed.track.p[i] - whole.p[i]));
  return {scan_err <= 1e-10 && win_err <= 1e-8,
          fmt("split scan %.3g (bound 1e-10), windowed vs whole %.3g over %zu windows (bound 1e-8)", scan_err,
              win_err, w.starts(f.duration_s).size())};
}

// C4: finite differences on the full model.
struct ModelView {
  HybridModel& m;
  template <typename F>
  void visit(const std::string&, F&& f) {
    m.visit(f);
  }
};

Outcome c4() {
  const auto t0 = Clock::now();
  ScenarioSpec s;
  s.duration_s = 3.2;
  s.fps = 10.0;
  s.crash_time_s = 1.6;
  s.seed = 21;
  const auto feats = DefaultExtractor().extract(generate(s).frames);
  ModelConfig cfg;
  auto m = HybridModel::init(cfg);
  Rng rng(2, "acceptance/c4");
  m.refine = RefineParams::init(rng);
  const VideoContext ctx(feats, cfg);
  std::vector<std::size_t> idx(feats.frames());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const TrainVideo tv{"c4", feats, 1.6, "clear"};
  const PreparedVideo pv{&tv, ctx};
  ModelView view{m};
  testing::LossBuilder<ModelView> loss = [&](Binder& bind, const ModelView& v) {
    Var total = loss_reg(bind, v.m);
    for (Tier t : {Tier::Low, Tier::Med, Tier::High})
      total = add(total, stream_loss(bind, v.m, pv, {t, idx, {0.0, 3.2}}, LossWeights{}, {}).total);
    Var r = refine_unit(bind, v.m.refine, bind.tape().constant(Tensor({1, 5}, {-0.2, -0.1, 0.0, -0.3, -0.5})));
    return add(total, sum(square(r)));
  };
  const auto errs = testing::check_param_groups<ModelView>(view, loss, 1e-5, 8, 5, is_frozen_param);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : errs)
    if (e >= worst) {
      worst = e;
      worst_name = name;
    }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 300.0 && feats.frames() == 32,
          fmt("%zu groups on %zu frames, worst relative error %.3g (%s), %.1f s", errs.size(), feats.frames(), worst,
              worst_name.c_str(), secs)};
}

// C5: the motion-variance formula.
Outcome c5() {
  FeatureSequence f;
  f.features = Tensor::matrix({{0, 0}, {1, 1}});
  f.timestamps = {0.0, 1.0};
  f.source_fps = 1.0;
  f.duration_s = 2.0;
  const FlowField flows{Tensor::matrix({{0, 0}}), Tensor::matrix({{3, 4}})};
  const double v = motion_variance(f, flows, {.alpha = 0.5}).v[1];
  const bool defaults = MotionOptions{}.alpha == 0.7 && ModelConfig{}.alpha == 0.7 && RunConfig{}.model.alpha == 0.7;
  return {v == 3.0 && defaults, fmt("v = %.17g at alpha 0.5; default alpha %.1f", v, MotionOptions{}.alpha)};
}

// C6: frame budget of the engineered profile.
Outcome c6() {
  const auto plan = bench_budgets().front().plan;
  const bool rates = plan.rates.low == 1.0 && plan.rates.med == 5.0 && plan.rates.high == 30.0;
  return {rates && plan.reduction_pct >= 70.0,
          fmt("MED %.0f%%, HIGH %.0f%% at %g/%g/%g fps: %g of %g frames, reduction %.2f%% (bound 70%%)",
              100 * plan.fraction(Tier::Med), 100 * plan.fraction(Tier::High), plan.rates.low, plan.rates.med,
              plan.rates.high, plan.retained_frames, plan.uniform_frames, plan.reduction_pct)};
}

// C7: HiPPO closed form and the diagonal shift.
Outcome c7() {
  const Tensor a = hippo_init(2);
  const bool hippo = a(0, 0) == -1.0 && a(0, 1) == 0.0 && a(1, 0) == -std::sqrt(3.0) && a(1, 1) == -2.0;
  bool shift = true;
  for (std::size_t n : {2u, 4u, 16u, 64u}) {
    const Tensor h = hippo_init(n), s = crash_aware_shift(h, 0.1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) shift = shift && s(i, k) == (i == k ? h(i, k) + 0.1 : h(i, k));
  }
  return {hippo && shift && ModelConfig{}.lambda_shift == 0.1,
          fmt("hippo(2) = [[%g, %g], [%.6f, %g]]; shift adds 0.1 on the diagonal only", a(0, 0), a(0, 1), a(1, 0),
              a(1, 1))};
}

// C8: loss oracles and linearity.
Outcome c8() {
  const double l05 = loss_temporal(10.5, 10.0), l2 = loss_temporal(12.0, 10.0);
  Tape tape;
  Var p = tape.leaf(Tensor({4, 1}, {0.1, 0.6, 0.8, 0.3}));
  Var third = tape.leaf(Tensor({1}, {0.42}));
  const std::vector<double> labels{0, 1, 1, 0}, times{1, 2, 3, 4};
  const auto base = loss_total(p, labels, times, 2.7, LossWeights{1, 0, 0, 0.7, 0.3}, third);
  const auto temp = loss_total(p, labels, times, 2.7, LossWeights{0, 1, 0, 0.7, 0.3}, third);
  const auto reg = loss_total(p, labels, times, 2.7, LossWeights{0, 0, 1, 0.7, 0.3}, third);
  double worst = 0.0;
  Rng rng(8, "acceptance/c8");
  for (int trial = 0; trial < 20; ++trial) {
    const LossWeights w{rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3), 0.7, 0.3};
    const double got = loss_total(p, labels, times, 2.7, w, third).total.value()[0];
    const double want = w.lambda1 * base.total.value()[0] + w.lambda2 * temp.total.value()[0] +
                        w.lambda3 * reg.total.value()[0];
    worst = std::max(worst, std::abs(got - want));
  }
  return {std::abs(l05 - 0.3875) <= 1e-12 && std::abs(l2 - 1.85) <= 1e-12 && worst <= 1e-12,
          fmt("L(0.5) = %.17g, L(2) = %.17g, linearity error %.3g", l05, l2, worst)};
}

// C9: metric worked examples.
Outcome c9() {
  auto rec = [](double gt, std::optional<double> pred, double dur = 120.0) {
    return EvalRecord{"v", gt, pred, pred.has_value(), dur, "clear", {}};
  };
  const auto m1 = mae({rec(10, 10), rec(20, 20)});
  const auto m2 = mae({rec(10, 10.5), rec(20, 21.5)});
  const auto m3 = mae({rec(10, 11), rec(30, std::nullopt, 120)});
  const double a1 = accuracy_at({rec(10, 10.4), rec(10, 12), rec(10, std::nullopt)}, 1.0);
  const bool worked = *m1.valid == 0.0 && m1.all == 0.0 && *m2.valid == 1.0 && m2.all == 1.0 && m3.all == 60.5 &&
                      a1 == 1.0 / 3.0 && accuracy_at({rec(1, 1), rec(2, 2)}, 1.0) == 1.0;
  bool monotone = true;
  Rng rng(9, "acceptance/c9");
  for (int set = 0; set < 100; ++set) {
    std::vector<EvalRecord> recs;
    const std::size_t n = 1 + rng.below(40);
    for (std::size_t i = 0; i < n; ++i) {
      const double gt = rng.uniform(0, 120);
      recs.push_back(rng.uniform() < 0.2 ? rec(gt, std::nullopt)
                                         : rec(gt, std::clamp(gt + 5 * rng.normal(), 0.0, 120.0)));
    }
    double prev = 0.0;
    for (double k = 0.1; k < 130.0; k *= 1.5) {
      const double a = accuracy_at(recs, k);
      monotone = monotone && a >= prev && a <= 1.0;
      prev = a;
    }
  }
  return {worked && monotone, fmt("mae_all %.17g for the failure case, acc@1 %.6f, monotone on 100 sets: %s", m3.all,
                                  a1, monotone ? "yes" : "no")};
}

// C10: end-to-end learning on the default corpus.
struct TestEval {
  EvalReport model, baseline;
  std::size_t clean = 0, clean_quiet = 0;
};

TestEval evaluate_test_split(const fs::path& checkpoint) {
  PredictArgs p;
  p.checkpoint = checkpoint;
  p.corpus = ws.corpus_dir();
  p.out = ws.root / "predictions";
  fs::remove_all(p.out);
  std::ostringstream sink;
  cmd_predict(p, sink);
  const auto man = load_manifest(ws.corpus_dir());
  const auto gt = ground_truth_of(man, "test");
  const auto preds = read_predictions(p.out);
  TestEval r;
  r.model = make_report(join_records(gt, preds));
  for (const auto& pf : preds) {
    const auto it = std::find_if(gt.begin(), gt.end(), [&](const auto& g) { return g.video_id == pf.video_id; });
    if (it->t_gt_s) continue;
    ++r.clean;
    r.clean_quiet += !pf.valid || pf.confidence < 0.5;
  }
  std::vector<EvalRecord> base;
  for (const auto& v : load_split(ws.corpus_dir(), man, "test")) {
    if (!v.video.crash_time_s) continue;
    const auto b = threshold_baseline(v.video.features);
    base.push_back({v.record.id, *v.video.crash_time_s, b.valid ? std::optional(b.t_s) : std::nullopt, b.valid,
                    v.record.duration_s, v.record.condition, {}});
  }
  r.baseline = make_report(base);
  return r;
}

std::optional<TestEval> c10_eval;

Outcome c10() {
  const auto t0 = Clock::now();
  ws.default_corpus();
  const auto ckpt = ws.trained();
  c10_eval = evaluate_test_split(ckpt);
  const double secs = seconds_since(t0);
  const auto& e = *c10_eval;
  const double mae_m = e.model.mae_all_s, mae_b = e.baseline.mae_all_s;
  const double acc_m = e.model.acc_at.at(3.0), acc_b = e.baseline.acc_at.at(3.0);
  return {mae_m < 5.0 && acc_m > 0.6 && mae_m < mae_b && acc_m > acc_b && secs < 1800.0,
          fmt("test MAE %.3f s, Acc@3s %.0f%% (n=%zu); baseline MAE %.3f s, Acc@3s %.0f%%; %.0f s total, %.0f s "
              "training",
              mae_m, 100 * acc_m, e.model.n, mae_b, 100 * acc_b, secs, ws.train_seconds)};
}

// C11: sliding-window inference on long sequences.
Outcome c11() {
  const auto t0 = Clock::now();
  const auto m = load_checkpoint(ws.trained());
  const DefaultExtractor ex;
  std::vector<EvalRecord> whole, windowed;
  Rng rng(11, "acceptance/c11");
  for (int i = 0; i < 6; ++i) {
    ScenarioSpec s;
    s.duration_s = 1200.0;
    s.fps = 10.0;
    s.crash_time_s = rng.uniform(30.0, 1170.0);
    s.condition = std::string(kConditions[static_cast<std::size_t>(i) % kConditions.size()]);
    s.seed = derive_seed(11, "long/" + std::to_string(i));
    const auto f = ex.extract(generate(s).frames);
    const VideoContext ctx(f, m.cfg);
    const auto plan = ctx.plan(m);
    auto record = [&](const HierarchicalResult& r) {
      const auto& p = r.prediction;
      return EvalRecord{"long", *s.crash_time_s, p.valid ? p.t_refined_s : std::nullopt, p.valid, s.duration_s,
                        s.condition, r.tiers_used};
    };
    whole.push_back(record(hierarchical_process(m, ctx, plan)));
    windowed.push_back(record(sliding_window_infer(m, ctx, plan, WindowConfig{})));
  }
  const double a = mae(windowed).all, b = mae(whole).all;
  return {a <= b, fmt("6 twenty-minute videos: sliding-window MAE %.3f s, whole-sequence MAE %.3f s, %.0f s", a, b,
                      seconds_since(t0))};
}

// C12: reproducible training and corpus.
Outcome c12() {
  const auto first = ws.trained();
  const auto second = ws.train("run_b");
  std::size_t files = 0, differ = 0;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  for (const auto& e : fs::directory_iterator(first)) {
    ++files;
    differ += slurp(e.path()) != slurp(second / e.path().filename());
  }
  CorpusOptions o;
  auto m1 = build_corpus(o), m2 = build_corpus(o);
  const DefaultExtractor ex;
  (void)materialize(m2, ex);
  const std::string generated = ws.default_corpus().manifest_sha256;
  const bool corpus = m2.hash() == generated && load_manifest(ws.corpus_dir()).hash() == generated &&
                      m1.hash() == build_corpus(o).hash();
  return {differ == 0 && files > 0 && corpus,
          fmt("%zu checkpoint files, %zu differ; corpus manifest sha256 %.12s... reproduced: %s", files, differ,
              generated.c_str(), corpus ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"C1", c1}, {"C2", c2}, {"C3", c3}, {"C4", c4},   {"C5", c5},   {"C6", c6},
      {"C7", c7}, {"C8", c8}, {"C9", c9}, {"C10", c10}, {"C11", c11}, {"C12", c12}};
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << ": " << o.detail << std::endl;
  }
  if (c10_eval && c10_eval->clean)
    std::cout << "info: " << c10_eval->clean_quiet << "/" << c10_eval->clean
              << " crash-free test videos without a confident alarm" << std::endl;
  return failed ? 1 : 0;
}
