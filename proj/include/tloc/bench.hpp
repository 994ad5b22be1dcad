#pragma once

#include <algorithm>
#include <ctime>
#include <ostream>
#include <vector>

#include "tloc/sampler.hpp"
#include "tloc/ssm.hpp"

namespace tloc {

/// Random scan inputs of a fixed size, reproducible from a seed.
struct ScanProblem {
  Tensor xprime;
  Discretized disc;
  Tensor c;
  Tensor d_skip;

  static ScanProblem random(std::size_t steps, std::size_t d, std::size_t n, std::uint64_t seed) {
    Rng rng(seed, "bench/scan");
    auto fill = [&](Shape s, double lo, double hi) {
      Tensor t(std::move(s));
      for (double& v : t.data()) v = rng.uniform(lo, hi);
      return t;
    };
    ScanProblem p;
    p.xprime = fill({steps, d}, -1.0, 1.0);
    p.disc.abar = fill({steps, n}, 0.05, 0.99);
    p.disc.bbar = fill({steps, n}, -1.0, 1.0);
    p.c = fill({steps, n}, -1.0, 1.0);
    p.d_skip = fill({d}, -1.0, 1.0);
    return p;
  }

  [[nodiscard]] std::size_t steps() const { return xprime.rows(); }

  [[nodiscard]] ScanOutput run(std::size_t begin, std::size_t end, const SsmState& init) const {
    auto rows = [&](const Tensor& t) {
      const auto w = static_cast<std::ptrdiff_t>(t.cols());
      return Tensor({end - begin, t.cols()}, std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(begin) * w,
                                                                 t.data().begin() + static_cast<std::ptrdiff_t>(end) * w));
    };
    return selective_scan(rows(xprime), Tensor{}, {rows(disc.abar), rows(disc.bbar)}, rows(c), d_skip, init);
  }
};

/// CPU time consumed by the calling thread, in seconds.
[[nodiscard]] inline double thread_cpu_seconds() {
  timespec ts{};
  if (clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts) != 0) throw Error("clock_gettime failed");
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

/// Best-of-`repeats` thread CPU time of one full forward scan.
[[nodiscard]] inline double time_scan(const ScanProblem& p, int repeats = 5) {
  const SsmState zero(p.xprime.cols(), p.c.cols());
  const Tensor none;
  (void)selective_scan(p.xprime, none, p.disc, p.c, p.d_skip, zero);
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const double t0 = thread_cpu_seconds();
    const auto out = selective_scan(p.xprime, none, p.disc, p.c, p.d_skip, zero);
    const double t1 = thread_cpu_seconds();
    if (out.y.empty()) throw Error("time_scan: empty output");
    best = std::min(best, t1 - t0);
  }
  return best;
}

/// Largest deviation between one whole scan and the same scan run in `chunks`
/// consecutive pieces with carried state.
[[nodiscard]] inline double chunk_invariance_error(const ScanProblem& p, std::size_t chunks = 2) {
  const std::size_t steps = p.steps();
  if (chunks == 0 || chunks > steps) throw ContractError("chunk_invariance_error: bad chunk count");
  const SsmState zero(p.xprime.cols(), p.c.cols());
  const auto whole = p.run(0, steps, zero);
  SsmState carry = zero;
  double worst = 0.0;
  for (std::size_t k = 0; k < chunks; ++k) {
    const std::size_t b = steps * k / chunks, e = steps * (k + 1) / chunks;
    const auto part = p.run(b, e, carry);
    for (std::size_t t = b; t < e; ++t)
      for (std::size_t ch = 0; ch < part.y.cols(); ++ch)
        worst = std::max(worst, std::abs(part.y(t - b, ch) - whole.y(t, ch)));
    carry = part.final;
  }
  return std::max(worst, max_abs_diff(carry.h, whole.final.h));
}

struct ScanBenchRow {
  std::size_t steps = 0;
  double seconds = 0.0;
  double ratio = 0.0;  ///< seconds relative to the previous row; 0 for the first
  double chunk_error = 0.0;
};

[[nodiscard]] inline std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& sizes, std::size_t d,
                                                         std::size_t n, std::uint64_t seed, int repeats = 5) {
  std::vector<ScanBenchRow> rows;
  for (std::size_t steps : sizes) {
    const auto p = ScanProblem::random(steps, d, n, seed);
    ScanBenchRow r{steps, time_scan(p, repeats), 0.0, chunk_invariance_error(p, 4)};
    if (!rows.empty()) r.ratio = r.seconds / rows.back().seconds;
    rows.push_back(r);
  }
  return rows;
}

inline void write_scan_csv(std::ostream& os, const std::vector<ScanBenchRow>& rows) {
  os << "T,cpu_seconds,ratio_to_previous,chunk_max_abs_error\n";
  for (const auto& r : rows) os << r.steps << ',' << r.seconds << ',' << r.ratio << ',' << r.chunk_error << '\n';
}

/// Segment-level motion profile sized so a plan spends 15% of segments at the
/// MED rate and 3% at the HIGH rate: 15 MED segments plus one HIGH trigger whose
/// two-second backtrack adds two more HIGH segments, over 100 one-second segments.
[[nodiscard]] inline MotionProfile engineered_budget_profile() {
  MotionProfile p;
  p.v.assign(100, 0.0);
  for (std::size_t s = 5; s < 20; ++s) p.v[s] = 1.5;
  p.v[50] = 3.0;
  p.frame_v = p.v;
  return p;
}

struct BudgetRow {
  std::string profile;
  SamplingPlan plan;
};

[[nodiscard]] inline std::vector<BudgetRow> bench_budgets() {
  const Thresholds th{2.0, 1.0, false, false};
  const auto engineered = engineered_budget_profile();
  MotionProfile flat;
  flat.v.assign(100, 0.0);
  flat.frame_v = flat.v;
  return {{"med15_high3", build_plan(engineered, th, 100.0 / 60.0)}, {"all_low", build_plan(flat, th, 100.0 / 60.0)}};
}

inline void write_budget_csv(std::ostream& os, const std::vector<BudgetRow>& rows) {
  os << "profile,segments,low,med,high,retained_frames,uniform_frames,reduction_pct\n";
  for (const auto& r : rows) {
    os << r.profile << ',' << r.plan.segments.size() << ',' << r.plan.count(Tier::Low) << ','
       << r.plan.count(Tier::Med) << ',' << r.plan.count(Tier::High) << ',' << r.plan.retained_frames << ','
       << r.plan.uniform_frames << ',' << r.plan.reduction_pct << '\n';
  }
}

}  // namespace tloc
