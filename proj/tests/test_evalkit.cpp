#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "tloc/evalkit.hpp"
#include "tloc/rng.hpp"

namespace tloc {
namespace {

EvalRecord hit(double gt, double pred, double dur = 120.0, std::string cond = "clear") {
  return {"v", gt, pred, true, dur, std::move(cond), {}};
}
EvalRecord miss(double gt, double dur = 120.0, std::string cond = "clear") {
  return {"v", gt, std::nullopt, false, dur, std::move(cond), {}};
}

std::vector<EvalRecord> random_records(Rng& rng, std::size_t n) {
  static const char* conds[] = {"clear", "rain", "fog"};
  std::vector<EvalRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double dur = 60.0 * static_cast<double>(1 + rng.below(10));
    const double gt = rng.uniform(0.0, dur);
    if (rng.uniform() < 0.2) out.push_back(miss(gt, dur, conds[rng.below(3)]));
    else out.push_back(hit(gt, std::clamp(gt + rng.normal() * 4.0, 0.0, dur), dur, conds[rng.below(3)]));
    out.back().video_id = "v" + std::to_string(i);
  }
  return out;
}

TEST(Mae, ExactPredictionsGiveZero) {
  auto m = mae({hit(10, 10), hit(50, 50)});
  ASSERT_TRUE(m.valid);
  EXPECT_EQ(*m.valid, 0.0);
  EXPECT_EQ(m.all, 0.0);
}

TEST(Mae, HandExamples) {
  auto m = mae({hit(10, 10.5), hit(20, 21.5)});
  EXPECT_DOUBLE_EQ(*m.valid, 1.0);
  EXPECT_DOUBLE_EQ(m.all, 1.0);

  auto f = mae({hit(10, 11), miss(30, 120)});
  EXPECT_DOUBLE_EQ(*f.valid, 1.0);
  EXPECT_DOUBLE_EQ(f.all, 60.5);
}

TEST(Mae, NoValidRecordsLeavesValidMaeUndefined) {
  auto m = mae({miss(5, 60), miss(5, 120)});
  EXPECT_FALSE(m.valid);
  EXPECT_DOUBLE_EQ(m.all, 90.0);
  EXPECT_THROW((void)mae({}), ContractError);
}

TEST(Mae, RecordContract) {
  EvalRecord r = hit(10, 12);
  r.valid = false;
  EXPECT_THROW((void)mae({r}), ContractError);
  EXPECT_THROW((void)mae({hit(130, 1, 120)}), ContractError);
}

TEST(AccuracyAt, HandExamples) {
  EXPECT_EQ(accuracy_at({hit(1, 1), hit(7, 7)}, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(accuracy_at({hit(10, 10.4), hit(10, 12), miss(10)}, 1.0), 1.0 / 3.0);
  EXPECT_EQ(accuracy_at({hit(10, 11)}, 1.0), 1.0);  // inclusive bound
  EXPECT_THROW((void)accuracy_at({hit(1, 1)}, 0.0), ContractError);
}

TEST(AccuracyAt, MonotoneInK) {
  Rng rng(5, "acc-monotone");
  for (int trial = 0; trial < 100; ++trial) {
    auto recs = random_records(rng, 1 + rng.below(30));
    double prev = 0.0;
    for (double k : {0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 60.0}) {
      const double a = accuracy_at(recs, k);
      EXPECT_GE(a, prev);
      EXPECT_LE(a, 1.0);
      prev = a;
    }
  }
}

TEST(AccuracyAt, InfiniteKEqualsValidRate) {
  Rng rng(6, "acc-inf");
  auto recs = random_records(rng, 40);
  const auto rep = make_report(recs);
  EXPECT_EQ(accuracy_at(recs, std::numeric_limits<double>::infinity()), rep.valid_rate);
}

TEST(Report, FailureInclusiveIdentity) {
  Rng rng(7, "identity");
  for (int trial = 0; trial < 20; ++trial) {
    auto recs = random_records(rng, 25);
    const auto rep = make_report(recs);
    double inv_dur = 0.0;
    std::size_t n_inv = 0;
    for (const auto& r : recs)
      if (!r.valid) {
        inv_dur += r.duration_s;
        ++n_inv;
      }
    const double mean_inv = n_inv ? inv_dur / static_cast<double>(n_inv) : 0.0;
    const double v = rep.mae_valid_s.value_or(0.0);
    EXPECT_NEAR(rep.mae_all_s, rep.valid_rate * v + (1.0 - rep.valid_rate) * mean_inv, 1e-12);
  }
}

TEST(Report, PermutationInvariant) {
  Rng rng(8, "perm");
  auto recs = random_records(rng, 30);
  const auto a = make_report(recs);
  std::reverse(recs.begin(), recs.end());
  rng.shuffle(recs);
  const auto b = make_report(recs);
  EXPECT_NEAR(a.mae_all_s, b.mae_all_s, 1e-12);
  EXPECT_NEAR(*a.mae_valid_s, *b.mae_valid_s, 1e-12);
  EXPECT_EQ(a.acc_at, b.acc_at);
}

TEST(Stratify, SingleStratumEqualsPooled) {
  std::vector<EvalRecord> recs = {hit(1, 2), hit(5, 5.5), miss(9)};
  auto s = stratify(recs, StrataKey::Condition);
  ASSERT_EQ(s.strata.size(), 1u);
  const auto& only = s.strata.at("clear");
  EXPECT_EQ(only.mae_all_s, s.pooled.mae_all_s);
  EXPECT_EQ(only.acc_at, s.pooled.acc_at);
  EXPECT_EQ(only.n, s.pooled.n);
}

TEST(Stratify, PartitionAndRecombination) {
  Rng rng(9, "strata");
  auto recs = random_records(rng, 60);
  for (auto key : {StrataKey::Condition, StrataKey::Duration}) {
    auto s = stratify(recs, key);
    std::size_t n = 0;
    double weighted = 0.0;
    for (const auto& [k, r] : s.strata) {
      n += r.n;
      weighted += static_cast<double>(r.n) * r.mae_all_s;
    }
    EXPECT_EQ(n, s.pooled.n);
    EXPECT_NEAR(weighted / static_cast<double>(n), s.pooled.mae_all_s, 1e-12);
  }
}

TEST(Stratify, DurationLabels) {
  EXPECT_EQ(duration_label(120.0), "2min");
  EXPECT_EQ(duration_label(2400.0), "40min");
  auto s = stratify({hit(1, 1, 120), hit(1, 1, 600)}, StrataKey::Duration);
  EXPECT_EQ(s.strata.size(), 2u);
  EXPECT_THROW((void)parse_strata_key("weather"), ContractError);
}

TEST(DurationFit, RecoversExactExponential) {
  const double a = 1.35, b = 0.08;
  std::vector<std::pair<double, double>> pts;
  for (double d : {2.0, 5.0, 10.0, 20.0, 40.0}) pts.emplace_back(d, a * std::exp(b * d));
  auto f = duration_fit(pts);
  EXPECT_NEAR(f.a, a, 1e-9);
  EXPECT_NEAR(f.b, b, 1e-9);
}

TEST(DurationFit, ConstantAndDegenerate) {
  auto f = duration_fit({{2, 3.0}, {5, 3.0}, {10, 3.0}});
  EXPECT_NEAR(f.b, 0.0, 1e-12);
  EXPECT_NEAR(f.a, 3.0, 1e-12);
  EXPECT_THROW((void)duration_fit({{5, 1.0}, {5, 2.0}, {5, 3.0}}), ContractError);
  EXPECT_THROW((void)duration_fit({{1, 1.0}, {2, 2.0}}), ContractError);
  // the non-positive point is dropped, leaving too few
  EXPECT_THROW((void)duration_fit({{1, 1.0}, {2, 2.0}, {3, 0.0}}), ContractError);
}

TEST(Seeds, ParseAndSummarize) {
  EXPECT_EQ(parse_seed_list("1..5"), (std::vector<std::uint64_t>{1, 2, 3, 4, 5}));
  EXPECT_EQ(parse_seed_list("3,9"), (std::vector<std::uint64_t>{3, 9}));
  EXPECT_THROW((void)parse_seed_list("5..1"), ContractError);
  EXPECT_THROW((void)parse_seed_list("x"), ContractError);

  EvalReport a, b;
  a.mae_all_s = 1.0;
  b.mae_all_s = 3.0;
  a.acc_at[1.0] = 0.5;
  b.acc_at[1.0] = 0.7;
  auto s = summarize_seeds({1, 2}, {a, b});
  EXPECT_DOUBLE_EQ(s.metrics.at("mae_all_s").mean, 2.0);
  EXPECT_DOUBLE_EQ(s.metrics.at("mae_all_s").std, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(s.metrics.at("acc@1s").mean, 0.6);
}

TEST(Files, GroundTruthRoundTrip) {
  std::vector<GroundTruthRow> gt = {{"a", 12.5, 120, "rain"}, {"b", std::nullopt, 120, "fog"}};
  std::stringstream ss;
  write_ground_truth(ss, gt);
  auto back = read_ground_truth(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].t_gt_s, 12.5);
  EXPECT_FALSE(back[1].t_gt_s);
  EXPECT_EQ(back[1].condition, "fog");

  std::stringstream bad("id,t\n");
  EXPECT_THROW((void)read_ground_truth(bad), FormatError);
}

TEST(Files, JoinReportsEveryMismatch) {
  std::vector<GroundTruthRow> gt = {{"a", 10.0, 120, "clear"}, {"b", 20.0, 120, "clear"}};
  std::vector<PredictionFile> preds = {{"a", 10.5, true, 0.9, {}}, {"z", std::nullopt, false, 0.1, {}}};
  try {
    (void)join_records(gt, preds);
    FAIL() << "expected AlignmentError";
  } catch (const AlignmentError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing prediction for b"), std::string::npos);
    EXPECT_NE(msg.find("prediction z has no ground truth"), std::string::npos);
  }
  preds[1].video_id = "b";
  auto recs = join_records(gt, preds);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_DOUBLE_EQ(mae(recs).all, (0.5 + 120.0) / 2.0);
}

TEST(Files, PredictionsEqualToTruth) {
  std::vector<GroundTruthRow> gt = {{"a", 10.0, 120, "clear"}, {"b", 20.0, 120, "rain"}, {"c", std::nullopt, 120, "fog"}};
  std::vector<PredictionFile> preds = {{"a", 10.0, true, 0.9, {}}, {"b", 20.0, true, 0.8, {}},
                                       {"c", std::nullopt, false, 0.2, {}}};
  auto rep = make_report(join_records(gt, preds));
  EXPECT_EQ(rep.mae_all_s, 0.0);
  EXPECT_EQ(rep.acc_at.at(1.0), rep.valid_rate);
  EXPECT_EQ(*false_alarm_rate(gt, preds), 0.0);
}

TEST(Files, HistogramCountsAllRecords) {
  std::stringstream ss;
  write_error_histogram(ss, {hit(1, 1.2), hit(1, 1.7), hit(1, 4), miss(1, 60)}, 1.0);
  EXPECT_EQ(ss.str(), "bin_lo_s,bin_hi_s,count\n0,1,2\n3,4,1\n60,61,1\n");
}

}  // namespace
}  // namespace tloc
