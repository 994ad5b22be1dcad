#pragma once

// Localization metrics: MAE (over valid predictions and failure-inclusive),
// Accuracy@K, stratified reports, exponential duration fits, and the file
// formats around them.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tloc/error.hpp"

namespace tloc {

struct EvalRecord {
  std::string video_id;
  double t_gt_s = 0.0;
  std::optional<double> t_pred_s;
  bool valid = false;
  double duration_s = 0.0;
  std::string condition;
  std::vector<std::string> tiers_used;

  void validate() const {
    if (valid != t_pred_s.has_value())
      throw ContractError("record " + video_id + ": a prediction time must be present exactly when valid");
    if (!(duration_s > 0.0)) throw ContractError("record " + video_id + ": duration must be positive");
    if (!(t_gt_s >= 0.0 && t_gt_s <= duration_s))
      throw ContractError("record " + video_id + ": ground truth outside [0, duration]");
  }

  /// |t_pred − t_gt| for valid records, the video duration otherwise.
  [[nodiscard]] double penalized_error() const { return valid ? std::abs(*t_pred_s - t_gt_s) : duration_s; }
};

struct MaeResult {
  std::optional<double> valid;  ///< absent when no record is valid
  double all = 0.0;
};

[[nodiscard]] inline MaeResult mae(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw ContractError("mae: no records");
  double sv = 0.0, sa = 0.0;
  std::size_t nv = 0;
  for (const auto& r : records) {
    r.validate();
    if (r.valid) {
      sv += std::abs(*r.t_pred_s - r.t_gt_s);
      ++nv;
    }
    sa += r.penalized_error();
  }
  MaeResult out;
  if (nv > 0) out.valid = sv / static_cast<double>(nv);
  out.all = sa / static_cast<double>(records.size());
  return out;
}

/// Fraction of all records that are valid and within K seconds (inclusive).
[[nodiscard]] inline double accuracy_at(const std::vector<EvalRecord>& records, double k_s) {
  if (!(k_s > 0.0)) throw ContractError("accuracy_at: K must be positive");
  if (records.empty()) throw ContractError("accuracy_at: no records");
  std::size_t hit = 0;
  for (const auto& r : records) {
    r.validate();
    if (r.valid && std::abs(*r.t_pred_s - r.t_gt_s) <= k_s) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(records.size());
}

inline const std::vector<double> kDefaultAccuracyK = {1.0, 3.0, 5.0};

struct EvalReport {
  std::size_t n = 0;
  std::size_t n_valid = 0;
  std::optional<double> mae_valid_s;
  double mae_all_s = 0.0;
  std::map<double, double> acc_at;
  double valid_rate = 0.0;
  double mean_duration_s = 0.0;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json acc = nlohmann::json::object();
    for (auto [k, v] : acc_at) acc[format_k(k)] = v;
    return {{"n", n},
            {"n_valid", n_valid},
            {"mae_valid_s", mae_valid_s ? nlohmann::json(*mae_valid_s) : nlohmann::json(nullptr)},
            {"mae_all_s", mae_all_s},
            {"acc_at", acc},
            {"valid_rate", valid_rate},
            {"mean_duration_s", mean_duration_s}};
  }

  [[nodiscard]] static std::string format_k(double k) {
    std::ostringstream os;
    os << k << "s";
    return os.str();
  }
};

[[nodiscard]] inline EvalReport make_report(const std::vector<EvalRecord>& records,
                                            const std::vector<double>& ks = kDefaultAccuracyK) {
  const MaeResult m = mae(records);
  EvalReport r;
  r.n = records.size();
  r.n_valid = static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](auto& x) { return x.valid; }));
  r.mae_valid_s = m.valid;
  r.mae_all_s = m.all;
  r.valid_rate = static_cast<double>(r.n_valid) / static_cast<double>(r.n);
  for (double k : ks) r.acc_at[k] = accuracy_at(records, k);
  double d = 0.0;
  for (const auto& x : records) d += x.duration_s;
  r.mean_duration_s = d / static_cast<double>(r.n);
  return r;
}

enum class StrataKey { Duration, Condition };

[[nodiscard]] inline StrataKey parse_strata_key(const std::string& s) {
  if (s == "duration") return StrataKey::Duration;
  if (s == "condition") return StrataKey::Condition;
  throw ContractError("unknown strata key '" + s + "' (expected duration or condition)");
}

/// Duration stratum label: the duration rounded to whole minutes, e.g. "2min".
[[nodiscard]] inline std::string duration_label(double duration_s) {
  const auto minutes = static_cast<long>(std::lround(duration_s / 60.0));
  return std::to_string(std::max(minutes, 0L)) + "min";
}

struct StratifiedReport {
  StrataKey key = StrataKey::Condition;
  std::map<std::string, EvalReport> strata;
  EvalReport pooled;
  std::vector<std::string> notes;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [k, r] : strata) s[k] = r.to_json();
    return {{"key", key == StrataKey::Duration ? "duration" : "condition"},
            {"strata", s},
            {"pooled", pooled.to_json()},
            {"notes", notes}};
  }
};

[[nodiscard]] inline StratifiedReport stratify(const std::vector<EvalRecord>& records, StrataKey key,
                                               const std::vector<double>& ks = kDefaultAccuracyK) {
  StratifiedReport out;
  out.key = key;
  out.pooled = make_report(records, ks);
  std::map<std::string, std::vector<EvalRecord>> groups;
  for (const auto& r : records) {
    const std::string label = key == StrataKey::Duration ? duration_label(r.duration_s) : r.condition;
    if (label.empty()) {
      out.notes.push_back("record " + r.video_id + " has no " +
                          std::string(key == StrataKey::Duration ? "duration" : "condition") + "; omitted from strata");
      continue;
    }
    groups[label].push_back(r);
  }
  for (const auto& [label, rs] : groups) out.strata.emplace(label, make_report(rs, ks));
  return out;
}

struct ExpFit {
  double a = 0.0;
  double b = 0.0;
  std::size_t points = 0;
};

/// Least squares of log(mae) = log(a) + b·d. Non-positive MAE points are dropped.
[[nodiscard]] inline ExpFit duration_fit(const std::vector<std::pair<double, double>>& duration_mae) {
  std::vector<std::pair<double, double>> pts;
  for (auto [d, m] : duration_mae)
    if (m > 0.0 && std::isfinite(m) && std::isfinite(d)) pts.emplace_back(d, std::log(m));
  if (pts.size() < 3) throw ContractError("duration_fit: need at least 3 points with positive MAE");
  double md = 0.0, ml = 0.0;
  for (auto [d, l] : pts) {
    md += d;
    ml += l;
  }
  const double n = static_cast<double>(pts.size());
  md /= n;
  ml /= n;
  double sdd = 0.0, sdl = 0.0;
  for (auto [d, l] : pts) {
    sdd += (d - md) * (d - md);
    sdl += (d - md) * (l - ml);
  }
  if (sdd <= 1e-12 * std::max(1.0, md * md)) throw ContractError("duration_fit: all points share one duration");
  ExpFit f;
  f.b = sdl / sdd;
  f.a = std::exp(ml - f.b * md);
  f.points = pts.size();
  return f;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation (0 for a single value)
};

[[nodiscard]] inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("mean_std: no values");
  MeanStd r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return r;
}

/// Mean ± std of each scalar metric over one report per seed.
struct SeedSummary {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, MeanStd> metrics;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : metrics) m[k] = {{"mean", v.mean}, {"std", v.std}};
    return {{"seeds", seeds}, {"metrics", m}};
  }
};

[[nodiscard]] inline SeedSummary summarize_seeds(const std::vector<std::uint64_t>& seeds,
                                                 const std::vector<EvalReport>& reports) {
  if (seeds.size() != reports.size() || reports.empty())
    throw ContractError("summarize_seeds: need one report per seed");
  std::map<std::string, std::vector<double>> cols;
  for (const auto& r : reports) {
    cols["mae_all_s"].push_back(r.mae_all_s);
    if (r.mae_valid_s) cols["mae_valid_s"].push_back(*r.mae_valid_s);
    cols["valid_rate"].push_back(r.valid_rate);
    for (auto [k, v] : r.acc_at) cols["acc@" + EvalReport::format_k(k)].push_back(v);
  }
  SeedSummary s;
  s.seeds = seeds;
  for (const auto& [k, v] : cols) s.metrics[k] = mean_std(v);
  return s;
}

/// Parses "1..5" or "1,2,3" into a seed list.
[[nodiscard]] inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  try {
    if (auto p = s.find(".."); p != std::string::npos) {
      const auto lo = std::stoull(s.substr(0, p)), hi = std::stoull(s.substr(p + 2));
      if (hi < lo) throw ContractError("seed range '" + s + "' is empty");
      for (auto v = lo; v <= hi; ++v) out.push_back(v);
    } else {
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
    }
  } catch (const std::logic_error&) {
    throw ContractError("cannot parse seed list '" + s + "'");
  }
  if (out.empty()) throw ContractError("empty seed list");
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth and prediction files.

struct GroundTruthRow {
  std::string video_id;
  std::optional<double> t_gt_s;  ///< absent for crash-free videos
  double duration_s = 0.0;
  std::string condition;
};

inline constexpr const char* kGroundTruthHeader = "video_id,t_gt_s,duration_s,condition";

inline void write_ground_truth(std::ostream& os, const std::vector<GroundTruthRow>& rows) {
  os << kGroundTruthHeader << '\n';
  os << std::setprecision(17);
  for (const auto& g : rows) {
    os << g.video_id << ',';
    if (g.t_gt_s) os << *g.t_gt_s;
    os << ',' << g.duration_s << ',' << g.condition << '\n';
  }
}

[[nodiscard]] inline std::vector<GroundTruthRow> read_ground_truth(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("ground truth: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kGroundTruthHeader) throw FormatError("ground truth: unexpected header '" + line + "'");
  std::vector<GroundTruthRow> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 4) throw FormatError("ground truth line " + std::to_string(lineno) + ": expected 4 fields");
    GroundTruthRow g;
    g.video_id = f[0];
    try {
      if (!f[1].empty()) g.t_gt_s = std::stod(f[1]);
      g.duration_s = std::stod(f[2]);
    } catch (const std::logic_error&) {
      throw FormatError("ground truth line " + std::to_string(lineno) + ": bad number");
    }
    g.condition = f[3];
    out.push_back(std::move(g));
  }
  return out;
}

[[nodiscard]] inline std::vector<GroundTruthRow> read_ground_truth(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open ground truth " + p.string());
  return read_ground_truth(is);
}

/// Fields of a prediction JSON that evaluation needs.
struct PredictionFile {
  std::string video_id;
  std::optional<double> t_pred_s;
  bool valid = false;
  double confidence = 0.0;
  std::vector<std::string> tiers_used;

  [[nodiscard]] static PredictionFile from_json(const nlohmann::json& j) {
    PredictionFile p;
    try {
      p.video_id = j.at("video_id").get<std::string>();
      p.valid = j.at("valid").get<bool>();
      if (j.contains("t_refined_s") && !j["t_refined_s"].is_null()) p.t_pred_s = j["t_refined_s"].get<double>();
      if (j.contains("confidence")) p.confidence = j["confidence"].get<double>();
      if (j.contains("tiers_used")) p.tiers_used = j["tiers_used"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("prediction JSON: ") + e.what());
    }
    if (p.valid != p.t_pred_s.has_value())
      throw FormatError("prediction " + p.video_id + ": t_refined_s must be present exactly when valid");
    return p;
  }
};

/// Joins predictions with ground truth. Crash-free videos are skipped. Any id
/// mismatch raises AlignmentError listing every offending id.
[[nodiscard]] inline std::vector<EvalRecord> join_records(const std::vector<GroundTruthRow>& gt,
                                                          const std::vector<PredictionFile>& preds) {
  std::map<std::string, const PredictionFile*> by_id;
  std::vector<std::string> problems;
  for (const auto& p : preds)
    if (!by_id.emplace(p.video_id, &p).second) problems.push_back("duplicate prediction for " + p.video_id);
  std::map<std::string, bool> seen;
  std::vector<EvalRecord> out;
  for (const auto& g : gt) {
    seen[g.video_id] = true;
    auto it = by_id.find(g.video_id);
    if (it == by_id.end()) {
      problems.push_back("missing prediction for " + g.video_id);
      continue;
    }
    if (!g.t_gt_s) continue;
    const PredictionFile& p = *it->second;
    EvalRecord r{g.video_id, *g.t_gt_s, p.t_pred_s, p.valid, g.duration_s, g.condition, p.tiers_used};
    out.push_back(std::move(r));
  }
  for (const auto& p : preds)
    if (!seen.count(p.video_id)) problems.push_back("prediction " + p.video_id + " has no ground truth");
  if (!problems.empty()) {
    std::string msg = "predictions and ground truth disagree:";
    for (const auto& s : problems) msg += "\n  - " + s;
    throw AlignmentError(msg);
  }
  return out;
}

/// Fraction of crash-free videos with a valid prediction at confidence ≥ p_min.
[[nodiscard]] inline std::optional<double> false_alarm_rate(const std::vector<GroundTruthRow>& gt,
                                                            const std::vector<PredictionFile>& preds,
                                                            double p_min = 0.5) {
  std::map<std::string, const PredictionFile*> by_id;
  for (const auto& p : preds) by_id[p.video_id] = &p;
  std::size_t n = 0, alarms = 0;
  for (const auto& g : gt) {
    if (g.t_gt_s) continue;
    auto it = by_id.find(g.video_id);
    if (it == by_id.end()) continue;
    ++n;
    if (it->second->valid && it->second->confidence >= p_min) ++alarms;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(alarms) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Human-readable output.

inline void print_report_row(std::ostream& os, const std::string& label, const EvalReport& r) {
  os << std::left << std::setw(12) << label << std::right << std::setw(5) << r.n << std::fixed << std::setprecision(3)
     << std::setw(12);
  if (r.mae_valid_s) os << *r.mae_valid_s;
  else os << "n/a";
  os << std::setw(12) << r.mae_all_s;
  for (auto [k, v] : r.acc_at) os << std::setw(10) << 100.0 * v;
  os << std::setw(10) << 100.0 * r.valid_rate << '\n';
  os.unsetf(std::ios::fixed);
}

inline void print_table_header(std::ostream& os, const EvalReport& r) {
  os << std::left << std::setw(12) << "stratum" << std::right << std::setw(5) << "n" << std::setw(12) << "MAE(valid)"
     << std::setw(12) << "MAE(all)";
  for (auto [k, v] : r.acc_at) os << std::setw(10) << ("Acc@" + EvalReport::format_k(k));
  os << std::setw(10) << "valid%" << '\n';
}

inline void print_table(std::ostream& os, const StratifiedReport& s) {
  print_table_header(os, s.pooled);
  for (const auto& [k, r] : s.strata) print_report_row(os, k, r);
  print_report_row(os, "pooled", s.pooled);
  for (const auto& n : s.notes) os << "note: " << n << '\n';
}

/// Histogram of penalized errors with `bin_s`-wide bins, as CSV rows (lo, hi, count).
inline void write_error_histogram(std::ostream& os, const std::vector<EvalRecord>& records, double bin_s = 1.0) {
  if (!(bin_s > 0.0)) throw ContractError("histogram bin width must be positive");
  std::map<long, std::size_t> bins;
  for (const auto& r : records) ++bins[static_cast<long>(std::floor(r.penalized_error() / bin_s))];
  os << "bin_lo_s,bin_hi_s,count\n";
  for (auto [b, c] : bins)
    os << static_cast<double>(b) * bin_s << ',' << static_cast<double>(b + 1) * bin_s << ',' << c << '\n';
}

}  // namespace tloc
