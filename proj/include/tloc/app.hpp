#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tloc/bench.hpp"
#include "tloc/evalkit.hpp"
#include "tloc/pipeline.hpp"
#include "tloc/synthgen.hpp"
#include "tloc/training.hpp"

namespace tloc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration: one flat JSON object with dotted keys.

struct RunConfig {
  std::uint64_t seed = 1;
  std::string corpus;
  std::string checkpoints;
  std::string reports;
  ModelConfig model;
  WindowConfig window;
  TrainConfig train;
  std::size_t contrastive_epochs = 3;
  std::size_t supervised_epochs = 60;
  std::size_t compression_epochs = 3;
  double compression_lr_scale = 0.2;

  RunConfig() {
    train.lr = 0.005;
    train.batch = 4;
    train.cosine = true;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j = model.to_json();
    j.erase("model.seed");
    j["seed"] = seed;
    j["paths.corpus"] = corpus;
    j["paths.checkpoints"] = checkpoints;
    j["paths.reports"] = reports;
    j["window.window_s"] = window.window_s;
    j["window.overlap_s"] = window.overlap_s;
    j["window.reset_interval_s"] = window.reset_interval_s;
    j["window.resets"] = window.resets;
    j["train.lr"] = train.lr;
    j["train.batch"] = train.batch;
    j["train.momentum"] = train.momentum;
    j["train.cosine"] = train.cosine;
    j["train.clip_norm"] = train.clip_norm;
    j["train.clip_per_group"] = train.clip_per_group;
    j["train.divergence_loss"] = train.divergence_loss;
    j["train.margin"] = train.margin;
    j["train.refine_epochs"] = train.refine_epochs;
    j["train.hard_negative_prob"] = train.hard_negative_prob;
    j["train.epochs.contrastive"] = contrastive_epochs;
    j["train.epochs.supervised"] = supervised_epochs;
    j["train.epochs.compression"] = compression_epochs;
    j["train.compression_lr_scale"] = compression_lr_scale;
    return j;
  }

  /// Applies every key of `j`. Unknown keys and type mismatches are validation errors.
  void update(const nlohmann::json& j) {
    if (!j.is_object()) throw ContractError("config: expected a flat JSON object");
    const auto known = to_json();
    for (const auto& [k, v] : j.items()) {
      if (!known.contains(k)) throw ContractError("config: unknown key '" + k + "'");
    }
    try {
      auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
      };
      model.update(j);
      get("seed", seed);
      get("paths.corpus", corpus);
      get("paths.checkpoints", checkpoints);
      get("paths.reports", reports);
      get("window.window_s", window.window_s);
      get("window.overlap_s", window.overlap_s);
      get("window.reset_interval_s", window.reset_interval_s);
      get("window.resets", window.resets);
      get("train.lr", train.lr);
      get("train.batch", train.batch);
      get("train.momentum", train.momentum);
      get("train.cosine", train.cosine);
      get("train.clip_norm", train.clip_norm);
      get("train.clip_per_group", train.clip_per_group);
      get("train.divergence_loss", train.divergence_loss);
      get("train.margin", train.margin);
      get("train.refine_epochs", train.refine_epochs);
      get("train.hard_negative_prob", train.hard_negative_prob);
      get("train.epochs.contrastive", contrastive_epochs);
      get("train.epochs.supervised", supervised_epochs);
      get("train.epochs.compression", compression_epochs);
      get("train.compression_lr_scale", compression_lr_scale);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(std::string("config: ") + e.what());
    }
  }

  void validate() const {
    model.validate();
    window.validate();
    train.validate();
    if (!(compression_lr_scale >= 0.0)) throw ContractError("config: compression lr scale must be non-negative");
  }

  /// Model and training configs with the run seed pushed into both.
  [[nodiscard]] ModelConfig seeded_model() const {
    ModelConfig m = model;
    m.seed = seed;
    return m;
  }

  [[nodiscard]] TrainConfig phase_config(Phase p) const {
    TrainConfig c = train;
    c.seed = seed;
    c.phase = p;
    switch (p) {
      case Phase::Contrastive: c.epochs = contrastive_epochs; break;
      case Phase::Supervised: c.epochs = supervised_epochs; break;
      case Phase::CompressionAware:
        c.epochs = compression_epochs;
        c.lr = train.lr * compression_lr_scale;
        break;
    }
    return c;
  }

  static RunConfig load(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ContractError("config: cannot open " + p.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("config " + p.string() + ": " + e.what());
    }
    RunConfig c;
    c.update(j);
    return c;
  }
};

/// Worker count from TLOC_THREADS, defaulting to the hardware concurrency.
[[nodiscard]] inline std::size_t worker_threads() {
  if (const char* env = std::getenv("TLOC_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ContractError("TLOC_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
            next = n;
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Corpus access.

struct LoadedVideo {
  VideoRecord record;
  TrainVideo video;
};

/// Loads, hash-checks and featurizes the videos of one split ("all" for every video).
[[nodiscard]] inline std::vector<LoadedVideo> load_split(const fs::path& dir, const CorpusManifest& man,
                                                         const std::string& split, std::size_t threads = 1) {
  if (split != "all" && split != "train" && split != "test") throw ContractError("split must be train, test or all");
  std::vector<const VideoRecord*> recs;
  for (const auto& v : man.videos)
    if (split == "all" || v.split == split) recs.push_back(&v);
  std::vector<LoadedVideo> out(recs.size());
  const DefaultExtractor ex;
  parallel_for(recs.size(), threads, [&](std::size_t i) {
    const auto& r = *recs[i];
    out[i] = {r, {r.id, ex.extract(load_frames(dir, r)), r.crash_time_s, r.condition}};
  });
  return out;
}

[[nodiscard]] inline std::vector<GroundTruthRow> ground_truth_of(const CorpusManifest& man, const std::string& split) {
  std::vector<GroundTruthRow> gt;
  for (const auto& v : man.videos)
    if (split == "all" || v.split == split) gt.push_back({v.id, v.crash_time_s, v.duration_s, v.condition});
  return gt;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  fs::path out;
  CorpusOptions corpus;
  bool force = false;
};

struct GenerateSummary {
  std::size_t videos = 0;
  std::size_t frames_per_video = 0;
  std::string manifest_sha256;
};

/// Files a corpus directory may hold; --force removes only these.
[[nodiscard]] inline bool is_corpus_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".tlt" || ext == ".json" || ext == ".csv";
}

inline GenerateSummary cmd_generate(const GenerateArgs& a, std::ostream& log = std::cout) {
  if (fs::exists(a.out) && !fs::is_directory(a.out)) throw ContractError(a.out.string() + " is not a directory");
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) throw ContractError("output directory " + a.out.string() + " is not empty (use --force)");
    std::vector<fs::path> stale;
    for (const auto& e : fs::directory_iterator(a.out)) {
      if (!e.is_regular_file() || !is_corpus_file(e.path())) {
        throw ContractError("refusing to clear " + a.out.string() + ": it holds " + e.path().filename().string());
      }
      stale.push_back(e.path());
    }
    for (const auto& p : stale) fs::remove(p);
  }
  fs::create_directories(a.out);
  auto man = build_corpus(a.corpus);
  const DefaultExtractor ex;
  const auto vids = materialize(man, ex, &a.out);
  for (const char* split : {"all", "train", "test"}) {
    const std::string name = std::string(split) == "all" ? "ground_truth.csv" : "ground_truth_" + std::string(split) + ".csv";
    std::ofstream os(a.out / name);
    write_ground_truth(os, ground_truth_of(man, split));
  }
  GenerateSummary s{vids.size(), vids.empty() ? 0 : vids.front().features.frames(), man.hash()};
  log << "generated " << s.videos << " videos (" << a.corpus.n_crash << " crash, " << a.corpus.n_clean
      << " clean) in " << a.out.string() << "\n"
      << "frames per video " << s.frames_per_video << ", manifest sha256 " << s.manifest_sha256 << "\n";
  return s;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path corpus;
  fs::path out;
  std::vector<Phase> phases{Phase::Contrastive, Phase::Supervised, Phase::CompressionAware};
  RunConfig config;
  std::optional<std::size_t> epochs;  ///< overrides every phase's epoch count
};

struct TrainSummary {
  std::vector<PhaseReport> phases;
  std::optional<TriggerReport> triggers;
  std::optional<RefineReport> refine;
  fs::path final_checkpoint;
};

[[nodiscard]] inline std::vector<Phase> parse_phases(const std::string& csv) {
  std::vector<Phase> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    const Phase p = item == "compression" ? Phase::CompressionAware : parse_phase(item);
    if (std::find(out.begin(), out.end(), p) != out.end()) throw ContractError("phase listed twice: " + item);
    out.push_back(p);
  }
  if (out.empty()) throw ContractError("no phases given");
  return out;
}

/// Trains a fresh model through the requested phases. After a supervised phase
/// that took at least one step, the tier triggers are recalibrated and the
/// boundary-refinement unit is fitted.
inline TrainSummary train_model(HybridModel& m, const std::vector<TrainVideo>& videos, const TrainArgs& a,
                                TrainLog& log, const std::function<void(Phase, HybridModel&)>& on_phase = {},
                                std::ostream& out = std::cout) {
  const auto data = prepare(videos, m.cfg);
  TrainSummary s;
  bool supervised_steps = false;
  for (Phase p : a.phases) {
    auto tc = a.config.phase_config(p);
    if (a.epochs) tc.epochs = *a.epochs;
    PhaseReport rep;
    switch (p) {
      case Phase::Contrastive: rep = phase_contrastive(m, data, tc, &log); break;
      case Phase::Supervised: rep = phase_supervised(m, data, tc, {}, &log); break;
      case Phase::CompressionAware: rep = phase_compression_aware(m, data, tc, {}, &log); break;
    }
    supervised_steps = supervised_steps || (p == Phase::Supervised && rep.steps > 0);
    out << phase_name(p) << ": " << rep.steps << " steps, " << rep.skipped << " skipped";
    if (!rep.epoch_loss.empty()) out << ", loss " << rep.epoch_loss.front() << " -> " << rep.epoch_loss.back();
    out << "\n";
    s.phases.push_back(rep);
    if (on_phase) on_phase(p, m);
  }
  if (supervised_steps) {
    s.triggers = calibrate_triggers(m, data);
    s.refine = train_refine(m, data, a.config.phase_config(Phase::Supervised), &log);
    out << "triggers " << m.cfg.med_trigger << " / " << m.cfg.high_trigger << ", refinement "
        << (m.refine.trained ? "learned" : "parabolic") << "\n";
  }
  return s;
}

inline TrainSummary cmd_train(const TrainArgs& a, std::ostream& out = std::cout) {
  a.config.validate();
  const auto man = load_manifest(a.corpus);
  const auto loaded = load_split(a.corpus, man, "train", worker_threads());
  if (loaded.empty()) throw ContractError("corpus " + a.corpus.string() + " has no training videos");
  std::vector<TrainVideo> videos;
  for (const auto& v : loaded) videos.push_back(v.video);

  fs::create_directories(a.out);
  std::ofstream(a.out / "config.json") << a.config.to_json().dump(2) << '\n';
  const nlohmann::json extra{{"corpus_sha256", man.hash()}};
  auto m = HybridModel::init(a.config.seeded_model());
  TrainLog log;
  auto write_log = [&] {
    std::ofstream os(a.out / "train_log.csv");
    log.write_csv(os);
  };
  TrainSummary s;
  try {
    s = train_model(
        m, videos, a, log,
        [&](Phase p, HybridModel& model) {
          const auto dir = a.out / phase_name(p);
          fs::remove_all(dir);
          save_checkpoint(model, dir, extra);
        },
        out);
  } catch (const DivergenceError&) {
    write_log();
    throw;
  }
  write_log();
  s.final_checkpoint = a.out / "final";
  fs::remove_all(s.final_checkpoint);
  save_checkpoint(m, s.final_checkpoint, extra);
  out << "checkpoint " << s.final_checkpoint.string() << "\n";
  return s;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  fs::path checkpoint;
  fs::path corpus;
  fs::path out;
  std::string split = "test";
  bool sliding_window = false;
  WindowConfig window;
};

struct PredictSummary {
  std::size_t videos = 0;
  std::size_t frames_processed = 0;
  double mean_reduction_pct = 0.0;
  std::size_t alarms = 0;
};

[[nodiscard]] inline HierarchicalResult infer(const HybridModel& m, const FeatureSequence& f, bool sliding,
                                              const WindowConfig& w) {
  return sliding ? sliding_window_infer(m, f, w) : hierarchical_process(m, f);
}

inline PredictSummary cmd_predict(const PredictArgs& a, std::ostream& out = std::cout) {
  a.window.validate();
  const auto m = load_checkpoint(a.checkpoint);
  const auto man = load_manifest(a.corpus);
  const auto threads = worker_threads();
  const auto videos = load_split(a.corpus, man, a.split, threads);
  fs::create_directories(a.out);
  std::vector<HierarchicalResult> results(videos.size());
  parallel_for(videos.size(), threads, [&](std::size_t i) {
    results[i] = infer(m, videos[i].video.features, a.sliding_window, a.window);
    std::ofstream(a.out / (videos[i].record.id + ".json")) << prediction_json(videos[i].record.id, results[i]).dump(2)
                                                           << '\n';
  });
  PredictSummary s;
  s.videos = videos.size();
  for (const auto& r : results) {
    s.frames_processed += r.frames_processed;
    s.mean_reduction_pct += r.plan.reduction_pct;
    s.alarms += r.prediction.valid;
  }
  if (s.videos) s.mean_reduction_pct /= static_cast<double>(s.videos);
  out << "predicted " << s.videos << " videos, frames processed " << s.frames_processed << ", reduction "
      << std::fixed << std::setprecision(1) << s.mean_reduction_pct << "%, alarms " << s.alarms << "\n"
      << std::defaultfloat;
  return s;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  fs::path predictions;
  fs::path ground_truth;
  std::optional<StrataKey> strata;
  std::vector<std::uint64_t> seeds;  ///< when set, predictions/seed_<n> holds one run per seed
  fs::path report;                   ///< JSON report; empty → predictions/report.json
  fs::path histogram;                ///< error histogram CSV; empty → none
};

[[nodiscard]] inline std::vector<PredictionFile> read_predictions(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ContractError("no prediction directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json" && e.path().filename() != "report.json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<PredictionFile> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(f.string() + ": " + e.what());
    }
    out.push_back(PredictionFile::from_json(j));
  }
  return out;
}

inline nlohmann::json cmd_eval(const EvalArgs& a, std::ostream& out = std::cout) {
  const auto gt = read_ground_truth(a.ground_truth);
  nlohmann::json report;
  if (a.seeds.empty()) {
    const auto preds = read_predictions(a.predictions);
    const auto records = join_records(gt, preds);
    const auto strat = stratify(records, a.strata.value_or(StrataKey::Condition));
    if (a.strata) {
      print_table(out, strat);
      report = strat.to_json();
    } else {
      print_table_header(out, strat.pooled);
      print_report_row(out, "pooled", strat.pooled);
      report = {{"pooled", strat.pooled.to_json()}};
    }
    if (const auto far = false_alarm_rate(gt, preds)) {
      report["false_alarm_rate"] = *far;
      out << "false alarm rate on crash-free videos: " << *far << "\n";
    }
    if (!a.histogram.empty()) {
      std::ofstream os(a.histogram);
      write_error_histogram(os, records);
    }
  } else {
    std::vector<EvalReport> reports;
    for (auto s : a.seeds)
      reports.push_back(make_report(join_records(gt, read_predictions(a.predictions / ("seed_" + std::to_string(s))))));
    const auto sum = summarize_seeds(a.seeds, reports);
    out << std::left << std::setw(14) << "metric" << "mean ± std\n";
    for (const auto& [k, v] : sum.metrics)
      out << std::setw(14) << k << std::fixed << std::setprecision(3) << v.mean << " ± " << v.std << "\n"
          << std::defaultfloat;
    report = sum.to_json();
    nlohmann::json per = nlohmann::json::array();
    for (const auto& r : reports) per.push_back(r.to_json());
    report["per_seed"] = per;
  }
  const fs::path dest = a.report.empty() ? a.predictions / "report.json" : a.report;
  std::ofstream(dest) << report.dump(2) << '\n';
  return report;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  fs::path out;  ///< directory for scan.csv and budget.csv; empty → stdout only
  std::vector<std::size_t> sizes{1024, 2048, 4096, 8192};
  std::size_t d = 64;
  std::size_t n = 16;
  std::uint64_t seed = 1;
  int repeats = 5;
};

struct BenchSummary {
  std::vector<ScanBenchRow> scan;
  std::vector<BudgetRow> budgets;
};

inline BenchSummary cmd_bench(const BenchArgs& a, std::ostream& out = std::cout) {
  if (a.sizes.empty() || a.d == 0 || a.n == 0 || a.repeats < 1) throw ContractError("bench: bad sizes");
  BenchSummary s{bench_scan(a.sizes, a.d, a.n, a.seed, a.repeats), bench_budgets()};
  write_scan_csv(out, s.scan);
  out << "\n";
  write_budget_csv(out, s.budgets);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream sc(a.out / "scan.csv");
    write_scan_csv(sc, s.scan);
    std::ofstream bu(a.out / "budget.csv");
    write_budget_csv(bu, s.budgets);
  }
  return s;
}

}  // namespace tloc
