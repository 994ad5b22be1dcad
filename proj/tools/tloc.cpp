#include <iostream>

#include <CLI11.hpp>

#include "tloc/tloc.hpp"

namespace {

using namespace tloc;

constexpr int kValidation = 2;
constexpr int kRuntime = 3;

/// Flags override config-file values; both end up in one RunConfig.
RunConfig resolve_config(const std::string& file, const std::vector<std::string>& sets) {
  RunConfig c = file.empty() ? RunConfig{} : RunConfig::load(file);
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    overrides[key] = v.is_discarded() ? nlohmann::json(raw) : v;
  }
  c.update(overrides);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal crash localization: corpus generation, training, inference, evaluation, benchmarks"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> sets;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "flat dotted-key JSON config file");
    sub->add_option("--set", sets, "override one config key, key=value (repeatable)");
  };

  // generate
  GenerateArgs gen;
  std::string gen_out;
  auto* g = app.add_subcommand("generate", "render a synthetic corpus");
  g->add_option("--out", gen_out, "output directory")->required();
  g->add_option("--n-crash", gen.corpus.n_crash, "videos with a crash")->capture_default_str();
  g->add_option("--n-clean", gen.corpus.n_clean, "crash-free videos")->capture_default_str();
  g->add_option("--seed", gen.corpus.seed, "corpus seed")->capture_default_str();
  g->add_option("--duration", gen.corpus.duration_s, "video duration in seconds")->capture_default_str();
  g->add_option("--fps", gen.corpus.fps, "source frame rate")->capture_default_str();
  g->add_option("--test-fraction", gen.corpus.test_fraction, "share of each class held out")->capture_default_str();
  g->add_flag("--force", gen.force, "replace the corpus files of a non-empty output directory");

  // train
  std::string tr_corpus, tr_out, tr_phases = "contrastive,supervised,compression";
  std::optional<std::size_t> tr_epochs;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_lr;
  auto* t = app.add_subcommand("train", "train a model on a corpus");
  t->add_option("--corpus", tr_corpus, "corpus directory")->required();
  t->add_option("--out", tr_out, "checkpoint directory")->required();
  t->add_option("--phases", tr_phases, "comma-separated phases")->capture_default_str();
  t->add_option("--epochs", tr_epochs, "epochs for every phase");
  t->add_option("--seed", tr_seed, "run seed");
  t->add_option("--lr", tr_lr, "base learning rate");
  add_config(t);

  // predict
  PredictArgs pr;
  std::string pr_ckpt, pr_corpus, pr_out;
  auto* p = app.add_subcommand("predict", "write one prediction JSON per video");
  p->add_option("--checkpoint", pr_ckpt, "checkpoint directory")->required();
  p->add_option("--corpus", pr_corpus, "corpus directory")->required();
  p->add_option("--out", pr_out, "prediction directory")->required();
  p->add_option("--split", pr.split, "train, test or all")->capture_default_str();
  p->add_flag("--sliding-window", pr.sliding_window, "windowed inference with carried state");
  add_config(p);

  // eval
  EvalArgs ev;
  std::string ev_pred, ev_gt, ev_strata, ev_seeds, ev_report, ev_hist;
  auto* e = app.add_subcommand("eval", "score predictions against ground truth");
  e->add_option("--predictions", ev_pred, "prediction directory")->required();
  e->add_option("--ground-truth", ev_gt, "ground-truth CSV")->required();
  e->add_option("--strata", ev_strata, "condition or duration");
  e->add_option("--seeds", ev_seeds, "seed list such as 1..5; reads <predictions>/seed_<n>");
  e->add_option("--report", ev_report, "report JSON path");
  e->add_option("--histogram", ev_hist, "error histogram CSV path");

  // bench
  BenchArgs be;
  std::string be_out;
  auto* b = app.add_subcommand("bench", "scan scaling, chunk invariance and sampling budgets");
  b->add_option("--out", be_out, "directory for scan.csv and budget.csv");
  b->add_option("--sizes", be.sizes, "sequence lengths")->capture_default_str();
  b->add_option("--d", be.d, "channels")->capture_default_str();
  b->add_option("--n", be.n, "state size")->capture_default_str();
  b->add_option("--seed", be.seed, "input seed")->capture_default_str();
  b->add_option("--repeats", be.repeats, "timing repeats (best is kept)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kValidation;
  }

  try {
    (void)worker_threads();
    if (g->parsed()) {
      gen.out = gen_out;
      cmd_generate(gen);
    } else if (t->parsed()) {
      TrainArgs a;
      a.corpus = tr_corpus;
      a.out = tr_out;
      a.phases = parse_phases(tr_phases);
      a.config = resolve_config(config_file, sets);
      if (tr_seed) a.config.seed = *tr_seed;
      if (tr_lr) a.config.train.lr = *tr_lr;
      a.epochs = tr_epochs;
      cmd_train(a);
    } else if (p->parsed()) {
      pr.checkpoint = pr_ckpt;
      pr.corpus = pr_corpus;
      pr.out = pr_out;
      pr.window = resolve_config(config_file, sets).window;
      cmd_predict(pr);
    } else if (e->parsed()) {
      ev.predictions = ev_pred;
      ev.ground_truth = ev_gt;
      if (!ev_strata.empty()) ev.strata = parse_strata_key(ev_strata);
      if (!ev_seeds.empty()) ev.seeds = parse_seed_list(ev_seeds);
      ev.report = ev_report;
      ev.histogram = ev_hist;
      cmd_eval(ev);
    } else if (b->parsed()) {
      be.out = be_out;
      cmd_bench(be);
    }
  } catch (const DivergenceError& err) {
    std::cerr << "training diverged: " << err.what() << "\n";
    return kRuntime;
  } catch (const ContractError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kValidation;
  } catch (const FormatError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kValidation;
  } catch (const AlignmentError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kValidation;
  } catch (const std::exception& err) {
    std::cerr << "failed: " << err.what() << "\n";
    return kRuntime;
  }
  return 0;
}
