#pragma once

// Losses and the three training phases.
//
//   L_total = λ1·BCE + λ2·L_temp + λ3·R
//   L_temp  = α|e| + β·smoothL1(e),   e = t̂ − t_gt,  t̂ = soft-argmax(track, 0.1)
//
// R is the mean squared parameter value in the supervised phase and the
// consistency term |t̂_full − t̂_compressed| in the compression-aware phase.
// The contrastive phase pre-trains the encoders with a three-class margin
// objective on pre-crash / crash / post-crash frames.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tloc/autodiff.hpp"
#include "tloc/error.hpp"
#include "tloc/head.hpp"
#include "tloc/params.hpp"
#include "tloc/pipeline.hpp"
#include "tloc/rng.hpp"
#include "tloc/sampler.hpp"
#include "tloc/sequence.hpp"

namespace tloc {

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 2.0;
  double lambda3 = 0.1;
  double alpha_t = 0.7;
  double beta_t = 0.3;
  double peak = 1.0;  ///< weight of the crop-level BCE on the track maximum inside the BCE term

  void validate() const {
    for (double v : {lambda1, lambda2, lambda3, alpha_t, beta_t, peak})
      if (!(v >= 0.0)) throw ContractError("loss weights must be non-negative");
  }
};

/// Soft-argmax temperature used to make t̂ differentiable.
inline constexpr double kSoftArgmaxTemperature = 0.1;
/// Frames within this distance of the crash are labelled positive.
inline constexpr double kPositiveRadius = 1.0;
/// Candidate region triggers; 0 refines every MED/HIGH segment of the plan.
inline constexpr std::array<double, 9> kTriggerGrid{0.0, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

[[nodiscard]] inline double smooth_l1(double e) {
  const double a = std::abs(e);
  return a < 1.0 ? 0.5 * e * e : a - 0.5;
}

[[nodiscard]] inline double loss_temporal(double t_hat, double t_gt, const LossWeights& w = {}) {
  if (!std::isfinite(t_hat) || !std::isfinite(t_gt)) throw ContractError("loss_temporal: non-finite time");
  const double e = t_hat - t_gt;
  return w.alpha_t * std::abs(e) + w.beta_t * smooth_l1(e);
}

inline Var loss_temporal(Var t_hat, double t_gt, const LossWeights& w = {}) {
  Var e = add_scalar(t_hat, -t_gt);
  return add(scale(abs(e), w.alpha_t), scale(smooth_l1(e), w.beta_t));
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 − 1e-7].
inline Var loss_bce(Var probs, const std::vector<double>& labels) { return bce(probs, labels); }

[[nodiscard]] inline double loss_bce(const std::vector<double>& p, const std::vector<double>& labels) {
  Tape tape;
  return bce(tape.constant(Tensor({p.size()}, p)), labels).value()[0];
}

/// Mean squared value over every trainable parameter of the model.
inline Var loss_reg(Binder& bind, HybridModel& m) {
  Var acc;
  std::size_t count = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    if (is_frozen_param(name)) return;
    Var s = sum(square(bind(t)));
    acc = acc.valid() ? add(acc, s) : s;
    count += t.size();
  });
  return scale(acc, 1.0 / static_cast<double>(count));
}

struct LossParts {
  Var total;
  double bce = 0.0;
  double temp = 0.0;
  double third = 0.0;  ///< regularization or consistency term, unweighted
};

/// λ1·BCE + λ2·L_temp(soft-argmax) + λ3·third. The BCE term is the mean frame BCE plus
/// `peak` times the BCE of the track maximum against "the crop contains a positive".
/// Without t_gt the temporal term is omitted; an invalid `third` Var omits the third term.
inline LossParts loss_total(Var probs, const std::vector<double>& labels, const std::vector<double>& times,
                            std::optional<double> t_gt, const LossWeights& w, Var third = {}) {
  w.validate();
  LossParts out;
  Var b = loss_bce(probs, labels);
  if (w.peak > 0.0) {
    const double any = std::ranges::any_of(labels, [](double y) { return y > 0.5; }) ? 1.0 : 0.0;
    b = add(b, scale(bce(max_all(probs), {any}), w.peak));
  }
  out.bce = b.value()[0];
  Var total = scale(b, w.lambda1);
  if (t_gt) {
    Var lt = loss_temporal(soft_argmax(probs, times, kSoftArgmaxTemperature), *t_gt, w);
    out.temp = lt.value()[0];
    total = add(total, scale(lt, w.lambda2));
  }
  if (third.valid()) {
    out.third = third.value()[0];
    total = add(total, scale(third, w.lambda3));
  }
  out.total = total;
  return out;
}

/// Σ wᵢ|eᵢ| / Σ wᵢ with wᵢ = 1 + |eᵢ|/(1 + |eᵢ|).
[[nodiscard]] inline double weighted_temporal_loss(const std::vector<double>& preds, const std::vector<double>& gts) {
  if (preds.size() != gts.size()) throw AlignmentError("weighted_temporal_loss: lists differ in length");
  if (preds.empty()) throw ContractError("weighted_temporal_loss: empty lists");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = std::abs(preds[i] - gts[i]);
    const double w = 1.0 + e / (1.0 + e);
    num += w * e;
    den += w;
  }
  return num / den;
}

[[nodiscard]] inline std::vector<double> crash_labels(const std::vector<double>& times, std::optional<double> t_gt) {
  std::vector<double> y(times.size(), 0.0);
  if (t_gt)
    for (std::size_t i = 0; i < times.size(); ++i) y[i] = std::abs(times[i] - *t_gt) <= kPositiveRadius ? 1.0 : 0.0;
  return y;
}

// ---------------------------------------------------------------------------
// Configuration and logging.

enum class Phase { Contrastive, Supervised, CompressionAware };

[[nodiscard]] inline std::string phase_name(Phase p) {
  switch (p) {
    case Phase::Contrastive: return "contrastive";
    case Phase::Supervised: return "supervised";
    case Phase::CompressionAware: return "compression";
  }
  return "?";
}

[[nodiscard]] inline Phase parse_phase(const std::string& s) {
  if (s == "contrastive") return Phase::Contrastive;
  if (s == "supervised") return Phase::Supervised;
  if (s == "compression" || s == "compression_aware") return Phase::CompressionAware;
  throw ContractError("unknown training phase '" + s + "'");
}

struct TrainConfig {
  Phase phase = Phase::Supervised;
  std::size_t epochs = 10;
  double lr = 1e-3;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  double momentum = 0.9;
  bool cosine = false;          ///< cosine-anneal lr to zero over the phase
  double clip_norm = 5.0;
  bool clip_per_group = true;   ///< clip each top-level parameter group separately
  double divergence_loss = 1e3;
  double margin = 1.0;          ///< contrastive margin
  double coarse_crop_frac[2] = {0.5, 1.0};
  double mid_crop_s[2] = {6.0, 24.0};
  double fine_crop_s[2] = {3.0, 12.0};
  std::size_t refine_epochs = 30;
  double hard_negative_prob = 0.75;  ///< crash-free crops centred on high-motion segments

  void validate() const {
    if (!(lr >= 0.0)) throw ContractError("train: lr must be non-negative");
    if (batch == 0) throw ContractError("train: batch must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("train: momentum must lie in [0, 1)");
    if (!(clip_norm > 0.0)) throw ContractError("train: clip norm must be positive");
    if (!(mid_crop_s[0] > 0 && mid_crop_s[0] <= mid_crop_s[1] && fine_crop_s[0] > 0 &&
          fine_crop_s[0] <= fine_crop_s[1] && coarse_crop_frac[0] > 0 &&
          coarse_crop_frac[0] <= coarse_crop_frac[1] && coarse_crop_frac[1] <= 1.0)) {
      throw ContractError("train: crop ranges must be positive and ordered");
    }
  }
};

struct LogRow {
  std::string phase;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss_total = 0.0;
  double loss_bce = 0.0;
  double loss_temp = 0.0;
  double loss_third = 0.0;
  double lr = 0.0;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<LogRow> rows;

  static constexpr const char* kHeader = "phase,epoch,step,loss_total,loss_bce,loss_temp,loss_reg_or_consist,lr,seed";

  void write_csv(std::ostream& os) const {
    os << kHeader << '\n';
    os.precision(17);
    for (const auto& r : rows) {
      os << r.phase << ',' << r.epoch << ',' << r.step << ',' << r.loss_total << ',' << r.loss_bce << ','
         << r.loss_temp << ',' << r.loss_third << ',' << r.lr << ',' << r.seed << '\n';
    }
  }
  void write_csv(const std::filesystem::path& p) const {
    std::ofstream os(p);
    if (!os) throw Error("cannot write training log " + p.string());
    write_csv(os);
  }
};

struct PhaseReport {
  std::size_t steps = 0;
  std::size_t skipped = 0;          ///< items without the required classes (contrastive)
  std::vector<double> epoch_loss;   ///< mean loss per epoch
  std::vector<double> grad_norms;   ///< pre-clipping norm per step
};

// ---------------------------------------------------------------------------
// Training data.

struct TrainVideo {
  std::string id;
  FeatureSequence features;
  std::optional<double> crash_time_s;
  std::string condition;
};

/// A training video with its model-independent context.
struct PreparedVideo {
  const TrainVideo* video;
  VideoContext ctx;
};

[[nodiscard]] inline std::vector<PreparedVideo> prepare(const std::vector<TrainVideo>& videos, const ModelConfig& cfg) {
  std::vector<PreparedVideo> out;
  out.reserve(videos.size());
  for (const auto& v : videos) out.push_back({&v, VideoContext(v.features, cfg)});
  return out;
}

/// Corpus-mean 80th/95th percentiles of ṽ become the initial thresholds.
inline void calibrate_thresholds(HybridModel& m, const std::vector<PreparedVideo>& data) {
  if (data.empty()) return;
  double med = 0.0, high = 0.0;
  for (const auto& pv : data) {
    std::vector<double> z;
    for (double v : pv.ctx.profile.v) z.push_back((v - pv.ctx.v_median) / pv.ctx.v_scale);
    med += percentile(z, 0.8);
    high += percentile(z, 0.95);
  }
  med /= static_cast<double>(data.size());
  high /= static_cast<double>(data.size());
  med = std::max(med, 1e-3);
  high = std::clamp(high, med + 1e-3, 0.9 * m.cfg.tau_upper);
  m.set_thresholds(med, high);
}

struct Crop {
  double t0 = 0.0;
  double t1 = 0.0;
};

/// A crop of random length in [lo, hi] s. With a crash time, the crash falls
/// at a relative position drawn from `where`; otherwise the position is uniform.
[[nodiscard]] inline Crop sample_crop(Rng& rng, double duration, std::optional<double> t_gt, double lo, double hi,
                                      std::pair<double, double> where = {0.15, 0.85}) {
  const double len = std::min(duration, rng.uniform(lo, hi));
  double t0 = t_gt ? *t_gt - rng.uniform(where.first, where.second) * len : rng.uniform(0.0, duration - len);
  t0 = std::clamp(t0, 0.0, duration - len);
  return {t0, t0 + len};
}

[[nodiscard]] inline double tier_rate(const HybridModel& m, Tier t, const VideoContext& ctx) {
  double r = m.cfg.rates.of(t);
  return ctx.source_fps() > 0.0 ? std::min(r, ctx.source_fps()) : r;
}

/// With probability `prob`, the centre of a random segment whose ṽ reaches
/// τ_med: the places a crash-free video would be refined at inference.
[[nodiscard]] inline std::optional<double> hard_negative_center(const HybridModel& m, const VideoContext& ctx, Rng& rng,
                                                                double prob) {
  if (rng.uniform() >= prob) return std::nullopt;
  const double tau = m.thresholds().first;
  const auto& pr = ctx.profile;
  std::vector<double> centers;
  for (std::size_t k = 0; k < pr.v.size(); ++k)
    if ((pr.v[k] - ctx.v_median) / ctx.v_scale >= tau)
      centers.push_back(pr.t0 + (static_cast<double>(k) + 0.5) * pr.segment_length_s);
  if (centers.empty()) return std::nullopt;
  return centers[rng.below(centers.size())];
}

/// Frame indices of one tier's training stream. Every tier sees a crop: long
/// ones (a fraction of the video, random sampling phase) for the coarse tier,
/// short ones for the finer tiers.
struct Stream {
  Tier tier;
  std::vector<std::size_t> idx;
  Crop crop;
};

[[nodiscard]] inline std::vector<Stream> sample_streams(const HybridModel& m, const PreparedVideo& pv,
                                                        const TrainConfig& cfg, Rng& rng) {
  const auto& ctx = pv.ctx;
  const double dur = ctx.duration();
  std::vector<Stream> out;
  const double low = tier_rate(m, Tier::Low, ctx);
  auto focus = pv.video->crash_time_s;
  Crop coarse =
      sample_crop(rng, dur, focus, cfg.coarse_crop_frac[0] * dur, cfg.coarse_crop_frac[1] * dur, {0.02, 0.98});
  coarse.t0 += rng.uniform(0.0, 1.0 / low);
  out.push_back({Tier::Low, stream_indices(ctx.times(), coarse.t0, coarse.t1 + 1e-6, low), coarse});
  if (!focus) focus = hard_negative_center(m, ctx, rng, cfg.hard_negative_prob);
  Crop mid = sample_crop(rng, dur, focus, cfg.mid_crop_s[0], cfg.mid_crop_s[1]);
  Crop fine = sample_crop(rng, dur, focus, cfg.fine_crop_s[0], cfg.fine_crop_s[1]);
  out.push_back({Tier::Med, stream_indices(ctx.times(), mid.t0, mid.t1, tier_rate(m, Tier::Med, ctx)), mid});
  out.push_back({Tier::High, stream_indices(ctx.times(), fine.t0, fine.t1, tier_rate(m, Tier::High, ctx)), fine});
  std::erase_if(out, [](const Stream& s) { return s.idx.size() < 2; });
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer.

/// Gradient accumulator in the model's visit order.
class GradientBuffer {
 public:
  explicit GradientBuffer(HybridModel& m) {
    m.visit([&](const std::string& name, Tensor& t) {
      names_.push_back(name);
      grads_.push_back(Tensor::zeros(t.shape()));
    });
  }

  void accumulate(HybridModel& m, const Binder& bind, const Gradients& g, double weight = 1.0) {
    std::size_t i = 0;
    m.visit([&](const std::string&, Tensor& t) {
      if (const Var* v = bind.find(t); v && g.has(*v)) {
        const Tensor& gv = g[*v];
        for (std::size_t k = 0; k < gv.size(); ++k) grads_[i][k] += weight * gv[k];
      }
      ++i;
    });
  }

  void zero() { scale(0.0); }

  void scale(double s) {
    for (auto& t : grads_)
      for (double& v : t.data()) v *= s;
  }

  [[nodiscard]] double norm() const {
    double s = 0.0;
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (is_frozen_param(names_[i])) continue;
      for (double v : grads_[i].data()) s += v * v;
    }
    return std::sqrt(s);
  }

  /// Norm per top-level group ("adapter", "low", "med", "high", ...), keyed by group name.
  [[nodiscard]] std::map<std::string, double> group_norms() const {
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (is_frozen_param(names_[i])) continue;
      double& acc = out[group_of(names_[i])];
      for (double v : grads_[i].data()) acc += v * v;
    }
    for (auto& [_, v] : out) v = std::sqrt(v);
    return out;
  }

  [[nodiscard]] static std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

  [[nodiscard]] const std::vector<Tensor>& grads() const { return grads_; }
  [[nodiscard]] const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> grads_;
};

/// Momentum SGD with norm clipping, applied either to the whole gradient or
/// separately to each top-level parameter group. Frozen tensors never move.
class MomentumSgd {
 public:
  MomentumSgd(HybridModel& m, double momentum, double clip_norm, bool per_group = true)
      : momentum_(momentum), clip_(clip_norm), per_group_(per_group) {
    m.visit([&](const std::string&, Tensor& t) { velocity_.push_back(Tensor::zeros(t.shape())); });
  }

  /// Returns the pre-clipping global gradient norm.
  double step(HybridModel& m, const GradientBuffer& g, double lr, const std::vector<bool>& mask = {}) {
    const double gn = g.norm();
    const auto groups = g.group_norms();
    auto factor = [&](const std::string& name) {
      const double n = per_group_ ? groups.at(GradientBuffer::group_of(name)) : gn;
      return n > clip_ ? clip_ / n : 1.0;
    };
    std::size_t i = 0;
    m.visit([&](const std::string& name, Tensor& t) {
      const std::size_t k = i++;
      if (is_frozen_param(name) || (!mask.empty() && !mask[k])) return;
      const double s = factor(name);
      Tensor& vel = velocity_[k];
      const Tensor& gr = g.grads()[k];
      for (std::size_t j = 0; j < t.size(); ++j) {
        vel[j] = momentum_ * vel[j] + s * gr[j];
        t[j] -= lr * vel[j];
      }
    });
    m.clamp_thresholds();
    return gn;
  }

 private:
  double momentum_;
  double clip_;
  bool per_group_;
  std::vector<Tensor> velocity_;
};

// ---------------------------------------------------------------------------
// Phase driver.

/// Loss of one item on a fresh tape; gradients are accumulated by the driver.
struct ItemLoss {
  Var total;
  double bce = 0.0;
  double temp = 0.0;
  double third = 0.0;
  bool skipped = false;
};

using ItemFn = std::function<ItemLoss(Binder&, const PreparedVideo&, Rng&)>;

inline PhaseReport run_phase(HybridModel& m, const std::vector<PreparedVideo>& data, const TrainConfig& cfg,
                             const ItemFn& item, TrainLog* log, const std::vector<bool>& mask = {}) {
  cfg.validate();
  PhaseReport rep;
  if (data.empty() || cfg.epochs == 0) return rep;
  const std::string pname = phase_name(cfg.phase);
  Rng order_rng(cfg.seed, "shuffle/" + pname);
  Rng crop_rng(cfg.seed, "crops/" + pname);
  MomentumSgd opt(m, cfg.momentum, cfg.clip_norm, cfg.clip_per_group);
  GradientBuffer buf(m);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t total_steps = cfg.epochs * ((data.size() + cfg.batch - 1) / cfg.batch);
  auto lr_at = [&](std::size_t step) {
    if (!cfg.cosine) return cfg.lr;
    return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_sum = 0.0;
    std::size_t epoch_items = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      buf.zero();
      const double lr = lr_at(rep.steps);
      LogRow row{pname, epoch, rep.steps, 0, 0, 0, 0, lr, cfg.seed};
      std::size_t used = 0;
      for (std::size_t i = b0; i < b1; ++i) {
        Tape tape;
        Binder bind(tape);
        ItemLoss l = item(bind, data[order[i]], crop_rng);
        if (l.skipped) {
          ++rep.skipped;
          continue;
        }
        const double v = l.total.value()[0];
        if (!std::isfinite(v) || v > cfg.divergence_loss) {
          std::ostringstream msg;
          msg << "training diverged in phase " << pname << " (epoch " << epoch << ", step " << rep.steps
              << ", video " << data[order[i]].video->id << "): loss " << v << " exceeds " << cfg.divergence_loss;
          throw DivergenceError(msg.str());
        }
        buf.accumulate(m, bind, tape.backward(l.total));
        row.loss_total += v;
        row.loss_bce += l.bce;
        row.loss_temp += l.temp;
        row.loss_third += l.third;
        ++used;
      }
      if (used == 0) continue;
      const double inv = 1.0 / static_cast<double>(used);
      for (double* x : {&row.loss_total, &row.loss_bce, &row.loss_temp, &row.loss_third}) *x *= inv;
      buf.scale(inv);
      rep.grad_norms.push_back(opt.step(m, buf, lr, mask));
      epoch_sum += row.loss_total;
      ++epoch_items;
      ++rep.steps;
      if (log) log->rows.push_back(row);
    }
    rep.epoch_loss.push_back(epoch_items ? epoch_sum / static_cast<double>(epoch_items) : 0.0);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Phases.

/// Frames within ±5 s of the crash split into pre [t−5, t−1), crash
/// [t−1, t+2] and post (t+2, t+5]; frames outside the window are unlabeled.
[[nodiscard]] inline std::array<std::vector<std::size_t>, 3> contrastive_classes(const std::vector<double>& times,
                                                                                double t_gt) {
  std::array<std::vector<std::size_t>, 3> cls;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double t = times[i] - t_gt;
    if (t < -5.0 || t > 5.0) continue;
    cls[t < -1.0 ? 0 : (t <= 2.0 ? 1 : 2)].push_back(i);
  }
  return cls;
}

/// Σ_c mean_{i∈c} ‖e_i − μ_c‖² + Σ_{a<b} max(0, m − ‖μ_a − μ_b‖)² over the
/// pre / crash / post classes, with distances taken per embedding dimension
/// (‖v‖² / D). Returns an invalid Var when a class is empty.
inline Var contrastive_loss(Var emb, const std::vector<double>& times, double t_gt, double margin) {
  const auto cls = contrastive_classes(times, t_gt);
  for (const auto& c : cls)
    if (c.empty()) return {};
  const double inv_dim = 1.0 / static_cast<double>(emb.value().cols());
  std::array<Var, 3> mu;
  Var loss;
  for (std::size_t c = 0; c < 3; ++c) {
    Var rows = gather_rows(emb, cls[c]);
    mu[c] = mean_rows(rows);
    const std::size_t n = cls[c].size();
    Var centred = sub(rows, gather_rows(mu[c], std::vector<std::size_t>(n, 0)));
    Var spread = scale(sum(square(centred)), inv_dim / static_cast<double>(n));
    loss = loss.valid() ? add(loss, spread) : spread;
  }
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b) {
      Var dist = sqrt_eps(scale(sum(square(sub(mu[a], mu[b]))), inv_dim));
      Var hinge = relu(add_scalar(scale(dist, -1.0), margin));
      loss = add(loss, square(hinge));
    }
  return loss;
}

/// Encoder embeddings [T×2d] of one tier stream.
inline Var tier_embeddings(Binder& bind, const HybridModel& m, Tier tier, const VideoContext& ctx,
                           const std::vector<std::size_t>& idx) {
  const std::size_t n = idx.size(), dim = ctx.z.cols();
  Tensor z({n, dim});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(ctx.z.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * dim), dim,
                z.data().begin() + static_cast<std::ptrdiff_t>(i * dim));
  Var x = m.adapter(bind, bind.tape().constant(std::move(z)));
  return encode(bind, m.tier(tier).encoder, x).y;
}

inline PhaseReport phase_contrastive(HybridModel& m, const std::vector<PreparedVideo>& data, TrainConfig cfg,
                                     TrainLog* log = nullptr) {
  cfg.phase = Phase::Contrastive;
  return run_phase(m, data, cfg,
                   [&](Binder& bind, const PreparedVideo& pv, Rng& rng) {
                     ItemLoss out;
                     const auto t_gt = pv.video->crash_time_s;
                     auto streams = sample_streams(m, pv, cfg, rng);
                     if (!t_gt) {
                       out.skipped = true;
                       return out;
                     }
                     Var acc;
                     for (const auto& s : streams) {
                       std::vector<double> times;
                       for (std::size_t i : s.idx) times.push_back(pv.ctx.times()[i]);
                       Var l = contrastive_loss(tier_embeddings(bind, m, s.tier, pv.ctx, s.idx), times, *t_gt,
                                                cfg.margin);
                       if (!l.valid()) continue;
                       acc = acc.valid() ? add(acc, l) : l;
                     }
                     if (!acc.valid()) {
                       out.skipped = true;
                       return out;
                     }
                     out.total = acc;
                     out.third = acc.value()[0];
                     return out;
                   },
                   log);
}

/// λ-weighted loss of one tier stream.
inline LossParts stream_loss(Binder& bind, const HybridModel& m, const PreparedVideo& pv, const Stream& s,
                             const LossWeights& w, Var third = {}) {
  TierPass pass = tier_forward(bind, m, s.tier, pv.ctx, s.idx);
  auto t_gt = pv.video->crash_time_s;
  if (t_gt && (*t_gt < pass.times.front() || *t_gt > pass.times.back())) t_gt.reset();
  return loss_total(pass.probs, crash_labels(pass.times, t_gt), pass.times, t_gt, w, third);
}

inline PhaseReport phase_supervised(HybridModel& m, const std::vector<PreparedVideo>& data, TrainConfig cfg,
                                    const LossWeights& w = {}, TrainLog* log = nullptr) {
  cfg.phase = Phase::Supervised;
  return run_phase(m, data, cfg,
                   [&](Binder& bind, const PreparedVideo& pv, Rng& rng) {
                     ItemLoss out;
                     auto streams = sample_streams(m, pv, cfg, rng);
                     Var reg = loss_reg(bind, m);
                     Var acc;
                     const double k = 1.0 / static_cast<double>(streams.size());
                     for (const auto& s : streams) {
                       LossParts p = stream_loss(bind, m, pv, s, w, reg);
                       acc = acc.valid() ? add(acc, p.total) : p.total;
                       out.bce += k * p.bce;
                       out.temp += k * p.temp;
                       out.third = p.third;
                     }
                     out.total = scale(acc, k);
                     return out;
                   },
                   log);
}

/// Frames of a crop kept by the video's plan, with every rate capped at the tier rate.
[[nodiscard]] inline std::vector<std::size_t> compressed_indices(const HybridModel& m, const VideoContext& ctx,
                                                                 const SamplingPlan& plan, Tier tier,
                                                                 const Crop& crop) {
  const double cap = tier_rate(m, tier, ctx);
  SamplingPlan sub;
  for (const auto& s : plan.segments) {
    const double t0 = std::max(s.t0, crop.t0), t1 = std::min(s.t1, crop.t1);
    if (t1 <= t0) continue;
    sub.segments.push_back({t0, t1, s.tier, std::min(s.rate_fps, cap)});
  }
  if (sub.segments.empty()) return {};
  return select_frames(ctx.times(), sub);
}

inline PhaseReport phase_compression_aware(HybridModel& m, const std::vector<PreparedVideo>& data, TrainConfig cfg,
                                           const LossWeights& w = {}, TrainLog* log = nullptr) {
  cfg.phase = Phase::CompressionAware;
  return run_phase(m, data, cfg,
                   [&](Binder& bind, const PreparedVideo& pv, Rng& rng) {
                     ItemLoss out;
                     auto streams = sample_streams(m, pv, cfg, rng);
                     const SamplingPlan plan = pv.ctx.plan(m);
                     Var acc;
                     const double k = 1.0 / static_cast<double>(streams.size());
                     for (const auto& s : streams) {
                       auto cidx = compressed_indices(m, pv.ctx, plan, s.tier, s.crop);
                       Var consist;
                       TierPass full = tier_forward(bind, m, s.tier, pv.ctx, s.idx);
                       Var t_full = soft_argmax(full.probs, full.times, kSoftArgmaxTemperature);
                       if (cidx.size() >= 2) {
                         TierPass comp = tier_forward(bind, m, s.tier, pv.ctx, cidx);
                         consist = abs(sub(t_full, soft_argmax(comp.probs, comp.times, kSoftArgmaxTemperature)));
                       }
                       auto t_gt = pv.video->crash_time_s;
                       if (t_gt && (*t_gt < full.times.front() || *t_gt > full.times.back())) t_gt.reset();
                       LossParts p = loss_total(full.probs, crash_labels(full.times, t_gt), full.times, t_gt, w,
                                                consist);
                       acc = acc.valid() ? add(acc, p.total) : p.total;
                       out.bce += k * p.bce;
                       out.temp += k * p.temp;
                       out.third += k * p.third;
                     }
                     out.total = scale(acc, k);
                     return out;
                   },
                   log);
}

/// Mean |t̂_full − t̂_compressed| (soft-argmax) over the fine-tier streams of crash videos.
[[nodiscard]] inline double consistency_gap(const HybridModel& m, const std::vector<PreparedVideo>& data,
                                            const TrainConfig& cfg, std::uint64_t seed) {
  Rng rng(seed, "consistency-eval");
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& pv : data) {
    if (!pv.video->crash_time_s) continue;
    const SamplingPlan plan = pv.ctx.plan(m);
    for (const auto& st : sample_streams(m, pv, cfg, rng)) {
      auto cidx = compressed_indices(m, pv.ctx, plan, st.tier, st.crop);
      if (cidx.size() < 2) continue;
      Tape tape;
      Binder bind(tape, false);
      TierPass f = tier_forward(bind, m, st.tier, pv.ctx, st.idx);
      Var a = soft_argmax(f.probs, f.times, kSoftArgmaxTemperature);
      TierPass c = tier_forward(bind, m, st.tier, pv.ctx, cidx);
      s += std::abs(a.value()[0] - soft_argmax(c.probs, c.times, kSoftArgmaxTemperature).value()[0]);
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Region triggers.

struct TriggerReport {
  std::size_t videos = 0;
  std::size_t candidates = 0;
  double cost_before = 0.0;  ///< mean training cost at the configured triggers
  double cost_after = 0.0;
  double med_trigger = 0.0;
  double high_trigger = 0.0;
};

/// Training-set cost of the full hierarchy at the model's current triggers: the
/// localization error of each crash video (its duration when nothing is
/// detected) plus the duration of every crash-free video that raises an alarm,
/// averaged over videos.
[[nodiscard]] inline double hierarchy_cost(const HybridModel& m, const std::vector<PreparedVideo>& data,
                                           const std::vector<SamplingPlan>& plans,
                                           const std::vector<ProbTrack>& coarse) {
  double cost = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& pv = data[i];
    const auto r = refine_hierarchy(m, pv.ctx, plans[i], coarse[i], coarse[i].size());
    const double dur = pv.ctx.duration();
    const auto& p = r.prediction;
    if (const auto t_gt = pv.video->crash_time_s) cost += p.valid ? std::min(dur, std::abs(*p.t_refined_s - *t_gt)) : dur;
    else if (p.valid) cost += dur;
  }
  return data.empty() ? 0.0 : cost / static_cast<double>(data.size());
}

/// Picks the coarse-probability triggers that open MED and HIGH regions by a
/// grid search over values no larger than the configured ones, minimizing
/// hierarchy_cost on the training videos. Ties go to the smaller triggers: coarse
/// probabilities on videos the model was trained on overstate its confidence, so
/// an equal training cost says nothing about recall on unseen videos.
inline TriggerReport calibrate_triggers(HybridModel& m, const std::vector<PreparedVideo>& data,
                                        std::span<const double> grid = kTriggerGrid) {
  TriggerReport rep;
  rep.videos = data.size();
  std::vector<SamplingPlan> plans;
  std::vector<ProbTrack> coarse;
  for (const auto& pv : data) {
    plans.push_back(pv.ctx.plan(m));
    coarse.push_back(tier_track(m, Tier::Low, pv.ctx, coarse_indices(m, pv.ctx)));
  }
  const double med0 = m.cfg.med_trigger, high0 = m.cfg.high_trigger;
  rep.cost_before = rep.cost_after = hierarchy_cost(m, data, plans, coarse);
  rep.med_trigger = med0;
  rep.high_trigger = high0;
  std::vector<double> meds{med0}, highs{high0};
  for (double g : grid) {
    if (g < med0) meds.push_back(g);
    if (g < high0) highs.push_back(g);
  }
  for (double med : meds)
    for (double high : highs) {
      if (high < med) continue;
      m.cfg.med_trigger = med;
      m.cfg.high_trigger = high;
      ++rep.candidates;
      const double c = hierarchy_cost(m, data, plans, coarse);
      const bool tie = std::abs(c - rep.cost_after) <= 1e-12;
      if (c < rep.cost_after - 1e-12 || (tie && med + high < rep.med_trigger + rep.high_trigger)) {
        rep.cost_after = c;
        rep.med_trigger = med;
        rep.high_trigger = high;
      }
    }
  m.cfg.med_trigger = rep.med_trigger;
  m.cfg.high_trigger = rep.high_trigger;
  return rep;
}

// ---------------------------------------------------------------------------
// Boundary refinement network.

struct RefineSample {
  Tensor inputs;
  double target = 0.0;     ///< (t_gt − t_peak) / half-interval, clipped to ±0.95
  double half = 0.0;
  double parabolic_err = 0.0;
  double t_peak = 0.0;
  double t_gt = 0.0;
};

/// Peak neighbourhoods of fine-tier tracks on crops around each crash.
[[nodiscard]] inline std::vector<RefineSample> refine_samples(const HybridModel& m,
                                                              const std::vector<PreparedVideo>& data,
                                                              const TrainConfig& cfg) {
  Rng rng(cfg.seed, "refine-crops");
  std::vector<RefineSample> out;
  for (const auto& pv : data) {
    const auto t_gt = pv.video->crash_time_s;
    if (!t_gt) continue;
    Crop c = sample_crop(rng, pv.ctx.duration(), t_gt, cfg.fine_crop_s[0], cfg.fine_crop_s[1]);
    auto idx = stream_indices(pv.ctx.times(), c.t0, c.t1, tier_rate(m, Tier::High, pv.ctx));
    if (idx.size() < 3) continue;
    ProbTrack tr = tier_track(m, Tier::High, pv.ctx, idx);
    const Peak pk = detect_peak(tr, 0.0);
    const OffsetBounds b = offset_bounds(tr, pk.index);
    if (b.half_interval <= 0.0) continue;
    const double off = *t_gt - pk.t;
    if (std::abs(off) > 2.0 * b.half_interval) continue;  // peak too far for a sub-frame correction
    RefineSample s;
    s.inputs = refine_inputs(tr, pk.index);
    s.half = b.half_interval;
    s.target = std::clamp(off / b.half_interval, -0.95, 0.95);
    s.t_peak = pk.t;
    s.t_gt = *t_gt;
    s.parabolic_err = std::abs(pk.t + std::clamp(parabolic_offset(tr, pk.index), b.lo, b.hi) - *t_gt);
    out.push_back(std::move(s));
  }
  return out;
}

struct RefineReport {
  std::size_t samples = 0;
  double parabolic_mae = 0.0;
  double learned_mae = 0.0;
  bool adopted = false;
};

/// Trains the refine network by regression onto the clipped offset. The
/// network is adopted only when it beats parabolic interpolation on its data.
inline RefineReport train_refine(HybridModel& m, const std::vector<PreparedVideo>& data, const TrainConfig& cfg,
                                 TrainLog* log = nullptr) {
  RefineReport rep;
  const auto samples = refine_samples(m, data, cfg);
  rep.samples = samples.size();
  if (samples.empty()) return rep;
  MomentumSgd opt(m, cfg.momentum, cfg.clip_norm, cfg.clip_per_group);
  GradientBuffer buf(m);
  std::vector<bool> mask;
  m.visit([&](const std::string& name, Tensor&) { mask.push_back(name.rfind("refine.", 0) == 0); });
  const double lr = std::max(cfg.lr, 1e-2);
  for (std::size_t epoch = 0; epoch < cfg.refine_epochs; ++epoch) {
    buf.zero();
    Tape tape;
    Binder bind(tape);
    Var acc;
    for (const auto& s : samples) {
      Var e = add_scalar(refine_unit(bind, m.refine, tape.constant(s.inputs)), -s.target);
      Var sq = square(e);
      acc = acc.valid() ? add(acc, sq) : sq;
    }
    Var loss = scale(acc, 1.0 / static_cast<double>(samples.size()));
    buf.accumulate(m, bind, tape.backward(loss));
    opt.step(m, buf, lr, mask);
    if (log) log->rows.push_back({"refine", epoch, epoch, loss.value()[0], 0, 0, 0, lr, cfg.seed});
  }
  for (const auto& s : samples) {
    Tape tape;
    Binder bind(tape, false);
    const double off = s.half * refine_unit(bind, m.refine, tape.constant(s.inputs)).value()[0];
    rep.learned_mae += std::abs(s.t_peak + off - s.t_gt);
    rep.parabolic_mae += s.parabolic_err;
  }
  rep.learned_mae /= static_cast<double>(samples.size());
  rep.parabolic_mae /= static_cast<double>(samples.size());
  rep.adopted = rep.learned_mae < rep.parabolic_mae;
  m.refine.trained = rep.adopted;
  return rep;
}

}  // namespace tloc
