#include "spen/learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "spen/metrics.hpp"
#include "spen/parallel.hpp"
#include "spen/random.hpp"

namespace spen {

namespace {

bool group_enabled(const std::vector<ParamGroup>& groups, ParamGroup g) {
  return std::find(groups.begin(), groups.end(), g) != groups.end();
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Gradient of the summed logistic loss w.r.t. the local scores.
Vector logistic_score_grad(std::span<const double> scores, std::span<const std::uint8_t> gold) {
  Vector d(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) d[i] = gold[i] - sigmoid(-scores[i]);
  return d;
}

void add_local_logistic_grad(const SpenParams& p, const FeatureTrace& trace, std::span<const std::uint8_t> gold,
                             double scale, SpenParams& grad) {
  const auto features = trace.output();
  const Vector ds = logistic_score_grad(local_scores(p.local, features), gold);
  add_outer(grad.local.weights, scale, ds, features);
  axpy(scale, ds, grad.local.bias);
  if (!p.features.layers.empty()) {
    backprop_features(p.features, trace, matvec_transposed(p.local.weights, ds), scale, grad.features);
  }
}

double logistic_loss_from_scores(std::span<const double> scores, std::span<const std::uint8_t> gold) {
  double loss = 0.0;
  // -log sigmoid(-s) = softplus(s); -log(1 - sigmoid(-s)) = softplus(-s).
  for (std::size_t i = 0; i < scores.size(); ++i) loss += gold[i] ? softplus(scores[i]) : softplus(-scores[i]);
  return loss;
}

double rate_at(double base, const TrainConfig& cfg, std::size_t epoch) {
  return base / (1.0 + cfg.lr_decay * static_cast<double>(epoch));
}

// Per-chunk gradient accumulators summed in chunk order.
struct BatchAccumulator {
  std::vector<SpenParams> grads;
  std::vector<double> losses;

  BatchAccumulator(const SpenParams& shape, std::size_t workers)
      : grads(workers, zeros_like(shape)), losses(workers, 0.0) {}

  void reset() {
    for (auto& g : grads) {
      for (auto& t : tensors(g)) std::fill(t.values.begin(), t.values.end(), 0.0);
    }
    std::fill(losses.begin(), losses.end(), 0.0);
  }

  // fn(example index, gradient accumulator) returns the example loss.
  template <typename Fn>
  void run(std::span<const std::size_t> batch, Fn&& fn) {
    const std::size_t workers = grads.size();
    const std::size_t chunk = (batch.size() + workers - 1) / workers;
    parallel_for(workers, workers, [&](std::size_t w) {
      const std::size_t end = std::min(batch.size(), (w + 1) * chunk);
      for (std::size_t k = w * chunk; k < end; ++k) losses[w] += fn(batch[k], grads[w]);
    });
    for (std::size_t w = 1; w < workers; ++w) accumulate(grads[0], 1.0, grads[w]);
  }

  const SpenParams& total() const { return grads[0]; }
  double loss() const { return std::accumulate(losses.begin(), losses.end(), 0.0); }
};

void check_finite_loss(double loss, const std::string& stage, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError("training diverged in stage '" + stage + "' at epoch " + std::to_string(epoch) +
                       " (non-finite loss)");
  }
}

void record_epoch(TrainingReport* report, const std::string& stage, std::size_t epoch, double loss,
                  std::optional<std::pair<double, double>> dev) {
  if (!report) return;
  EpochRecord rec{stage, epoch, loss, {}, {}};
  if (dev) {
    rec.dev_f1 = dev->first;
    rec.dev_hamming = dev->second;
  }
  report->epochs.push_back(rec);
}

// One SSVM stage over `data`. When the feature/local groups are clamped the
// features are computed once up front.
void ssvm_stage(SpenParams& p, const Dataset& data, const TrainConfig& cfg, const InferenceConfig& icfg,
                const std::vector<ParamGroup>& groups, double base_lr, std::size_t epochs, const std::string& name,
                std::uint64_t stage_seed, TrainingReport& report, const Dataset* dev) {
  if (epochs == 0) return;
  const bool train_features = group_enabled(groups, ParamGroup::Feature) || group_enabled(groups, ParamGroup::Local);
  const std::size_t workers = std::max<std::size_t>(1, cfg.workers);
  SgdMomentum opt(p, cfg.momentum);
  BatchAccumulator acc(p, workers);
  Rng rng(stage_seed);

  std::optional<SpenParams> best;
  double best_f1 = -1.0;

  std::vector<FeatureTrace> cached;
  if (!train_features) {
    cached.resize(data.size());
    parallel_for(data.size(), workers, [&](std::size_t i) {
      cached[i].input = feature_forward(p.features, data.examples[i].features);
    });
  }

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double lr = rate_at(base_lr, cfg, epoch);
    const auto order = shuffled(data.size(), rng);
    double total_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto batch = std::span<const std::size_t>(order).subspan(start, std::min(cfg.batch_size, order.size() - start));
      acc.reset();
      try {
        acc.run(batch, [&](std::size_t i, SpenParams& grad) {
          const auto& ex = data.examples[i];
          FeatureTrace local_trace;
          const FeatureTrace& trace = train_features ? (local_trace = trace_features(p.features, ex.features))
                                                     : cached[i];
          const Prediction pred = loss_augmented_predict(p, trace.output(), ex.labels, cfg.surrogate, icfg);
          const auto loss = ssvm_loss_at(p, trace.output(), ex.labels, pred.labels, cfg.surrogate);
          if (loss.margin_violation > 0.0) {
            accumulate_energy_grad_params(p, trace, to_vector(ex.labels), 1.0, grad, train_features);
            accumulate_energy_grad_params(p, trace, pred.labels.values(), -1.0, grad, train_features);
          }
          return loss.margin_violation;
        });
      } catch (const NumericError& e) {
        throw NumericError("training diverged in stage '" + name + "' at epoch " + std::to_string(epoch) + ": " +
                           e.what());
      }
      total_loss += acc.loss();
      SpenParams grad = acc.total();
      for (auto& t : tensors(grad)) {
        for (double& v : t.values) v /= static_cast<double>(batch.size());
      }
      opt.step(p, grad, lr, cfg, groups);
    }
    const double mean = total_loss / static_cast<double>(data.size());
    check_finite_loss(mean, name, epoch);
    std::optional<std::pair<double, double>> dev_metrics;
    if (dev && !dev->empty()) dev_metrics = evaluate_spen(p, *dev, icfg, workers);
    record_epoch(&report, name, epoch, mean, dev_metrics);
    if (cfg.keep_best && dev_metrics && dev_metrics->first > best_f1) {
      best_f1 = dev_metrics->first;
      best = p;
    }
  }
  if (best) p = std::move(*best);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw Error("train lr must be positive");
  if (pretrain_lr < 0.0) throw Error("train pretrain_lr must be non-negative");
  if (lr_decay < 0.0) throw Error("train lr_decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("train momentum must lie in [0, 1)");
  if (l2_local < 0.0 || l2_global < 0.0) throw Error("l2 weights must be non-negative");
  if (batch_size == 0) throw Error("batch_size must be positive");
  if (!(joint_lr_scale > 0.0 && joint_lr_scale < 1.0)) throw Error("joint_lr_scale must lie in (0, 1)");
}

SsvmExampleLoss ssvm_loss_at(const SpenParams& p, std::span<const double> features, std::span<const std::uint8_t> gold,
                             std::span<const double> prediction, Surrogate surrogate) {
  SsvmExampleLoss out;
  out.delta_at_pred = surrogate_loss(surrogate, gold, prediction);
  out.energy_gap = total_energy(p, features, prediction) - total_energy(p, features, to_vector(gold));
  out.margin_violation = std::max(0.0, out.delta_at_pred - out.energy_gap);
  return out;
}

SsvmExampleLoss ssvm_example_loss(const SpenParams& p, const LabeledExample& ex, const TrainConfig& cfg,
                                  const InferenceConfig& icfg) {
  const Vector features = feature_forward(p.features, ex.features);
  const Prediction pred = loss_augmented_predict(p, features, ex.labels, cfg.surrogate, icfg);
  return ssvm_loss_at(p, features, ex.labels, pred.labels, cfg.surrogate);
}

SpenParams ssvm_subgradient_at(const SpenParams& p, std::span<const double> x, std::span<const std::uint8_t> gold,
                               std::span<const double> prediction, Surrogate surrogate) {
  SpenParams grad = zeros_like(p);
  const FeatureTrace trace = trace_features(p.features, x);
  if (ssvm_loss_at(p, trace.output(), gold, prediction, surrogate).margin_violation > 0.0) {
    accumulate_energy_grad_params(p, trace, to_vector(gold), 1.0, grad);
    accumulate_energy_grad_params(p, trace, prediction, -1.0, grad);
  }
  return grad;
}

SpenParams ssvm_subgradient(const SpenParams& p, const LabeledExample& ex, const TrainConfig& cfg,
                            const InferenceConfig& icfg) {
  const Vector features = feature_forward(p.features, ex.features);
  const Prediction pred = loss_augmented_predict(p, features, ex.labels, cfg.surrogate, icfg);
  return ssvm_subgradient_at(p, ex.features, ex.labels, pred.labels, cfg.surrogate);
}

double local_logistic_loss(const SpenParams& p, const LabeledExample& ex) {
  return logistic_loss_from_scores(local_scores(p.local, feature_forward(p.features, ex.features)), ex.labels);
}

SpenParams local_logistic_grad(const SpenParams& p, const LabeledExample& ex) {
  SpenParams grad = zeros_like(p);
  add_local_logistic_grad(p, trace_features(p.features, ex.features), ex.labels, 1.0, grad);
  return grad;
}

SgdMomentum::SgdMomentum(const SpenParams& shape, double momentum)
    : velocity_(zeros_like(shape)), momentum_(momentum) {}

void SgdMomentum::step(SpenParams& params, const SpenParams& grad, double lr, const TrainConfig& cfg,
                       const std::vector<ParamGroup>& groups) {
  auto theta = tensors(params);
  auto g = tensors(grad);
  auto v = tensors(velocity_);
  require_same_length(theta.size(), g.size(), "optimizer gradient tensors");
  for (std::size_t k = 0; k < theta.size(); ++k) {
    if (!group_enabled(groups, theta[k].group)) continue;
    const double l2 = theta[k].is_bias && !cfg.l2_biases
                          ? 0.0
                          : (theta[k].group == ParamGroup::Global ? cfg.l2_global : cfg.l2_local);
    const double shrink = 1.0 - lr * l2;
    auto& tv = theta[k].values;
    auto& vv = v[k].values;
    const auto& gv = g[k].values;
    for (std::size_t i = 0; i < tv.size(); ++i) {
      vv[i] = momentum_ * vv[i] + gv[i];
      tv[i] = shrink * tv[i] - lr * vv[i];
    }
  }
}

void write_training_report(std::ostream& out, const TrainingReport& report) {
  for (const auto& e : report.epochs) {
    nlohmann::json rec = {{"stage", e.stage}, {"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
    rec["dev_f1"] = e.dev_f1 ? nlohmann::json(*e.dev_f1) : nlohmann::json(nullptr);
    rec["dev_hamming"] = e.dev_hamming ? nlohmann::json(*e.dev_hamming) : nlohmann::json(nullptr);
    out << rec.dump() << '\n';
  }
}

Vector local_marginals(const SpenParams& p, std::span<const double> x) {
  Vector s = local_scores(p.local, feature_forward(p.features, x));
  for (double& v : s) v = sigmoid(-v);
  return s;
}

namespace {

std::pair<double, double> evaluate_relaxed(std::span<const Vector> relaxed, const Dataset& data) {
  const auto golds = data.label_vectors();
  const auto grid = default_threshold_grid();
  const auto choice = tune_threshold(relaxed, golds, grid);
  std::vector<BinaryLabels> rounded;
  rounded.reserve(relaxed.size());
  for (const auto& r : relaxed) rounded.push_back(round_prediction(r, choice.threshold));
  return {choice.metric, hamming_error(rounded, golds)};
}

}  // namespace

std::pair<double, double> evaluate_local(const SpenParams& p, const Dataset& data) {
  std::vector<Vector> relaxed;
  relaxed.reserve(data.size());
  for (const auto& ex : data.examples) relaxed.push_back(local_marginals(p, ex.features));
  return evaluate_relaxed(relaxed, data);
}

std::pair<double, double> evaluate_spen(const SpenParams& p, const Dataset& data, const InferenceConfig& icfg,
                                        std::size_t workers) {
  std::vector<Vector> features(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) { features[i] = feature_forward(p.features, data.examples[i].features); });
  const auto preds = predict_batch(p, features, icfg, workers);
  std::vector<Vector> relaxed;
  relaxed.reserve(preds.size());
  for (const auto& pr : preds) relaxed.emplace_back(pr.labels.values().begin(), pr.labels.values().end());
  return evaluate_relaxed(relaxed, data);
}

SpenParams pretrain_local(SpenParams p, const Dataset& data, const TrainConfig& cfg, TrainingReport* report,
                          const Dataset* dev) {
  cfg.validate();
  if (cfg.pretrain_epochs == 0 || data.empty()) return p;
  const std::size_t workers = std::max<std::size_t>(1, cfg.workers);
  const std::vector<ParamGroup> groups{ParamGroup::Feature, ParamGroup::Local};
  SgdMomentum opt(p, cfg.momentum);
  BatchAccumulator acc(p, workers);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const double base_lr = cfg.pretrain_lr > 0.0 ? cfg.pretrain_lr : cfg.lr;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    const double lr = rate_at(base_lr, cfg, epoch);
    const auto order = shuffled(data.size(), rng);
    double total_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto batch = std::span<const std::size_t>(order).subspan(start, std::min(cfg.batch_size, order.size() - start));
      acc.reset();
      acc.run(batch, [&](std::size_t i, SpenParams& grad) {
        const auto& ex = data.examples[i];
        const FeatureTrace trace = trace_features(p.features, ex.features);
        add_local_logistic_grad(p, trace, ex.labels, 1.0, grad);
        return logistic_loss_from_scores(local_scores(p.local, trace.output()), ex.labels);
      });
      total_loss += acc.loss();
      SpenParams grad = acc.total();
      for (auto& t : tensors(grad)) {
        for (double& v : t.values) v /= static_cast<double>(batch.size());
      }
      opt.step(p, grad, lr, cfg, groups);
    }
    const double mean = total_loss / static_cast<double>(data.size());
    check_finite_loss(mean, "pretrain", epoch);
    std::optional<std::pair<double, double>> dev_metrics;
    if (dev && !dev->empty()) dev_metrics = evaluate_local(p, *dev);
    record_epoch(report, "pretrain", epoch, mean, dev_metrics);
  }
  return p;
}

std::pair<SpenParams, TrainingReport> train_spen(SpenParams p, const Dataset& data, const TrainConfig& cfg,
                                                 const InferenceConfig& icfg, const Dataset* dev) {
  cfg.validate();
  icfg.validate();
  if (data.empty()) throw DataError("train_spen needs a nonempty training set");
  TrainingReport report;
  p = pretrain_local(std::move(p), data, cfg, &report, dev);
  if (p.global_kind() != GlobalKind::None) {
    ssvm_stage(p, data, cfg, icfg, {ParamGroup::Global}, cfg.lr, cfg.global_epochs, "global", cfg.seed + 1, report,
               dev);
  }
  ssvm_stage(p, data, cfg, icfg, {ParamGroup::Feature, ParamGroup::Local, ParamGroup::Global},
             cfg.lr * cfg.joint_lr_scale, cfg.joint_epochs, "joint", cfg.seed + 2, report, dev);
  return {std::move(p), std::move(report)};
}

}  // namespace spen
