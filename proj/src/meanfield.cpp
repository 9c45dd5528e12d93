#include "spen/meanfield.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spen/metrics.hpp"
#include "spen/random.hpp"

namespace spen {

namespace {

struct Unrolled {
  std::vector<Vector> marginals;  // marginals[0] is the 0.5 start, marginals[t] after iteration t
  Vector last_logits;
};

Unrolled unroll(const DmfParams& p, std::span<const double> unaries) {
  const std::size_t L = p.num_labels();
  require_same_length(L, unaries.size(), "dmf unaries");
  Unrolled u;
  u.marginals.reserve(p.iters + 1);
  u.marginals.emplace_back(L, 0.5);
  for (std::size_t t = 1; t <= p.iters; ++t) {
    Vector e = matvec(p.pairwise, u.marginals.back());
    for (std::size_t i = 0; i < L; ++i) e[i] += unaries[i] - p.pairwise(i, i);
    u.marginals.push_back(apply_nonlinearity(Nonlinearity::Sigmoid, e));
    if (t == p.iters) u.last_logits = std::move(e);
  }
  return u;
}

void symmetrize_zero_diagonal(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    m(i, i) = 0.0;
    for (std::size_t j = i + 1; j < m.cols(); ++j) {
      const double avg = 0.5 * (m(i, j) + m(j, i));
      m(i, j) = avg;
      m(j, i) = avg;
    }
  }
}

}  // namespace

void DmfParams::validate() const {
  if (pairwise.rows() != pairwise.cols()) throw DimensionError("dmf pairwise matrix must be square, got " + pairwise.shape_string());
  require_same_length(pairwise.rows(), unary_adjust.size(), "dmf unary adjustment");
  require_same_length(pairwise.rows(), unary_source.num_labels(), "dmf unary source labels");
  if (iters == 0) throw Error("dmf needs at least one mean-field iteration");
}

DmfParams make_dmf(SpenParams unary_source, std::size_t iters, bool clamp_unaries) {
  const std::size_t L = unary_source.num_labels();
  unary_source.global = std::monostate{};
  DmfParams p{std::move(unary_source), Matrix(L, L), Vector(L, 0.0), iters, clamp_unaries};
  p.validate();
  return p;
}

Vector dmf_unaries(const DmfParams& p, std::span<const double> x) {
  Vector u = local_scores(p.unary_source.local, feature_forward(p.unary_source.features, x));
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = p.unary_adjust[i] - u[i];
  return u;
}

RelaxedLabels dmf_forward_from_unaries(const DmfParams& p, std::span<const double> unaries) {
  p.validate();
  Unrolled u = unroll(p, unaries);
  Vector out(u.last_logits.size());
  // Clip the logits so the marginals stay strictly inside (0,1) in double precision.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(std::clamp(u.last_logits[i], -kLogitBound, kLogitBound));
  return RelaxedLabels(std::move(out));
}

RelaxedLabels dmf_forward(const DmfParams& p, std::span<const double> x) {
  return dmf_forward_from_unaries(p, dmf_unaries(p, x));
}

double dmf_loss(const DmfParams& p, const LabeledExample& ex) {
  const Unrolled u = unroll(p, dmf_unaries(p, ex.features));
  double loss = 0.0;
  for (std::size_t i = 0; i < u.last_logits.size(); ++i) {
    loss += ex.labels[i] ? softplus(-u.last_logits[i]) : softplus(u.last_logits[i]);
  }
  return loss;
}

DmfGradient dmf_loss_grad(const DmfParams& p, const LabeledExample& ex) {
  p.validate();
  const std::size_t L = p.num_labels();
  const FeatureTrace trace = trace_features(p.unary_source.features, ex.features);
  Vector unaries = local_scores(p.unary_source.local, trace.output());
  for (std::size_t i = 0; i < L; ++i) unaries[i] = p.unary_adjust[i] - unaries[i];
  const Unrolled u = unroll(p, unaries);

  DmfGradient g{Matrix(L, L), Vector(L, 0.0), zeros_like(p.unary_source)};
  Vector de(L);
  for (std::size_t i = 0; i < L; ++i) de[i] = u.marginals[p.iters][i] - ex.labels[i];
  for (std::size_t t = p.iters; t >= 1; --t) {
    add_outer(g.pairwise, 1.0, de, u.marginals[t - 1]);
    axpy(1.0, de, g.unary_adjust);
    if (t == 1) break;
    Vector dy = matvec_transposed(p.pairwise, de);
    const auto& prev = u.marginals[t - 1];
    for (std::size_t i = 0; i < L; ++i) de[i] = dy[i] * prev[i] * (1.0 - prev[i]);
  }
  // Gradient w.r.t. W in A = (W + W^T) / 2 with the diagonal held at zero.
  symmetrize_zero_diagonal(g.pairwise);

  if (!p.clamp_unaries) {
    // unaries = adjust - scores, so d loss / d scores = -d loss / d adjust.
    Vector ds = g.unary_adjust;
    for (double& v : ds) v = -v;
    add_outer(g.unary_source.local.weights, 1.0, ds, trace.output());
    axpy(1.0, ds, g.unary_source.local.bias);
    if (!p.unary_source.features.layers.empty()) {
      backprop_features(p.unary_source.features, trace, matvec_transposed(p.unary_source.local.weights, ds), 1.0,
                        g.unary_source.features);
    }
  }
  return g;
}

std::pair<double, double> evaluate_dmf(const DmfParams& p, const Dataset& data) {
  std::vector<Vector> relaxed;
  relaxed.reserve(data.size());
  for (const auto& ex : data.examples) {
    const auto r = dmf_forward(p, ex.features);
    relaxed.emplace_back(r.values().begin(), r.values().end());
  }
  const auto golds = data.label_vectors();
  const auto grid = default_threshold_grid();
  const auto choice = tune_threshold(relaxed, golds, grid);
  std::vector<BinaryLabels> rounded;
  for (const auto& r : relaxed) rounded.push_back(round_prediction(r, choice.threshold));
  return {choice.metric, hamming_error(rounded, golds)};
}

DmfParams dmf_train(DmfParams p, const Dataset& data, const TrainConfig& cfg, TrainingReport* report,
                    const Dataset* dev) {
  cfg.validate();
  p.validate();
  if (data.empty() || cfg.global_epochs == 0) return p;
  const std::size_t L = p.num_labels();
  symmetrize_zero_diagonal(p.pairwise);
  Matrix vel_pairwise(L, L);
  Vector vel_adjust(L, 0.0);
  SgdMomentum unary_opt(p.unary_source, cfg.momentum);
  const std::vector<ParamGroup> unary_groups{ParamGroup::Feature, ParamGroup::Local};
  Rng rng(cfg.seed + 3);

  for (std::size_t epoch = 0; epoch < cfg.global_epochs; ++epoch) {
    const double lr = cfg.lr / (1.0 + cfg.lr_decay * static_cast<double>(epoch));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      DmfGradient sum{Matrix(L, L), Vector(L, 0.0), zeros_like(p.unary_source)};
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = data.examples[order[k]];
        total_loss += dmf_loss(p, ex);
        const DmfGradient g = dmf_loss_grad(p, ex);
        axpy(inv, g.pairwise.values(), sum.pairwise.values());
        axpy(inv, g.unary_adjust, sum.unary_adjust);
        if (!p.clamp_unaries) accumulate(sum.unary_source, inv, g.unary_source);
      }
      const double shrink = 1.0 - lr * cfg.l2_global;
      auto a = p.pairwise.values();
      auto va = vel_pairwise.values();
      const auto ga = sum.pairwise.values();
      for (std::size_t i = 0; i < a.size(); ++i) {
        va[i] = cfg.momentum * va[i] + ga[i];
        a[i] = shrink * a[i] - lr * va[i];
      }
      for (std::size_t i = 0; i < L; ++i) {
        vel_adjust[i] = cfg.momentum * vel_adjust[i] + sum.unary_adjust[i];
        p.unary_adjust[i] -= lr * vel_adjust[i];
      }
      if (!p.clamp_unaries) unary_opt.step(p.unary_source, sum.unary_source, lr, cfg, unary_groups);
    }
    const double mean = total_loss / static_cast<double>(data.size());
    if (!std::isfinite(mean)) {
      throw NumericError("dmf training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
    }
    if (report) {
      EpochRecord rec{"dmf", epoch, mean, {}, {}};
      if (dev && !dev->empty()) {
        const auto [f1, ham] = evaluate_dmf(p, *dev);
        rec.dev_f1 = f1;
        rec.dev_hamming = ham;
      }
      report->epochs.push_back(rec);
    }
  }
  return p;
}

}  // namespace spen
