#include "spen/inference.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "spen/parallel.hpp"

namespace spen {

namespace {

double logit(double y) { return std::log(y) - std::log1p(-y); }

void require_interior(std::span<const double> ybar, std::string_view what) {
  for (std::size_t i = 0; i < ybar.size(); ++i) {
    if (!(ybar[i] > 0.0 && ybar[i] < 1.0)) {
      std::ostringstream msg;
      msg << what << ": coordinate " << i << " = " << ybar[i] << " is not strictly inside (0,1)";
      throw NumericError(msg.str());
    }
  }
}

// Mirror descent iterate with heavy-ball momentum on the gradient.
class MirrorDescent {
 public:
  MirrorDescent(const ObjectiveFn& objective, RelaxedLabels start, const InferenceConfig& cfg)
      : objective_(&objective), cfg_(&cfg), labels_(std::move(start)),
        grad_(labels_.size(), 0.0), velocity_(labels_.size(), 0.0) {
    value_ = (*objective_)(labels_, grad_);
    check_finite();
    history_.push_back(value_);
  }

  bool converged() const { return converged_; }

  void step() {
    for (std::size_t i = 0; i < velocity_.size(); ++i) velocity_[i] = cfg_->momentum * velocity_[i] + grad_[i];
    RelaxedLabels next = mirror_step(labels_, velocity_, cfg_->step_size);
    const double previous = value_;
    const double moved = max_abs_diff(next.values(), labels_.values());
    labels_ = std::move(next);
    value_ = (*objective_)(labels_, grad_);
    check_finite();
    history_.push_back(value_);
    ++iterations_;
    const double rel = std::abs(value_ - previous) / std::max(std::abs(previous), 1e-12);
    converged_ = rel < cfg_->rel_obj_tol && moved < cfg_->abs_iterate_tol;
  }

  Prediction finish(bool converged, std::size_t iterations) {
    Prediction out{std::move(labels_), {}};
    out.trace.iterations_used = iterations;
    out.trace.converged = converged;
    out.trace.final_energy = value_;
    out.trace.objective_history = std::move(history_);
    return out;
  }

  std::size_t iterations() const { return iterations_; }

 private:
  void check_finite() {
    if (!std::isfinite(value_) || !all_finite(grad_)) {
      throw NumericError("inference objective or gradient became non-finite at iteration " +
                         std::to_string(iterations_));
    }
  }

  const ObjectiveFn* objective_;
  const InferenceConfig* cfg_;
  RelaxedLabels labels_;
  Vector grad_;
  Vector velocity_;
  double value_ = 0.0;
  std::vector<double> history_;
  std::size_t iterations_ = 0;
  bool converged_ = false;
};

ObjectiveFn energy_objective(const SpenParams& p, std::span<const double> features, double temperature) {
  Vector scores = local_scores(p.local, features);
  return [&p, features, scores = std::move(scores), temperature](std::span<const double> y, std::span<double> grad) {
    const Vector g = energy_grad_y(p, features, scores, y);
    std::copy(g.begin(), g.end(), grad.begin());
    double value = total_energy(p, features, y);
    if (temperature > 0.0) {
      value -= temperature * entropy(y);
      for (std::size_t i = 0; i < y.size(); ++i) grad[i] += temperature * logit(y[i]);
    }
    return value;
  };
}

}  // namespace

RelaxedLabels::RelaxedLabels(Vector values) : values_(std::move(values)) {
  require_interior(values_, "relaxed labels");
}

RelaxedLabels RelaxedLabels::uniform(std::size_t num_labels, double value) {
  return RelaxedLabels(Vector(num_labels, value));
}

void InferenceConfig::validate() const {
  if (!(step_size > 0.0)) throw Error("inference step_size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("inference momentum must lie in [0, 1)");
  if (!(batch_converged_fraction > 0.0 && batch_converged_fraction <= 1.0)) {
    throw Error("batch_converged_fraction must lie in (0, 1]");
  }
  if (!(entropy_temperature >= 0.0)) throw Error("entropy_temperature must be non-negative");
  if (rel_obj_tol < 0.0 || abs_iterate_tol < 0.0) throw Error("convergence tolerances must be non-negative");
}

RelaxedLabels mirror_step(const RelaxedLabels& ybar, std::span<const double> grad, double step_size) {
  require_same_length(ybar.size(), grad.size(), "mirror step gradient");
  Vector next(ybar.size());
  for (std::size_t i = 0; i < ybar.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      std::ostringstream msg;
      msg << "mirror step: gradient coordinate " << i << " is not finite (" << grad[i] << ")";
      throw NumericError(msg.str());
    }
    const double z = std::clamp(logit(ybar[i]) - step_size * grad[i], -kLogitBound, kLogitBound);
    next[i] = sigmoid(z);
  }
  return RelaxedLabels(std::move(next));
}

double entropy(std::span<const double> ybar) {
  double h = 0.0;
  for (double y : ybar) h -= y * std::log(y) + (1.0 - y) * std::log1p(-y);
  return h;
}

Vector entropy_smoothed_grad(const SpenParams& p, std::span<const double> features, std::span<const double> ybar,
                             double temperature) {
  if (temperature < 0.0) throw Error("entropy temperature must be non-negative");
  require_interior(ybar, "entropy smoothed gradient");
  Vector g = energy_grad_y(p, features, ybar);
  if (temperature > 0.0) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += temperature * logit(ybar[i]);
  }
  return g;
}

RelaxedLabels initial_labels(const SpenParams& p, std::span<const double> features, InitKind init) {
  if (init == InitKind::Uniform) return RelaxedLabels::uniform(p.num_labels());
  // Low local energy means the label is on, hence the negated score.
  Vector y = local_scores(p.local, features);
  for (double& v : y) v = std::clamp(sigmoid(-v), kInitClip, 1.0 - kInitClip);
  return RelaxedLabels(std::move(y));
}

Prediction minimize_relaxed(const ObjectiveFn& objective, RelaxedLabels start, const InferenceConfig& cfg) {
  cfg.validate();
  MirrorDescent md(objective, std::move(start), cfg);
  while (md.iterations() < cfg.max_iters && !md.converged()) md.step();
  return md.finish(md.converged(), md.iterations());
}

Prediction predict(const SpenParams& p, std::span<const double> features, const InferenceConfig& cfg) {
  const ObjectiveFn objective = energy_objective(p, features, cfg.entropy_temperature);
  Prediction out = minimize_relaxed(objective, initial_labels(p, features, cfg.init), cfg);
  out.trace.final_energy = total_energy(p, features, out.labels);
  return out;
}

std::vector<Prediction> predict_batch(const SpenParams& p, std::span<const Vector> features,
                                      const InferenceConfig& cfg, std::size_t workers) {
  cfg.validate();
  if (features.empty()) throw Error("predict_batch needs a nonempty batch");
  const std::size_t n = features.size();
  std::vector<ObjectiveFn> objectives;
  objectives.reserve(n);
  for (const auto& f : features) objectives.push_back(energy_objective(p, f, cfg.entropy_temperature));

  std::vector<std::optional<MirrorDescent>> states(n);
  parallel_for(n, workers, [&](std::size_t i) {
    states[i].emplace(objectives[i], initial_labels(p, features[i], cfg.init), cfg);
  });

  const double needed = cfg.batch_converged_fraction * static_cast<double>(n) - 1e-9;
  std::size_t sweep = 0;
  auto count_converged = [&] {
    return static_cast<std::size_t>(
        std::count_if(states.begin(), states.end(), [](const auto& s) { return s->converged(); }));
  };
  while (sweep < cfg.max_iters && static_cast<double>(count_converged()) < needed) {
    ++sweep;
    parallel_for(n, workers, [&](std::size_t i) {
      if (!states[i]->converged()) states[i]->step();
    });
  }

  std::vector<Prediction> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool conv = states[i]->converged();
    const std::size_t iters = conv ? states[i]->iterations() : sweep;
    out.push_back(states[i]->finish(conv, iters));
    out.back().trace.final_energy = total_energy(p, features[i], out.back().labels);
  }
  return out;
}

std::string_view to_string(Surrogate s) {
  return s == Surrogate::SquaredLoss ? "squared" : "log";
}

Surrogate parse_surrogate(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "squared" || lower == "squaredloss" || lower == "squared_loss") return Surrogate::SquaredLoss;
  if (lower == "log" || lower == "logloss" || lower == "log_loss") return Surrogate::LogLoss;
  throw Error("unknown surrogate loss '" + std::string(name) + "'");
}

double surrogate_loss(Surrogate s, std::span<const std::uint8_t> gold, std::span<const double> ybar) {
  require_same_length(gold.size(), ybar.size(), "surrogate loss");
  double loss = 0.0;
  for (std::size_t i = 0; i < ybar.size(); ++i) {
    if (s == Surrogate::SquaredLoss) {
      const double d = ybar[i] - gold[i];
      loss += d * d;
    } else {
      loss -= gold[i] ? std::log(ybar[i]) : std::log1p(-ybar[i]);
    }
  }
  return loss;
}

Vector surrogate_loss_grad(Surrogate s, std::span<const std::uint8_t> gold, std::span<const double> ybar) {
  require_same_length(gold.size(), ybar.size(), "surrogate loss gradient");
  Vector g(ybar.size());
  for (std::size_t i = 0; i < ybar.size(); ++i) {
    if (s == Surrogate::SquaredLoss) g[i] = 2.0 * (ybar[i] - gold[i]);
    else g[i] = gold[i] ? -1.0 / ybar[i] : 1.0 / (1.0 - ybar[i]);
  }
  return g;
}

Prediction loss_augmented_predict(const SpenParams& p, std::span<const double> features,
                                  std::span<const std::uint8_t> gold, Surrogate surrogate,
                                  const InferenceConfig& cfg) {
  require_same_length(p.num_labels(), gold.size(), "loss-augmented gold labels");
  const Vector scores = local_scores(p.local, features);
  const ObjectiveFn objective = [&](std::span<const double> y, std::span<double> grad) {
    const Vector ge = energy_grad_y(p, features, scores, y);
    const Vector gl = surrogate_loss_grad(surrogate, gold, y);
    for (std::size_t i = 0; i < y.size(); ++i) grad[i] = ge[i] - gl[i];
    return total_energy(p, features, y) - surrogate_loss(surrogate, gold, y);
  };
  return minimize_relaxed(objective, initial_labels(p, features, cfg.init), cfg);
}

BinaryLabels round_prediction(std::span<const double> ybar, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("rounding threshold must lie in (0, 1)");
  BinaryLabels out(ybar.size());
  for (std::size_t i = 0; i < ybar.size(); ++i) out[i] = ybar[i] >= threshold ? 1 : 0;
  return out;
}

Vector to_vector(std::span<const std::uint8_t> labels) { return Vector(labels.begin(), labels.end()); }

void write_traces(std::ostream& out, std::span<const Prediction> predictions) {
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& t = predictions[i].trace;
    nlohmann::json rec = {{"id", i}, {"iterations", t.iterations_used}, {"converged", t.converged},
                          {"final_energy", t.final_energy}};
    out << rec.dump() << '\n';
  }
}

}  // namespace spen
