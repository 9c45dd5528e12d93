#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "spen/compute.hpp"
#include "spen/energy.hpp"

namespace spen {

using BinaryLabels = std::vector<std::uint8_t>;

/// Iterates are clamped to logits in [-kLogitBound, kLogitBound] so that every
/// coordinate stays strictly inside (0, 1) in double precision.
inline constexpr double kLogitBound = 30.0;

/// Clipping used when initializing from the local classifier.
inline constexpr double kInitClip = 1e-4;

/// A point of the open hypercube (0,1)^L.
class RelaxedLabels {
 public:
  RelaxedLabels() = default;
  /// Throws NumericError unless every coordinate is strictly inside (0,1).
  explicit RelaxedLabels(Vector values);

  static RelaxedLabels uniform(std::size_t num_labels, double value = 0.5);

  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const { return values_; }
  operator std::span<const double>() const { return values_; }

 private:
  Vector values_;
};

enum class InitKind { Uniform, FromLocalClassifier };

struct InferenceConfig {
  double step_size = 0.1;
  double momentum = 0.95;
  std::size_t max_iters = 60;
  double rel_obj_tol = 1e-5;
  double abs_iterate_tol = 1e-4;
  double batch_converged_fraction = 1.0;
  double entropy_temperature = 0.0;
  InitKind init = InitKind::Uniform;

  void validate() const;
};

struct PredictionTrace {
  std::size_t iterations_used = 0;
  bool converged = false;
  double final_energy = 0.0;
  /// Objective at the starting point followed by one entry per step.
  std::vector<double> objective_history;
};

struct Prediction {
  RelaxedLabels labels;
  PredictionTrace trace;
};

/// One entropic mirror descent step: per coordinate
/// y <- y e^{-eta g} / (y e^{-eta g} + 1 - y), computed in logit space.
RelaxedLabels mirror_step(const RelaxedLabels& ybar, std::span<const double> grad, double step_size);

/// H(ybar) = -sum_i [y_i ln y_i + (1-y_i) ln(1-y_i)].
double entropy(std::span<const double> ybar);

/// Gradient of E(ybar) - temperature * H(ybar).
Vector entropy_smoothed_grad(const SpenParams& p, std::span<const double> features, std::span<const double> ybar,
                             double temperature);

/// Starting point for prediction as configured.
RelaxedLabels initial_labels(const SpenParams& p, std::span<const double> features, InitKind init);

/// Minimizes the energy (minus the entropy term when a temperature is set).
Prediction predict(const SpenParams& p, std::span<const double> features, const InferenceConfig& cfg);

/// Runs predict over a batch with a shared iteration counter. Once at least
/// batch_converged_fraction of the examples have converged, the rest are
/// frozen at their current iterate with converged = false.
std::vector<Prediction> predict_batch(const SpenParams& p, std::span<const Vector> features,
                                      const InferenceConfig& cfg, std::size_t workers = 1);

enum class Surrogate { SquaredLoss, LogLoss };

std::string_view to_string(Surrogate s);
Surrogate parse_surrogate(std::string_view name);

/// Differentiable stand-in for the Hamming loss between gold labels and ybar.
double surrogate_loss(Surrogate s, std::span<const std::uint8_t> gold, std::span<const double> ybar);
Vector surrogate_loss_grad(Surrogate s, std::span<const std::uint8_t> gold, std::span<const double> ybar);

/// Minimizes E(ybar) - surrogate(gold, ybar). The relaxed iterate is returned unrounded.
Prediction loss_augmented_predict(const SpenParams& p, std::span<const double> features,
                                  std::span<const std::uint8_t> gold, Surrogate surrogate,
                                  const InferenceConfig& cfg);

/// y_i = 1 iff ybar_i >= threshold.
BinaryLabels round_prediction(std::span<const double> ybar, double threshold);

Vector to_vector(std::span<const std::uint8_t> labels);

/// One JSON object per line: id, iterations, converged, final_energy.
void write_traces(std::ostream& out, std::span<const Prediction> predictions);

/// Objective callback: returns the value at ybar and writes the gradient into grad.
using ObjectiveFn = std::function<double(std::span<const double> ybar, std::span<double> grad)>;

/// Minimizes an arbitrary objective over the hypercube with the configured
/// mirror descent schedule. Exposed for callers composing their own objectives.
Prediction minimize_relaxed(const ObjectiveFn& objective, RelaxedLabels start, const InferenceConfig& cfg);

}  // namespace spen
