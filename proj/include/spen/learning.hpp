#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "spen/data.hpp"
#include "spen/energy.hpp"
#include "spen/inference.hpp"

namespace spen {

struct TrainConfig {
  Surrogate surrogate = Surrogate::SquaredLoss;
  double lr = 0.01;
  /// Learning rate for the local pretraining stage; 0 means use lr.
  double pretrain_lr = 0.0;
  /// Per-epoch decay: the rate at epoch e is lr / (1 + lr_decay * e).
  double lr_decay = 0.0;
  double momentum = 0.9;
  double l2_local = 0.0;   // feature and local tensors
  double l2_global = 0.0;  // global energy tensors
  bool l2_biases = false;
  std::size_t batch_size = 32;
  std::size_t pretrain_epochs = 10;
  std::size_t global_epochs = 10;
  std::size_t joint_epochs = 5;
  double joint_lr_scale = 0.1;
  /// With a dev set, each SSVM stage ends on its epoch with the best dev F1.
  bool keep_best = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

struct SsvmExampleLoss {
  double margin_violation = 0.0;  // max(0, delta_at_pred - energy_gap)
  double delta_at_pred = 0.0;     // surrogate loss between gold and the relaxed prediction
  double energy_gap = 0.0;        // E(prediction) - E(gold)
};

/// Hinge evaluated at a fixed relaxed prediction.
SsvmExampleLoss ssvm_loss_at(const SpenParams& p, std::span<const double> features, std::span<const std::uint8_t> gold,
                             std::span<const double> prediction, Surrogate surrogate);

/// Runs loss-augmented inference and evaluates the hinge at its output.
SsvmExampleLoss ssvm_example_loss(const SpenParams& p, const LabeledExample& ex, const TrainConfig& cfg,
                                  const InferenceConfig& icfg);

/// dE/dtheta at the gold labels minus dE/dtheta at the prediction, or zero
/// when the hinge is inactive. The prediction is treated as a constant.
SpenParams ssvm_subgradient_at(const SpenParams& p, std::span<const double> x, std::span<const std::uint8_t> gold,
                               std::span<const double> prediction, Surrogate surrogate);

SpenParams ssvm_subgradient(const SpenParams& p, const LabeledExample& ex, const TrainConfig& cfg,
                            const InferenceConfig& icfg);

/// Per-label logistic loss of P(y_i = 1) = sigmoid(-score_i), summed over labels.
double local_logistic_loss(const SpenParams& p, const LabeledExample& ex);
/// Gradient of local_logistic_loss w.r.t. feature and local tensors.
SpenParams local_logistic_grad(const SpenParams& p, const LabeledExample& ex);

/// Heavy-ball SGD with decoupled L2: v <- mu v + g; theta <- (1 - lr l2) theta - lr v.
class SgdMomentum {
 public:
  SgdMomentum(const SpenParams& shape, double momentum);

  /// Updates the tensors whose group is enabled in `groups`; the others are untouched.
  void step(SpenParams& params, const SpenParams& grad, double lr, const TrainConfig& cfg,
            const std::vector<ParamGroup>& groups);

 private:
  SpenParams velocity_;
  double momentum_;
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> dev_f1;
  std::optional<double> dev_hamming;
};

struct TrainingReport {
  std::vector<EpochRecord> epochs;
};

/// One JSON object per line: stage, epoch, mean_loss, dev_f1, dev_hamming.
void write_training_report(std::ostream& out, const TrainingReport& report);

/// sigmoid(-score) per label: the local classifier's probabilities.
Vector local_marginals(const SpenParams& p, std::span<const double> x);

/// Macro F1 (threshold tuned on the same data) and hamming error at that
/// threshold for the local classifier.
std::pair<double, double> evaluate_local(const SpenParams& p, const Dataset& data);

/// Same for SPEN prediction with the given inference settings.
std::pair<double, double> evaluate_spen(const SpenParams& p, const Dataset& data, const InferenceConfig& icfg,
                                        std::size_t workers = 1);

/// Trains the feature and local tensors with the local logistic loss. This is
/// also the MLP baseline. Global tensors are untouched.
SpenParams pretrain_local(SpenParams p, const Dataset& data, const TrainConfig& cfg,
                          TrainingReport* report = nullptr, const Dataset* dev = nullptr);

/// Staged SSVM training: local pretraining, then the global energy alone with
/// the local and feature tensors clamped, then a joint pass at
/// lr * joint_lr_scale. Momentum buffers are reset between stages.
std::pair<SpenParams, TrainingReport> train_spen(SpenParams p, const Dataset& data, const TrainConfig& cfg,
                                                 const InferenceConfig& icfg, const Dataset* dev = nullptr);

}  // namespace spen
