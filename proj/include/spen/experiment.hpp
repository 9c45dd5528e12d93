#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spen/data.hpp"
#include "spen/energy.hpp"
#include "spen/inference.hpp"
#include "spen/learning.hpp"
#include "spen/meanfield.hpp"
#include "spen/metrics.hpp"
#include "spen/model_io.hpp"

namespace spen {

/// Which predictor a config trains.
///   linear: F(x) = x with local energy only, trained with the logistic loss
///   mlp:    feature network + local energy, logistic loss
///   spen:   staged SSVM training of the full energy
///   dmf:    mlp pretraining followed by deep mean-field training
enum class ModelKind { Linear, Mlp, Spen, Dmf };

std::string_view to_string(ModelKind k);
ModelKind parse_model_kind(std::string_view name);

/// Declarative description of one experiment, read from a flat
/// "key = value" file ('#' starts a comment).
struct ExperimentConfig {
  ModelKind kind = ModelKind::Spen;
  Architecture arch;
  std::uint64_t init_seed = 0;
  InferenceConfig inference;
  TrainConfig train;
  /// SPEN only: the global stage is run from this many initializations of the
  /// global energy and the one with the best dev F1 goes on to the joint stage.
  std::size_t global_restarts = 1;
  std::size_t dmf_iters = 5;
  bool dmf_clamp_unaries = true;

  std::optional<std::filesystem::path> train_path, dev_path, test_path;
  /// When no dev/test files are given, the training file is split.
  std::array<double, 3> split_fractions{1.0, 0.0, 0.0};
  std::uint64_t split_seed = 0;

  std::optional<SynthConfig> synthetic;
  /// With synthetic data: number of leading examples used for training,
  /// followed by synth_dev dev and synth_test test examples.
  std::size_t synth_train = 1500;
  std::size_t synth_dev = 1000;
  std::size_t synth_test = 5000;

  std::filesystem::path out_dir = "spen_out";
  /// Raw key/value pairs as read, for provenance copies.
  std::map<std::string, std::string> resolved;
};

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Writes every effective setting as "key = value".
void write_config(std::ostream& out, const ExperimentConfig& cfg);

/// Applies one "key = value" assignment; throws Error naming the key on failure.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Throws Error on out-of-range settings.
void validate_config(const ExperimentConfig& cfg);

struct ExperimentData {
  Dataset train, dev, test;
};

/// Loads files (or generates synthetic data) and splits as configured.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// Architecture adjusted to the dataset dimensions and the model kind.
Architecture resolve_architecture(const ExperimentConfig& cfg, const Dataset& train);

struct TrainOutcome {
  Model model;
  TrainingReport report;
};

TrainOutcome run_training(const ExperimentConfig& cfg, const ExperimentData& data);

/// Relaxed per-label outputs of any model kind.
std::vector<Vector> predict_relaxed(const Model& model, const Dataset& data, const InferenceConfig& icfg,
                                    std::size_t workers, std::vector<Prediction>* traces = nullptr);

/// True for models evaluated with the local classifier only (no global energy).
bool is_feed_forward(const Model& model);

struct EvalOptions {
  std::optional<double> threshold;  // bypasses tuning when set
  const Dataset* tuning = nullptr;  // held-out data for threshold tuning; the eval data otherwise
  bool search_errors = false;
  std::size_t workers = 1;
};

EvalReport evaluate_model(const Model& model, const Dataset& data, const InferenceConfig& icfg,
                          const EvalOptions& options);

struct SpeedRow {
  double setting;        // converged fraction or tolerance multiplier
  double mean_iterations;  // mean over batches of the shared iteration count
  double macro_f1;
};

struct SpeedAnalysis {
  std::vector<SpeedRow> by_fraction;
  std::vector<SpeedRow> by_tolerance;
  /// histogram[k] = number of examples that converged after exactly k steps
  /// (unconverged examples are counted at max_iters).
  std::vector<std::size_t> histogram;
  double threshold = 0.5;
};

/// Sweeps the batch-converged fraction and a tolerance multiplier for a SPEN
/// model, predicting in batches of batch_size examples.
SpeedAnalysis speed_analysis(const SpenParams& model, const Dataset& data, const InferenceConfig& icfg,
                             std::span<const double> fractions, std::span<const double> tolerance_multipliers,
                             double threshold, std::size_t batch_size, std::size_t workers = 1);

void write_speed_csv(const std::filesystem::path& dir, const SpeedAnalysis& analysis);

/// The measurement matrix of a label-only or conditioned global energy
/// (columns restricted to the label block for the conditioned kind).
Matrix measurement_matrix(const SpenParams& model);

/// Each row divided by its largest absolute value.
Matrix normalized_abs(const Matrix& m);

void write_csv(std::ostream& out, const Matrix& m);

/// Block-alignment statistic of a measurement matrix: for each block of
/// consecutive labels, the best hidden unit's share of absolute weight that
/// falls inside the block, averaged over blocks.
double block_alignment_score(const Matrix& measurements, std::size_t block_size);

/// Alignment scores of `permutations` random column permutations.
std::vector<double> block_alignment_null(const Matrix& measurements, std::size_t block_size, std::size_t permutations,
                                         std::uint64_t seed);

}  // namespace spen
