#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "spen/energy.hpp"
#include "spen/inference.hpp"

namespace spen {

struct EvalReport {
  double macro_f1 = 0.0;
  double hamming_error = 0.0;
  double threshold_used = 0.5;
  std::optional<double> search_error_rate;
  std::size_t examples = 0;
};

/// Flat "key=value" lines.
void write_report(std::ostream& out, const EvalReport& report);

/// 2|pred & gold| / (|pred| + |gold|); 1 when both are empty.
double example_f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold);

/// Unweighted mean of example_f1.
double macro_f1(std::span<const BinaryLabels> preds, std::span<const BinaryLabels> golds);

/// Percentage of disagreeing labels: 100 * mismatches / (examples * L).
double hamming_error(std::span<const BinaryLabels> preds, std::span<const BinaryLabels> golds);

enum class TuneMetric { MacroF1, Hamming };

struct ThresholdChoice {
  double threshold;
  double metric;  // macro F1 in [0,1] or hamming percentage
};

std::vector<double> default_threshold_grid();

/// Best grid threshold on held-out data; ties go to the value nearest 0.5.
ThresholdChoice tune_threshold(std::span<const Vector> relaxed, std::span<const BinaryLabels> golds,
                               std::span<const double> grid, TuneMetric metric = TuneMetric::MacroF1);

/// Fraction of examples whose predicted energy exceeds the energy of the gold
/// labels by more than 1e-9.
double count_search_errors(const SpenParams& p, std::span<const Vector> features, std::span<const BinaryLabels> golds,
                           std::span<const Vector> predictions);

}  // namespace spen
