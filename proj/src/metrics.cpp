#include "spen/metrics.hpp"

#include <cmath>
#include <ostream>

namespace spen {

void write_report(std::ostream& out, const EvalReport& report) {
  out << "examples=" << report.examples << '\n';
  out << "macro_f1=" << report.macro_f1 << '\n';
  out << "hamming_error=" << report.hamming_error << '\n';
  out << "threshold_used=" << report.threshold_used << '\n';
  if (report.search_error_rate) out << "search_error_rate=" << *report.search_error_rate << '\n';
}

double example_f1(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold) {
  require_same_length(gold.size(), pred.size(), "example_f1");
  std::size_t both = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    np += pred[i];
    ng += gold[i];
    both += pred[i] & gold[i];
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

double macro_f1(std::span<const BinaryLabels> preds, std::span<const BinaryLabels> golds) {
  require_same_length(golds.size(), preds.size(), "macro_f1 example count");
  if (preds.empty()) throw Error("macro_f1 of an empty sequence");
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += example_f1(preds[i], golds[i]);
  return sum / static_cast<double>(preds.size());
}

double hamming_error(std::span<const BinaryLabels> preds, std::span<const BinaryLabels> golds) {
  require_same_length(golds.size(), preds.size(), "hamming_error example count");
  if (preds.empty()) throw Error("hamming_error of an empty sequence");
  std::size_t wrong = 0, total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require_same_length(golds[i].size(), preds[i].size(), "hamming_error labels");
    for (std::size_t j = 0; j < preds[i].size(); ++j) wrong += preds[i][j] != golds[i][j];
    total += preds[i].size();
  }
  return total ? 100.0 * static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int k = 1; k <= 19; ++k) grid.push_back(k / 20.0);
  return grid;
}

ThresholdChoice tune_threshold(std::span<const Vector> relaxed, std::span<const BinaryLabels> golds,
                               std::span<const double> grid, TuneMetric metric) {
  if (grid.empty()) throw Error("tune_threshold needs a nonempty grid");
  std::vector<BinaryLabels> rounded(relaxed.size());
  std::optional<ThresholdChoice> best;
  for (double t : grid) {
    for (std::size_t i = 0; i < relaxed.size(); ++i) rounded[i] = round_prediction(relaxed[i], t);
    const double m = metric == TuneMetric::MacroF1 ? macro_f1(rounded, golds) : hamming_error(rounded, golds);
    const double score = metric == TuneMetric::MacroF1 ? m : -m;
    if (!best) {
      best = ThresholdChoice{t, m};
      continue;
    }
    const double best_score = metric == TuneMetric::MacroF1 ? best->metric : -best->metric;
    const bool tie = std::abs(score - best_score) <= 1e-12;
    if ((!tie && score > best_score) || (tie && std::abs(t - 0.5) < std::abs(best->threshold - 0.5))) {
      best = ThresholdChoice{t, m};
    }
  }
  return *best;
}

double count_search_errors(const SpenParams& p, std::span<const Vector> features, std::span<const BinaryLabels> golds,
                           std::span<const Vector> predictions) {
  require_same_length(features.size(), golds.size(), "search errors gold count");
  require_same_length(features.size(), predictions.size(), "search errors prediction count");
  if (features.empty()) return 0.0;
  std::size_t errors = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double e_pred = total_energy(p, features[i], predictions[i]);
    const double e_gold = total_energy(p, features[i], to_vector(golds[i]));
    errors += e_pred > e_gold + 1e-9;
  }
  return static_cast<double>(errors) / static_cast<double>(features.size());
}

}  // namespace spen
