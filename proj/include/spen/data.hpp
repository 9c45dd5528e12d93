#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "spen/compute.hpp"
#include "spen/inference.hpp"

namespace spen {

struct LabeledExample {
  Vector features;
  BinaryLabels labels;
};

struct Dataset {
  std::string name;
  std::size_t num_features = 0;
  std::size_t num_labels = 0;
  std::vector<LabeledExample> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  /// Fraction of positive entries over all examples and labels.
  double positive_rate() const;
  /// Throws DataError when an example disagrees with the declared dimensions.
  void validate() const;

  std::vector<Vector> feature_vectors() const;
  std::vector<BinaryLabels> label_vectors() const;
};

/// Parses the canonical text format:
///
///   #ml d=<d> L=<L>
///   <comma-separated 0-based positive labels or empty> <idx>:<val> <idx>:<val> ...
///
/// Feature indices are 0-based and omitted features are zero.
Dataset read_multilabel(std::istream& in, std::string name = "");
Dataset load_multilabel(const std::filesystem::path& path);

/// Writes the canonical format. Values use round-trip precision, so
/// read_multilabel(write_multilabel(ds)) reproduces ds bit for bit.
void write_multilabel(std::ostream& out, const Dataset& data);
void save_multilabel(const std::filesystem::path& path, const Dataset& data);

struct SynthConfig {
  std::size_t n_examples = 1000;
  std::size_t num_features = 64;
  std::size_t num_labels = 16;
  std::size_t block_size = 4;
  std::uint64_t seed = 0;
};

/// Block mutual-exclusivity task: X and the weight matrix W are standard
/// normal, Z = X W, and within each consecutive block of labels only the
/// row-wise argmax is on. The weights are drawn first and examples are drawn
/// row by row, so a larger n_examples with the same seed extends a smaller
/// draw without changing it.
Dataset generate_synthetic(const SynthConfig& cfg);

/// Argmax-per-block labels for one row of scores.
BinaryLabels block_argmax_labels(std::span<const double> z, std::size_t block_size);

struct Splits {
  Dataset train, dev, test;
};

/// Disjoint, exhaustive, seed-deterministic partition. Sizes are
/// floor(n * fraction) for dev and test, the remainder goes to train.
/// Each part keeps the original example order.
Splits split(const Dataset& data, std::array<double, 3> fractions, std::uint64_t seed);

/// The first n examples (or all of them when n exceeds the size).
Dataset head(const Dataset& data, std::size_t n);

/// Examples at the given indices, in order.
Dataset subset(const Dataset& data, std::span<const std::size_t> indices);

/// (train, held_out) for fold `fold` of `folds` after a seeded shuffle.
std::pair<Dataset, Dataset> cross_validation_fold(const Dataset& data, std::size_t folds, std::size_t fold,
                                                  std::uint64_t seed);

/// Applies a label permutation: new label j is old label perm[j].
Dataset permute_labels(const Dataset& data, std::span<const std::size_t> perm);

}  // namespace spen
