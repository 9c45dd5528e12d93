#include "spen/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "spen/random.hpp"

namespace spen {

namespace {

DataError line_error(std::size_t line, const std::string& what) {
  return DataError("line " + std::to_string(line) + ": " + what);
}

template <typename T>
T parse_number(std::string_view token, std::size_t line, const char* what) {
  T value{};
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw line_error(line, std::string("cannot parse ") + what + " '" + std::string(token) + "'");
  }
  return value;
}

std::vector<std::string_view> split_whitespace(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t' && s[i] != '\r') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

std::size_t parse_header_field(std::string_view token, std::string_view key, std::size_t line) {
  if (token.substr(0, key.size()) != key) {
    throw line_error(line, "header expects '" + std::string(key) + "<n>', got '" + std::string(token) + "'");
  }
  return parse_number<std::size_t>(token.substr(key.size()), line, "header dimension");
}

void write_double(std::ostream& out, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.write(buf, ptr - buf);
}

}  // namespace

double Dataset::positive_rate() const {
  if (examples.empty() || num_labels == 0) return 0.0;
  std::size_t positives = 0;
  for (const auto& ex : examples) positives += std::count(ex.labels.begin(), ex.labels.end(), 1);
  return static_cast<double>(positives) / static_cast<double>(examples.size() * num_labels);
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.features.size() != num_features || ex.labels.size() != num_labels) {
      throw DataError("example " + std::to_string(i) + " has " + std::to_string(ex.features.size()) +
                      " features and " + std::to_string(ex.labels.size()) + " labels, dataset declares d=" +
                      std::to_string(num_features) + " L=" + std::to_string(num_labels));
    }
    if (!all_finite(ex.features)) throw DataError("example " + std::to_string(i) + " has non-finite features");
    for (auto v : ex.labels) {
      if (v > 1) throw DataError("example " + std::to_string(i) + " has a non-binary label");
    }
  }
}

std::vector<Vector> Dataset::feature_vectors() const {
  std::vector<Vector> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.features);
  return out;
}

std::vector<BinaryLabels> Dataset::label_vectors() const {
  std::vector<BinaryLabels> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.labels);
  return out;
}

Dataset read_multilabel(std::istream& in, std::string name) {
  Dataset ds;
  ds.name = std::move(name);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!have_header) {
      const auto tokens = split_whitespace(line);
      if (tokens.size() != 3 || tokens[0] != "#ml") throw line_error(lineno, "expected header '#ml d=<d> L=<L>'");
      ds.num_features = parse_header_field(tokens[1], "d=", lineno);
      ds.num_labels = parse_header_field(tokens[2], "L=", lineno);
      have_header = true;
      continue;
    }
    if (line.empty()) continue;
    LabeledExample ex{Vector(ds.num_features, 0.0), BinaryLabels(ds.num_labels, 0)};
    auto tokens = split_whitespace(line);
    std::size_t first_feature = 0;
    const bool has_labels = line.front() != ' ' && line.front() != '\t' && !tokens.empty() &&
                            tokens[0].find(':') == std::string_view::npos;
    if (has_labels) {
      first_feature = 1;
      std::string_view labels = tokens[0];
      while (!labels.empty()) {
        const auto comma = labels.find(',');
        const auto tok = labels.substr(0, comma);
        const auto idx = parse_number<std::size_t>(tok, lineno, "label index");
        if (idx >= ds.num_labels) {
          throw line_error(lineno, "label index " + std::to_string(idx) + " out of range for L=" +
                                       std::to_string(ds.num_labels));
        }
        ex.labels[idx] = 1;
        labels = comma == std::string_view::npos ? std::string_view{} : labels.substr(comma + 1);
      }
    }
    for (std::size_t t = first_feature; t < tokens.size(); ++t) {
      const auto colon = tokens[t].find(':');
      if (colon == std::string_view::npos) {
        throw line_error(lineno, "feature token '" + std::string(tokens[t]) + "' is not <idx>:<val>");
      }
      const auto idx = parse_number<std::size_t>(tokens[t].substr(0, colon), lineno, "feature index");
      if (idx >= ds.num_features) {
        throw line_error(lineno, "feature index " + std::to_string(idx) + " out of range for d=" +
                                     std::to_string(ds.num_features));
      }
      const auto val = parse_number<double>(tokens[t].substr(colon + 1), lineno, "feature value");
      if (!std::isfinite(val)) throw line_error(lineno, "feature value is not finite");
      ex.features[idx] = val;
    }
    ds.examples.push_back(std::move(ex));
  }
  if (!have_header) throw DataError("missing '#ml d=<d> L=<L>' header");
  return ds;
}

Dataset load_multilabel(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  return read_multilabel(in, path.stem().string());
}

void write_multilabel(std::ostream& out, const Dataset& data) {
  data.validate();
  out << "#ml d=" << data.num_features << " L=" << data.num_labels << '\n';
  for (const auto& ex : data.examples) {
    bool first = true;
    bool wrote = false;
    for (std::size_t j = 0; j < ex.labels.size(); ++j) {
      if (!ex.labels[j]) continue;
      if (!first) out << ',';
      out << j;
      first = false;
      wrote = true;
    }
    for (std::size_t k = 0; k < ex.features.size(); ++k) {
      const double v = ex.features[k];
      // Skip only +0.0 so that -0.0 survives the round trip.
      if (v == 0.0 && !std::signbit(v)) continue;
      out << ' ' << k << ':';
      write_double(out, v);
      wrote = true;
    }
    if (!wrote) out << ' ';
    out << '\n';
  }
}

void save_multilabel(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file " + path.string());
  write_multilabel(out, data);
}

BinaryLabels block_argmax_labels(std::span<const double> z, std::size_t block_size) {
  if (block_size == 0 || z.size() % block_size != 0) {
    throw DimensionError("number of labels must be divisible by the block size");
  }
  BinaryLabels y(z.size(), 0);
  for (std::size_t start = 0; start < z.size(); start += block_size) {
    const auto block = z.subspan(start, block_size);
    y[start + static_cast<std::size_t>(std::max_element(block.begin(), block.end()) - block.begin())] = 1;
  }
  return y;
}

Dataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.block_size == 0 || cfg.num_labels % cfg.block_size != 0) {
    throw DimensionError("synthetic data: n_labels must be divisible by block_size");
  }
  Rng rng(cfg.seed);
  Matrix weights(cfg.num_features, cfg.num_labels);
  for (double& v : weights.values()) v = rng.normal();

  Dataset ds;
  ds.name = "synthetic";
  ds.num_features = cfg.num_features;
  ds.num_labels = cfg.num_labels;
  ds.examples.reserve(cfg.n_examples);
  for (std::size_t n = 0; n < cfg.n_examples; ++n) {
    Vector x(cfg.num_features);
    for (double& v : x) v = rng.normal();
    const Vector z = matvec_transposed(weights, x);
    ds.examples.push_back({std::move(x), block_argmax_labels(z, cfg.block_size)});
  }
  return ds;
}

Dataset head(const Dataset& data, std::size_t n) {
  Dataset out{data.name, data.num_features, data.num_labels, {}};
  n = std::min(n, data.size());
  out.examples.assign(data.examples.begin(), data.examples.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out{data.name, data.num_features, data.num_labels, {}};
  out.examples.reserve(indices.size());
  for (auto i : indices) {
    if (i >= data.size()) throw DimensionError("subset index out of range");
    out.examples.push_back(data.examples[i]);
  }
  return out;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

Splits split(const Dataset& data, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions) {
    if (f < 0.0) throw Error("split fractions must be non-negative");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) throw Error("split fractions must sum to 1");
  const std::size_t n = data.size();
  auto count = [n](double f) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)); };
  const std::size_t n_dev = count(fractions[1]);
  const std::size_t n_test = count(fractions[2]);
  const std::size_t n_train = n - n_dev - n_test;
  const std::array<std::size_t, 3> sizes{n_train, n_dev, n_test};
  for (std::size_t k = 0; k < 3; ++k) {
    if (fractions[k] > 0.0 && sizes[k] == 0) {
      throw DataError("split would leave part " + std::to_string(k) + " empty (" + std::to_string(n) + " examples)");
    }
  }
  auto idx = shuffled_indices(n, seed);
  std::sort(idx.begin(), idx.begin() + n_train);
  std::sort(idx.begin() + n_train, idx.begin() + n_train + n_dev);
  std::sort(idx.begin() + n_train + n_dev, idx.end());
  Splits s;
  const std::span<const std::size_t> all(idx);
  s.train = subset(data, all.subspan(0, n_train));
  s.dev = subset(data, all.subspan(n_train, n_dev));
  s.test = subset(data, all.subspan(n_train + n_dev, n_test));
  return s;
}

std::pair<Dataset, Dataset> cross_validation_fold(const Dataset& data, std::size_t folds, std::size_t fold,
                                                  std::uint64_t seed) {
  if (folds < 2 || fold >= folds) throw Error("invalid cross-validation fold");
  const auto idx = shuffled_indices(data.size(), seed);
  std::vector<std::size_t> train, held;
  for (std::size_t i = 0; i < idx.size(); ++i) (i % folds == fold ? held : train).push_back(idx[i]);
  return {subset(data, train), subset(data, held)};
}

Dataset permute_labels(const Dataset& data, std::span<const std::size_t> perm) {
  require_same_length(data.num_labels, perm.size(), "label permutation");
  Dataset out = data;
  for (auto& ex : out.examples) {
    BinaryLabels y(perm.size());
    for (std::size_t j = 0; j < perm.size(); ++j) y[j] = ex.labels[perm[j]];
    ex.labels = std::move(y);
  }
  return out;
}

}  // namespace spen
