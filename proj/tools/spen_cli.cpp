// spen: train, evaluate and inspect structured prediction energy networks.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "spen/experiment.hpp"

namespace fs = std::filesystem;
using namespace spen;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::string model;
  std::string data;
  std::string dev;
  std::string out;
  std::optional<double> threshold;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
  bool search_errors = false;
  std::vector<std::string> overrides;

  // synth
  std::size_t n = 1000;
  std::size_t num_features = 64;
  std::size_t num_labels = 16;
  std::size_t block_size = 4;

  // speed-analysis
  std::vector<double> fractions{0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0};
  std::vector<double> tolerances{0.1, 1.0, 10.0, 100.0, 1000.0};
  std::size_t batch_size = 128;

  // convert
  std::string input;
  std::size_t feature_base = 1;
  std::size_t label_base = 0;
  std::size_t declared_features = 0;
  std::size_t declared_labels = 0;
};

ExperimentConfig config_or_default(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  validate_config(cfg);
  if (o.seed) {
    cfg.init_seed = *o.seed;
    cfg.train.seed = *o.seed;
    cfg.resolved["seed"] = std::to_string(*o.seed);
  }
  cfg.train.workers = std::max(cfg.train.workers, o.workers);
  if (!o.out.empty()) cfg.out_dir = o.out;
  return cfg;
}

// Each command names its own copy so that running several commands into one
// directory does not overwrite the training record.
void write_resolved(const fs::path& dir, const ExperimentConfig& cfg, const std::string& name = "resolved_config.txt") {
  fs::create_directories(dir);
  std::ofstream out(dir / name);
  if (!out) throw DataError("cannot write " + (dir / name).string());
  write_config(out, cfg);
}

// Output files that are not inside a directory get a sibling "<file>.config.txt".
void write_resolved_beside(const fs::path& file, const ExperimentConfig& cfg) {
  std::ofstream out(file.string() + ".config.txt");
  if (!out) throw DataError("cannot write " + file.string() + ".config.txt");
  write_config(out, cfg);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

int cmd_train(const Options& o) {
  ExperimentConfig cfg = config_or_default(o);
  const ExperimentData data = load_experiment_data(cfg);
  std::cerr << "train: " << data.train.size() << " examples, d=" << data.train.num_features
            << " L=" << data.train.num_labels << ", dev " << data.dev.size() << ", test " << data.test.size() << '\n';
  const TrainOutcome outcome = run_training(cfg, data);
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  save_model(dir / "model.spen", outcome.model);
  {
    auto out = open_out(dir / "training_report.jsonl");
    write_training_report(out, outcome.report);
  }
  for (const auto* split : {&data.dev, &data.test}) {
    if (split->empty()) continue;
    EvalOptions eo;
    eo.workers = cfg.train.workers;
    eo.tuning = data.dev.empty() ? nullptr : &data.dev;
    const EvalReport report = evaluate_model(outcome.model, *split, cfg.inference, eo);
    const std::string name = split == &data.dev ? "dev" : "test";
    auto out = open_out(dir / ("eval_" + name + ".txt"));
    write_report(out, report);
    std::cout << name << " macro_f1=" << std::fixed << std::setprecision(2) << 100.0 * report.macro_f1
              << " hamming=" << report.hamming_error << " threshold=" << report.threshold_used << '\n';
  }
  write_resolved(dir, cfg);
  std::cout << "model written to " << (dir / "model.spen").string() << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  ExperimentConfig cfg = config_or_default(o);
  const Model model = load_model(o.model);
  const Dataset data = load_multilabel(o.data);
  std::optional<Dataset> dev;
  if (!o.dev.empty()) dev = load_multilabel(o.dev);
  EvalOptions eo;
  eo.threshold = o.threshold;
  eo.tuning = dev ? &*dev : nullptr;
  eo.search_errors = o.search_errors;
  eo.workers = o.workers;
  const EvalReport report = evaluate_model(model, data, cfg.inference, eo);
  write_report(std::cout, report);
  if (!o.out.empty()) {
    const fs::path dir = o.out;
    fs::create_directories(dir);
    auto out = open_out(dir / "eval_report.txt");
    write_report(out, report);
    write_resolved(dir, cfg, "eval_config.txt");
  }
  return 0;
}

int cmd_predict(const Options& o) {
  ExperimentConfig cfg = config_or_default(o);
  const Model model = load_model(o.model);
  Dataset data = load_multilabel(o.data);
  std::vector<Prediction> traces;
  const bool spen = std::holds_alternative<SpenParams>(model) && !is_feed_forward(model);
  const auto relaxed = predict_relaxed(model, data, cfg.inference, o.workers, spen ? &traces : nullptr);
  const double threshold = o.threshold.value_or(0.5);
  for (std::size_t i = 0; i < data.size(); ++i) data.examples[i].labels = round_prediction(relaxed[i], threshold);
  data.name += "-predicted";
  const fs::path out_path = o.out.empty() ? fs::path("predictions.ml") : fs::path(o.out);
  save_multilabel(out_path, data);
  {
    auto out = open_out(out_path.string() + ".relaxed.csv");
    out << std::setprecision(17);
    for (const auto& r : relaxed) {
      for (std::size_t j = 0; j < r.size(); ++j) out << (j ? "," : "") << r[j];
      out << '\n';
    }
  }
  if (spen) {
    auto out = open_out(out_path.string() + ".traces.jsonl");
    write_traces(out, traces);
  }
  write_resolved_beside(out_path, cfg);
  std::cout << "predictions for " << data.size() << " examples written to " << out_path.string() << '\n';
  return 0;
}

int cmd_synth(const Options& o) {
  SynthConfig sc;
  sc.n_examples = o.n;
  sc.num_features = o.num_features;
  sc.num_labels = o.num_labels;
  sc.block_size = o.block_size;
  sc.seed = o.seed.value_or(0);
  const Dataset data = generate_synthetic(sc);
  const fs::path out_path = o.out.empty() ? fs::path("synthetic.ml") : fs::path(o.out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  save_multilabel(out_path, data);
  ExperimentConfig cfg;
  cfg.synthetic = sc;
  cfg.synth_train = sc.n_examples;
  cfg.synth_dev = 0;
  cfg.synth_test = 0;
  write_resolved_beside(out_path, cfg);
  std::cout << "wrote " << data.size() << " examples (d=" << data.num_features << ", L=" << data.num_labels
            << ", positive rate " << data.positive_rate() << ") to " << out_path.string() << '\n';
  return 0;
}

int cmd_inspect(const Options& o) {
  const Model model = load_model(o.model);
  const auto* p = std::get_if<SpenParams>(&model);
  if (!p) throw Error("model has no measurement matrix (deep mean-field model)");
  const Matrix c1 = measurement_matrix(*p);
  const fs::path dir = o.out.empty() ? fs::path("measurements") : fs::path(o.out);
  fs::create_directories(dir);
  {
    auto out = open_out(dir / "measurements.csv");
    write_csv(out, c1);
  }
  {
    auto out = open_out(dir / "measurements_normalized_abs.csv");
    write_csv(out, normalized_abs(c1));
  }
  ExperimentConfig cfg = config_or_default(o);
  write_resolved(dir, cfg, "inspect_config.txt");
  std::cout << "measurement matrix " << c1.shape_string() << " written to " << dir.string() << '\n';
  if (c1.cols() % o.block_size == 0) {
    const double score = block_alignment_score(c1, o.block_size);
    auto null = block_alignment_null(c1, o.block_size, 1000, o.seed.value_or(0));
    std::sort(null.begin(), null.end());
    std::cout << "block alignment (block size " << o.block_size << "): " << score << ", null 99th percentile "
              << null[989] << '\n';
  }
  return 0;
}

int cmd_speed(const Options& o) {
  ExperimentConfig cfg = config_or_default(o);
  const Model model = load_model(o.model);
  const auto* p = std::get_if<SpenParams>(&model);
  if (!p || p->global_kind() == GlobalKind::None) throw Error("speed analysis needs a SPEN model with a global energy");
  const Dataset data = load_multilabel(o.data);
  double threshold = o.threshold.value_or(0.5);
  if (!o.threshold && !o.dev.empty()) {
    const Dataset dev = load_multilabel(o.dev);
    const auto relaxed = predict_relaxed(model, dev, cfg.inference, o.workers);
    const auto golds = dev.label_vectors();
    const auto grid = default_threshold_grid();
    threshold = tune_threshold(relaxed, golds, grid).threshold;
  }
  const SpeedAnalysis analysis =
      speed_analysis(*p, data, cfg.inference, o.fractions, o.tolerances, threshold, o.batch_size, o.workers);
  const fs::path dir = o.out.empty() ? fs::path("speed") : fs::path(o.out);
  write_speed_csv(dir, analysis);
  write_resolved(dir, cfg, "speed_config.txt");
  std::cout << "fraction,mean_iterations,macro_f1\n";
  for (const auto& r : analysis.by_fraction) std::cout << r.setting << ',' << r.mean_iterations << ',' << r.macro_f1 << '\n';
  std::cout << "tolerance_multiplier,mean_iterations,macro_f1\n";
  for (const auto& r : analysis.by_tolerance) std::cout << r.setting << ',' << r.mean_iterations << ',' << r.macro_f1 << '\n';
  return 0;
}

// Reads "<labels> <idx>:<val> ..." with configurable index bases and writes
// the canonical format.
int cmd_convert(const Options& o) {
  std::ifstream in(o.input);
  if (!in) throw DataError("cannot open " + o.input);
  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::pair<std::size_t, double>>>> rows;
  std::size_t max_feature = 0, max_label = 0;
  bool any_feature = false, any_label = false;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) { throw DataError(o.input + " line " + std::to_string(lineno) + ": " + what); };
  auto to_index = [&](const std::string& s, std::size_t base) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (const std::exception&) {
      fail("bad index '" + s + "'");
    }
    if (pos != s.size() || v < static_cast<long long>(base)) fail("bad index '" + s + "'");
    return static_cast<std::size_t>(v) - base;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tok;
    auto& row = rows.emplace_back();
    bool first = true;
    while (ls >> tok) {
      const auto colon = tok.find(':');
      if (first && colon == std::string::npos && line[0] != ' ') {
        std::stringstream ts(tok);
        std::string lab;
        while (std::getline(ts, lab, ',')) {
          if (lab.empty()) continue;
          const auto j = to_index(lab, o.label_base);
          row.first.push_back(j);
          max_label = std::max(max_label, j);
          any_label = true;
        }
      } else {
        if (colon == std::string::npos) fail("expected idx:val, got '" + tok + "'");
        const auto j = to_index(tok.substr(0, colon), o.feature_base);
        double v = 0.0;
        try {
          v = std::stod(tok.substr(colon + 1));
        } catch (const std::exception&) {
          fail("bad value in '" + tok + "'");
        }
        row.second.emplace_back(j, v);
        max_feature = std::max(max_feature, j);
        any_feature = true;
      }
      first = false;
    }
  }
  Dataset out;
  out.name = fs::path(o.input).stem().string();
  out.num_features = o.declared_features ? o.declared_features : (any_feature ? max_feature + 1 : 0);
  out.num_labels = o.declared_labels ? o.declared_labels : (any_label ? max_label + 1 : 0);
  for (const auto& [labels, feats] : rows) {
    LabeledExample ex{Vector(out.num_features, 0.0), BinaryLabels(out.num_labels, 0)};
    for (auto j : labels) {
      if (j >= out.num_labels) throw DataError("label index " + std::to_string(j) + " exceeds L=" + std::to_string(out.num_labels));
      ex.labels[j] = 1;
    }
    for (auto [j, v] : feats) {
      if (j >= out.num_features) throw DataError("feature index " + std::to_string(j) + " exceeds d=" + std::to_string(out.num_features));
      ex.features[j] = v;
    }
    out.examples.push_back(std::move(ex));
  }
  out.validate();
  const fs::path out_path = o.out.empty() ? fs::path(out.name + ".ml") : fs::path(o.out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  save_multilabel(out_path, out);
  std::cout << "converted " << out.size() << " examples (d=" << out.num_features << ", L=" << out.num_labels
            << ", positive rate " << out.positive_rate() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured prediction energy networks for multi-label classification"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--workers", o.workers, "Worker threads for batch prediction")->check(CLI::PositiveNumber);
    sub->add_option("--seed", o.seed, "Seed override");
    sub->add_option("--out", o.out, "Output file or directory");
    sub->add_option("--set", o.overrides, "Config override key=value (repeatable)");
  };

  auto* train = app.add_subcommand("train", "Train a model described by a config file");
  train->add_option("--config", o.config, "Experiment config")->required();
  add_common(train);

  auto* eval = app.add_subcommand("eval", "Evaluate a model on a data file");
  eval->add_option("--model", o.model, "Model file")->required();
  eval->add_option("--data", o.data, "Data file")->required();
  eval->add_option("--dev", o.dev, "Held-out data for threshold tuning");
  eval->add_option("--config", o.config, "Config supplying inference settings");
  eval->add_option("--threshold", o.threshold, "Fixed rounding threshold (bypasses tuning)")->check(CLI::Range(0.0, 1.0));
  eval->add_flag("--search-errors", o.search_errors, "Count predictions with higher energy than the gold labels");
  add_common(eval);

  auto* predict = app.add_subcommand("predict", "Write predicted label sets");
  predict->add_option("--model", o.model, "Model file")->required();
  predict->add_option("--data", o.data, "Data file")->required();
  predict->add_option("--config", o.config, "Config supplying inference settings");
  predict->add_option("--threshold", o.threshold, "Rounding threshold (default 0.5)")->check(CLI::Range(0.0, 1.0));
  add_common(predict);

  auto* synth = app.add_subcommand("synth", "Generate the block-exclusivity synthetic task");
  synth->add_option("--n", o.n, "Number of examples");
  synth->add_option("--num-features", o.num_features, "Input dimension");
  synth->add_option("--num-labels", o.num_labels, "Number of labels");
  synth->add_option("--block-size", o.block_size, "Labels per block");
  add_common(synth);

  auto* inspect = app.add_subcommand("inspect-measurements", "Dump the measurement matrix as CSV");
  inspect->add_option("--model", o.model, "Model file")->required();
  inspect->add_option("--block-size", o.block_size, "Block size for the alignment summary");
  add_common(inspect);

  auto* speed = app.add_subcommand("speed-analysis", "Iterations versus accuracy sweeps");
  speed->add_option("--model", o.model, "Model file")->required();
  speed->add_option("--data", o.data, "Data file")->required();
  speed->add_option("--dev", o.dev, "Held-out data for threshold tuning");
  speed->add_option("--config", o.config, "Config supplying inference settings");
  speed->add_option("--threshold", o.threshold, "Rounding threshold")->check(CLI::Range(0.0, 1.0));
  speed->add_option("--fractions", o.fractions, "Batch-converged fractions to sweep")->delimiter(',');
  speed->add_option("--tolerances", o.tolerances, "Tolerance multipliers to sweep")->delimiter(',');
  speed->add_option("--batch-size", o.batch_size, "Prediction batch size")->check(CLI::PositiveNumber);
  add_common(speed);

  auto* convert = app.add_subcommand("convert", "Convert a sparse 'labels idx:val' file to the canonical format");
  convert->add_option("--in", o.input, "Input file")->required();
  convert->add_option("--feature-base", o.feature_base, "Index of the first feature in the input (0 or 1)");
  convert->add_option("--label-base", o.label_base, "Index of the first label in the input (0 or 1)");
  convert->add_option("--num-features", o.declared_features, "Input dimension (default: largest index + 1)");
  convert->add_option("--num-labels", o.declared_labels, "Label count (default: largest index + 1)");
  add_common(convert);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*predict) return cmd_predict(o);
    if (*synth) return cmd_synth(o);
    if (*inspect) return cmd_inspect(o);
    if (*speed) return cmd_speed(o);
    if (*convert) return cmd_convert(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
