#include "spen/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "spen/parallel.hpp"
#include "spen/random.hpp"

namespace spen {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, std::string_view expected) {
  throw Error("config key '" + key + "': expected " + std::string(expected) + ", got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc{} || ptr != end || !std::isfinite(v)) bad_value(key, value, "a finite number");
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc{} || ptr != end) bad_value(key, value, "a non-negative integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "true or false");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class Fn>
auto rethrow_as_config(const std::string& key, const std::string& value, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw Error("config key '" + key + "': invalid value '" + value + "' (" + e.what() + ")");
  }
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

Dataset synthetic_slice(const Dataset& all, std::size_t begin, std::size_t count, std::string name) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  Dataset d = subset(all, idx);
  d.name = std::move(name);
  return d;
}

void require_file(const std::optional<std::filesystem::path>& p, const char* key) {
  if (p && !std::filesystem::exists(*p)) throw DataError(std::string("config key '") + key + "': file not found: " + p->string());
}

std::vector<Vector> relaxed_from(const std::vector<Prediction>& preds) {
  std::vector<Vector> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.emplace_back(p.labels.values().begin(), p.labels.values().end());
  return out;
}

std::vector<BinaryLabels> round_all(const std::vector<Vector>& relaxed, double threshold) {
  std::vector<BinaryLabels> out;
  out.reserve(relaxed.size());
  for (const auto& r : relaxed) out.push_back(round_prediction(r, threshold));
  return out;
}

void check_model_data(const Model& model, const Dataset& data) {
  const SpenParams& p = std::holds_alternative<SpenParams>(model) ? std::get<SpenParams>(model)
                                                                   : std::get<DmfParams>(model).unary_source;
  if (p.input_dim() != data.num_features || p.num_labels() != data.num_labels) {
    throw DimensionError("model expects d=" + std::to_string(p.input_dim()) + " L=" + std::to_string(p.num_labels()) +
                         " but data '" + data.name + "' has d=" + std::to_string(data.num_features) +
                         " L=" + std::to_string(data.num_labels));
  }
}

}  // namespace

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Linear: return "linear";
    case ModelKind::Mlp: return "mlp";
    case ModelKind::Spen: return "spen";
    case ModelKind::Dmf: return "dmf";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "linear") return ModelKind::Linear;
  if (name == "mlp") return ModelKind::Mlp;
  if (name == "spen") return ModelKind::Spen;
  if (name == "dmf") return ModelKind::Dmf;
  throw Error("unknown model kind '" + std::string(name) + "' (expected linear, mlp, spen or dmf)");
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  auto& a = cfg.arch;
  auto& in = cfg.inference;
  auto& tr = cfg.train;
  auto synth = [&]() -> SynthConfig& {
    if (!cfg.synthetic) cfg.synthetic = SynthConfig{};
    return *cfg.synthetic;
  };
  auto nonlin = [&] { return rethrow_as_config(key, value, [&] { return parse_nonlinearity(value); }); };

  using Setter = std::function<void()>;
  const std::map<std::string, Setter> setters{
      {"kind", [&] { cfg.kind = rethrow_as_config(key, value, [&] { return parse_model_kind(value); }); }},
      {"seed", [&] { cfg.init_seed = parse_uint(key, value); }},
      {"arch.feature_hidden",
       [&] {
         a.feature_hidden.clear();
         if (value == "none") return;
         for (const auto& s : split_list(value)) a.feature_hidden.push_back(parse_uint(key, s));
       }},
      {"arch.feature_activation", [&] { a.feature_activation = nonlin(); }},
      {"arch.feature_output_activation", [&] { a.feature_output_activation = nonlin(); }},
      {"arch.global", [&] { a.global_kind = rethrow_as_config(key, value, [&] { return parse_global_kind(value); }); }},
      {"arch.measurements", [&] { a.measurements = parse_uint(key, value); }},
      {"arch.global_depth", [&] { a.global_depth = static_cast<int>(parse_uint(key, value)); }},
      {"arch.second_hidden", [&] { a.second_hidden = parse_uint(key, value); }},
      {"arch.global_activation", [&] { a.global_activation = nonlin(); }},
      {"infer.step_size", [&] { in.step_size = parse_double(key, value); }},
      {"infer.momentum", [&] { in.momentum = parse_double(key, value); }},
      {"infer.max_iters", [&] { in.max_iters = parse_uint(key, value); }},
      {"infer.rel_obj_tol", [&] { in.rel_obj_tol = parse_double(key, value); }},
      {"infer.abs_iterate_tol", [&] { in.abs_iterate_tol = parse_double(key, value); }},
      {"infer.batch_converged_fraction", [&] { in.batch_converged_fraction = parse_double(key, value); }},
      {"infer.entropy_temperature", [&] { in.entropy_temperature = parse_double(key, value); }},
      {"infer.init",
       [&] {
         if (value == "uniform") in.init = InitKind::Uniform;
         else if (value == "local") in.init = InitKind::FromLocalClassifier;
         else bad_value(key, value, "uniform or local");
       }},
      {"train.surrogate", [&] { tr.surrogate = rethrow_as_config(key, value, [&] { return parse_surrogate(value); }); }},
      {"train.lr", [&] { tr.lr = parse_double(key, value); }},
      {"train.pretrain_lr", [&] { tr.pretrain_lr = parse_double(key, value); }},
      {"train.lr_decay", [&] { tr.lr_decay = parse_double(key, value); }},
      {"train.momentum", [&] { tr.momentum = parse_double(key, value); }},
      {"train.l2_local", [&] { tr.l2_local = parse_double(key, value); }},
      {"train.l2_global", [&] { tr.l2_global = parse_double(key, value); }},
      {"train.l2_biases", [&] { tr.l2_biases = parse_bool(key, value); }},
      {"train.batch_size", [&] { tr.batch_size = parse_uint(key, value); }},
      {"train.pretrain_epochs", [&] { tr.pretrain_epochs = parse_uint(key, value); }},
      {"train.global_epochs", [&] { tr.global_epochs = parse_uint(key, value); }},
      {"train.joint_epochs", [&] { tr.joint_epochs = parse_uint(key, value); }},
      {"train.joint_lr_scale", [&] { tr.joint_lr_scale = parse_double(key, value); }},
      {"train.keep_best", [&] { tr.keep_best = parse_bool(key, value); }},
      {"train.seed", [&] { tr.seed = parse_uint(key, value); }},
      {"train.workers", [&] { tr.workers = parse_uint(key, value); }},
      {"train.restarts", [&] { cfg.global_restarts = parse_uint(key, value); }},
      {"dmf.iters", [&] { cfg.dmf_iters = parse_uint(key, value); }},
      {"dmf.clamp_unaries", [&] { cfg.dmf_clamp_unaries = parse_bool(key, value); }},
      {"data.train", [&] { cfg.train_path = value; }},
      {"data.dev", [&] { cfg.dev_path = value; }},
      {"data.test", [&] { cfg.test_path = value; }},
      {"data.split",
       [&] {
         const auto parts = split_list(value);
         if (parts.size() != 3) bad_value(key, value, "three comma-separated fractions");
         for (std::size_t i = 0; i < 3; ++i) cfg.split_fractions[i] = parse_double(key, parts[i]);
       }},
      {"data.split_seed", [&] { cfg.split_seed = parse_uint(key, value); }},
      {"synth.seed", [&] { synth().seed = parse_uint(key, value); }},
      {"synth.num_features", [&] { synth().num_features = parse_uint(key, value); }},
      {"synth.num_labels", [&] { synth().num_labels = parse_uint(key, value); }},
      {"synth.block_size", [&] { synth().block_size = parse_uint(key, value); }},
      {"synth.train", [&] { synth(); cfg.synth_train = parse_uint(key, value); }},
      {"synth.dev", [&] { synth(); cfg.synth_dev = parse_uint(key, value); }},
      {"synth.test", [&] { synth(); cfg.synth_test = parse_uint(key, value); }},
      {"out.dir", [&] { cfg.out_dir = value; }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw Error("unknown config key '" + key + "'");
  it->second();
  cfg.resolved[key] = value;
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const DataError&) {
      throw;
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_config(cfg);
  return cfg;
}

void validate_config(const ExperimentConfig& cfg) {
  cfg.inference.validate();
  cfg.train.validate();
  if (cfg.global_restarts == 0) throw Error("train.restarts must be at least 1");
  if (cfg.dmf_iters == 0) throw Error("dmf.iters must be at least 1");
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path.string());
  ExperimentConfig cfg = parse_config(in);
  // Relative data paths are taken relative to the config file.
  const auto base = path.parent_path();
  for (auto* p : {&cfg.train_path, &cfg.dev_path, &cfg.test_path}) {
    if (*p && p->value().is_relative() && !base.empty()) *p = base / p->value();
  }
  return cfg;
}

void write_config(std::ostream& out, const ExperimentConfig& cfg) {
  const auto& a = cfg.arch;
  const auto& in = cfg.inference;
  const auto& tr = cfg.train;
  auto kv = [&](std::string_view k, const std::string& v) { out << k << " = " << v << '\n'; };
  kv("kind", std::string(to_string(cfg.kind)));
  kv("seed", std::to_string(cfg.init_seed));
  kv("arch.feature_hidden", a.feature_hidden.empty() ? "none" : join_sizes(a.feature_hidden));
  kv("arch.feature_activation", std::string(to_string(a.feature_activation)));
  kv("arch.feature_output_activation", std::string(to_string(a.feature_output_activation)));
  kv("arch.global", std::string(to_string(a.global_kind)));
  kv("arch.measurements", std::to_string(a.measurements));
  kv("arch.global_depth", std::to_string(a.global_depth));
  kv("arch.second_hidden", std::to_string(a.second_hidden));
  kv("arch.global_activation", std::string(to_string(a.global_activation)));
  kv("infer.step_size", fmt(in.step_size));
  kv("infer.momentum", fmt(in.momentum));
  kv("infer.max_iters", std::to_string(in.max_iters));
  kv("infer.rel_obj_tol", fmt(in.rel_obj_tol));
  kv("infer.abs_iterate_tol", fmt(in.abs_iterate_tol));
  kv("infer.batch_converged_fraction", fmt(in.batch_converged_fraction));
  kv("infer.entropy_temperature", fmt(in.entropy_temperature));
  kv("infer.init", in.init == InitKind::Uniform ? "uniform" : "local");
  kv("train.surrogate", std::string(to_string(tr.surrogate)));
  kv("train.lr", fmt(tr.lr));
  kv("train.pretrain_lr", fmt(tr.pretrain_lr));
  kv("train.lr_decay", fmt(tr.lr_decay));
  kv("train.momentum", fmt(tr.momentum));
  kv("train.l2_local", fmt(tr.l2_local));
  kv("train.l2_global", fmt(tr.l2_global));
  kv("train.l2_biases", tr.l2_biases ? "true" : "false");
  kv("train.batch_size", std::to_string(tr.batch_size));
  kv("train.pretrain_epochs", std::to_string(tr.pretrain_epochs));
  kv("train.global_epochs", std::to_string(tr.global_epochs));
  kv("train.joint_epochs", std::to_string(tr.joint_epochs));
  kv("train.joint_lr_scale", fmt(tr.joint_lr_scale));
  kv("train.keep_best", tr.keep_best ? "true" : "false");
  kv("train.seed", std::to_string(tr.seed));
  kv("train.workers", std::to_string(tr.workers));
  kv("train.restarts", std::to_string(cfg.global_restarts));
  kv("dmf.iters", std::to_string(cfg.dmf_iters));
  kv("dmf.clamp_unaries", cfg.dmf_clamp_unaries ? "true" : "false");
  if (cfg.train_path) kv("data.train", cfg.train_path->string());
  if (cfg.dev_path) kv("data.dev", cfg.dev_path->string());
  if (cfg.test_path) kv("data.test", cfg.test_path->string());
  kv("data.split", fmt(cfg.split_fractions[0]) + "," + fmt(cfg.split_fractions[1]) + "," + fmt(cfg.split_fractions[2]));
  kv("data.split_seed", std::to_string(cfg.split_seed));
  if (cfg.synthetic) {
    kv("synth.seed", std::to_string(cfg.synthetic->seed));
    kv("synth.num_features", std::to_string(cfg.synthetic->num_features));
    kv("synth.num_labels", std::to_string(cfg.synthetic->num_labels));
    kv("synth.block_size", std::to_string(cfg.synthetic->block_size));
    kv("synth.train", std::to_string(cfg.synth_train));
    kv("synth.dev", std::to_string(cfg.synth_dev));
    kv("synth.test", std::to_string(cfg.synth_test));
  }
  kv("out.dir", cfg.out_dir.string());
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  if (cfg.synthetic) {
    SynthConfig sc = *cfg.synthetic;
    // Test and dev come first so the training prefix can grow without
    // changing them.
    sc.n_examples = cfg.synth_test + cfg.synth_dev + cfg.synth_train;
    const Dataset all = generate_synthetic(sc);
    return {synthetic_slice(all, cfg.synth_test + cfg.synth_dev, cfg.synth_train, "synthetic-train"),
            synthetic_slice(all, cfg.synth_test, cfg.synth_dev, "synthetic-dev"),
            synthetic_slice(all, 0, cfg.synth_test, "synthetic-test")};
  }
  if (!cfg.train_path) throw Error("config key 'data.train' is required unless synthetic data is configured");
  require_file(cfg.train_path, "data.train");
  require_file(cfg.dev_path, "data.dev");
  require_file(cfg.test_path, "data.test");
  ExperimentData out;
  const Dataset train = load_multilabel(*cfg.train_path);
  if (cfg.dev_path || cfg.test_path) {
    out.train = train;
    if (cfg.dev_path) out.dev = load_multilabel(*cfg.dev_path);
    if (cfg.test_path) out.test = load_multilabel(*cfg.test_path);
  } else {
    Splits s = split(train, cfg.split_fractions, cfg.split_seed);
    out = {std::move(s.train), std::move(s.dev), std::move(s.test)};
  }
  for (const Dataset* d : {&out.dev, &out.test}) {
    if (!d->empty() && (d->num_features != out.train.num_features || d->num_labels != out.train.num_labels)) {
      throw DataError("dataset '" + d->name + "' has d=" + std::to_string(d->num_features) + " L=" +
                      std::to_string(d->num_labels) + " but the training data has d=" +
                      std::to_string(out.train.num_features) + " L=" + std::to_string(out.train.num_labels));
    }
  }
  return out;
}

Architecture resolve_architecture(const ExperimentConfig& cfg, const Dataset& train) {
  Architecture a = cfg.arch;
  a.input_dim = train.num_features;
  a.num_labels = train.num_labels;
  switch (cfg.kind) {
    case ModelKind::Linear:
      a.feature_hidden.clear();
      a.global_kind = GlobalKind::None;
      break;
    case ModelKind::Mlp:
    case ModelKind::Dmf:
      a.global_kind = GlobalKind::None;
      break;
    case ModelKind::Spen:
      break;
  }
  return a;
}

namespace {

SpenParams train_with_restarts(SpenParams init, const Architecture& arch, const ExperimentConfig& cfg,
                               const ExperimentData& data, const Dataset* dev, TrainingReport& report) {
  const SpenParams pretrained = pretrain_local(std::move(init), data.train, cfg.train, &report, dev);
  TrainConfig global_only = cfg.train;
  global_only.pretrain_epochs = 0;
  global_only.joint_epochs = 0;
  std::optional<SpenParams> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < cfg.global_restarts; ++r) {
    SpenParams start = pretrained;
    if (r > 0) start.global = initialize(arch, cfg.init_seed + 7919 * r).global;
    auto [p, rep] = train_spen(std::move(start), data.train, global_only, cfg.inference, dev);
    for (auto& e : rep.epochs) e.stage = "global.r" + std::to_string(r);
    // Without dev data the final training loss decides.
    double score = rep.epochs.empty() ? 0.0 : -rep.epochs.back().mean_loss;
    if (dev) score = evaluate_spen(p, *dev, cfg.inference, cfg.train.workers).first;
    report.epochs.insert(report.epochs.end(), rep.epochs.begin(), rep.epochs.end());
    if (score > best_score) {
      best_score = score;
      best = std::move(p);
    }
  }
  TrainConfig joint_only = cfg.train;
  joint_only.pretrain_epochs = 0;
  joint_only.global_epochs = 0;
  auto [p, rep] = train_spen(std::move(*best), data.train, joint_only, cfg.inference, dev);
  report.epochs.insert(report.epochs.end(), rep.epochs.begin(), rep.epochs.end());
  return p;
}

}  // namespace

TrainOutcome run_training(const ExperimentConfig& cfg, const ExperimentData& data) {
  const Architecture arch = resolve_architecture(cfg, data.train);
  SpenParams init = initialize(arch, cfg.init_seed);
  const Dataset* dev = data.dev.empty() ? nullptr : &data.dev;
  TrainOutcome out{init, {}};
  switch (cfg.kind) {
    case ModelKind::Linear:
    case ModelKind::Mlp:
      out.model = pretrain_local(std::move(init), data.train, cfg.train, &out.report, dev);
      break;
    case ModelKind::Spen: {
      if (cfg.global_restarts <= 1) {
        auto [p, report] = train_spen(std::move(init), data.train, cfg.train, cfg.inference, dev);
        out.model = std::move(p);
        out.report = std::move(report);
        break;
      }
      out.model = train_with_restarts(std::move(init), arch, cfg, data, dev, out.report);
      break;
    }
    case ModelKind::Dmf: {
      SpenParams unary = pretrain_local(std::move(init), data.train, cfg.train, &out.report, dev);
      DmfParams dmf = make_dmf(std::move(unary), cfg.dmf_iters, cfg.dmf_clamp_unaries);
      out.model = dmf_train(std::move(dmf), data.train, cfg.train, &out.report, dev);
      break;
    }
  }
  return out;
}

bool is_feed_forward(const Model& model) {
  const auto* p = std::get_if<SpenParams>(&model);
  return p && p->global_kind() == GlobalKind::None;
}

std::vector<Vector> predict_relaxed(const Model& model, const Dataset& data, const InferenceConfig& icfg,
                                    std::size_t workers, std::vector<Prediction>* traces) {
  check_model_data(model, data);
  std::vector<Vector> relaxed(data.size());
  if (const auto* dmf = std::get_if<DmfParams>(&model)) {
    parallel_for(data.size(), workers, [&](std::size_t i) {
      const auto r = dmf_forward(*dmf, data.examples[i].features);
      relaxed[i].assign(r.values().begin(), r.values().end());
    });
    return relaxed;
  }
  const auto& p = std::get<SpenParams>(model);
  if (is_feed_forward(model) && !traces) {
    parallel_for(data.size(), workers, [&](std::size_t i) { relaxed[i] = local_marginals(p, data.examples[i].features); });
    return relaxed;
  }
  std::vector<Vector> features(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) { features[i] = feature_forward(p.features, data.examples[i].features); });
  auto preds = predict_batch(p, features, icfg, workers);
  relaxed = relaxed_from(preds);
  if (traces) *traces = std::move(preds);
  return relaxed;
}

EvalReport evaluate_model(const Model& model, const Dataset& data, const InferenceConfig& icfg,
                          const EvalOptions& options) {
  if (data.empty()) throw DataError("cannot evaluate on an empty dataset");
  const auto relaxed = predict_relaxed(model, data, icfg, options.workers);
  const auto golds = data.label_vectors();
  EvalReport report;
  report.examples = data.size();
  if (options.threshold) {
    report.threshold_used = *options.threshold;
  } else if (options.tuning && options.tuning != &data && !options.tuning->empty()) {
    const auto tuning_relaxed = predict_relaxed(model, *options.tuning, icfg, options.workers);
    const auto tuning_golds = options.tuning->label_vectors();
    const auto grid = default_threshold_grid();
    report.threshold_used = tune_threshold(tuning_relaxed, tuning_golds, grid).threshold;
  } else {
    const auto grid = default_threshold_grid();
    report.threshold_used = tune_threshold(relaxed, golds, grid).threshold;
  }
  const auto rounded = round_all(relaxed, report.threshold_used);
  report.macro_f1 = macro_f1(rounded, golds);
  report.hamming_error = hamming_error(rounded, golds);
  if (options.search_errors) {
    const auto* p = std::get_if<SpenParams>(&model);
    if (!p) throw Error("search errors are only defined for SPEN models");
    std::vector<Vector> features(data.size());
    parallel_for(data.size(), options.workers,
                 [&](std::size_t i) { features[i] = feature_forward(p->features, data.examples[i].features); });
    report.search_error_rate = count_search_errors(*p, features, golds, relaxed);
  }
  return report;
}

SpeedAnalysis speed_analysis(const SpenParams& model, const Dataset& data, const InferenceConfig& icfg,
                             std::span<const double> fractions, std::span<const double> tolerance_multipliers,
                             double threshold, std::size_t batch_size, std::size_t workers) {
  check_model_data(model, data);
  if (data.empty()) throw DataError("speed analysis needs a nonempty dataset");
  if (batch_size == 0) throw Error("speed analysis batch size must be positive");
  std::vector<Vector> features(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) { features[i] = feature_forward(model.features, data.examples[i].features); });
  const auto golds = data.label_vectors();

  auto run = [&](const InferenceConfig& cfg, std::vector<Prediction>* all) {
    double iter_sum = 0.0;
    std::size_t batches = 0;
    std::vector<Vector> relaxed;
    relaxed.reserve(data.size());
    for (std::size_t start = 0; start < features.size(); start += batch_size) {
      const std::size_t end = std::min(features.size(), start + batch_size);
      auto preds = predict_batch(model, std::span<const Vector>(features).subspan(start, end - start), cfg, workers);
      std::size_t shared = 0;
      for (const auto& p : preds) shared = std::max(shared, p.trace.iterations_used);
      iter_sum += static_cast<double>(shared);
      ++batches;
      for (auto& p : preds) {
        relaxed.emplace_back(p.labels.values().begin(), p.labels.values().end());
        if (all) all->push_back(std::move(p));
      }
    }
    const auto rounded = round_all(relaxed, threshold);
    return std::pair{iter_sum / static_cast<double>(batches), macro_f1(rounded, golds)};
  };

  SpeedAnalysis out;
  out.threshold = threshold;
  for (double f : fractions) {
    InferenceConfig cfg = icfg;
    cfg.batch_converged_fraction = f;
    std::vector<Prediction> all;
    const auto [iters, f1] = run(cfg, f == 1.0 ? &all : nullptr);
    out.by_fraction.push_back({f, iters, f1});
    if (f == 1.0) {
      out.histogram.assign(icfg.max_iters + 1, 0);
      for (const auto& p : all) ++out.histogram[p.trace.converged ? p.trace.iterations_used : icfg.max_iters];
    }
  }
  if (out.histogram.empty()) {
    InferenceConfig cfg = icfg;
    cfg.batch_converged_fraction = 1.0;
    std::vector<Prediction> all;
    run(cfg, &all);
    out.histogram.assign(icfg.max_iters + 1, 0);
    for (const auto& p : all) ++out.histogram[p.trace.converged ? p.trace.iterations_used : icfg.max_iters];
  }
  for (double m : tolerance_multipliers) {
    if (!(m > 0.0)) throw Error("tolerance multipliers must be positive");
    InferenceConfig cfg = icfg;
    cfg.batch_converged_fraction = 1.0;
    cfg.rel_obj_tol *= m;
    cfg.abs_iterate_tol *= m;
    const auto [iters, f1] = run(cfg, nullptr);
    out.by_tolerance.push_back({m, iters, f1});
  }
  return out;
}

void write_speed_csv(const std::filesystem::path& dir, const SpeedAnalysis& analysis) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    out << std::setprecision(10);
    return out;
  };
  {
    auto out = open("speed_fraction.csv");
    out << "fraction,mean_iterations,macro_f1\n";
    for (const auto& r : analysis.by_fraction) out << r.setting << ',' << r.mean_iterations << ',' << r.macro_f1 << '\n';
  }
  {
    auto out = open("speed_tolerance.csv");
    out << "tolerance_multiplier,mean_iterations,macro_f1\n";
    for (const auto& r : analysis.by_tolerance) out << r.setting << ',' << r.mean_iterations << ',' << r.macro_f1 << '\n';
  }
  {
    auto out = open("convergence_histogram.csv");
    out << "iterations,examples\n";
    for (std::size_t k = 0; k < analysis.histogram.size(); ++k) out << k << ',' << analysis.histogram[k] << '\n';
  }
}

Matrix measurement_matrix(const SpenParams& model) {
  if (const auto* g = std::get_if<LabelEnergy>(&model.global)) return g->measurements;
  if (const auto* c = std::get_if<CondEnergy>(&model.global)) {
    const std::size_t L = model.num_labels();
    Matrix m(c->weights.rows(), L);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t j = 0; j < L; ++j) m(r, j) = c->weights(r, j);
    return m;
  }
  throw Error("model has no measurement matrix (global energy is '" + std::string(to_string(model.global_kind())) + "')");
}

Matrix normalized_abs(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double mx = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) mx = std::max(mx, std::abs(m(r, c)));
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = mx > 0.0 ? std::abs(m(r, c)) / mx : 0.0;
  }
  return out;
}

void write_csv(std::ostream& out, const Matrix& m) {
  const auto old = out.precision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
    out << '\n';
  }
  out.precision(old);
}

double block_alignment_score(const Matrix& measurements, std::size_t block_size) {
  const std::size_t L = measurements.cols();
  if (block_size == 0 || L % block_size != 0) throw DimensionError("label count must be a multiple of the block size");
  const std::size_t blocks = L / block_size;
  double total = 0.0;
  for (std::size_t b = 0; b < blocks; ++b) {
    double best = 0.0;
    for (std::size_t r = 0; r < measurements.rows(); ++r) {
      double inside = 0.0, all = 0.0;
      for (std::size_t c = 0; c < L; ++c) {
        const double v = std::abs(measurements(r, c));
        all += v;
        if (c / block_size == b) inside += v;
      }
      if (all > 0.0) best = std::max(best, inside / all);
    }
    total += best;
  }
  return total / static_cast<double>(blocks);
}

std::vector<double> block_alignment_null(const Matrix& measurements, std::size_t block_size, std::size_t permutations,
                                         std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t L = measurements.cols();
  std::vector<std::size_t> perm(L);
  std::vector<double> out;
  out.reserve(permutations);
  Matrix shuffled(measurements.rows(), L);
  for (std::size_t k = 0; k < permutations; ++k) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = L; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t r = 0; r < measurements.rows(); ++r)
      for (std::size_t c = 0; c < L; ++c) shuffled(r, c) = measurements(r, perm[c]);
    out.push_back(block_alignment_score(shuffled, block_size));
  }
  return out;
}

}  // namespace spen
