#include <gtest/gtest.h>

#include <sstream>

#include "spen/experiment.hpp"
#include "test_util.hpp"

using namespace spen;

namespace {

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, ParsesEverySection) {
  const ExperimentConfig cfg = parse(
      "# comment\n"
      "kind = spen\n"
      "seed = 4\n"
      "arch.feature_hidden = 8,4\n"
      "arch.global = label\n"
      "arch.measurements = 3\n"
      "arch.global_activation = hardtanh\n"
      "infer.step_size = 0.05\n"
      "infer.init = local\n"
      "train.surrogate = log\n"
      "train.global_epochs = 7\n"
      "train.restarts = 2\n"
      "synth.seed = 9\n"
      "synth.train = 100\n"
      "\n"
      "out.dir = somewhere  # trailing comment\n");
  EXPECT_EQ(cfg.kind, ModelKind::Spen);
  EXPECT_EQ(cfg.init_seed, 4u);
  EXPECT_EQ(cfg.arch.feature_hidden, (std::vector<std::size_t>{8, 4}));
  EXPECT_EQ(cfg.arch.global_kind, GlobalKind::LabelOnly);
  EXPECT_EQ(cfg.arch.measurements, 3u);
  EXPECT_EQ(cfg.arch.global_activation, Nonlinearity::HardTanh);
  EXPECT_DOUBLE_EQ(cfg.inference.step_size, 0.05);
  EXPECT_EQ(cfg.inference.init, InitKind::FromLocalClassifier);
  EXPECT_EQ(cfg.train.surrogate, Surrogate::LogLoss);
  EXPECT_EQ(cfg.train.global_epochs, 7u);
  EXPECT_EQ(cfg.global_restarts, 2u);
  ASSERT_TRUE(cfg.synthetic);
  EXPECT_EQ(cfg.synthetic->seed, 9u);
  EXPECT_EQ(cfg.synth_train, 100u);
  EXPECT_EQ(cfg.out_dir, "somewhere");
  EXPECT_TRUE(parse("arch.feature_hidden = none\n").arch.feature_hidden.empty());
}

TEST(Config, ErrorsNameTheKeyAndLine) {
  std::string msg = error_of("kind = spen\ntrain.lrr = 0.1\n");
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("train.lrr"), std::string::npos) << msg;
  msg = error_of("train.lr = fast\n");
  EXPECT_NE(msg.find("train.lr"), std::string::npos) << msg;
  EXPECT_NE(msg.find("fast"), std::string::npos) << msg;
  msg = error_of("arch.global_activation = tanh2\n");
  EXPECT_NE(msg.find("arch.global_activation"), std::string::npos) << msg;
  msg = error_of("just some words\n");
  EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
  EXPECT_FALSE(error_of("infer.momentum = 1.5\n").empty());
  EXPECT_FALSE(error_of("train.restarts = 0\n").empty());
  EXPECT_FALSE(error_of("data.split = 0.5,0.5\n").empty());
}

TEST(Config, WriteThenParseIsStable) {
  ExperimentConfig cfg = parse("kind = dmf\narch.feature_hidden = 5\ntrain.lr = 0.0123\ndmf.iters = 3\nsynth.seed = 2\n");
  std::ostringstream a;
  write_config(a, cfg);
  const ExperimentConfig back = parse(a.str());
  std::ostringstream b;
  write_config(b, back);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(back.kind, ModelKind::Dmf);
  EXPECT_EQ(back.dmf_iters, 3u);
  EXPECT_DOUBLE_EQ(back.train.lr, 0.0123);
}

TEST(Config, SetValueOverrides) {
  ExperimentConfig cfg;
  set_config_value(cfg, "train.batch_size", "7");
  EXPECT_EQ(cfg.train.batch_size, 7u);
  EXPECT_THROW(set_config_value(cfg, "nope", "1"), Error);
  EXPECT_EQ(parse_model_kind(to_string(ModelKind::Linear)), ModelKind::Linear);
  EXPECT_THROW(parse_model_kind("forest"), Error);
}

TEST(ExperimentData, SyntheticLayoutKeepsTrainingPrefixes) {
  ExperimentConfig cfg = parse("synth.seed = 3\nsynth.train = 20\nsynth.dev = 5\nsynth.test = 10\n");
  const ExperimentData small = load_experiment_data(cfg);
  EXPECT_EQ(small.train.size(), 20u);
  EXPECT_EQ(small.dev.size(), 5u);
  EXPECT_EQ(small.test.size(), 10u);
  cfg.synth_train = 60;
  const ExperimentData large = load_experiment_data(cfg);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(large.train.examples[i].features, small.train.examples[i].features);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(large.test.examples[i].features, small.test.examples[i].features);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(large.dev.examples[i].features, small.dev.examples[i].features);
}

TEST(ExperimentData, ResolveArchitecturePerKind) {
  ExperimentConfig cfg = parse("arch.feature_hidden = 6\narch.global = crf\nsynth.train = 5\n");
  Dataset ds;
  ds.num_features = 3;
  ds.num_labels = 4;
  cfg.kind = ModelKind::Linear;
  Architecture a = resolve_architecture(cfg, ds);
  EXPECT_TRUE(a.feature_hidden.empty());
  EXPECT_EQ(a.global_kind, GlobalKind::None);
  EXPECT_EQ(a.input_dim, 3u);
  EXPECT_EQ(a.num_labels, 4u);
  cfg.kind = ModelKind::Mlp;
  a = resolve_architecture(cfg, ds);
  EXPECT_EQ(a.feature_hidden, std::vector<std::size_t>{6});
  EXPECT_EQ(a.global_kind, GlobalKind::None);
  cfg.kind = ModelKind::Spen;
  EXPECT_EQ(resolve_architecture(cfg, ds).global_kind, GlobalKind::CrfQuadratic);
}

TEST(Experiment, EveryKindTrainsAndEvaluates) {
  for (const char* kind : {"linear", "mlp", "spen", "dmf"}) {
    ExperimentConfig cfg = parse(std::string("kind = ") + kind +
                                 "\narch.feature_hidden = 6\narch.measurements = 3\n"
                                 "train.pretrain_epochs = 3\ntrain.global_epochs = 2\ntrain.joint_epochs = 1\n"
                                 "train.restarts = 2\nsynth.seed = 1\nsynth.num_features = 8\nsynth.num_labels = 4\n"
                                 "synth.block_size = 2\nsynth.train = 40\nsynth.dev = 10\nsynth.test = 10\n");
    const ExperimentData data = load_experiment_data(cfg);
    const TrainOutcome out = run_training(cfg, data);
    EXPECT_FALSE(out.report.epochs.empty()) << kind;
    EXPECT_EQ(std::holds_alternative<DmfParams>(out.model), std::string(kind) == "dmf");
    EvalOptions opts;
    opts.tuning = &data.dev;
    const EvalReport r = evaluate_model(out.model, data.test, cfg.inference, opts);
    EXPECT_GE(r.macro_f1, 0.0);
    EXPECT_LE(r.macro_f1, 1.0);
    EXPECT_EQ(r.examples, 10u);
    EXPECT_EQ(predict_relaxed(out.model, data.test, cfg.inference, 1).size(), 10u);
  }
}

TEST(Experiment, RestartsReportEachGlobalRun) {
  ExperimentConfig cfg = parse(
      "kind = spen\narch.feature_hidden = none\narch.measurements = 2\ntrain.pretrain_epochs = 1\n"
      "train.global_epochs = 2\ntrain.joint_epochs = 1\ntrain.restarts = 3\nsynth.seed = 1\nsynth.num_features = 4\n"
      "synth.num_labels = 4\nsynth.block_size = 2\nsynth.train = 20\nsynth.dev = 10\nsynth.test = 10\n");
  const TrainOutcome out = run_training(cfg, load_experiment_data(cfg));
  std::map<std::string, int> stages;
  for (const auto& e : out.report.epochs) ++stages[e.stage];
  EXPECT_EQ(stages["pretrain"], 1);
  EXPECT_EQ(stages["global.r0"], 2);
  EXPECT_EQ(stages["global.r2"], 2);
  EXPECT_EQ(stages["joint"], 1);
}

TEST(Measurements, BlockAlignment) {
  Matrix aligned(4, 16);
  for (std::size_t b = 0; b < 4; ++b) {
    for (std::size_t j = 0; j < 4; ++j) aligned(b, 4 * b + j) = (j % 2 ? -1.0 : 1.0) * (1.0 + j);
  }
  EXPECT_DOUBLE_EQ(block_alignment_score(aligned, 4), 1.0);
  Matrix flat(4, 16);
  for (double& v : flat.values()) v = 2.0;
  EXPECT_DOUBLE_EQ(block_alignment_score(flat, 4), 0.25);
  const auto null = block_alignment_null(aligned, 4, 200, 7);
  ASSERT_EQ(null.size(), 200u);
  for (double v : null) EXPECT_LE(v, 1.0);
  std::vector<double> sorted = null;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_LT(sorted[197], 1.0);
  EXPECT_EQ(null, block_alignment_null(aligned, 4, 200, 7));
  EXPECT_THROW(block_alignment_score(Matrix(2, 6), 4), DimensionError);
}

TEST(Measurements, MatrixAndNormalization) {
  Rng rng(5);
  const SpenParams label = testutil::random_spen(rng, GlobalKind::LabelOnly, 3, 4, false);
  const Matrix m = measurement_matrix(label);
  EXPECT_EQ(m.cols(), 4u);
  const SpenParams cond = testutil::random_spen(rng, GlobalKind::Conditioned, 3, 4, false);
  const Matrix c = measurement_matrix(cond);
  EXPECT_EQ(c.cols(), 4u);
  EXPECT_EQ(c(0, 1), std::get<CondEnergy>(cond.global).weights(0, 1));
  EXPECT_THROW(measurement_matrix(testutil::random_spen(rng, GlobalKind::CrfQuadratic, 3, 4, false)), Error);
  const Matrix n = normalized_abs(Matrix(2, 2, {-4.0, 2.0, 0.5, 1.0}));
  EXPECT_EQ(n.values()[0], 1.0);
  EXPECT_EQ(n.values()[1], 0.5);
  EXPECT_EQ(n.values()[2], 0.5);
  EXPECT_EQ(n.values()[3], 1.0);
  std::ostringstream out;
  write_csv(out, Matrix(1, 2, {1.5, -2.0}));
  EXPECT_EQ(out.str(), "1.5,-2\n");
}

TEST(SpeedAnalysis, LowerFractionsNeverTakeMoreIterations) {
  Rng rng(6);
  const SpenParams p = testutil::random_spen(rng, GlobalKind::LabelOnly, 3, 4, false);
  SynthConfig sc;
  sc.n_examples = 24;
  sc.num_features = 3;
  sc.num_labels = 4;
  sc.block_size = 2;
  const Dataset data = generate_synthetic(sc);
  const std::vector<double> fractions{0.5, 0.9, 1.0}, tolerances{1.0, 10.0};
  const SpeedAnalysis s = speed_analysis(p, data, InferenceConfig{}, fractions, tolerances, 0.5, 8);
  ASSERT_EQ(s.by_fraction.size(), 3u);
  ASSERT_EQ(s.by_tolerance.size(), 2u);
  EXPECT_LE(s.by_fraction[0].mean_iterations, s.by_fraction[2].mean_iterations);
  EXPECT_LE(s.by_tolerance[1].mean_iterations, s.by_tolerance[0].mean_iterations);
  std::size_t total = 0;
  for (auto c : s.histogram) total += c;
  EXPECT_EQ(total, 24u);
}
