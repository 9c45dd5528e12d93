#include <gtest/gtest.h>

#include <cmath>

#include "spen/energy.hpp"
#include "spen/random.hpp"
#include "test_util.hpp"

using namespace spen;
using spen::testutil::central_difference;
using spen::testutil::random_interior;
using spen::testutil::random_spen;
using spen::testutil::random_vector;
using spen::testutil::rel_error;

namespace {

SpenParams local_only(Vector scores) {
  SpenParams p;
  p.features.input_dim = 1;
  p.local.weights = Matrix(scores.size(), 1);
  p.local.bias = std::move(scores);
  return p;
}

LabelEnergy relu_unit() {
  LabelEnergy g;
  g.measurements = Matrix(1, 2, {1.0, 1.0});
  g.measurement_bias = {-1.0};
  g.activation = Nonlinearity::ReLU;
  g.output = {1.0};
  return g;
}

struct FdTally {
  int checked = 0;
  int failed = 0;
  double worst = 0.0;
  void add(double analytic, double numeric, double tol) {
    ++checked;
    const double e = rel_error(analytic, numeric, 1e-4);
    worst = std::max(worst, e);
    if (e >= tol) ++failed;
  }
};

}  // namespace

TEST(FeatureForward, ZeroAndIdentity) {
  FeatureNet net{2, {DenseLayer{Matrix(3, 2), Vector(3, 0.0), Nonlinearity::ReLU},
                     DenseLayer{Matrix(2, 3), Vector(2, 0.0), Nonlinearity::ReLU}}};
  EXPECT_EQ(feature_forward(net, Vector{0.3, -7.0}), (Vector{0.0, 0.0}));
  FeatureNet id{2, {DenseLayer{Matrix::identity(2), Vector(2, 0.0), Nonlinearity::Identity},
                    DenseLayer{Matrix::identity(2), Vector(2, 0.0), Nonlinearity::Identity}}};
  EXPECT_EQ(feature_forward(id, Vector{1.0, -2.0}), (Vector{1.0, -2.0}));
}

TEST(FeatureForward, MatchesStepByStepEvaluation) {
  Rng rng(3);
  FeatureNet net{3, {DenseLayer{testutil::random_matrix(rng, 4, 3), random_vector(rng, 4), Nonlinearity::ReLU},
                     DenseLayer{testutil::random_matrix(rng, 2, 4), random_vector(rng, 2), Nonlinearity::Sigmoid}}};
  const Vector x = random_vector(rng, 3);
  Vector h(4);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = net.layers[0].bias[r];
    for (std::size_t c = 0; c < 3; ++c) s += net.layers[0].weights(r, c) * x[c];
    h[r] = std::max(0.0, s);
  }
  const Vector out = feature_forward(net, x);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = net.layers[1].bias[r];
    for (std::size_t c = 0; c < 4; ++c) s += net.layers[1].weights(r, c) * h[c];
    EXPECT_NEAR(out[r], 1.0 / (1.0 + std::exp(-s)), 1e-14);
  }
}

TEST(FeatureForward, DimensionMismatch) {
  FeatureNet net{3, {}};
  EXPECT_THROW(feature_forward(net, Vector{1.0}), DimensionError);
}

TEST(LocalEnergy, Examples) {
  EXPECT_EQ(local_energy(local_only({1.0, -3.0}).local, Vector{0.0}, Vector{0.0, 0.0}), 0.0);
  EXPECT_EQ(local_energy(local_only({2.5}).local, Vector{0.0}, Vector{1.0}), 2.5);
  EXPECT_DOUBLE_EQ(local_energy(local_only({1.0, -3.0}).local, Vector{0.0}, Vector{0.5, 0.5}), -1.0);
}

TEST(GlobalEnergy, Examples) {
  LabelEnergy g = relu_unit();
  EXPECT_DOUBLE_EQ(global_energy(g, Vector{1.0, 1.0}), 1.0);
  EXPECT_DOUBLE_EQ(global_energy(g, Vector{0.0, 0.5}), 0.0);
  g.output = {0.0};
  EXPECT_EQ(global_energy(g, Vector{0.3, 0.9}), 0.0);
}

TEST(GlobalEnergy, DepthTwoAddsAStage) {
  LabelEnergy g = relu_unit();
  g.second = DenseLayer{Matrix(1, 1, {2.0}), Vector{0.5}, Nonlinearity::Identity};
  // 2 * relu(2 - 1) + 0.5
  EXPECT_DOUBLE_EQ(global_energy(g, Vector{1.0, 1.0}), 2.5);
}

TEST(CrfEnergy, Examples) {
  CrfEnergy c(Matrix(2, 2, {0.0, 1.0, 1.0, 0.0}), Vector{0.0, 0.0});
  EXPECT_EQ(crf_energy(c, Vector{0.0, 0.0}), 0.0);
  EXPECT_DOUBLE_EQ(crf_energy(c, Vector{1.0, 1.0}), 2.0);
  CrfEnergy lin(Matrix(2, 2), Vector{1.0, -1.0});
  EXPECT_DOUBLE_EQ(crf_energy(lin, Vector{1.0, 1.0}), 0.0);
}

TEST(CrfEnergy, DiagonalIsZeroed) {
  CrfEnergy c(Matrix(2, 2, {3.0, 1.0, 1.0, 4.0}), Vector{0.0, 0.0});
  EXPECT_EQ(c.pairwise(0, 0), 0.0);
  EXPECT_EQ(c.pairwise(1, 1), 0.0);
}

TEST(CrfEnergy, LinearWhenPairwiseIsZero) {
  Rng rng(8);
  CrfEnergy c(Matrix(4, 4), random_vector(rng, 4));
  const Vector y = random_interior(rng, 4);
  for (double a : {0.0, 0.25, 0.7, 1.0}) {
    Vector ay = y;
    for (double& v : ay) v *= a;
    EXPECT_NEAR(crf_energy(c, ay), a * crf_energy(c, y), 1e-14);
  }
}

TEST(CondEnergy, ZeroFeatureBlockReducesToLabelEnergy) {
  Rng rng(4);
  const std::size_t L = 3, f = 2, m = 2;
  LabelEnergy g;
  g.measurements = testutil::random_matrix(rng, m, L);
  g.measurement_bias = random_vector(rng, m);
  g.activation = Nonlinearity::Softplus;
  g.output = random_vector(rng, m);
  CondEnergy c;
  c.weights = Matrix(m, L + f);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < L; ++j) c.weights(r, j) = g.measurements(r, j);
  c.bias = g.measurement_bias;
  c.output = g.output;
  c.activation = g.activation;
  const Vector y = random_interior(rng, L);
  EXPECT_EQ(cond_energy(c, random_vector(rng, f), y), global_energy(g, y));
  c.output.assign(m, 0.0);
  EXPECT_EQ(cond_energy(c, random_vector(rng, f), y), 0.0);
}

TEST(CondEnergy, MatchesComposedEvaluation) {
  Rng rng(12);
  const std::size_t L = 3, f = 2, m = 4;
  CondEnergy c{testutil::random_matrix(rng, m, L + f), random_vector(rng, m), random_vector(rng, m), Nonlinearity::ReLU};
  const Vector y = random_interior(rng, L), F = random_vector(rng, f);
  Vector z = y;
  z.insert(z.end(), F.begin(), F.end());
  Vector a = matvec(c.weights, z);
  axpy(1.0, c.bias, a);
  EXPECT_NEAR(cond_energy(c, F, y), dot(c.output, apply_nonlinearity(Nonlinearity::ReLU, a)), 1e-13);
}

TEST(TotalEnergy, SumOfComponents) {
  Rng rng(21);
  for (auto kind : {GlobalKind::None, GlobalKind::LabelOnly, GlobalKind::Conditioned, GlobalKind::CrfQuadratic}) {
    const SpenParams p = random_spen(rng, kind, 4, 5);
    const Vector x = random_vector(rng, 4);
    const Vector F = feature_forward(p.features, x);
    const Vector y = random_interior(rng, 5);
    double expected = local_energy(p.local, F, y);
    if (kind == GlobalKind::LabelOnly) expected += global_energy(std::get<LabelEnergy>(p.global), y);
    if (kind == GlobalKind::Conditioned) expected += cond_energy(std::get<CondEnergy>(p.global), F, y);
    if (kind == GlobalKind::CrfQuadratic) expected += crf_energy(std::get<CrfEnergy>(p.global), y);
    EXPECT_EQ(total_energy(p, F, y), expected);
    // Cached and recomputed features give the same energy.
    EXPECT_EQ(total_energy(p, feature_forward(p.features, x), y), total_energy(p, F, y));
  }
}

TEST(TotalEnergy, ZeroGlobalEqualsLocal) {
  Rng rng(22);
  SpenParams p = random_spen(rng, GlobalKind::LabelOnly, 3, 4);
  std::get<LabelEnergy>(p.global).output.assign(std::get<LabelEnergy>(p.global).output.size(), 0.0);
  const Vector F = feature_forward(p.features, random_vector(rng, 3));
  const Vector y = random_interior(rng, 4);
  EXPECT_EQ(total_energy(p, F, y), local_energy(p.local, F, y));
}

TEST(EnergyGradY, LocalOnlyIsTheScoreVector) {
  const SpenParams p = local_only({0.5, -2.0, 3.0});
  Rng rng(1);
  const Vector g = energy_grad_y(p, Vector{0.0}, random_interior(rng, 3));
  EXPECT_EQ(g, (Vector{0.5, -2.0, 3.0}));
}

TEST(EnergyGradY, CrfClosedForm) {
  Rng rng(2);
  SpenParams p = local_only(random_vector(rng, 3));
  Matrix s = testutil::random_matrix(rng, 3, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < i; ++j) s(i, j) = s(j, i);
  p.global = CrfEnergy(s, random_vector(rng, 3));
  const auto& crf = std::get<CrfEnergy>(p.global);
  const Vector y = random_interior(rng, 3);
  const Vector g = energy_grad_y(p, Vector{0.0}, y);
  for (std::size_t i = 0; i < 3; ++i) {
    double expected = p.local.bias[i] + crf.linear[i];
    for (std::size_t j = 0; j < 3; ++j) expected += 2.0 * crf.pairwise(i, j) * y[j];
    EXPECT_NEAR(g[i], expected, 1e-13);
  }
}

TEST(EnergyGradParams, ZeroLabelsGiveZeroGradient) {
  Rng rng(9);
  const SpenParams p = random_spen(rng, GlobalKind::None, 3, 4);
  const SpenParams g = energy_grad_params(p, random_vector(rng, 3), Vector(4, 0.0));
  EXPECT_EQ(squared_norm(g), 0.0);
}

TEST(EnergyGradParams, OutputGradientIsHiddenActivation) {
  Rng rng(10);
  const SpenParams p = random_spen(rng, GlobalKind::LabelOnly, 3, 4);
  const Vector y = random_interior(rng, 4);
  const auto& g = std::get<LabelEnergy>(p.global);
  Vector hidden = matvec(g.measurements, y);
  axpy(1.0, g.measurement_bias, hidden);
  hidden = apply_nonlinearity(g.activation, hidden);
  const SpenParams grad = energy_grad_params(p, random_vector(rng, 3), y);
  const auto& out = std::get<LabelEnergy>(grad.global).output;
  for (std::size_t k = 0; k < hidden.size(); ++k) EXPECT_NEAR(out[k], hidden[k], 1e-14);
}

// 50+ random configurations spanning every global kind, nonlinearity and depth.
TEST(EnergyGradients, MatchFiniteDifferencesAcrossArchitectures) {
  Rng rng(2024);
  FdTally y_tally, p_tally;
  int configs = 0;
  const std::vector<Nonlinearity> acts{Nonlinearity::Softplus, Nonlinearity::Sigmoid, Nonlinearity::ReLU,
                                       Nonlinearity::HardTanh};
  for (auto kind : {GlobalKind::None, GlobalKind::LabelOnly, GlobalKind::Conditioned, GlobalKind::CrfQuadratic}) {
    for (auto g : acts) {
      for (int depth : {1, 2}) {
        if (kind != GlobalKind::LabelOnly && depth == 2) continue;
        for (int rep = 0; rep < 3; ++rep) {
          ++configs;
          const std::size_t d = 2 + rng.below(3), L = 2 + rng.below(4);
          SpenParams p = random_spen(rng, kind, d, L, rep != 1, g, depth);
          Vector x = random_vector(rng, d);
          Vector y = random_interior(rng, L);
          while (testutil::near_kink(p, x, y)) {
            x = random_vector(rng, d);
            y = random_interior(rng, L);
          }
          const Vector F = feature_forward(p.features, x);

          const Vector gy = energy_grad_y(p, F, y);
          for (std::size_t i = 0; i < L; ++i) {
            const double fd = central_difference([&] { return total_energy(p, F, y); }, y[i]);
            y_tally.add(gy[i], fd, 1e-4);
          }

          const SpenParams gp = energy_grad_params(p, x, y);
          auto pt = tensors(p);
          auto gt = tensors(gp);
          for (std::size_t t = 0; t < pt.size(); ++t) {
            for (std::size_t k = 0; k < pt[t].values.size(); ++k) {
              if (pt[t].name == "crf.pairwise" && k % (L + 1) == 0) continue;  // structurally zero diagonal
              const double fd = central_difference(
                  [&] { return total_energy(p, feature_forward(p.features, x), y); }, pt[t].values[k]);
              p_tally.add(gt[t].values[k], fd, 1e-4);
            }
          }
        }
      }
    }
  }
  EXPECT_GE(configs, 50);
  EXPECT_GT(y_tally.checked, 200);
  EXPECT_GT(p_tally.checked, 2000);
  EXPECT_EQ(y_tally.failed, 0) << "worst relative error " << y_tally.worst;
  EXPECT_EQ(p_tally.failed, 0) << "worst relative error " << p_tally.worst;
}

TEST(EnergyGradients, SmoothArchitecturesAreExact) {
  Rng rng(77);
  for (int rep = 0; rep < 20; ++rep) {
    const auto kind = rep % 2 ? GlobalKind::LabelOnly : GlobalKind::Conditioned;
    SpenParams p = random_spen(rng, kind, 3, 4, true, Nonlinearity::Softplus, 1 + rep % 2 * (kind == GlobalKind::LabelOnly));
    const Vector x = random_vector(rng, 3);
    Vector y = random_interior(rng, 4);
    const Vector F = feature_forward(p.features, x);
    const Vector gy = energy_grad_y(p, F, y);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_LT(rel_error(gy[i], central_difference([&] { return total_energy(p, F, y); }, y[i])), 1e-4);
    }
  }
}

TEST(Initialize, DeterministicAndShaped) {
  Architecture a;
  a.input_dim = 5;
  a.num_labels = 4;
  a.feature_hidden = {6, 3};
  a.measurements = 2;
  a.global_depth = 2;
  const SpenParams p = initialize(a, 7);
  const SpenParams q = initialize(a, 7);
  EXPECT_EQ(p.feature_dim(), 3u);
  EXPECT_EQ(p.num_labels(), 4u);
  auto pt = tensors(p);
  auto qt = tensors(q);
  ASSERT_EQ(pt.size(), qt.size());
  for (std::size_t t = 0; t < pt.size(); ++t) {
    EXPECT_TRUE(std::equal(pt[t].values.begin(), pt[t].values.end(), qt[t].values.begin()));
  }
  EXPECT_NE(squared_norm(initialize(a, 8)), squared_norm(p));
}

TEST(SpenParams, ValidateRejectsInconsistentShapes) {
  Rng rng(1);
  SpenParams p = random_spen(rng, GlobalKind::LabelOnly, 3, 4);
  std::get<LabelEnergy>(p.global).measurements = Matrix(2, 5);
  EXPECT_THROW(p.validate(), DimensionError);
}

TEST(GlobalKind, NamesRoundTrip) {
  for (auto k : {GlobalKind::None, GlobalKind::LabelOnly, GlobalKind::Conditioned, GlobalKind::CrfQuadratic}) {
    EXPECT_EQ(parse_global_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_global_kind("quadratic"), Error);
}
