#include <gtest/gtest.h>

#include <cmath>

#include "spen/compute.hpp"
#include "spen/random.hpp"
#include "test_util.hpp"

using namespace spen;

TEST(Matvec, IdentityAndZero) {
  const Vector v{3.0, 4.0};
  EXPECT_EQ(matvec(Matrix::identity(2), v), (Vector{3.0, 4.0}));
  EXPECT_EQ(matvec(Matrix(2, 2), v), (Vector{0.0, 0.0}));
}

TEST(Matvec, HandEvaluated) {
  const Matrix m(2, 2, {1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(matvec(m, Vector{1.0, 1.0}), (Vector{3.0, 7.0}));
  EXPECT_EQ(matvec_transposed(m, Vector{1.0, 1.0}), (Vector{4.0, 6.0}));
}

TEST(Matvec, MismatchNamesBothShapes) {
  const Matrix m(2, 3);
  try {
    matvec(m, Vector{1.0, 2.0});
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2"), std::string::npos) << msg;
  }
}

TEST(Matvec, IsLinear) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = testutil::random_matrix(rng, 5, 7);
    const Vector u = testutil::random_vector(rng, 7), v = testutil::random_vector(rng, 7);
    const double a = rng.normal(), b = rng.normal();
    Vector mix(7);
    for (std::size_t i = 0; i < 7; ++i) mix[i] = a * u[i] + b * v[i];
    const Vector lhs = matvec(m, mix);
    const Vector mu = matvec(m, u), mv = matvec(m, v);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_LT(testutil::rel_error(lhs[i], a * mu[i] + b * mv[i], 1e-12), 1e-10);
  }
}

TEST(Nonlinearity, Examples) {
  EXPECT_EQ(apply_nonlinearity(Nonlinearity::Sigmoid, Vector{0.0}), Vector{0.5});
  EXPECT_EQ(apply_nonlinearity(Nonlinearity::ReLU, Vector{-2.0, 3.0}), (Vector{0.0, 3.0}));
  EXPECT_EQ(apply_nonlinearity(Nonlinearity::HardTanh, Vector{-5.0, 0.3, 5.0}), (Vector{-1.0, 0.3, 1.0}));
  EXPECT_EQ(nonlinearity_grad(Nonlinearity::Sigmoid, Vector{0.0}), Vector{0.25});
  EXPECT_EQ(nonlinearity_grad(Nonlinearity::ReLU, Vector{-1.0, 2.0}), (Vector{0.0, 1.0}));
  EXPECT_EQ(nonlinearity_grad(Nonlinearity::HardTanh, Vector{0.5}), Vector{1.0});
}

TEST(Nonlinearity, KinksUseZeroSubgradient) {
  EXPECT_EQ(derivative(Nonlinearity::ReLU, 0.0), 0.0);
  EXPECT_EQ(derivative(Nonlinearity::HardTanh, 1.0), 0.0);
  EXPECT_EQ(derivative(Nonlinearity::HardTanh, -1.0), 0.0);
}

TEST(Nonlinearity, DerivativeMatchesFiniteDifferences) {
  Rng rng(5);
  for (auto g : {Nonlinearity::Sigmoid, Nonlinearity::ReLU, Nonlinearity::HardTanh, Nonlinearity::Softplus,
                 Nonlinearity::Identity}) {
    int checked = 0;
    while (checked < 100) {
      const double t = 4.0 * rng.normal();
      if (std::abs(t) < 1e-3 || std::abs(std::abs(t) - 1.0) < 1e-3) continue;
      const double h = 1e-6;
      const double fd = (apply(g, t + h) - apply(g, t - h)) / (2 * h);
      EXPECT_LT(testutil::rel_error(fd, derivative(g, t), 1e-8), 1e-4) << to_string(g) << " at " << t;
      ++checked;
    }
  }
}

TEST(Nonlinearity, StableForLargeArguments) {
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_DOUBLE_EQ(softplus(1000.0), 1000.0);
  EXPECT_GT(softplus(-700.0), 0.0);
}

TEST(Nonlinearity, NamesRoundTrip) {
  for (auto g : {Nonlinearity::Sigmoid, Nonlinearity::ReLU, Nonlinearity::HardTanh, Nonlinearity::Softplus,
                 Nonlinearity::Identity}) {
    EXPECT_EQ(parse_nonlinearity(to_string(g)), g);
  }
  EXPECT_EQ(parse_nonlinearity("linear"), Nonlinearity::Identity);
  EXPECT_THROW(parse_nonlinearity("tanhh"), Error);
}

TEST(Rng, DeterministicAndRoughlyStandard) {
  Rng a(42), b(42);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
  EXPECT_NEAR(sq / n, 1.0, 0.04);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(a.below(7), 7u);
}
