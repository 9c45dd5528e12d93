#pragma once

#include <cmath>
#include <functional>
#include <span>

#include "spen/energy.hpp"
#include "spen/random.hpp"

namespace spen::testutil {

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline Vector random_interior(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& x : v) x = 0.05 + 0.9 * rng.uniform();
  return v;
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = scale * rng.normal();
  return m;
}

/// Random architecture covering every global kind, depth and nonlinearity,
/// with nonzero biases so that no term is trivially zero.
inline SpenParams random_spen(Rng& rng, GlobalKind kind, std::size_t d, std::size_t L, bool feature_layers = true,
                              Nonlinearity g = Nonlinearity::Softplus, int depth = 1) {
  Architecture a;
  a.input_dim = d;
  a.num_labels = L;
  if (feature_layers) a.feature_hidden = {3 + rng.below(3)};
  a.feature_activation = Nonlinearity::Sigmoid;
  a.feature_output_activation = Nonlinearity::Softplus;
  a.global_kind = kind;
  a.measurements = 2 + rng.below(3);
  a.global_depth = depth;
  a.global_activation = g;
  SpenParams p = initialize(a, rng.engine()());
  for (auto& t : tensors(p)) {
    for (double& v : t.values) v += 0.3 * rng.normal();
  }
  if (auto* crf = std::get_if<CrfEnergy>(&p.global)) {
    for (std::size_t i = 0; i < L; ++i) crf->pairwise(i, i) = 0.0;
  }
  return p;
}

inline bool has_kink(Nonlinearity g) { return g == Nonlinearity::ReLU || g == Nonlinearity::HardTanh; }

inline bool close_to_kink(Nonlinearity g, std::span<const double> pre, double margin) {
  if (!has_kink(g)) return false;
  for (double v : pre) {
    if (std::abs(v) < margin) return true;
    if (g == Nonlinearity::HardTanh && std::abs(std::abs(v) - 1.0) < margin) return true;
  }
  return false;
}

/// True when any pre-activation of the network at (x, ybar) lies within
/// `margin` of a ReLU or HardTanh kink, where finite differences are unreliable.
inline bool near_kink(const SpenParams& p, std::span<const double> x, std::span<const double> ybar,
                      double margin = 1e-2) {
  const FeatureTrace t = trace_features(p.features, x);
  for (std::size_t k = 0; k < p.features.layers.size(); ++k) {
    if (close_to_kink(p.features.layers[k].activation, t.pre[k], margin)) return true;
  }
  if (const auto* g = std::get_if<LabelEnergy>(&p.global)) {
    Vector a = matvec(g->measurements, ybar);
    axpy(1.0, g->measurement_bias, a);
    if (close_to_kink(g->activation, a, margin)) return true;
    if (g->second) {
      Vector b = matvec(g->second->weights, apply_nonlinearity(g->activation, a));
      axpy(1.0, g->second->bias, b);
      if (close_to_kink(g->second->activation, b, margin)) return true;
    }
  }
  if (const auto* c = std::get_if<CondEnergy>(&p.global)) {
    Vector z(ybar.begin(), ybar.end());
    const auto F = t.output();
    z.insert(z.end(), F.begin(), F.end());
    Vector a = matvec(c->weights, z);
    axpy(1.0, c->bias, a);
    if (close_to_kink(c->activation, a, margin)) return true;
  }
  return false;
}

/// |a - b| / max(|a|, |b|, floor).
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double fp = f();
  x = saved - h;
  const double fm = f();
  x = saved;
  return (fp - fm) / (2.0 * h);
}

}  // namespace spen::testutil
