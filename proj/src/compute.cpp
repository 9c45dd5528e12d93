#include "spen/compute.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace spen {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    std::ostringstream msg;
    msg << "matrix data has " << data_.size() << " entries, expected " << rows_ << "x" << cols_;
    throw DimensionError(msg.str());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

std::string_view to_string(Nonlinearity g) {
  switch (g) {
    case Nonlinearity::Sigmoid: return "sigmoid";
    case Nonlinearity::ReLU: return "relu";
    case Nonlinearity::HardTanh: return "hardtanh";
    case Nonlinearity::Softplus: return "softplus";
    case Nonlinearity::Identity: return "identity";
  }
  return "unknown";
}

Nonlinearity parse_nonlinearity(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (auto g : {Nonlinearity::Sigmoid, Nonlinearity::ReLU, Nonlinearity::HardTanh,
                 Nonlinearity::Softplus, Nonlinearity::Identity}) {
    if (lower == to_string(g)) return g;
  }
  if (lower == "linear") return Nonlinearity::Identity;
  throw Error("unknown nonlinearity '" + std::string(name) + "'");
}

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double softplus(double t) {
  return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

double apply(Nonlinearity g, double t) {
  switch (g) {
    case Nonlinearity::Sigmoid: return sigmoid(t);
    case Nonlinearity::ReLU: return t > 0 ? t : 0.0;
    case Nonlinearity::HardTanh: return std::clamp(t, -1.0, 1.0);
    case Nonlinearity::Softplus: return softplus(t);
    case Nonlinearity::Identity: return t;
  }
  return t;
}

double derivative(Nonlinearity g, double t) {
  switch (g) {
    case Nonlinearity::Sigmoid: {
      const double s = sigmoid(t);
      return s * (1.0 - s);
    }
    case Nonlinearity::ReLU: return t > 0 ? 1.0 : 0.0;
    case Nonlinearity::HardTanh: return (t > -1.0 && t < 1.0) ? 1.0 : 0.0;
    case Nonlinearity::Softplus: return sigmoid(t);
    case Nonlinearity::Identity: return 1.0;
  }
  return 1.0;
}

void require_same_length(std::size_t expected, std::size_t actual, std::string_view what) {
  if (expected != actual) {
    std::ostringstream msg;
    msg << what << ": expected length " << expected << ", got " << actual;
    throw DimensionError(msg.str());
  }
}

Vector matvec(const Matrix& m, std::span<const double> v) {
  if (m.cols() != v.size()) {
    throw DimensionError("matvec: matrix " + m.shape_string() + " cannot multiply vector of length " +
                         std::to_string(v.size()));
  }
  Vector out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), v);
  return out;
}

Vector matvec_transposed(const Matrix& m, std::span<const double> v) {
  if (m.rows() != v.size()) {
    throw DimensionError("matvec_transposed: matrix " + m.shape_string() +
                         " cannot multiply vector of length " + std::to_string(v.size()));
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (v[r] != 0.0) axpy(v[r], m.row(r), out);
  }
  return out;
}

Vector apply_nonlinearity(Nonlinearity g, std::span<const double> v) {
  Vector out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [g](double t) { return apply(g, t); });
  return out;
}

Vector nonlinearity_grad(Nonlinearity g, std::span<const double> v) {
  Vector out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [g](double t) { return derivative(g, t); });
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_length(y.size(), x.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void add_outer(Matrix& m, double alpha, std::span<const double> u, std::span<const double> v) {
  require_same_length(m.rows(), u.size(), "add_outer rows");
  require_same_length(m.cols(), v.size(), "add_outer cols");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double a = alpha * u[r];
    if (a != 0.0) axpy(a, v, m.row(r));
  }
}

Vector hadamard(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "hadamard");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double t) { return std::isfinite(t); });
}

}  // namespace spen
