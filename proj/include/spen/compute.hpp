#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace spen {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent tensor or dataset shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed input files or datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or divergence during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Nonlinearity { Sigmoid, ReLU, HardTanh, Softplus, Identity };

std::string_view to_string(Nonlinearity g);
/// Accepts the names produced by to_string, case-insensitively.
Nonlinearity parse_nonlinearity(std::string_view name);

// Scalar forms.
double apply(Nonlinearity g, double t);
/// Derivative; 0 exactly at the ReLU and HardTanh kinks.
double derivative(Nonlinearity g, double t);

double sigmoid(double t);
/// log(1 + exp(t)) without overflow.
double softplus(double t);

Vector matvec(const Matrix& m, std::span<const double> v);
/// m^T v.
Vector matvec_transposed(const Matrix& m, std::span<const double> v);
Vector apply_nonlinearity(Nonlinearity g, std::span<const double> v);
Vector nonlinearity_grad(Nonlinearity g, std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
/// y += alpha * x.
void axpy(double alpha, std::span<const double> x, std::span<double> y);
/// m += alpha * u v^T.
void add_outer(Matrix& m, double alpha, std::span<const double> u, std::span<const double> v);
/// Elementwise product.
Vector hadamard(std::span<const double> a, std::span<const double> b);
double max_abs_diff(std::span<const double> a, std::span<const double> b);

/// Throws DimensionError mentioning `what` when the lengths differ.
void require_same_length(std::size_t expected, std::size_t actual, std::string_view what);

bool all_finite(std::span<const double> v);

}  // namespace spen
