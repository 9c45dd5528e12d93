#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "spen/compute.hpp"

namespace spen {

/// One affine layer followed by a coordinate-wise nonlinearity.
struct DenseLayer {
  Matrix weights;
  Vector bias;
  Nonlinearity activation = Nonlinearity::Identity;

  std::size_t input_dim() const { return weights.cols(); }
  std::size_t output_dim() const { return weights.rows(); }
};

/// Input-side network F(x). The standard configuration is two layers,
/// F(x) = g(A2 g(A1 x)); zero layers makes F the identity (linear features
/// feeding straight into the local energy).
struct FeatureNet {
  std::size_t input_dim = 0;
  std::vector<DenseLayer> layers;

  std::size_t output_dim() const { return layers.empty() ? input_dim : layers.back().output_dim(); }
};

/// Per-label linear scores b_i^T F(x) + bias_i. The bias is the same as
/// augmenting F(x) with a constant-1 coordinate.
struct LocalEnergy {
  Matrix weights;  // L x f
  Vector bias;     // L

  std::size_t num_labels() const { return weights.rows(); }
};

/// Label-only global energy c^T g(C ybar + c_bias), optionally with one more
/// affine + nonlinearity stage before the output weights.
struct LabelEnergy {
  Matrix measurements;  // m x L
  Vector measurement_bias;
  Nonlinearity activation = Nonlinearity::Softplus;
  std::optional<DenseLayer> second;
  Vector output;

  int depth() const { return second ? 2 : 1; }
};

/// Global energy conditioned on the features: d^T g(D [ybar; F(x)] + d_bias).
struct CondEnergy {
  Matrix weights;  // m x (L + f)
  Vector bias;
  Vector output;
  Nonlinearity activation = Nonlinearity::Softplus;
};

/// Pairwise CRF energy ybar^T S ybar + s^T ybar. The diagonal of S is always
/// zero; a self-interaction on binary labels is a linear term and lives in s.
struct CrfEnergy {
  Matrix pairwise;  // L x L
  Vector linear;    // L

  CrfEnergy() = default;
  CrfEnergy(Matrix pairwise_, Vector linear_);
};

enum class GlobalKind { None, LabelOnly, Conditioned, CrfQuadratic };

using GlobalEnergy = std::variant<std::monostate, LabelEnergy, CondEnergy, CrfEnergy>;

struct SpenParams {
  FeatureNet features;
  LocalEnergy local;
  GlobalEnergy global;

  std::size_t input_dim() const { return features.input_dim; }
  std::size_t feature_dim() const { return features.output_dim(); }
  std::size_t num_labels() const { return local.num_labels(); }
  GlobalKind global_kind() const { return static_cast<GlobalKind>(global.index()); }

  /// Throws DimensionError if any pair of tensors disagrees on L or f.
  void validate() const;
};

std::string_view to_string(GlobalKind kind);
GlobalKind parse_global_kind(std::string_view name);

enum class ParamGroup { Feature, Local, Global };

/// Mutable view of one parameter tensor.
struct TensorRef {
  std::string name;
  ParamGroup group;
  bool is_bias;
  std::span<double> values;
};

struct ConstTensorRef {
  std::string name;
  ParamGroup group;
  bool is_bias;
  std::span<const double> values;
};

/// Every tensor in a fixed order (features, local, global).
std::vector<TensorRef> tensors(SpenParams& p);
std::vector<ConstTensorRef> tensors(const SpenParams& p);

/// Same shapes as p, all zeros.
SpenParams zeros_like(const SpenParams& p);
/// dst += alpha * src over every tensor (shapes must match).
void accumulate(SpenParams& dst, double alpha, const SpenParams& src);
double squared_norm(const SpenParams& p);

/// Shape and initialization choices for a fresh model.
struct Architecture {
  std::size_t input_dim = 0;
  std::size_t num_labels = 0;
  std::vector<std::size_t> feature_hidden;  // empty: F(x) = x
  Nonlinearity feature_activation = Nonlinearity::ReLU;
  Nonlinearity feature_output_activation = Nonlinearity::ReLU;
  GlobalKind global_kind = GlobalKind::LabelOnly;
  std::size_t measurements = 15;
  int global_depth = 1;
  std::size_t second_hidden = 0;  // width of the depth-2 stage; 0 means same as measurements
  Nonlinearity global_activation = Nonlinearity::Softplus;
};

SpenParams initialize(const Architecture& arch, std::uint64_t seed);

/// Activations of the feature network, kept for back-propagation.
struct FeatureTrace {
  Vector input;
  std::vector<Vector> pre;   // per layer, before the nonlinearity
  std::vector<Vector> post;  // per layer, after the nonlinearity

  std::span<const double> output() const { return post.empty() ? std::span<const double>(input) : post.back(); }
};

Vector feature_forward(const FeatureNet& net, std::span<const double> x);
FeatureTrace trace_features(const FeatureNet& net, std::span<const double> x);

Vector local_scores(const LocalEnergy& p, std::span<const double> features);
double local_energy(const LocalEnergy& p, std::span<const double> features, std::span<const double> ybar);
double global_energy(const LabelEnergy& p, std::span<const double> ybar);
double cond_energy(const CondEnergy& p, std::span<const double> features, std::span<const double> ybar);
double crf_energy(const CrfEnergy& p, std::span<const double> ybar);

/// Local energy plus the configured global term.
double total_energy(const SpenParams& p, std::span<const double> features, std::span<const double> ybar);

/// dE/dybar with the features held fixed.
Vector energy_grad_y(const SpenParams& p, std::span<const double> features, std::span<const double> ybar);

/// Same as energy_grad_y but reuses the precomputed local scores.
Vector energy_grad_y(const SpenParams& p, std::span<const double> features, std::span<const double> scores,
                     std::span<const double> ybar);

/// dE/dtheta for every tensor, back-propagating into the feature network.
SpenParams energy_grad_params(const SpenParams& p, std::span<const double> x, std::span<const double> ybar);

/// grad += scale * dE/dtheta evaluated at ybar, using a cached feature trace.
/// When include_features is false the feature-network gradient is skipped.
void accumulate_energy_grad_params(const SpenParams& p, const FeatureTrace& trace, std::span<const double> ybar,
                                   double scale, SpenParams& grad, bool include_features = true);

/// Back-propagates dL/dF(x) into the feature layers, adding scale * gradient to grad.
void backprop_features(const FeatureNet& net, const FeatureTrace& trace, std::span<const double> grad_output,
                       double scale, FeatureNet& grad);

}  // namespace spen
