#include "spen/energy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "spen/random.hpp"

namespace spen {

namespace {

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, std::string_view what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + m.shape_string());
  }
}

void zero_diagonal(Matrix& m) {
  for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) m(i, i) = 0.0;
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  const double scale = cols > 0 ? 1.0 / std::sqrt(static_cast<double>(cols)) : 0.0;
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

// Forward pass of an affine + nonlinearity layer; returns (pre, post).
std::pair<Vector, Vector> affine_forward(const Matrix& w, std::span<const double> bias, Nonlinearity g,
                                         std::span<const double> in) {
  Vector pre = matvec(w, in);
  axpy(1.0, bias, pre);
  Vector post = apply_nonlinearity(g, pre);
  return {std::move(pre), std::move(post)};
}

Vector concat(std::span<const double> a, std::span<const double> b) {
  Vector z(a.begin(), a.end());
  z.insert(z.end(), b.begin(), b.end());
  return z;
}

struct LabelForward {
  Vector pre1, post1, pre2, post2;
  std::span<const double> last() const { return pre2.empty() ? post1 : post2; }
};

LabelForward label_forward(const LabelEnergy& p, std::span<const double> ybar) {
  LabelForward f;
  std::tie(f.pre1, f.post1) = affine_forward(p.measurements, p.measurement_bias, p.activation, ybar);
  if (p.second) std::tie(f.pre2, f.post2) = affine_forward(p.second->weights, p.second->bias, p.second->activation, f.post1);
  return f;
}

// Gradient of the label energy w.r.t. ybar; optionally accumulates parameter gradients.
Vector label_backward(const LabelEnergy& p, std::span<const double> ybar, const LabelForward& f, double scale,
                      LabelEnergy* grad) {
  if (grad) axpy(scale, f.last(), grad->output);
  Vector dh = p.output;
  if (p.second) {
    Vector da2 = hadamard(dh, nonlinearity_grad(p.second->activation, f.pre2));
    if (grad) {
      add_outer(grad->second->weights, scale, da2, f.post1);
      axpy(scale, da2, grad->second->bias);
    }
    dh = matvec_transposed(p.second->weights, da2);
  }
  Vector da = hadamard(dh, nonlinearity_grad(p.activation, f.pre1));
  if (grad) {
    add_outer(grad->measurements, scale, da, ybar);
    axpy(scale, da, grad->measurement_bias);
  }
  return matvec_transposed(p.measurements, da);
}

// Gradient of the conditioned energy w.r.t. [ybar; F]; optionally accumulates parameter gradients.
Vector cond_backward(const CondEnergy& p, std::span<const double> z, double scale, CondEnergy* grad) {
  auto [pre, post] = affine_forward(p.weights, p.bias, p.activation, z);
  Vector da = hadamard(p.output, nonlinearity_grad(p.activation, pre));
  if (grad) {
    axpy(scale, post, grad->output);
    add_outer(grad->weights, scale, da, z);
    axpy(scale, da, grad->bias);
  }
  return matvec_transposed(p.weights, da);
}

Vector crf_grad_y(const CrfEnergy& p, std::span<const double> ybar) {
  Vector g = matvec(p.pairwise, ybar);
  const Vector gt = matvec_transposed(p.pairwise, ybar);
  axpy(1.0, gt, g);
  axpy(1.0, p.linear, g);
  return g;
}

}  // namespace

CrfEnergy::CrfEnergy(Matrix pairwise_, Vector linear_) : pairwise(std::move(pairwise_)), linear(std::move(linear_)) {
  if (pairwise.rows() != pairwise.cols()) throw DimensionError("crf pairwise matrix must be square, got " + pairwise.shape_string());
  require_same_length(pairwise.rows(), linear.size(), "crf linear term");
  zero_diagonal(pairwise);
}

std::string_view to_string(GlobalKind kind) {
  switch (kind) {
    case GlobalKind::None: return "none";
    case GlobalKind::LabelOnly: return "label";
    case GlobalKind::Conditioned: return "conditioned";
    case GlobalKind::CrfQuadratic: return "crf";
  }
  return "unknown";
}

GlobalKind parse_global_kind(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (auto k : {GlobalKind::None, GlobalKind::LabelOnly, GlobalKind::Conditioned, GlobalKind::CrfQuadratic}) {
    if (lower == to_string(k)) return k;
  }
  throw Error("unknown global energy kind '" + std::string(name) + "'");
}

void SpenParams::validate() const {
  std::size_t in = features.input_dim;
  for (std::size_t i = 0; i < features.layers.size(); ++i) {
    const auto& layer = features.layers[i];
    require_shape(layer.weights, layer.weights.rows(), in, "feature layer " + std::to_string(i));
    require_same_length(layer.weights.rows(), layer.bias.size(), "feature layer bias");
    in = layer.weights.rows();
  }
  const std::size_t f = feature_dim();
  const std::size_t L = num_labels();
  require_shape(local.weights, L, f, "local energy weights");
  require_same_length(L, local.bias.size(), "local energy bias");
  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, LabelEnergy>) {
          const std::size_t m = g.measurements.rows();
          if (m == 0) throw DimensionError("label energy needs at least one measurement");
          require_shape(g.measurements, m, L, "measurement matrix");
          require_same_length(m, g.measurement_bias.size(), "measurement bias");
          std::size_t width = m;
          if (g.second) {
            require_shape(g.second->weights, g.second->weights.rows(), m, "second global layer");
            require_same_length(g.second->weights.rows(), g.second->bias.size(), "second global layer bias");
            width = g.second->weights.rows();
          }
          require_same_length(width, g.output.size(), "global output weights");
        } else if constexpr (std::is_same_v<T, CondEnergy>) {
          const std::size_t m = g.weights.rows();
          if (m == 0) throw DimensionError("conditioned energy needs at least one measurement");
          require_shape(g.weights, m, L + f, "conditioned energy weights");
          require_same_length(m, g.bias.size(), "conditioned energy bias");
          require_same_length(m, g.output.size(), "conditioned energy output");
        } else if constexpr (std::is_same_v<T, CrfEnergy>) {
          require_shape(g.pairwise, L, L, "crf pairwise matrix");
          require_same_length(L, g.linear.size(), "crf linear term");
        }
      },
      global);
}

std::vector<TensorRef> tensors(SpenParams& p) {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < p.features.layers.size(); ++i) {
    auto& layer = p.features.layers[i];
    out.push_back({"feature" + std::to_string(i) + ".weights", ParamGroup::Feature, false, layer.weights.values()});
    out.push_back({"feature" + std::to_string(i) + ".bias", ParamGroup::Feature, true, layer.bias});
  }
  out.push_back({"local.weights", ParamGroup::Local, false, p.local.weights.values()});
  out.push_back({"local.bias", ParamGroup::Local, true, p.local.bias});
  std::visit(
      [&](auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, LabelEnergy>) {
          out.push_back({"label.measurements", ParamGroup::Global, false, g.measurements.values()});
          out.push_back({"label.measurement_bias", ParamGroup::Global, true, g.measurement_bias});
          if (g.second) {
            out.push_back({"label.second.weights", ParamGroup::Global, false, g.second->weights.values()});
            out.push_back({"label.second.bias", ParamGroup::Global, true, g.second->bias});
          }
          out.push_back({"label.output", ParamGroup::Global, false, g.output});
        } else if constexpr (std::is_same_v<T, CondEnergy>) {
          out.push_back({"cond.weights", ParamGroup::Global, false, g.weights.values()});
          out.push_back({"cond.bias", ParamGroup::Global, true, g.bias});
          out.push_back({"cond.output", ParamGroup::Global, false, g.output});
        } else if constexpr (std::is_same_v<T, CrfEnergy>) {
          out.push_back({"crf.pairwise", ParamGroup::Global, false, g.pairwise.values()});
          out.push_back({"crf.linear", ParamGroup::Global, true, g.linear});
        }
      },
      p.global);
  return out;
}

std::vector<ConstTensorRef> tensors(const SpenParams& p) {
  auto mut = tensors(const_cast<SpenParams&>(p));
  std::vector<ConstTensorRef> out;
  out.reserve(mut.size());
  for (auto& t : mut) out.push_back({std::move(t.name), t.group, t.is_bias, t.values});
  return out;
}

SpenParams zeros_like(const SpenParams& p) {
  SpenParams z = p;
  for (auto& t : tensors(z)) std::fill(t.values.begin(), t.values.end(), 0.0);
  return z;
}

void accumulate(SpenParams& dst, double alpha, const SpenParams& src) {
  auto d = tensors(dst);
  auto s = tensors(src);
  require_same_length(d.size(), s.size(), "parameter tensor count");
  for (std::size_t i = 0; i < d.size(); ++i) axpy(alpha, s[i].values, d[i].values);
}

double squared_norm(const SpenParams& p) {
  double s = 0.0;
  for (const auto& t : tensors(p)) s += dot(t.values, t.values);
  return s;
}

SpenParams initialize(const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  SpenParams p;
  p.features.input_dim = arch.input_dim;
  std::size_t in = arch.input_dim;
  for (std::size_t i = 0; i < arch.feature_hidden.size(); ++i) {
    const bool last = i + 1 == arch.feature_hidden.size();
    DenseLayer layer{random_matrix(rng, arch.feature_hidden[i], in), Vector(arch.feature_hidden[i], 0.0),
                     last ? arch.feature_output_activation : arch.feature_activation};
    in = arch.feature_hidden[i];
    p.features.layers.push_back(std::move(layer));
  }
  const std::size_t L = arch.num_labels;
  p.local.weights = random_matrix(rng, L, in);
  p.local.bias.assign(L, 0.0);
  switch (arch.global_kind) {
    case GlobalKind::None: break;
    case GlobalKind::LabelOnly: {
      LabelEnergy g;
      g.measurements = random_matrix(rng, arch.measurements, L);
      g.measurement_bias.assign(arch.measurements, 0.0);
      g.activation = arch.global_activation;
      std::size_t width = arch.measurements;
      if (arch.global_depth >= 2) {
        const std::size_t h = arch.second_hidden ? arch.second_hidden : arch.measurements;
        g.second = DenseLayer{random_matrix(rng, h, arch.measurements), Vector(h, 0.0), arch.global_activation};
        width = h;
      }
      g.output.resize(width);
      for (double& v : g.output) v = rng.normal() / std::sqrt(static_cast<double>(width));
      p.global = std::move(g);
      break;
    }
    case GlobalKind::Conditioned: {
      CondEnergy g;
      g.weights = random_matrix(rng, arch.measurements, L + in);
      g.bias.assign(arch.measurements, 0.0);
      g.output.resize(arch.measurements);
      for (double& v : g.output) v = rng.normal() / std::sqrt(static_cast<double>(arch.measurements));
      g.activation = arch.global_activation;
      p.global = std::move(g);
      break;
    }
    case GlobalKind::CrfQuadratic: {
      Matrix s = random_matrix(rng, L, L);
      for (double& v : s.values()) v *= 0.1;
      p.global = CrfEnergy(std::move(s), Vector(L, 0.0));
      break;
    }
  }
  p.validate();
  return p;
}

Vector feature_forward(const FeatureNet& net, std::span<const double> x) {
  require_same_length(net.input_dim, x.size(), "feature input");
  Vector h(x.begin(), x.end());
  for (const auto& layer : net.layers) h = affine_forward(layer.weights, layer.bias, layer.activation, h).second;
  return h;
}

FeatureTrace trace_features(const FeatureNet& net, std::span<const double> x) {
  require_same_length(net.input_dim, x.size(), "feature input");
  FeatureTrace t;
  t.input.assign(x.begin(), x.end());
  for (const auto& layer : net.layers) {
    auto [pre, post] = affine_forward(layer.weights, layer.bias, layer.activation, t.output());
    t.pre.push_back(std::move(pre));
    t.post.push_back(std::move(post));
  }
  return t;
}

Vector local_scores(const LocalEnergy& p, std::span<const double> features) {
  Vector s = matvec(p.weights, features);
  axpy(1.0, p.bias, s);
  return s;
}

double local_energy(const LocalEnergy& p, std::span<const double> features, std::span<const double> ybar) {
  require_same_length(p.num_labels(), ybar.size(), "local energy labels");
  return dot(ybar, local_scores(p, features));
}

double global_energy(const LabelEnergy& p, std::span<const double> ybar) {
  require_same_length(p.measurements.cols(), ybar.size(), "global energy labels");
  return dot(p.output, label_forward(p, ybar).last());
}

double cond_energy(const CondEnergy& p, std::span<const double> features, std::span<const double> ybar) {
  const Vector z = concat(ybar, features);
  require_same_length(p.weights.cols(), z.size(), "conditioned energy input");
  return dot(p.output, affine_forward(p.weights, p.bias, p.activation, z).second);
}

double crf_energy(const CrfEnergy& p, std::span<const double> ybar) {
  require_same_length(p.pairwise.cols(), ybar.size(), "crf energy labels");
  return dot(ybar, matvec(p.pairwise, ybar)) + dot(p.linear, ybar);
}

double total_energy(const SpenParams& p, std::span<const double> features, std::span<const double> ybar) {
  double e = local_energy(p.local, features, ybar);
  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, LabelEnergy>) e += global_energy(g, ybar);
        else if constexpr (std::is_same_v<T, CondEnergy>) e += cond_energy(g, features, ybar);
        else if constexpr (std::is_same_v<T, CrfEnergy>) e += crf_energy(g, ybar);
      },
      p.global);
  return e;
}

Vector energy_grad_y(const SpenParams& p, std::span<const double> features, std::span<const double> ybar) {
  return energy_grad_y(p, features, local_scores(p.local, features), ybar);
}

Vector energy_grad_y(const SpenParams& p, std::span<const double> features, std::span<const double> scores,
                     std::span<const double> ybar) {
  require_same_length(p.num_labels(), ybar.size(), "energy gradient labels");
  Vector grad(scores.begin(), scores.end());
  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, LabelEnergy>) {
          axpy(1.0, label_backward(g, ybar, label_forward(g, ybar), 0.0, nullptr), grad);
        } else if constexpr (std::is_same_v<T, CondEnergy>) {
          const Vector dz = cond_backward(g, concat(ybar, features), 0.0, nullptr);
          axpy(1.0, std::span<const double>(dz).first(ybar.size()), grad);
        } else if constexpr (std::is_same_v<T, CrfEnergy>) {
          axpy(1.0, crf_grad_y(g, ybar), grad);
        }
      },
      p.global);
  return grad;
}

void backprop_features(const FeatureNet& net, const FeatureTrace& trace, std::span<const double> grad_output,
                       double scale, FeatureNet& grad) {
  Vector d(grad_output.begin(), grad_output.end());
  for (std::size_t k = net.layers.size(); k-- > 0;) {
    const auto& layer = net.layers[k];
    const Vector da = hadamard(d, nonlinearity_grad(layer.activation, trace.pre[k]));
    std::span<const double> in = k == 0 ? std::span<const double>(trace.input) : trace.post[k - 1];
    add_outer(grad.layers[k].weights, scale, da, in);
    axpy(scale, da, grad.layers[k].bias);
    if (k > 0) d = matvec_transposed(layer.weights, da);
  }
}

void accumulate_energy_grad_params(const SpenParams& p, const FeatureTrace& trace, std::span<const double> ybar,
                                   double scale, SpenParams& grad, bool include_features) {
  require_same_length(p.num_labels(), ybar.size(), "energy gradient labels");
  const auto features = trace.output();
  add_outer(grad.local.weights, scale, ybar, features);
  axpy(scale, ybar, grad.local.bias);

  Vector dfeatures;
  if (include_features && !p.features.layers.empty()) dfeatures = matvec_transposed(p.local.weights, ybar);

  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, LabelEnergy>) {
          label_backward(g, ybar, label_forward(g, ybar), scale, &std::get<LabelEnergy>(grad.global));
        } else if constexpr (std::is_same_v<T, CondEnergy>) {
          const Vector dz = cond_backward(g, concat(ybar, features), scale, &std::get<CondEnergy>(grad.global));
          if (!dfeatures.empty()) axpy(1.0, std::span<const double>(dz).subspan(ybar.size()), dfeatures);
        } else if constexpr (std::is_same_v<T, CrfEnergy>) {
          auto& gc = std::get<CrfEnergy>(grad.global);
          add_outer(gc.pairwise, scale, ybar, ybar);
          zero_diagonal(gc.pairwise);
          axpy(scale, ybar, gc.linear);
        }
      },
      p.global);

  if (!dfeatures.empty()) backprop_features(p.features, trace, dfeatures, scale, grad.features);
}

SpenParams energy_grad_params(const SpenParams& p, std::span<const double> x, std::span<const double> ybar) {
  SpenParams grad = zeros_like(p);
  accumulate_energy_grad_params(p, trace_features(p.features, x), ybar, 1.0, grad);
  return grad;
}

}  // namespace spen
