#pragma once

#include <span>
#include <vector>

#include "spen/data.hpp"
#include "spen/energy.hpp"
#include "spen/inference.hpp"
#include "spen/learning.hpp"

namespace spen {

/// Deep mean-field baseline: mean-field inference in a fully-connected
/// pairwise CRF, unrolled for a fixed number of iterations.
///
/// Scores are negated energies: the unary score of label i is -s_i where s_i
/// is the local energy score, and a positive pairwise[i][j] favours labels i
/// and j being on together. The pairwise matrix is symmetric with a zero
/// diagonal.
struct DmfParams {
  /// Pretrained local scorer; only its feature and local tensors are used.
  SpenParams unary_source;
  Matrix pairwise;  // L x L
  Vector unary_adjust;
  std::size_t iters = 5;
  bool clamp_unaries = true;

  std::size_t num_labels() const { return pairwise.rows(); }
  void validate() const;
};

/// Zero pairwise and adjustment terms on top of a pretrained local scorer.
DmfParams make_dmf(SpenParams unary_source, std::size_t iters = 5, bool clamp_unaries = true);

/// Unary scores C + (-local scores) for one input.
Vector dmf_unaries(const DmfParams& p, std::span<const double> x);

/// Marginals after `iters` vectorized updates: ybar <- sigmoid(A ybar - diag(A) + C),
/// starting from ybar = 0.5.
RelaxedLabels dmf_forward(const DmfParams& p, std::span<const double> x);

/// Same as dmf_forward, given precomputed unary scores.
RelaxedLabels dmf_forward_from_unaries(const DmfParams& p, std::span<const double> unaries);

/// Summed per-label logistic loss of the final marginals.
double dmf_loss(const DmfParams& p, const LabeledExample& ex);

struct DmfGradient {
  Matrix pairwise;  // symmetric, zero diagonal
  Vector unary_adjust;
  SpenParams unary_source;  // zeros unless unaries are trainable
};

/// Gradient of dmf_loss through every unrolled iteration.
DmfGradient dmf_loss_grad(const DmfParams& p, const LabeledExample& ex);

/// End-to-end maximum likelihood training of the pairwise and adjustment
/// terms (and the unary source when clamp_unaries is false). Uses
/// cfg.global_epochs epochs, cfg.lr, cfg.momentum, cfg.lr_decay and l2_global.
DmfParams dmf_train(DmfParams p, const Dataset& data, const TrainConfig& cfg, TrainingReport* report = nullptr,
                    const Dataset* dev = nullptr);

std::pair<double, double> evaluate_dmf(const DmfParams& p, const Dataset& data);

}  // namespace spen
