#pragma once

#include "fedsim/dp.hpp"
#include "fedsim/matrix.hpp"
#include "fedsim/nn.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace fedsim::nat {

/// Fixed random unit-norm targets plus the sample-to-target bijection.
/// Target rows never change after construction; training only permutes
/// ownership.
struct TargetSet {
  Matrix targets;                 // n x d, unit-norm rows
  std::vector<Index> assignment;  // sample i owns targets.row(assignment[i])
};

TargetSet init_targets(Index n, Index d, std::uint64_t seed);

/// Exact minimum-cost assignment (Kuhn-Munkres). Ties resolve to the
/// lexicographically smallest assignment vector.
std::vector<Index> hungarian(const Matrix& cost);

/// Assignment minimizing sum_i ||reprs.row(i) - targets.row(a(i))||^2.
std::vector<Index> nat_assign_batch(const Matrix& reprs, const Matrix& batch_targets);

/// (1/2n) * squared Frobenius norm of (reprs - assigned_targets).
double nat_loss(const Matrix& reprs, const Matrix& assigned_targets);

struct NatConfig {
  Index repr_dim = 8;     // d
  int update_freq = 1;    // f, epochs between assignment refreshes
  int epochs = 0;         // T
  Index batch_size = 64;  // b
  nn::OptimizerState optimizer;
  std::uint64_t seed = 0;
};

struct NatResult {
  nn::ModelParams params;
  TargetSet targets;
  std::vector<double> epoch_loss;  // full-dataset loss; [0] before training
};

/// Trains f_theta against its assigned targets for cfg.epochs epochs.
/// On refresh epochs (t % f == 0) each batch re-solves its within-batch
/// assignment before the gradient step. A DP hook clips per-example
/// gradients and adds Gaussian noise before the optimizer step; sigma=0
/// with an infinite clip norm reduces to the plain batch gradient, and
/// that path is shared so degenerate runs match the no-hook run bitwise.
NatResult nat_train(const Matrix& x, const nn::MlpSpec& spec, const NatConfig& cfg,
                    const std::optional<dp::DpParams>& dp_hook = {});

Matrix extract_representation(const nn::MlpSpec& spec, const nn::ModelParams& params,
                              const Matrix& x);

struct PcaModel {
  RowVector mean;
  Matrix components;  // d x features, orthonormal rows, descending eigenvalue order
};

/// Top-d principal components of the centered covariance; component signs
/// normalized so the first non-negligible coordinate is positive.
PcaModel pca_fit(const Matrix& x, Index d);
Matrix pca_transform(const PcaModel& model, const Matrix& x);

}  // namespace fedsim::nat
