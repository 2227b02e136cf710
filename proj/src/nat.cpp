#include "fedsim/nat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedsim::nat {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct KmSolution {
  std::vector<Index> row_to_col;
  std::vector<double> u, v;  // optimal dual potentials, 0-based
};

// Shortest augmenting path variant; O(n^3).
KmSolution solve_km(const Matrix& cost) {
  const Index n = cost.rows();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<Index> p(n + 1, 0), way(n + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = p[j0];
      Index j1 = 0;
      double delta = kInf;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  KmSolution sol;
  sol.row_to_col.assign(n, -1);
  for (Index j = 1; j <= n; ++j)
    if (p[j]) sol.row_to_col[p[j] - 1] = j - 1;
  sol.u.assign(n, 0.0);
  sol.v.assign(n, 0.0);
  for (Index i = 0; i < n; ++i) sol.u[i] = u[i + 1];
  for (Index j = 0; j < n; ++j) sol.v[j] = v[j + 1];
  return sol;
}

bool kuhn_augment(Index row, const std::vector<std::vector<Index>>& adj,
                  const std::vector<char>& col_blocked, std::vector<Index>& col_match,
                  std::vector<char>& visited) {
  for (Index j : adj[static_cast<std::size_t>(row)]) {
    if (col_blocked[static_cast<std::size_t>(j)] || visited[static_cast<std::size_t>(j)]) continue;
    visited[static_cast<std::size_t>(j)] = 1;
    if (col_match[static_cast<std::size_t>(j)] < 0 ||
        kuhn_augment(col_match[static_cast<std::size_t>(j)], adj, col_blocked, col_match, visited)) {
      col_match[static_cast<std::size_t>(j)] = row;
      return true;
    }
  }
  return false;
}

// Whether rows [first_row, n) can be perfectly matched into unblocked columns.
bool rows_matchable(Index first_row, const std::vector<std::vector<Index>>& adj,
                    const std::vector<char>& col_blocked, Index n) {
  std::vector<Index> col_match(static_cast<std::size_t>(n), -1);
  std::vector<char> visited(static_cast<std::size_t>(n));
  for (Index r = first_row; r < n; ++r) {
    std::fill(visited.begin(), visited.end(), 0);
    if (!kuhn_augment(r, adj, col_blocked, col_match, visited)) return false;
  }
  return true;
}

double assignment_cost(const Matrix& cost, const std::vector<Index>& assign) {
  double total = 0.0;
  for (Index i = 0; i < cost.rows(); ++i)
    total += cost(i, assign[static_cast<std::size_t>(i)]);
  return total;
}

}  // namespace

std::vector<Index> hungarian(const Matrix& cost) {
  const Index n = cost.rows();
  require(n >= 1 && cost.cols() == n, "hungarian: cost matrix must be square and non-empty");
  if (!cost.allFinite()) throw std::invalid_argument("hungarian: non-finite cost entries");

  KmSolution sol = solve_km(cost);

  // Every optimal assignment lives on the tight edges of the optimal duals
  // (complementary slackness); pick the lexicographically smallest perfect
  // matching among them.
  const double tol = 1e-9 * std::max(1.0, cost.cwiseAbs().maxCoeff());
  std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (cost(i, j) - sol.u[static_cast<std::size_t>(i)] - sol.v[static_cast<std::size_t>(j)] <= tol)
        adj[static_cast<std::size_t>(i)].push_back(j);

  std::vector<Index> lex(static_cast<std::size_t>(n), -1);
  std::vector<char> blocked(static_cast<std::size_t>(n), 0);
  bool complete = true;
  for (Index i = 0; i < n && complete; ++i) {
    complete = false;
    for (Index j : adj[static_cast<std::size_t>(i)]) {
      if (blocked[static_cast<std::size_t>(j)]) continue;
      blocked[static_cast<std::size_t>(j)] = 1;
      if (rows_matchable(i + 1, adj, blocked, n)) {
        lex[static_cast<std::size_t>(i)] = j;
        complete = true;
        break;
      }
      blocked[static_cast<std::size_t>(j)] = 0;
    }
  }

  // Guard against tolerance wobble: never return a strictly worse total than
  // the plain solver found.
  if (complete && assignment_cost(cost, lex) <= assignment_cost(cost, sol.row_to_col)) return lex;
  return sol.row_to_col;
}

TargetSet init_targets(Index n, Index d, std::uint64_t seed) {
  require(n >= 1 && d >= 1, "init_targets: n and d must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  TargetSet ts;
  ts.targets.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) ts.targets(i, j) = gauss(rng);
    const double norm = ts.targets.row(i).norm();
    if (norm < 1e-12) {
      ts.targets.row(i).setZero();
      ts.targets(i, 0) = 1.0;
    } else {
      ts.targets.row(i) /= norm;
    }
  }
  ts.assignment.resize(static_cast<std::size_t>(n));
  std::iota(ts.assignment.begin(), ts.assignment.end(), Index{0});
  return ts;
}

std::vector<Index> nat_assign_batch(const Matrix& reprs, const Matrix& batch_targets) {
  require(reprs.rows() == batch_targets.rows() && reprs.cols() == batch_targets.cols(),
          "nat_assign_batch: shape mismatch");
  const Index b = reprs.rows();
  Matrix cost(b, b);
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < b; ++j)
      cost(i, j) = (reprs.row(i) - batch_targets.row(j)).squaredNorm();
  return hungarian(cost);
}

double nat_loss(const Matrix& reprs, const Matrix& assigned_targets) {
  require(reprs.rows() == assigned_targets.rows() && reprs.cols() == assigned_targets.cols(),
          "nat_loss: shape mismatch");
  require(reprs.rows() >= 1, "nat_loss: empty input");
  return (reprs - assigned_targets).squaredNorm() / (2.0 * static_cast<double>(reprs.rows()));
}

Matrix extract_representation(const nn::MlpSpec& spec, const nn::ModelParams& params,
                              const Matrix& x) {
  return nn::mlp_forward(spec, params, x).back();
}

NatResult nat_train(const Matrix& x, const nn::MlpSpec& spec, const NatConfig& cfg,
                    const std::optional<dp::DpParams>& dp_hook) {
  spec.validate();
  const Index n = x.rows();
  require(n >= 1, "nat_train: empty dataset");
  require(spec.input_size() == x.cols(), "nat_train: input width does not match spec");
  require(spec.output_size() == cfg.repr_dim, "nat_train: spec output size must equal repr_dim");
  require(cfg.update_freq >= 1, "nat_train: update_freq must be >= 1");
  require(cfg.epochs >= 0, "nat_train: epochs must be >= 0");
  require(cfg.batch_size >= 1 && cfg.batch_size <= n,
          "nat_train: batch_size must lie in [1, n]");
  if (dp_hook) dp_hook->validate();
  const bool dp_active = dp_hook && !(dp_hook->noise_multiplier == 0.0 && std::isinf(dp_hook->clip_norm));

  NatResult res;
  res.params = nn::init_params(spec, derive_seed(cfg.seed, 1));
  res.targets = init_targets(n, cfg.repr_dim, derive_seed(cfg.seed, 2));
  Rng shuffle_rng(derive_seed(cfg.seed, 3));
  const std::uint64_t noise_base = derive_seed(cfg.seed, 4);
  nn::OptimizerState opt = cfg.optimizer;

  auto owned_targets = [&](const std::vector<Index>& rows) {
    Matrix t(static_cast<Index>(rows.size()), cfg.repr_dim);
    for (Index i = 0; i < t.rows(); ++i)
      t.row(i) = res.targets.targets.row(res.targets.assignment[static_cast<std::size_t>(
          rows[static_cast<std::size_t>(i)])]);
    return t;
  };
  auto full_loss = [&] {
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    return nat_loss(extract_representation(spec, res.params, x), owned_targets(all));
  };

  res.epoch_loss.push_back(full_loss());
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool refresh = (epoch % cfg.update_freq == 0);
    for (const auto& batch : epoch_batches(n, cfg.batch_size, shuffle_rng)) {
      const Matrix xb = take_rows(x, batch);
      nn::Activations acts = nn::mlp_forward(spec, res.params, xb);
      if (refresh) {
        const std::vector<Index> perm = nat_assign_batch(acts.back(), owned_targets(batch));
        std::vector<Index> old(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i)
          old[i] = res.targets.assignment[static_cast<std::size_t>(batch[i])];
        for (std::size_t i = 0; i < batch.size(); ++i)
          res.targets.assignment[static_cast<std::size_t>(batch[i])] =
              old[static_cast<std::size_t>(perm[i])];
      }
      const Matrix tb = owned_targets(batch);
      nn::ParamGrads grads;
      if (dp_active) {
        if (dp_hook->literal_batch_clip) {
          const Matrix dpred = nn::loss_and_grad(nn::LossKind::mse, acts.back(), tb).second;
          Vector flat = nn::flatten(nn::mlp_backward(spec, res.params, acts, dpred).grads);
          Vector noisy = dp::gaussian_perturb(dp::clip_gradient(flat, dp_hook->clip_norm),
                                              dp_hook->noise_multiplier, dp_hook->clip_norm, 1,
                                              derive_seed(noise_base, static_cast<std::uint64_t>(step)));
          grads = nn::unflatten(spec, noisy);
        } else {
          Vector sum = Vector::Zero(nn::param_count(spec));
          for (const auto& g : nn::per_example_grads(spec, res.params, xb, tb, nn::LossKind::mse))
            sum += dp::clip_gradient(nn::flatten(g), dp_hook->clip_norm);
          Vector noisy = dp::gaussian_perturb(sum, dp_hook->noise_multiplier, dp_hook->clip_norm,
                                              static_cast<Index>(batch.size()),
                                              derive_seed(noise_base, static_cast<std::uint64_t>(step)));
          grads = nn::unflatten(spec, noisy);
        }
      } else {
        const Matrix dpred = nn::loss_and_grad(nn::LossKind::mse, acts.back(), tb).second;
        grads = nn::mlp_backward(spec, res.params, acts, dpred).grads;
      }
      nn::optimizer_step(res.params, grads, opt);
      ++step;
    }
    res.epoch_loss.push_back(full_loss());
  }
  return res;
}

PcaModel pca_fit(const Matrix& x, Index d) {
  const Index n = x.rows();
  const Index m = x.cols();
  require(n >= 1 && m >= 1, "pca_fit: empty input");
  require(d >= 1 && d <= std::min(n, m), "pca_fit: d must lie in [1, min(n, features)]");

  PcaModel model;
  model.mean = x.colwise().mean();
  Matrix centered = x.rowwise() - model.mean;
  Matrix cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(n - 1));

  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("pca_fit: eigendecomposition failed");

  // Eigenvalues come out ascending; take the top d in descending order.
  model.components.resize(d, m);
  for (Index c = 0; c < d; ++c) {
    RowVector comp = solver.eigenvectors().col(m - 1 - c).transpose();
    for (Index j = 0; j < m; ++j) {
      if (std::abs(comp(j)) > 1e-12) {
        if (comp(j) < 0.0) comp = -comp;
        break;
      }
    }
    model.components.row(c) = comp;
  }
  return model;
}

Matrix pca_transform(const PcaModel& model, const Matrix& x) {
  require(x.cols() == model.mean.size(), "pca_transform: feature width mismatch");
  return (x.rowwise() - model.mean) * model.components.transpose();
}

}  // namespace fedsim::nat
