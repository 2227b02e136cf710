#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace fedsim {

// Row-major 64-bit matrices everywhere: rows are samples, columns are
// features/units. Row-major keeps serialized layouts and per-row slicing
// trivial.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

using Rng = std::mt19937_64;

/// Derives an independent seed for a named substream of `seed`
/// (splitmix64 over seed+tag), so parallel consumers never share a stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Gathers the given rows of `x` into a new matrix.
inline Matrix take_rows(const Matrix& x, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (Index i = 0; i < out.rows(); ++i) out.row(i) = x.row(rows[static_cast<std::size_t>(i)]);
  return out;
}

/// One epoch worth of batches: indices [0,n) shuffled with `rng`, cut into
/// consecutive slices of `batch_size`; the final partial batch is kept.
inline std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, Rng& rng) {
  require(n >= 1 && batch_size >= 1, "epoch_batches: n and batch_size must be >= 1");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < n; start += batch_size) {
    Index stop = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return batches;
}

}  // namespace fedsim
