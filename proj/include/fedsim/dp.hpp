#pragma once

#include "fedsim/matrix.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace fedsim::dp {

struct DpParams {
  double clip_norm = 1.0;         // Omega; may be +infinity
  double noise_multiplier = 0.0;  // sigma
  double sampling_prob = 0.0;     // q = b/n
  double delta = 1e-5;
  std::uint64_t seed = 0;
  // Clip the whole batch gradient once instead of per example. Matches the
  // training algorithm verbatim, but the accountant's sensitivity analysis
  // assumes per-example clipping, so accounting under this flag is heuristic.
  bool literal_batch_clip = false;
  void validate() const;
};

/// g / max(1, ||g||/clip_norm): output norm is min(||g||, clip_norm).
Vector clip_gradient(const Vector& g, double clip_norm);

/// (g_sum + N(0, sigma^2 clip_norm^2 I)) / batch_size, deterministic per seed.
Vector gaussian_perturb(const Vector& g_sum, double sigma, double clip_norm,
                        Index batch_size, std::uint64_t seed);

enum class AccountantMode { exact, lemma1_bound };

/// Accumulated log-moments alpha(lambda) over the integer grid
/// lambda = 1..lambda_max. Entries are +infinity where lemma1_bound cannot
/// cover the lambda (beyond the sigma^2 ln(1/(q sigma)) cap); those entries
/// are skipped by the tail-bound conversion.
struct AccountantState {
  AccountantMode mode = AccountantMode::exact;
  std::vector<double> log_moments;

  static AccountantState make(AccountantMode mode = AccountantMode::exact, int lambda_max = 64);
  int lambda_max() const { return static_cast<int>(log_moments.size()); }
};

/// Log-moment of one subsampled-Gaussian step at integer order lambda.
/// exact mode takes the max of the closed-form moment and the
/// opposite-direction moment evaluated by adaptive quadrature.
double log_moment(double q, double sigma, int lambda, AccountantMode mode);

/// log_moments[lambda] += steps * log_moment(q, sigma, lambda) over the grid.
void accumulate(AccountantState& state, double q, double sigma, long steps);

/// Element-wise sum across parties; grids and modes must match.
AccountantState compose_parties(const std::vector<AccountantState>& states);

/// epsilon = min over the grid of (alpha(lambda) + ln(1/delta)) / lambda.
double eps_from_moments(const AccountantState& state, double delta);

struct PartyMechanism {
  int party = 0;
  long steps = 0;
  double q = 0.0;
  double sigma = 0.0;
};

/// Cross-party composition by summing log-moments before conversion.
double moments_division_eps(const std::vector<PartyMechanism>& parties, double delta,
                            AccountantMode mode = AccountantMode::exact);

/// Baseline: each party gets delta/k and its own accountant; epsilons add up.
double simple_division_eps(const std::vector<PartyMechanism>& parties, double delta,
                           AccountantMode mode = AccountantMode::exact);

/// Smallest sigma (relative tolerance 1e-3) whose moments-division epsilon
/// is <= target_eps; all parties share q.
double calibrate_sigma(double target_eps, double delta, double q,
                       const std::vector<long>& steps_per_party);

struct PrivacyReport {
  enum class Method { moments_division, simple_division };
  double epsilon = 0.0;
  double delta = 0.0;
  Method method = Method::moments_division;
  std::vector<PartyMechanism> per_party;
};

struct PrivacyCurveRow {
  int k = 0;
  double eps_moments = 0.0;
  double eps_simple = 0.0;
};

/// Both methods in exact mode, k identical parties per row.
std::vector<PrivacyCurveRow> privacy_curve(double q, double sigma, long steps_per_party,
                                           double delta, const std::vector<int>& k_range);

/// CSV: header `k,eps_moments,eps_simple`, 10 significant digits.
void write_privacy_curve_csv(const std::vector<PrivacyCurveRow>& rows, std::ostream& out);

}  // namespace fedsim::dp
