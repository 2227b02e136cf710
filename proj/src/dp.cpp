#include "fedsim/dp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace fedsim::dp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

double log_binom(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// ln E_{z~N(0,s^2)}[(mu1/mu0)^lambda] with mu1 = (1-q)N(0,s^2) + qN(1,s^2):
// binomial expansion, evaluated in log space.
double log_moment_closed_form(double q, double sigma, int lambda) {
  double acc = -kInf;
  for (int i = 0; i <= lambda; ++i) {
    if (i > 0 && q == 0.0) break;
    double term = log_binom(lambda, i) + (lambda - i) * std::log1p(-q) +
                  (i > 0 ? i * std::log(q) : 0.0) +
                  i * (i - 1.0) / (2.0 * sigma * sigma);
    acc = log_add(acc, term);
  }
  return std::max(acc, 0.0);
}

// Integrand of the opposite-direction moment in unit-variance coordinates:
// N(0,1)(u) * (mu0/mu1)(sigma*u)^lambda.
double opposite_integrand(double u, double q, double sigma, int lambda) {
  const double z = sigma * u;
  const double log_gauss = -0.5 * u * u - 0.5 * std::log(2.0 * M_PI);
  const double shift = (2.0 * z - 1.0) / (2.0 * sigma * sigma);
  const double log_ratio_inv = log_add(std::log1p(-q), std::log(q) + shift);  // ln(mu1/mu0)
  return std::exp(log_gauss - lambda * log_ratio_inv);
}

double simpson(double fa, double fm, double fb, double h) {
  return h / 6.0 * (fa + 4.0 * fm + fb);
}

double adaptive_simpson(double a, double b, double fa, double fm, double fb, double whole,
                        double tol, int depth, double q, double sigma, int lambda) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = opposite_integrand(lm, q, sigma, lambda);
  const double frm = opposite_integrand(rm, q, sigma, lambda);
  const double left = simpson(fa, flm, fm, m - a);
  const double right = simpson(fm, frm, fb, b - m);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol) {
    return left + right + (left + right - whole) / 15.0;
  }
  return adaptive_simpson(a, m, fa, flm, fm, left, tol / 2.0, depth - 1, q, sigma, lambda) +
         adaptive_simpson(m, b, fm, frm, fb, right, tol / 2.0, depth - 1, q, sigma, lambda);
}

// ln E_{z~mu0}[(mu0/mu1)^lambda] by adaptive Simpson quadrature over the
// Gaussian's support (the ratio is bounded by 1/(1-q), so the tails carry
// nothing).
double log_moment_opposite(double q, double sigma, int lambda) {
  const double lo = -14.0, hi = 14.0;
  double total = 0.0;
  const int panels = 64;
  const double width = (hi - lo) / panels;
  for (int p = 0; p < panels; ++p) {
    const double a = lo + p * width;
    const double b = a + width;
    const double m = 0.5 * (a + b);
    const double fa = opposite_integrand(a, q, sigma, lambda);
    const double fm = opposite_integrand(m, q, sigma, lambda);
    const double fb = opposite_integrand(b, q, sigma, lambda);
    const double whole = simpson(fa, fm, fb, width);
    total += adaptive_simpson(a, b, fa, fm, fb, whole, 1e-13 / panels, 24, q, sigma, lambda);
  }
  return std::max(std::log(total), 0.0);
}

void check_state(const AccountantState& state) {
  require(!state.log_moments.empty(), "accountant grid is empty");
}

AccountantState accumulate_party(const PartyMechanism& p, AccountantMode mode, int lambda_max) {
  AccountantState s = AccountantState::make(mode, lambda_max);
  accumulate(s, p.q, p.sigma, p.steps);
  return s;
}

}  // namespace

void DpParams::validate() const {
  require(clip_norm > 0.0, "clip_norm must be positive");
  require(noise_multiplier >= 0.0, "noise_multiplier must be non-negative");
  require(sampling_prob >= 0.0 && sampling_prob <= 1.0, "sampling_prob must lie in [0,1]");
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0,1)");
  require(!(noise_multiplier > 0.0 && std::isinf(clip_norm)),
          "noise needs a finite clip norm");
}

Vector clip_gradient(const Vector& g, double clip_norm) {
  require(clip_norm > 0.0, "clip_norm must be positive");
  if (!g.allFinite()) throw std::runtime_error("clip_gradient: non-finite input");
  const double norm = g.norm();
  return g / std::max(1.0, norm / clip_norm);
}

Vector gaussian_perturb(const Vector& g_sum, double sigma, double clip_norm,
                        Index batch_size, std::uint64_t seed) {
  require(batch_size >= 1, "gaussian_perturb: batch_size must be >= 1");
  require(sigma >= 0.0, "gaussian_perturb: sigma must be non-negative");
  Vector out = g_sum;
  const double stddev = sigma * clip_norm;
  if (stddev > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, stddev);
    for (Index i = 0; i < out.size(); ++i) out[i] += noise(rng);
  }
  return out / static_cast<double>(batch_size);
}

AccountantState AccountantState::make(AccountantMode mode, int lambda_max) {
  require(lambda_max >= 1, "lambda_max must be >= 1");
  AccountantState s;
  s.mode = mode;
  s.log_moments.assign(static_cast<std::size_t>(lambda_max), 0.0);
  return s;
}

double log_moment(double q, double sigma, int lambda, AccountantMode mode) {
  require(lambda >= 1, "lambda must be a positive integer");
  require(q >= 0.0 && q < 1.0, "q must lie in [0,1)");
  require(sigma >= 0.0, "sigma must be non-negative");
  if (q == 0.0) return 0.0;
  if (sigma == 0.0) throw std::runtime_error("log_moment: sigma=0 with q>0 has infinite loss");

  if (mode == AccountantMode::lemma1_bound) {
    const double cap = sigma * sigma * std::log(1.0 / (q * sigma));
    if (static_cast<double>(lambda) > cap) return kInf;
    return q * q * lambda * (lambda + 1.0) / ((1.0 - q) * sigma * sigma);
  }
  return std::max(log_moment_closed_form(q, sigma, lambda),
                  log_moment_opposite(q, sigma, lambda));
}

void accumulate(AccountantState& state, double q, double sigma, long steps) {
  check_state(state);
  require(steps >= 0, "steps must be non-negative");
  if (steps == 0) return;
  for (int lambda = 1; lambda <= state.lambda_max(); ++lambda) {
    double a = log_moment(q, sigma, lambda, state.mode);
    auto& slot = state.log_moments[static_cast<std::size_t>(lambda - 1)];
    slot = std::isinf(a) ? kInf : slot + static_cast<double>(steps) * a;
  }
}

AccountantState compose_parties(const std::vector<AccountantState>& states) {
  require(!states.empty(), "compose_parties: no states");
  AccountantState out = states.front();
  check_state(out);
  for (std::size_t i = 1; i < states.size(); ++i) {
    const auto& s = states[i];
    require(s.mode == out.mode, "compose_parties: accountant modes differ");
    require(s.log_moments.size() == out.log_moments.size(),
            "compose_parties: lambda grids differ");
    for (std::size_t j = 0; j < out.log_moments.size(); ++j)
      out.log_moments[j] += s.log_moments[j];
  }
  return out;
}

double eps_from_moments(const AccountantState& state, double delta) {
  check_state(state);
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0,1)");
  const double log_inv_delta = std::log(1.0 / delta);
  double best = kInf;
  for (int lambda = 1; lambda <= state.lambda_max(); ++lambda) {
    const double a = state.log_moments[static_cast<std::size_t>(lambda - 1)];
    if (std::isinf(a)) continue;
    best = std::min(best, (a + log_inv_delta) / static_cast<double>(lambda));
  }
  if (std::isinf(best))
    throw std::runtime_error("eps_from_moments: no usable lambda in the grid");
  return best;
}

double moments_division_eps(const std::vector<PartyMechanism>& parties, double delta,
                            AccountantMode mode) {
  require(!parties.empty(), "moments_division_eps: no parties");
  AccountantState total = AccountantState::make(mode);
  for (const auto& p : parties) accumulate(total, p.q, p.sigma, p.steps);
  return eps_from_moments(total, delta);
}

double simple_division_eps(const std::vector<PartyMechanism>& parties, double delta,
                           AccountantMode mode) {
  require(!parties.empty(), "simple_division_eps: no parties");
  const double delta_each = delta / static_cast<double>(parties.size());
  double total = 0.0;
  for (const auto& p : parties)
    total += eps_from_moments(accumulate_party(p, mode, 64), delta_each);
  return total;
}

double calibrate_sigma(double target_eps, double delta, double q,
                       const std::vector<long>& steps_per_party) {
  require(target_eps > 0.0, "target epsilon must be positive");
  require(!steps_per_party.empty(), "steps_per_party must be non-empty");
  auto eps_at = [&](double sigma) {
    std::vector<PartyMechanism> parties;
    for (std::size_t j = 0; j < steps_per_party.size(); ++j)
      parties.push_back({static_cast<int>(j + 1), steps_per_party[j], q, sigma});
    return moments_division_eps(parties, delta, AccountantMode::exact);
  };
  if (q == 0.0) return 0.0;

  double lo = 0.0, hi = 1.0;
  while (eps_at(hi) > target_eps) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e6)
      throw std::runtime_error("calibrate_sigma: target unreachable below sigma=1e6");
  }
  if (lo == 0.0) {
    lo = hi / 2.0;
    while (eps_at(lo) <= target_eps) {
      hi = lo;
      lo /= 2.0;
      if (lo < 1e-12) return hi;
    }
  }
  while (hi - lo > 1e-3 * hi) {
    const double mid = 0.5 * (lo + hi);
    (eps_at(mid) <= target_eps ? hi : lo) = mid;
  }
  return hi;
}

std::vector<PrivacyCurveRow> privacy_curve(double q, double sigma, long steps_per_party,
                                           double delta, const std::vector<int>& k_range) {
  require(!k_range.empty(), "privacy_curve: empty k range");
  // Per-step moments are shared by every row; accumulate the grid once.
  AccountantState one_step = AccountantState::make(AccountantMode::exact);
  accumulate(one_step, q, sigma, 1);

  std::vector<PrivacyCurveRow> rows;
  for (int k : k_range) {
    require(k >= 1, "privacy_curve: k must be >= 1");
    AccountantState party = one_step;
    for (auto& a : party.log_moments) a *= static_cast<double>(steps_per_party);
    AccountantState all = party;
    for (auto& a : all.log_moments) a *= static_cast<double>(k);
    const double eps_m = eps_from_moments(all, delta);
    const double eps_s =
        static_cast<double>(k) * eps_from_moments(party, delta / static_cast<double>(k));
    rows.push_back({k, eps_m, eps_s});
  }
  return rows;
}

void write_privacy_curve_csv(const std::vector<PrivacyCurveRow>& rows, std::ostream& out) {
  out << "k,eps_moments,eps_simple\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g\n", r.k, r.eps_moments, r.eps_simple);
    out << buf;
  }
}

}  // namespace fedsim::dp
