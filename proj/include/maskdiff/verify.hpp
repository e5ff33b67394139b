#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "maskdiff/autodiff.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/schedule.hpp"

// Independent oracles. Nothing here reuses the closed forms it is used to check.
namespace maskdiff::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0;      // the measured error or statistic
  double tolerance = 0;  // pass iff value < tolerance (or <=, as stated by the check)
  std::string detail;
};

// ---- stub networks -------------------------------------------------------

/// Returns `cond` for items with a class and `uncond` for null-class items.
template <typename T>
class ConstantEps final : public EpsModel<T> {
 public:
  ConstantEps(T cond, T uncond) : cond_(cond), uncond_(uncond) {}
  ad::Var<T> forward(ad::Tape<T>* tape, const EpsQuery<T>& q) const override;

 private:
  T cond_, uncond_;
};

/// Knows the clean signal y0 (chain space, [1,H,W], shared by every item) and
/// returns the exact noise (y_t - sqrt(abar_t) y0) / sqrt(1 - abar_t).
template <typename T>
class OracleEps final : public EpsModel<T> {
 public:
  OracleEps(const NoiseSchedule& s, Tensor<T> y0) : s_(s), y0_(std::move(y0)) {}
  ad::Var<T> forward(ad::Tape<T>* tape, const EpsQuery<T>& q) const override;

 private:
  const NoiseSchedule& s_;
  Tensor<T> y0_;
};

// ---- schedule ------------------------------------------------------------

/// Recomputes the linear betas and their running product in long double and
/// compares abar_t and the posterior variance against the schedule.
CheckResult schedule_identities(int steps, double beta_start = 1e-4, double beta_end = 0.02, double tol = 1e-12);

struct GridMoments {
  double mean = 0;
  double variance = 0;
};

/// Posterior of a scalar z with prior N(prior_mean, prior_var) after observing
/// y = a z + N(0, noise_var), by trapezoid integration on [lo, hi] with `step`.
GridMoments grid_posterior(double prior_mean, double prior_var, double a, double noise_var, double y, double lo = -8,
                           double hi = 8, double step = 1e-3);

/// Closed-form posterior against grid Bayes at `points` random (t, y_t, y0).
CheckResult posterior_oracle(const NoiseSchedule& s, std::mt19937_64& rng, int points = 10, double tol = 1e-6);

struct ChainMoment {
  int t;
  double y0;
  double mean, var;                  // empirical
  double expected_mean, expected_var;
  double z_mean, z_var;              // standardized errors
};

/// Iterated one-step noising of scalar pixels y0 in {-1, +1}; moments at each
/// requested t against the closed-form marginal.
std::vector<ChainMoment> chain_consistency(const NoiseSchedule& s, const std::vector<int>& ts, int trials,
                                           std::mt19937_64& rng);

// ---- gradients -----------------------------------------------------------

/// Relative error with a denominator floor of 1e-6.
double relative_error(double analytic, double numeric);

/// Central differences (step h) of `f` over every element of `inputs`,
/// compared with the reverse-mode gradient of the same function.
/// `f` must build its result only from the given inputs (recorded leaves or
/// constants) so the same body serves both passes.
using ScalarFn = std::function<ad::Var<double>(const std::vector<ad::Var<double>>&)>;
CheckResult gradient_check(const std::string& name, const ScalarFn& f, std::vector<Tensor<double>> inputs,
                           double h = 1e-5, double tol = 1e-4);

/// One check per autodiff primitive on random small shapes.
std::vector<CheckResult> primitive_gradient_suite(std::mt19937_64& rng, double tol = 1e-4);

/// The 8x8 network config used by the full-loss gradient check.
DenoiserConfig tiny_denoiser_config();

/// Full simple_loss of a tiny 8x8 network against finite differences over
/// `per_tensor` random entries of every parameter tensor (all entries of
/// tensors up to that size). Weights are perturbed first so no layer is zero.
CheckResult denoiser_loss_gradient(std::uint64_t seed, int per_tensor = 24, double tol = 1e-4);

/// Random 8x8 episodes matching `config`.
std::vector<Episode> random_episodes(const DenoiserConfig& config, int count, std::mt19937_64& rng);

// ---- guidance and sampler ------------------------------------------------

/// guided_eps on constant stubs equals omega a + (1 - omega) b exactly.
CheckResult guidance_linearity(std::mt19937_64& rng, int trials = 20);

/// omega = 1 sampling against conditional-only sampling with equal seeds.
CheckResult omega_one_matches_conditional(std::uint64_t seed);

/// One noise-free reverse step with the oracle stub against the posterior mean.
CheckResult oracle_reverse_step(const NoiseSchedule& s, std::mt19937_64& rng, double tol = 1e-12);

/// Every L_t of the oracle stub in exact mode.
CheckResult oracle_vub(const NoiseSchedule& s, std::mt19937_64& rng, double tol = 1e-10);

/// Everything above that runs in a few seconds.
std::vector<CheckResult> run_analytic_suites(std::uint64_t seed);

}  // namespace maskdiff::verify
