#pragma once

#include <span>
#include <utility>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

/// Which variance the reverse sampler injects at step t.
enum class SigmaMode { kPosterior, kBeta };

const char* to_string(SigmaMode mode);
SigmaMode sigma_mode_from_string(const std::string& s);

/// Linear variance schedule of the diffusion chain.
///
/// Steps are 1-indexed: valid t run from 1 to T. Index 0 of the cumulative
/// product holds abar_0 = 1 so the first posterior variance is defined (and 0).
/// All arrays are double precision irrespective of network precision.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps, double beta_start, double beta_end,
                              SigmaMode sigma_mode = SigmaMode::kPosterior);

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  SigmaMode sigma_mode() const { return sigma_mode_; }

  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return alphas_[index(t)]; }
  /// Valid for 0 <= t <= T.
  double alpha_bar(int t) const;
  double posterior_variance(int t) const { return posterior_variances_[index(t)]; }
  /// sigma_t^2 used by the ancestral sampler.
  double sampler_variance(int t) const;

  std::span<const double> betas() const { return betas_; }
  std::span<const double> alphas() const { return alphas_; }
  /// abar_0..abar_T (length T + 1).
  std::span<const double> alpha_bars() const { return alpha_bars_; }
  std::span<const double> posterior_variances() const { return posterior_variances_; }

  void check_step(int t) const;

 private:
  NoiseSchedule() = default;
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }

  int steps_ = 0;
  double beta_start_ = 0;
  double beta_end_ = 0;
  SigmaMode sigma_mode_ = SigmaMode::kPosterior;
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  std::vector<double> posterior_variances_;
};

/// sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps.
template <typename T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& y0, int t, const Tensor<T>& eps);

template <typename T>
struct Posterior {
  Tensor<T> mean;
  double variance;
};

/// Mean and variance of q(y_{t-1} | y_t, y0).
template <typename T>
Posterior<T> posterior_params(const NoiseSchedule& s, const Tensor<T>& y_t, const Tensor<T>& y0, int t);

/// Reverse-step mean from an epsilon estimate:
/// (y_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t).
template <typename T>
Tensor<T> mean_from_eps(const NoiseSchedule& s, const Tensor<T>& y_t, const Tensor<T>& eps, int t);

}  // namespace maskdiff
