#include "maskdiff/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace maskdiff {

const char* to_string(SigmaMode mode) { return mode == SigmaMode::kPosterior ? "posterior" : "beta"; }

SigmaMode sigma_mode_from_string(const std::string& s) {
  if (s == "posterior") return SigmaMode::kPosterior;
  if (s == "beta") return SigmaMode::kBeta;
  throw std::invalid_argument("unknown sigma mode '" + s + "'");
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end, SigmaMode sigma_mode) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule endpoints must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps_ = steps;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.sigma_mode_ = sigma_mode;
  const auto n = static_cast<std::size_t>(steps);
  s.betas_.resize(n);
  s.alphas_.resize(n);
  s.alpha_bars_.resize(n + 1);
  s.posterior_variances_.resize(n);
  s.alpha_bars_[0] = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    s.betas_[i] = beta_start + (beta_end - beta_start) * frac;
    s.alphas_[i] = 1.0 - s.betas_[i];
    s.alpha_bars_[i + 1] = s.alpha_bars_[i] * s.alphas_[i];
    s.posterior_variances_[i] = (1.0 - s.alpha_bars_[i]) / (1.0 - s.alpha_bars_[i + 1]) * s.betas_[i];
  }
  return s;
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps_) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps_) + "]");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps_) {
    throw std::out_of_range("alpha_bar index " + std::to_string(t) + " outside [0, " + std::to_string(steps_) + "]");
  }
  return alpha_bars_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::sampler_variance(int t) const {
  return sigma_mode_ == SigmaMode::kPosterior ? posterior_variance(t) : beta(t);
}

template <typename T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& y0, int t, const Tensor<T>& eps) {
  require_same_shape(y0.shape(), eps.shape(), "q_sample");
  s.check_step(t);
  const double abar = s.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(abar));
  const T b = static_cast<T>(std::sqrt(1.0 - abar));
  Tensor<T> out(y0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * y0[i] + b * eps[i];
  return out;
}

template <typename T>
Posterior<T> posterior_params(const NoiseSchedule& s, const Tensor<T>& y_t, const Tensor<T>& y0, int t) {
  require_same_shape(y_t.shape(), y0.shape(), "posterior_params");
  s.check_step(t);
  const double abar_t = s.alpha_bar(t);
  const double abar_prev = s.alpha_bar(t - 1);
  const double beta = s.beta(t);
  const T coef_t = static_cast<T>(std::sqrt(s.alpha(t)) * (1.0 - abar_prev) / (1.0 - abar_t));
  const T coef_0 = static_cast<T>(std::sqrt(abar_prev) * beta / (1.0 - abar_t));
  Tensor<T> mean(y_t.shape());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = coef_t * y_t[i] + coef_0 * y0[i];
  return {std::move(mean), s.posterior_variance(t)};
}

template <typename T>
Tensor<T> mean_from_eps(const NoiseSchedule& s, const Tensor<T>& y_t, const Tensor<T>& eps, int t) {
  require_same_shape(y_t.shape(), eps.shape(), "mean_from_eps");
  const T eps_coef = static_cast<T>(s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t)));
  const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(s.alpha(t)));
  Tensor<T> out(y_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (y_t[i] - eps_coef * eps[i]);
  return out;
}

template Tensor<float> q_sample(const NoiseSchedule&, const Tensor<float>&, int, const Tensor<float>&);
template Tensor<double> q_sample(const NoiseSchedule&, const Tensor<double>&, int, const Tensor<double>&);
template Posterior<float> posterior_params(const NoiseSchedule&, const Tensor<float>&, const Tensor<float>&, int);
template Posterior<double> posterior_params(const NoiseSchedule&, const Tensor<double>&, const Tensor<double>&, int);
template Tensor<float> mean_from_eps(const NoiseSchedule&, const Tensor<float>&, const Tensor<float>&, int);
template Tensor<double> mean_from_eps(const NoiseSchedule&, const Tensor<double>&, const Tensor<double>&, int);

}  // namespace maskdiff
