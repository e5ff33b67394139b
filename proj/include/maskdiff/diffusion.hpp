#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/autodiff.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/episode.hpp"
#include "maskdiff/optim.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double weight_decay = 0.01;
  int batch_size = 8;
  int steps = 1000;
  double ema_rate = 0.9999;
  /// Caps the EMA rate at (1 + n) / (10 + n) for the n-th step of a run.
  bool ema_warmup = true;
  double uncond_dropout_prob = 0.1;
  int log_every = 50;

  void validate() const;
  AdamWConfig optimizer() const { return {learning_rate, adam_beta1, adam_beta2, 1e-8, weight_decay}; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct SamplerConfig {
  double omega = 5.0;
  /// false: conditional pass only, no null-class mixing.
  bool guided = true;
  double binarize_threshold = 0.5;
  std::uint64_t seed = 0;
  /// 0 means the schedule length; any other value must equal it.
  int steps = 0;

  void validate(const NoiseSchedule& s) const;
};

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);

/// Maps {0,1} masks to {-1,+1} chain space.
template <typename T>
Tensor<T> encode_mask(const Tensor<float>& mask01);

/// Stacks episodes into a batched query with the given steps and classes.
template <typename T>
EpsQuery<T> make_query(std::span<const Episode> batch, Tensor<T> y_t, std::vector<int> classes, std::vector<int> steps);

template <typename T>
struct LossSample {
  ad::Var<T> loss;
  std::vector<int> steps;
  std::vector<int> classes;
};

/// Mean over batch and pixels of ||eps - eps_theta(sqrt(abar_t) y0 + sqrt(1 - abar_t) eps, x, k, c, t)||^2
/// with t ~ U{1..T}, eps ~ N(0, I), and c replaced by the null class with
/// probability `uncond_prob`.
template <typename T>
LossSample<T> simple_loss(ad::Tape<T>* tape, const EpsModel<T>& model, const NoiseSchedule& s,
                          std::span<const Episode> batch, double uncond_prob, std::mt19937_64& rng);

/// omega * eps(c) + (1 - omega) * eps(null).
template <typename T>
Tensor<T> guided_eps(const EpsModel<T>& model, const EpsQuery<T>& query, double omega);

template <typename T>
struct SampleResult {
  Tensor<T> continuous;     // [B,1,H,W] final y_0 in chain space
  Tensor<float> masks;      // [B,1,H,W] in {0,1}
  std::vector<std::pair<int, Tensor<T>>> snapshots;  // (t, y_t) when requested
};

/// Value >= threshold after mapping chain space [-1,1] to [0,1] becomes 1.
float binarize(double chain_value, double threshold);

/// Ancestral sampling from y_T ~ N(0, I) down to y_0 for a batch of
/// conditioning inputs. Item i draws all of its noise from a private stream
/// seeded by (config.seed, stream_ids[i]), so the noise an item sees does not
/// depend on how items are batched.
template <typename T>
SampleResult<T> sample_masks(const EpsModel<T>& model, const NoiseSchedule& s, std::span<const Episode> conditioning,
                             const std::vector<std::uint64_t>& stream_ids, const SamplerConfig& config,
                             int snapshot_every = 0);

/// As sample_masks, with item i drawing from `streams[i]` (consumed in place).
template <typename T>
SampleResult<T> sample_masks_with_streams(const EpsModel<T>& model, const NoiseSchedule& s,
                                          std::span<const Episode> conditioning, std::vector<std::mt19937_64>& streams,
                                          const SamplerConfig& config, int snapshot_every = 0);

/// Reverse steps t = from, from-1, ..., to, with `y_from` taken as y_{from}.
/// `noise(t)` supplies the [B,1,H,W] draw for steps t > 1; the t = 1 step adds
/// none. `on_step(t, y_{t-1})` observes each new state when set.
template <typename T>
Tensor<T> reverse_steps(const EpsModel<T>& model, const NoiseSchedule& s, const EpsQuery<T>& conditioning,
                        Tensor<T> y_from, int from, int to, const SamplerConfig& config,
                        const std::function<Tensor<T>(int)>& noise,
                        const std::function<void(int, const Tensor<T>&)>& on_step = {});

/// KL(N(mu1, var1) || N(mu2, var2)) for scalars.
double gaussian_kl(double mu1, double var1, double mu2, double var2);

struct VubOptions {
  /// Evaluate L_t for t = 1, 1 + stride, ... and scale the sum by the stride.
  int stride = 10;
  bool exact = false;
  double omega = 1.0;
};

struct VubTerms {
  double l_T = 0;
  std::vector<std::pair<int, double>> l_t;  // (t, L_t) for the evaluated steps
  double sum_l_t = 0;                       // exact sum or stride-scaled estimate
  double l_0 = 0;
  std::size_t pixels = 0;
};

/// Variational-bound decomposition for a single episode; every L_t draws its
/// y_{t+1} ~ q(y_{t+1} | y0) from `rng`. No gradients.
template <typename T>
VubTerms vub_terms(const EpsModel<T>& model, const NoiseSchedule& s, const Episode& episode, std::mt19937_64& rng,
                   const VubOptions& options = {});

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mutable training state; checkpoints wrap it with schedule and metadata.
template <typename T>
struct TrainState {
  DenoiserConfig config;
  DenoiserParams<T> params;
  AdamW<T> optimizer;
  std::uint64_t step = 0;
};

using BatchSource = std::function<std::vector<Episode>(std::mt19937_64& rng)>;
using TrainLogger = std::function<void(const nlohmann::json& event)>;

struct TrainReport {
  std::vector<double> losses;
};

/// AdamW steps on simple_loss with an EMA update after each step.
template <typename T>
TrainReport train(TrainState<T>& state, const NoiseSchedule& s, const BatchSource& source, const TrainConfig& config,
                  std::uint64_t seed, const TrainLogger& log = {});

/// Moving average over `window` trailing values.
std::vector<double> smooth(const std::vector<double>& values, std::size_t window);

}  // namespace maskdiff
