#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "maskdiff/autodiff.hpp"
#include "maskdiff/tensor.hpp"
#include "json.hpp"

namespace maskdiff {

struct DenoiserConfig {
  int image_size = 32;
  int image_channels = 1;  // C of the region image
  int shots = 1;           // K
  int num_classes = 8;     // N
  int base_channels = 32;
  std::vector<int> channel_multipliers{1, 2, 2};
  int res_blocks_down = 2;
  int res_blocks_up = 3;
  std::vector<int> attention_resolutions{8};
  int time_embed_dim = 128;
  int norm_groups = 8;
  bool class_conditional = true;

  /// y_t, x and the K supports stacked along channels.
  int input_channels() const { return 1 + image_channels + shots * image_channels; }
  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Ordered, name-addressable collection of parameter tensors.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(std::string name, Tensor<T> value);
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  NamedTensor<T>& operator[](std::size_t i) { return entries_[i]; }
  const NamedTensor<T>& operator[](std::size_t i) const { return entries_[i]; }

  /// Same names, order and shapes.
  bool same_structure(const ParamSet& other) const;
  bool all_finite() const;
  bool operator==(const ParamSet& other) const;

 private:
  std::vector<NamedTensor<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Live weights plus their exponential-moving-average shadow.
template <typename T>
struct DenoiserParams {
  ParamSet<T> live;
  ParamSet<T> ema;
};

/// Fresh parameters: uniform(+-1/sqrt(fan_in)) for weights, unit/zero norm
/// affines, N(0,1) class rows, and zeros on every layer that closes a residual
/// branch and on the output convolution.
template <typename T>
DenoiserParams<T> init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

/// shadow <- rate * shadow + (1 - rate) * live, per parameter.
template <typename T>
void ema_update(DenoiserParams<T>& params, double rate);

/// Class index meaning "no class": routes the null embedding row.
inline constexpr int kNullClass = -1;

/// One batched query to an epsilon predictor.
template <typename T>
struct EpsQuery {
  Tensor<T> y_t;              // [B,1,H,W]
  Tensor<T> x;                // [B,C,H,W]
  Tensor<T> k;                // [B,K*C,H,W]
  std::vector<int> classes;   // per item, kNullClass for the unconditional pass
  std::vector<int> steps;     // per item diffusion step t >= 1

  std::size_t batch() const { return classes.size(); }
};

/// Anything that maps a noisy mask plus conditioning to an epsilon estimate.
/// With a null tape the call records nothing and is safe for concurrent use.
template <typename T>
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual ad::Var<T> forward(ad::Tape<T>* tape, const EpsQuery<T>& query) const = 0;
  Tensor<T> predict(const EpsQuery<T>& query) const { return forward(nullptr, query).value(); }
};

/// The UNet epsilon predictor over a given parameter set (live or EMA).
template <typename T>
class Denoiser final : public EpsModel<T> {
 public:
  Denoiser(const DenoiserConfig& config, const ParamSet<T>& params) : config_(config), params_(params) {}

  ad::Var<T> forward(ad::Tape<T>* tape, const EpsQuery<T>& query) const override;
  const DenoiserConfig& config() const { return config_; }

 private:
  const DenoiserConfig& config_;
  const ParamSet<T>& params_;
};

/// Single-instance convenience: y_t [1,H,W], x [C,H,W], k [K*C,H,W] -> eps [1,H,W].
template <typename T>
Tensor<T> predict_eps(const DenoiserConfig& config, const ParamSet<T>& params, const Tensor<T>& y_t,
                      const Tensor<T>& x, const Tensor<T>& k, std::optional<int> cls, int t);

/// [sin(t f_i), cos(t f_i)] with f_i = 10000^(-i/half).
std::vector<double> timestep_embedding(int t, int dim);

/// Reorders the K support blocks of k ([B,K*C,H,W]) by `order`.
template <typename T>
Tensor<T> permute_shots(const Tensor<T>& k, int shots, const std::vector<int>& order);

/// Max |eps(k) - eps(permuted k)| over `trials` random shot permutations.
/// Reported only: channel concatenation is not permutation invariant.
template <typename T>
double permutation_sensitivity(const EpsModel<T>& model, const EpsQuery<T>& query, int shots, int trials,
                               std::mt19937_64& rng);

}  // namespace maskdiff
