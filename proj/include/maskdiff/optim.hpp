#pragma once

#include <cstdint>

#include "maskdiff/autodiff.hpp"
#include "maskdiff/denoiser.hpp"

namespace maskdiff {

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Moment buffers mirror the parameter set.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParamSet<T>& like);

  /// One update from gradients recorded on `tape` for the tensors of `params`.
  /// Parameters that received no gradient only see weight decay.
  void step(ParamSet<T>& params, const ad::Tape<T>& tape, const AdamWConfig& cfg);

  std::uint64_t steps_taken() const { return steps_; }
  ParamSet<T>& first_moment() { return m_; }
  ParamSet<T>& second_moment() { return v_; }
  const ParamSet<T>& first_moment() const { return m_; }
  const ParamSet<T>& second_moment() const { return v_; }
  void set_steps_taken(std::uint64_t n) { steps_ = n; }

 private:
  ParamSet<T> m_;
  ParamSet<T> v_;
  std::uint64_t steps_ = 0;
};

}  // namespace maskdiff
