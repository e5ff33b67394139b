#include "maskdiff/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace maskdiff {

template <typename T>
AdamW<T>::AdamW(const ParamSet<T>& like) {
  for (const auto& e : like) {
    m_.add(e.name, Tensor<T>(e.value.shape()));
    v_.add(e.name, Tensor<T>(e.value.shape()));
  }
}

template <typename T>
void AdamW<T>::step(ParamSet<T>& params, const ad::Tape<T>& tape, const AdamWConfig& cfg) {
  if (!m_.same_structure(params)) throw std::logic_error("optimizer state does not match parameter set");
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps_));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T decay = static_cast<T>(1.0 - cfg.learning_rate * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(cfg.learning_rate / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i].value;
    if (lr == T{0}) continue;
    const Tensor<T>* g = tape.grad_of(p);
    for (std::size_t j = 0; j < p.size(); ++j) p[j] *= decay;
    if (!g) continue;
    T* m = m_[i].value.data();
    T* v = v_[i].value.data();
    const T* gd = g->data();
    T* pd = p.data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * gd[j];
      v[j] = b2 * v[j] + (T{1} - b2) * gd[j] * gd[j];
      pd[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace maskdiff
