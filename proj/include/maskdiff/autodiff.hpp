#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff::ad {

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  Tape<T>* tape = nullptr;  // null for detached values
  std::function<void()> backward;

  bool recorded() const { return tape != nullptr; }
  T* grad_data() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad.data();
  }
};

/// Handle to a value that may participate in reverse-mode differentiation.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  /// Empty tensor when nothing flowed back into this value.
  const Tensor<T>& grad() const { return node_->grad; }
  bool recorded() const { return node_ && node_->recorded(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// A value outside any tape: it is read by operations but never receives gradient.
template <typename T>
Var<T> constant(Tensor<T> value);

/// Ordered record of the operations applied to recorded values.
///
/// Single writer. Operations on recorded inputs append their output node;
/// `backward` replays the adjoints in exact reverse order of recording.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `source` (by address) as a trainable leaf. Registering the same
  /// tensor twice returns the same handle.
  Var<T> parameter(const Tensor<T>& source);
  /// Recorded leaf with no parameter mapping (inputs whose gradient a test wants).
  Var<T> leaf(Tensor<T> value);

  void backward(const Var<T>& loss);

  /// Gradient accumulated for a registered parameter, or nullptr if the
  /// parameter was registered but received no gradient or was never registered.
  const Tensor<T>* grad_of(const Tensor<T>& source) const;

  std::size_t size() const { return nodes_.size(); }
  void record(const std::shared_ptr<Node<T>>& node);

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::unordered_map<const Tensor<T>*, Var<T>> parameters_;
};

// Elementwise. Binary operations require equal shapes.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);

enum class Elementwise { kAdd, kSub, kMul };
template <typename T> Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>& b);

// Reductions to shape [1].
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

/// [m,k] x [k,n] -> [m,n]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[B,in], weight[out,in], bias[out] -> [B,out]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// input[N,C,H,W], kernel[F,C,kh,kw], optional bias[F] (pass an empty Var to skip).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride, std::size_t padding);

template <typename T> Var<T> avg_pool2(const Var<T>& input);
template <typename T> Var<T> nearest_upsample2(const Var<T>& input);

/// Per-group normalisation over (C/groups, H, W) with per-channel affine gamma, beta [C].
template <typename T>
Var<T> group_norm(const Var<T>& input, std::size_t groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// q, k, v [N,C,H,W]; attention across the H*W positions of each sample.
template <typename T> Var<T> softmax_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v);

/// Concatenate [N,Ci,H,W] tensors along channels.
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// x[N,C,H,W] + v[N,C] broadcast over H, W.
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v);

/// table[R,E] rows selected by `rows` -> [rows.size(), E].
template <typename T> Var<T> gather_rows(const Var<T>& table, const std::vector<std::size_t>& rows);

}  // namespace maskdiff::ad
