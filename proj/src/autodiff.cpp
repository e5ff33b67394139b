#include "maskdiff/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "maskdiff/kernels.hpp"

namespace maskdiff::ad {
namespace {

constexpr std::ptrdiff_t kParallelThreshold = 1 << 14;

template <typename F>
void parallel_for(std::size_t n, F&& body) {
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (count > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
}

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Var<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : inputs) {
    if (!v || !*v) continue;
    Tape<T>* t = v->node()->tape;
    if (!t) continue;
    if (tape && t != tape) throw std::logic_error("operation mixes values from two different tapes");
    tape = t;
  }
  return tape;
}

template <typename T>
std::shared_ptr<Node<T>> make_output(Tensor<T> value, Tape<T>* tape) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->tape = tape;
  if (tape) tape->record(node);
  return node;
}

template <typename T>
T* grad_if_recorded(const std::shared_ptr<Node<T>>& n) {
  return n && n->recorded() ? n->grad_data() : nullptr;
}

template <typename T>
void require_rank(const Var<T>& v, std::size_t rank, const char* what) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(v.shape()));
  }
}

// Shared body for unary elementwise maps f with derivative df(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  auto out = Tensor<T>::uninitialized(a.shape());
  const T* x = a.value().data();
  T* y = out.data();
  parallel_for(out.size(), [&](std::size_t i) { y[i] = f(x[i]); });
  auto node = make_output(std::move(out), common_tape<T>({&a}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto in = a.ptr();
    node->backward = [self, in, df] {
      T* gx = grad_if_recorded(in);
      if (!gx) return;
      const T* g = self->grad.data();
      const T* x = in->value.data();
      const T* y = self->value.data();
      parallel_for(self->value.size(), [&](std::size_t i) { gx[i] += g[i] * df(x[i], y[i]); });
    };
  }
  return Var<T>(node);
}

}  // namespace

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(make_output<T>(std::move(value), nullptr));
}

template <typename T>
void Tape<T>::record(const std::shared_ptr<Node<T>>& node) {
  nodes_.push_back(node);
}

template <typename T>
Var<T> Tape<T>::parameter(const Tensor<T>& source) {
  if (auto it = parameters_.find(&source); it != parameters_.end()) return it->second;
  Var<T> v(make_output(source, this));
  parameters_.emplace(&source, v);
  return v;
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  return Var<T>(make_output(std::move(value), this));
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!loss.recorded() || loss.node()->tape != this) {
    throw std::logic_error("backward root is not recorded on this tape");
  }
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar root, got " + to_string(loss.shape()));
  loss.node()->grad_data()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && !n.grad.empty()) n.backward();
  }
}

template <typename T>
const Tensor<T>* Tape<T>::grad_of(const Tensor<T>& source) const {
  auto it = parameters_.find(&source);
  if (it == parameters_.end() || it->second.grad().empty()) return nullptr;
  return &it->second.grad();
}

template <typename T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "elementwise");
  auto out = Tensor<T>::uninitialized(a.shape());
  const T* x = a.value().data();
  const T* z = b.value().data();
  T* y = out.data();
  switch (op) {
    case Elementwise::kAdd: parallel_for(out.size(), [&](std::size_t i) { y[i] = x[i] + z[i]; }); break;
    case Elementwise::kSub: parallel_for(out.size(), [&](std::size_t i) { y[i] = x[i] - z[i]; }); break;
    case Elementwise::kMul: parallel_for(out.size(), [&](std::size_t i) { y[i] = x[i] * z[i]; }); break;
  }
  auto node = make_output(std::move(out), common_tape<T>({&a, &b}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto pa = a.ptr(), pb = b.ptr();
    node->backward = [self, pa, pb, op] {
      const T* g = self->grad.data();
      const std::size_t n = self->value.size();
      if (T* ga = grad_if_recorded(pa)) {
        if (op == Elementwise::kMul) {
          const T* z = pb->value.data();
          parallel_for(n, [&](std::size_t i) { ga[i] += g[i] * z[i]; });
        } else {
          parallel_for(n, [&](std::size_t i) { ga[i] += g[i]; });
        }
      }
      if (T* gb = grad_if_recorded(pb)) {
        if (op == Elementwise::kMul) {
          const T* x = pa->value.data();
          parallel_for(n, [&](std::size_t i) { gb[i] += g[i] * x[i]; });
        } else if (op == Elementwise::kSub) {
          parallel_for(n, [&](std::size_t i) { gb[i] -= g[i]; });
        } else {
          parallel_for(n, [&](std::size_t i) { gb[i] += g[i]; });
        }
      }
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return elementwise(Elementwise::kAdd, a, b);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return elementwise(Elementwise::kSub, a, b);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return elementwise(Elementwise::kMul, a, b);
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(
      a, [](T x) { return T{1} / (T{1} + std::exp(-x)); }, [](T, T y) { return y * (T{1} - y); });
}

// Eigen's packet exp: the scalar std::exp loop dominated whole forward passes.
template <typename T>
Var<T> silu(const Var<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(a.value().size());
  auto out = Tensor<T>::uninitialized(a.shape());
  const Eigen::Map<const Arr> x(a.value().data(), n);
  Eigen::Map<Arr>(out.data(), n) = x / (T{1} + (-x).exp());
  auto node = make_output(std::move(out), common_tape<T>({&a}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto in = a.ptr();
    node->backward = [self, in, n] {
      T* gx = grad_if_recorded(in);
      if (!gx) return;
      const Eigen::Map<const Arr> x(in->value.data(), n), g(self->grad.data(), n);
      const Arr s = T{1} / (T{1} + (-x).exp());
      Eigen::Map<Arr>(gx, n) += g * s * (T{1} + x * (T{1} - s));
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  auto node = make_output(Tensor<T>::scalar(acc), common_tape<T>({&a}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto in = a.ptr();
    node->backward = [self, in] {
      T* gx = grad_if_recorded(in);
      if (!gx) return;
      const T g = self->grad[0];
      parallel_for(in->value.size(), [&](std::size_t i) { gx[i] += g; });
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  auto node = make_output(a.value().reshaped(std::move(shape)), common_tape<T>({&a}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto in = a.ptr();
    node->backward = [self, in] {
      T* gx = grad_if_recorded(in);
      if (!gx) return;
      const T* g = self->grad.data();
      parallel_for(self->value.size(), [&](std::size_t i) { gx[i] += g[i]; });
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dimensions " + to_string(a.shape()) + " x " + to_string(b.shape()));
  auto out = Tensor<T>::uninitialized(Shape{m, n});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), m, k, n, false);
  auto node = make_output(std::move(out), common_tape<T>({&a, &b}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto pa = a.ptr(), pb = b.ptr();
    node->backward = [self, pa, pb, m, k, n] {
      kernels::matmul_backward(pa->value.data(), pb->value.data(), self->grad.data(), grad_if_recorded(pa),
                               grad_if_recorded(pb), m, k, n);
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) throw ShapeError("linear: weight " + to_string(weight.shape()) + " vs input " + to_string(x.shape()));
  if (bias && bias.value().size() != out_dim) throw ShapeError("linear: bias length mismatch");
  // y = x W^T + b, computed as a conv-free loop over the (small) batch.
  auto out = Tensor<T>::uninitialized(Shape{batch, out_dim});
  const T* xv = x.value().data();
  const T* wv = weight.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      T s = bias ? bias.value()[o] : T{0};
      for (std::size_t i = 0; i < in; ++i) s += xv[b * in + i] * wv[o * in + i];
      out[b * out_dim + o] = s;
    }
  }
  auto node = make_output(std::move(out), common_tape<T>({&x, &weight, &bias}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto px = x.ptr(), pw = weight.ptr(), pb = bias.ptr();
    node->backward = [self, px, pw, pb, batch, in, out_dim] {
      const T* g = self->grad.data();
      T* gx = grad_if_recorded(px);
      T* gw = grad_if_recorded(pw);
      T* gb = grad_if_recorded(pb);
      const T* xv = px->value.data();
      const T* wv = pw->value.data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < out_dim; ++o) {
          const T go = g[b * out_dim + o];
          if (gb) gb[o] += go;
          for (std::size_t i = 0; i < in; ++i) {
            if (gw) gw[o * in + i] += go * xv[b * in + i];
            if (gx) gx[b * in + i] += go * wv[o * in + i];
          }
        }
      }
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  kernels::ConvGeometry g;
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = kernel.dim(0);
  g.kernel_h = kernel.dim(2);
  g.kernel_w = kernel.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (kernel.dim(1) != g.in_channels) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " vs input " + to_string(input.shape()));
  }
  if (g.height + 2 * padding < g.kernel_h || g.width + 2 * padding < g.kernel_w) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  if (bias && bias.value().size() != g.out_channels) throw ShapeError("conv2d: bias length mismatch");
  auto out = Tensor<T>::uninitialized(Shape{g.batch, g.out_channels, g.out_height(), g.out_width()});
  kernels::conv2d_forward(input.value().data(), kernel.value().data(), bias ? bias.value().data() : nullptr,
                          out.data(), g);
  auto node = make_output(std::move(out), common_tape<T>({&input, &kernel, &bias}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto px = input.ptr(), pw = kernel.ptr(), pb = bias.ptr();
    node->backward = [self, px, pw, pb, g] {
      kernels::conv2d_backward(px->value.data(), pw->value.data(), self->grad.data(), grad_if_recorded(px),
                               grad_if_recorded(pw), grad_if_recorded(pb), g);
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> avg_pool2(const Var<T>& input) {
  require_rank(input, 4, "avg_pool2");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial extent " + to_string(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto out = Tensor<T>::uninitialized(Shape{input.dim(0), input.dim(1), oh, ow});
  const T* x = input.value().data();
  T* y = out.data();
  parallel_for(nc, [&](std::size_t p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const T* s = x + (p * h + 2 * i) * w + 2 * j;
        y[(p * oh + i) * ow + j] = T(0.25) * (s[0] + s[1] + s[w] + s[w + 1]);
      }
    }
  });
  auto node = make_output(std::move(out), common_tape<T>({&input}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto in = input.ptr();
    node->backward = [self, in, nc, h, w, oh, ow] {
      T* gx = grad_if_recorded(in);
      if (!gx) return;
      const T* g = self->grad.data();
      parallel_for(nc, [&](std::size_t p) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            const T v = T(0.25) * g[(p * oh + i) * ow + j];
            T* d = gx + (p * h + 2 * i) * w + 2 * j;
            d[0] += v;
            d[1] += v;
            d[w] += v;
            d[w + 1] += v;
          }
        }
      });
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> nearest_upsample2(const Var<T>& input) {
  require_rank(input, 4, "nearest_upsample2");
  const std::size_t nc = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  auto out = Tensor<T>::uninitialized(Shape{input.dim(0), input.dim(1), oh, ow});
  const T* x = input.value().data();
  T* y = out.data();
  parallel_for(nc, [&](std::size_t p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) y[(p * oh + i) * ow + j] = x[(p * h + i / 2) * w + j / 2];
    }
  });
  auto node = make_output(std::move(out), common_tape<T>({&input}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto in = input.ptr();
    node->backward = [self, in, nc, h, w, oh, ow] {
      T* gx = grad_if_recorded(in);
      if (!gx) return;
      const T* g = self->grad.data();
      parallel_for(nc, [&](std::size_t p) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) gx[(p * h + i / 2) * w + j / 2] += g[(p * oh + i) * ow + j];
        }
      });
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> group_norm(const Var<T>& input, std::size_t groups, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_rank(input, 4, "group_norm");
  kernels::NormGeometry g;
  g.batch = input.dim(0);
  g.channels = input.dim(1);
  g.spatial = input.dim(2) * input.dim(3);
  g.groups = groups;
  if (groups == 0 || g.channels % groups) {
    throw ShapeError("group_norm: " + std::to_string(g.channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.value().size() != g.channels || beta.value().size() != g.channels) {
    throw ShapeError("group_norm: affine parameters must have one entry per channel");
  }
  auto out = Tensor<T>::uninitialized(input.shape());
  auto stats = std::make_shared<AlignedVector<T>>(2 * g.batch * g.groups);
  T* mean_ptr = stats->data();
  T* rstd_ptr = stats->data() + g.batch * g.groups;
  kernels::group_norm_forward(input.value().data(), gamma.value().data(), beta.value().data(), out.data(), mean_ptr,
                              rstd_ptr, g, eps);
  auto node = make_output(std::move(out), common_tape<T>({&input, &gamma, &beta}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto px = input.ptr(), pg = gamma.ptr(), pb = beta.ptr();
    node->backward = [self, px, pg, pb, stats, g] {
      const T* m = stats->data();
      const T* r = stats->data() + g.batch * g.groups;
      kernels::group_norm_backward(px->value.data(), pg->value.data(), m, r, self->grad.data(), grad_if_recorded(px),
                                   grad_if_recorded(pg), grad_if_recorded(pb), g);
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> softmax_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  require_rank(q, 4, "softmax_attention");
  require_same_shape(q.shape(), k.shape(), "softmax_attention q/k");
  require_same_shape(q.shape(), v.shape(), "softmax_attention q/v");
  const std::size_t batch = q.dim(0), channels = q.dim(1), length = q.dim(2) * q.dim(3);
  auto out = Tensor<T>::uninitialized(q.shape());
  auto probs = std::make_shared<AlignedVector<T>>(batch * length * length);
  kernels::attention_forward(q.value().data(), k.value().data(), v.value().data(), out.data(), probs->data(), batch,
                             channels, length);
  auto node = make_output(std::move(out), common_tape<T>({&q, &k, &v}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
    node->backward = [self, pq, pk, pv, probs, batch, channels, length] {
      kernels::attention_backward(pq->value.data(), pk->value.data(), pv->value.data(), probs->data(),
                                  self->grad.data(), grad_if_recorded(pq), grad_if_recorded(pk), grad_if_recorded(pv),
                                  batch, channels, length);
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels");
  const std::size_t batch = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (p.dim(0) != batch || p.dim(2) != h || p.dim(3) != w) {
      throw ShapeError("concat_channels: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    }
    channels += p.dim(1);
    Tape<T>* t = common_tape<T>({&p});
    if (t && tape && t != tape) throw std::logic_error("operation mixes values from two different tapes");
    if (t) tape = t;
  }
  const std::size_t plane = h * w;
  auto out = Tensor<T>::uninitialized(Shape{batch, channels, h, w});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.dim(1);
      const T* src = p.value().data() + b * c * plane;
      std::copy(src, src + c * plane, out.data() + (b * channels + offset) * plane);
      offset += c;
    }
  }
  auto node = make_output(std::move(out), tape);
  if (node->recorded()) {
    Node<T>* self = node.get();
    std::vector<std::shared_ptr<Node<T>>> inputs;
    for (const auto& p : parts) inputs.push_back(p.ptr());
    node->backward = [self, inputs, batch, channels, plane] {
      const T* g = self->grad.data();
      for (std::size_t b = 0; b < batch; ++b) {
        std::size_t offset = 0;
        for (const auto& in : inputs) {
          const std::size_t c = in->value.dim(1);
          if (T* gx = grad_if_recorded(in)) {
            const T* src = g + (b * channels + offset) * plane;
            T* dst = gx + b * c * plane;
            for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
          offset += c;
        }
      }
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(v, 2, "add_channel_bias");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (v.dim(0) != batch || v.dim(1) != channels) {
    throw ShapeError("add_channel_bias: " + to_string(v.shape()) + " vs " + to_string(x.shape()));
  }
  auto out = Tensor<T>::uninitialized(x.shape());
  const T* xv = x.value().data();
  const T* bv = v.value().data();
  T* y = out.data();
  parallel_for(batch * channels, [&](std::size_t p) {
    for (std::size_t i = 0; i < plane; ++i) y[p * plane + i] = xv[p * plane + i] + bv[p];
  });
  auto node = make_output(std::move(out), common_tape<T>({&x, &v}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto px = x.ptr(), pv = v.ptr();
    node->backward = [self, px, pv, batch, channels, plane] {
      const T* g = self->grad.data();
      T* gx = grad_if_recorded(px);
      T* gv = grad_if_recorded(pv);
      parallel_for(batch * channels, [&](std::size_t p) {
        T s = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          s += g[p * plane + i];
          if (gx) gx[p * plane + i] += g[p * plane + i];
        }
        if (gv) gv[p] += s;
      });
    };
  }
  return Var<T>(node);
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<std::size_t>& rows) {
  require_rank(table, 2, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: no rows requested");
  const std::size_t n_rows = table.dim(0), width = table.dim(1);
  for (auto r : rows) {
    if (r >= n_rows) throw std::out_of_range("gather_rows: row " + std::to_string(r) + " of " + std::to_string(n_rows));
  }
  auto out = Tensor<T>::uninitialized(Shape{rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const T* src = table.value().data() + rows[i] * width;
    std::copy(src, src + width, out.data() + i * width);
  }
  auto node = make_output(std::move(out), common_tape<T>({&table}));
  if (node->recorded()) {
    Node<T>* self = node.get();
    auto pt = table.ptr();
    node->backward = [self, pt, rows, width] {
      T* gt = grad_if_recorded(pt);
      if (!gt) return;
      const T* g = self->grad.data();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) gt[rows[i] * width + j] += g[i * width + j];
      }
    };
  }
  return Var<T>(node);
}

#define MASKDIFF_INSTANTIATE_AD(T)                                                                          \
  template class Tape<T>;                                                                                   \
  template Var<T> constant<T>(Tensor<T>);                                                                   \
  template Var<T> elementwise<T>(Elementwise, const Var<T>&, const Var<T>&);                                \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> scale<T>(const Var<T>&, T);                                                               \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                                          \
  template Var<T> silu<T>(const Var<T>&);                                                                   \
  template Var<T> sigmoid<T>(const Var<T>&);                                                                \
  template Var<T> sum<T>(const Var<T>&);                                                                    \
  template Var<T> mean<T>(const Var<T>&);                                                                   \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                         \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                   \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);         \
  template Var<T> avg_pool2<T>(const Var<T>&);                                                              \
  template Var<T> nearest_upsample2<T>(const Var<T>&);                                                      \
  template Var<T> group_norm<T>(const Var<T>&, std::size_t, const Var<T>&, const Var<T>&, T);               \
  template Var<T> softmax_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                                           \
  template Var<T> add_channel_bias<T>(const Var<T>&, const Var<T>&);                                        \
  template Var<T> gather_rows<T>(const Var<T>&, const std::vector<std::size_t>&);

MASKDIFF_INSTANTIATE_AD(float)
MASKDIFF_INSTANTIATE_AD(double)

}  // namespace maskdiff::ad
