#pragma once

#include <cstddef>

// Compute kernels behind the autodiff primitives.
//
// `maskdiff::kernels` holds the production versions (OpenMP loops, im2col +
// Eigen GEMM). `maskdiff::kernels::reference` holds direct serial loops with
// identical signatures; tests compare the two and bench/ times them.
//
// Layout is NCHW, row-major. All backward kernels accumulate (+=) into their
// gradient outputs; pass nullptr for a gradient that is not needed.

namespace maskdiff::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch_size() const { return in_channels * kernel_h * kernel_w; }
};

struct NormGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t spatial = 1;
  std::size_t groups = 1;
};

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g);
template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, const ConvGeometry& g);

/// mean/rstd receive batch*groups statistics for reuse in backward.
template <typename T>
void group_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, const NormGeometry& g,
                        T eps);
template <typename T>
void group_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma,
                         T* dbeta, const NormGeometry& g);

/// Single-head scaled dot-product attention over `length` positions.
/// q, k, v, out are [batch, channels, length]; probs is [batch, length, length].
template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t batch, std::size_t channels,
                       std::size_t length);
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv,
                        std::size_t batch, std::size_t channels, std::size_t length);

/// c[m,n] (+)= a[m,k] * b[k,n]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
/// da += dc * b^T ; db += a^T * dc
template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db, std::size_t m, std::size_t k, std::size_t n);

namespace reference {

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g);
template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, const ConvGeometry& g);
template <typename T>
void group_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, const NormGeometry& g,
                        T eps);
template <typename T>
void group_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma,
                         T* dbeta, const NormGeometry& g);
template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t batch, std::size_t channels,
                       std::size_t length);
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv,
                        std::size_t batch, std::size_t channels, std::size_t length);
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db, std::size_t m, std::size_t k, std::size_t n);

}  // namespace reference

}  // namespace maskdiff::kernels
