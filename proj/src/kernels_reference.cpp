// Serial direct-loop kernels. Slow on purpose: every sum is written out as in
// the textbook definition so the production kernels have something to agree with.

#include <algorithm>
#include <cmath>
#include <vector>

#include "maskdiff/kernels.hpp"

namespace maskdiff::kernels::reference {

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.out_channels; ++f) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = bias ? bias[f] : T{0};
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t i = 0; i < g.kernel_h; ++i) {
              for (std::size_t j = 0; j < g.kernel_w; ++j) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width)) {
                  continue;
                }
                acc += w[((f * g.in_channels + c) * g.kernel_h + i) * g.kernel_w + j] *
                       x[((b * g.in_channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width +
                         static_cast<std::size_t>(ix)];
              }
            }
          }
          y[((b * g.out_channels + f) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, const ConvGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.out_channels; ++f) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T d = dy[((b * g.out_channels + f) * oh + oy) * ow + ox];
          if (dbias) dbias[f] += d;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t i = 0; i < g.kernel_h; ++i) {
              for (std::size_t j = 0; j < g.kernel_w; ++j) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width)) {
                  continue;
                }
                const std::size_t wi = ((f * g.in_channels + c) * g.kernel_h + i) * g.kernel_w + j;
                const std::size_t xi = ((b * g.in_channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width +
                                       static_cast<std::size_t>(ix);
                if (dw) dw[wi] += d * x[xi];
                if (dx) dx[xi] += d * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void group_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, const NormGeometry& g,
                        T eps) {
  const std::size_t cpg = g.channels / g.groups;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      T sum = 0;
      std::size_t n = 0;
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        for (std::size_t p = 0; p < g.spatial; ++p, ++n) sum += x[(b * g.channels + c) * g.spatial + p];
      }
      const T mu = sum / static_cast<T>(n);
      T var = 0;
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        for (std::size_t p = 0; p < g.spatial; ++p) {
          const T d = x[(b * g.channels + c) * g.spatial + p] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(n);
      const T r = T{1} / std::sqrt(var + eps);
      mean[b * g.groups + grp] = mu;
      rstd[b * g.groups + grp] = r;
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        for (std::size_t p = 0; p < g.spatial; ++p) {
          const std::size_t i = (b * g.channels + c) * g.spatial + p;
          y[i] = (x[i] - mu) * r * gamma[c] + beta[c];
        }
      }
    }
  }
}

template <typename T>
void group_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma,
                         T* dbeta, const NormGeometry& g) {
  const std::size_t cpg = g.channels / g.groups;
  const T n = static_cast<T>(cpg * g.spatial);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T mu = mean[b * g.groups + grp], r = rstd[b * g.groups + grp];
      T s1 = 0, s2 = 0;
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        for (std::size_t p = 0; p < g.spatial; ++p) {
          const std::size_t i = (b * g.channels + c) * g.spatial + p;
          const T xhat = (x[i] - mu) * r;
          if (dgamma) dgamma[c] += dy[i] * xhat;
          if (dbeta) dbeta[c] += dy[i];
          s1 += dy[i] * gamma[c];
          s2 += dy[i] * gamma[c] * xhat;
        }
      }
      if (!dx) continue;
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        for (std::size_t p = 0; p < g.spatial; ++p) {
          const std::size_t i = (b * g.channels + c) * g.spatial + p;
          const T xhat = (x[i] - mu) * r;
          dx[i] += r * (dy[i] * gamma[c] - s1 / n - xhat * s2 / n);
        }
      }
    }
  }
}

template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t batch, std::size_t channels,
                       std::size_t length) {
  const T scale = T{1} / std::sqrt(static_cast<T>(channels));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * channels * length;
    T* P = probs + b * length * length;
    for (std::size_t i = 0; i < length; ++i) {
      T mx = -INFINITY;
      for (std::size_t j = 0; j < length; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < channels; ++c) s += q[off + c * length + i] * k[off + c * length + j];
        P[i * length + j] = s * scale;
        mx = std::max(mx, s * scale);
      }
      T z = 0;
      for (std::size_t j = 0; j < length; ++j) z += (P[i * length + j] = std::exp(P[i * length + j] - mx));
      for (std::size_t j = 0; j < length; ++j) P[i * length + j] /= z;
    }
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < length; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < length; ++j) s += P[i * length + j] * v[off + c * length + j];
        out[off + c * length + i] = s;
      }
    }
  }
}

template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv,
                        std::size_t batch, std::size_t channels, std::size_t length) {
  const T scale = T{1} / std::sqrt(static_cast<T>(channels));
  std::vector<T> dP(length * length), dS(length * length);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * channels * length;
    const T* P = probs + b * length * length;
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t j = 0; j < length; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < channels; ++c) s += dout[off + c * length + i] * v[off + c * length + j];
        dP[i * length + j] = s;
      }
    }
    for (std::size_t i = 0; i < length; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < length; ++j) dot += dP[i * length + j] * P[i * length + j];
      for (std::size_t j = 0; j < length; ++j) dS[i * length + j] = P[i * length + j] * (dP[i * length + j] - dot);
    }
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < length; ++i) {
        if (dv) {
          T s = 0;
          for (std::size_t r = 0; r < length; ++r) s += dout[off + c * length + r] * P[r * length + i];
          dv[off + c * length + i] += s;
        }
        if (dq) {
          T s = 0;
          for (std::size_t j = 0; j < length; ++j) s += dS[i * length + j] * k[off + c * length + j];
          dq[off + c * length + i] += s * scale;
        }
        if (dk) {
          T s = 0;
          for (std::size_t r = 0; r < length; ++r) s += dS[r * length + i] * q[off + c * length + r];
          dk[off + c * length + i] += s * scale;
        }
      }
    }
  }
}

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t j = 0; j < n; ++j) {
        if (da) da[i * k + p] += dc[i * n + j] * b[p * n + j];
        if (db) db[p * n + j] += a[i * k + p] * dc[i * n + j];
      }
    }
  }
}

#define MASKDIFF_INSTANTIATE_REFERENCE(T)                                                                            \
  template void conv2d_forward<T>(const T*, const T*, const T*, T*, const ConvGeometry&);                           \
  template void conv2d_backward<T>(const T*, const T*, const T*, T*, T*, T*, const ConvGeometry&);                  \
  template void group_norm_forward<T>(const T*, const T*, const T*, T*, T*, T*, const NormGeometry&, T);             \
  template void group_norm_backward<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*,                \
                                       const NormGeometry&);                                                        \
  template void attention_forward<T>(const T*, const T*, const T*, T*, T*, std::size_t, std::size_t, std::size_t); \
  template void attention_backward<T>(const T*, const T*, const T*, const T*, const T*, T*, T*, T*, std::size_t,    \
                                      std::size_t, std::size_t);                                                    \
  template void matmul<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);                     \
  template void matmul_backward<T>(const T*, const T*, const T*, T*, T*, std::size_t, std::size_t, std::size_t);

MASKDIFF_INSTANTIATE_REFERENCE(float)
MASKDIFF_INSTANTIATE_REFERENCE(double)

}  // namespace maskdiff::kernels::reference
