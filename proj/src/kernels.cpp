#include "maskdiff/kernels.hpp"

#include "maskdiff/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

namespace maskdiff::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapR = Eigen::Map<const RowMat<T>>;

// Upper bound on im2col buffer entries; larger batches are processed in
// chunks. Small enough that a chunk's columns stay in L2.
constexpr std::size_t kMaxColumnEntries = std::size_t{1} << 18;

std::size_t chunk_size(const ConvGeometry& g) {
  const std::size_t per_sample = g.patch_size() * g.out_height() * g.out_width();
  return std::clamp<std::size_t>(kMaxColumnEntries / std::max<std::size_t>(per_sample, 1), 1, g.batch);
}

// cols[(c*kh + i)*kw + j, s*P + p] for samples [first, first + count).
template <typename T>
void im2col(const T* x, T* cols, const ConvGeometry& g, std::size_t first, std::size_t count) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), plane = oh * ow;
  const std::size_t ncols = count * plane;
  const auto rows = static_cast<std::ptrdiff_t>(g.patch_size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::size_t c = static_cast<std::size_t>(r) / (g.kernel_h * g.kernel_w);
    const std::size_t ki = (static_cast<std::size_t>(r) / g.kernel_w) % g.kernel_h;
    const std::size_t kj = static_cast<std::size_t>(r) % g.kernel_w;
    T* dst = cols + static_cast<std::size_t>(r) * ncols;
    for (std::size_t s = 0; s < count; ++s) {
      const T* src = x + ((first + s) * g.in_channels + c) * g.height * g.width;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
        T* row = dst + s * plane + oy * ow;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
          std::fill(row, row + ow, T{0});
          continue;
        }
        const T* srow = src + static_cast<std::size_t>(iy) * g.width;
        if (g.stride == 1) {
          // ix = ox + kj - padding; copy the in-range run, zero the rest.
          const auto shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.padding);
          const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, static_cast<std::ptrdiff_t>(ow)));
          const auto hi = static_cast<std::size_t>(
              std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.width) - shift, static_cast<std::ptrdiff_t>(lo),
                                         static_cast<std::ptrdiff_t>(ow)));
          std::fill(row, row + lo, T{0});
          std::copy(srow + (static_cast<std::ptrdiff_t>(lo) + shift), srow + (static_cast<std::ptrdiff_t>(hi) + shift),
                    row + lo);
          std::fill(row + hi, row + ow, T{0});
          continue;
        }
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
          row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : srow[ix];
        }
      }
    }
  }
}

// Scatter-add of im2col columns back onto the input gradient. Parallel over
// input channels, each of which owns a disjoint slice of dx.
template <typename T>
void col2im(const T* cols, T* dx, const ConvGeometry& g, std::size_t first, std::size_t count) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), plane = oh * ow;
  const std::size_t ncols = count * plane;
  const auto channels = static_cast<std::ptrdiff_t>(g.in_channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < channels; ++ci) {
    const auto c = static_cast<std::size_t>(ci);
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* src = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * ncols;
        for (std::size_t s = 0; s < count; ++s) {
          T* dst = dx + ((first + s) * g.in_channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            const T* row = src + s * plane + oy * ow;
            T* drow = dst + static_cast<std::size_t>(iy) * g.width;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) drow[ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t chunk = chunk_size(g);
  AlignedVector<T> cols;
  RowMat<T> out;
  CMapR<T> weights(w, static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.patch_size()));
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first);
    const std::size_t ncols = count * plane;
    cols.resize(g.patch_size() * ncols);
    im2col(x, cols.data(), g, first, count);
    CMapR<T> colmat(cols.data(), static_cast<Eigen::Index>(g.patch_size()), static_cast<Eigen::Index>(ncols));
    if (count == 1) {
      // One sample: the product already has the [F, plane] layout of y.
      MapR<T> dst(y + first * g.out_channels * plane, static_cast<Eigen::Index>(g.out_channels),
                  static_cast<Eigen::Index>(plane));
      dst.noalias() = weights * colmat;
      if (bias) dst.colwise() += CMapR<T>(bias, dst.rows(), 1).col(0);
      continue;
    }
    out.noalias() = weights * colmat;
    const auto total = static_cast<std::ptrdiff_t>(count * g.out_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
      const std::size_t s = static_cast<std::size_t>(idx) / g.out_channels;
      const std::size_t f = static_cast<std::size_t>(idx) % g.out_channels;
      const T b = bias ? bias[f] : T{0};
      const T* src = out.data() + f * ncols + s * plane;
      T* dst = y + ((first + s) * g.out_channels + f) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }
}

template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* dbias, const ConvGeometry& g) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t chunk = chunk_size(g);
  const auto F = static_cast<Eigen::Index>(g.out_channels);
  const auto K = static_cast<Eigen::Index>(g.patch_size());
  AlignedVector<T> cols;
  RowMat<T> dyr;
  RowMat<T> dcols;
  CMapR<T> weights(w, F, K);
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first);
    const std::size_t ncols = count * plane;
    dyr.resize(F, static_cast<Eigen::Index>(ncols));
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t f = 0; f < g.out_channels; ++f) {
        const T* src = dy + ((first + s) * g.out_channels + f) * plane;
        std::copy(src, src + plane, dyr.data() + f * ncols + s * plane);
      }
    }
    if (dbias) {
      for (std::size_t f = 0; f < g.out_channels; ++f) {
        const T* row = dyr.data() + f * ncols;
        T acc = 0;
        for (std::size_t i = 0; i < ncols; ++i) acc += row[i];
        dbias[f] += acc;
      }
    }
    if (dw) {
      cols.resize(g.patch_size() * ncols);
      im2col(x, cols.data(), g, first, count);
      CMapR<T> colmat(cols.data(), K, static_cast<Eigen::Index>(ncols));
      MapR<T>(dw, F, K).noalias() += dyr * colmat.transpose();
    }
    if (dx) {
      dcols.noalias() = weights.transpose() * dyr;
      col2im(dcols.data(), dx, g, first, count);
    }
  }
}

template <typename T>
void group_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd, const NormGeometry& g,
                        T eps) {
  const std::size_t cpg = g.channels / g.groups;
  const std::size_t n = cpg * g.spatial;
  const auto total = static_cast<std::ptrdiff_t>(g.batch * g.groups);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
    const auto bg = static_cast<std::size_t>(idx);
    const T* src = x + bg * n;
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) sum += src[i];
    const double mu = sum / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sq += (src[i] - mu) * (src[i] - mu);
    const double var = sq / static_cast<double>(n);
    const T m = static_cast<T>(mu);
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    mean[bg] = m;
    rstd[bg] = r;
    const std::size_t group = bg % g.groups;
    T* dst = y + bg * n;
    for (std::size_t cl = 0; cl < cpg; ++cl) {
      const std::size_t c = group * cpg + cl;
      const T scale = gamma[c] * r;
      const T shift = beta[c] - m * scale;
      const T* s = src + cl * g.spatial;
      T* d = dst + cl * g.spatial;
      for (std::size_t p = 0; p < g.spatial; ++p) d[p] = s[p] * scale + shift;
    }
  }
}

template <typename T>
void group_norm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy, T* dx, T* dgamma,
                         T* dbeta, const NormGeometry& g) {
  const std::size_t cpg = g.channels / g.groups;
  const std::size_t n = cpg * g.spatial;
  // Per-sample gamma/beta partials are reduced serially afterwards.
  std::vector<T> pg(g.batch * g.channels, T{0}), pb(g.batch * g.channels, T{0});
  const auto total = static_cast<std::ptrdiff_t>(g.batch * g.groups);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
    const auto bg = static_cast<std::size_t>(idx);
    const std::size_t b = bg / g.groups, group = bg % g.groups;
    const T m = mean[bg], r = rstd[bg];
    const T* xs = x + bg * n;
    const T* dys = dy + bg * n;
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (std::size_t cl = 0; cl < cpg; ++cl) {
      const std::size_t c = group * cpg + cl;
      T sg = 0, sb = 0;
      for (std::size_t p = 0; p < g.spatial; ++p) {
        const std::size_t i = cl * g.spatial + p;
        const T xhat = (xs[i] - m) * r;
        sg += dys[i] * xhat;
        sb += dys[i];
        const T dxhat = dys[i] * gamma[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
      }
      pg[b * g.channels + c] = sg;
      pb[b * g.channels + c] = sb;
    }
    if (!dx) continue;
    const T inv_n = T{1} / static_cast<T>(n);
    T* dxs = dx + bg * n;
    for (std::size_t cl = 0; cl < cpg; ++cl) {
      const std::size_t c = group * cpg + cl;
      for (std::size_t p = 0; p < g.spatial; ++p) {
        const std::size_t i = cl * g.spatial + p;
        const T xhat = (xs[i] - m) * r;
        const T dxhat = dys[i] * gamma[c];
        dxs[i] += r * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
      }
    }
  }
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < g.channels; ++c) {
      if (dgamma) dgamma[c] += pg[b * g.channels + c];
      if (dbeta) dbeta[c] += pb[b * g.channels + c];
    }
  }
}

template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t batch, std::size_t channels,
                       std::size_t length) {
  const auto C = static_cast<Eigen::Index>(channels), L = static_cast<Eigen::Index>(length);
  const T scale = T{1} / std::sqrt(static_cast<T>(channels));
  const auto B = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < B; ++b) {
    const std::size_t off = static_cast<std::size_t>(b) * channels * length;
    CMapR<T> Q(q + off, C, L), K(k + off, C, L), V(v + off, C, L);
    MapR<T> P(probs + static_cast<std::size_t>(b) * length * length, L, L);
    P.noalias() = scale * (Q.transpose() * K);
    // Plain loops: the row reductions must not depend on the buffer address.
    for (std::size_t i = 0; i < length; ++i) {
      T* row = P.data() + i * length;
      T mx = row[0];
      for (std::size_t j = 1; j < length; ++j) mx = std::max(mx, row[j]);
      T total = 0;
      for (std::size_t j = 0; j < length; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (std::size_t j = 0; j < length; ++j) row[j] /= total;
    }
    MapR<T>(out + off, C, L).noalias() = V * P.transpose();
  }
}

template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv,
                        std::size_t batch, std::size_t channels, std::size_t length) {
  const auto C = static_cast<Eigen::Index>(channels), L = static_cast<Eigen::Index>(length);
  const T scale = T{1} / std::sqrt(static_cast<T>(channels));
  const auto B = static_cast<std::ptrdiff_t>(batch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < B; ++b) {
    const std::size_t off = static_cast<std::size_t>(b) * channels * length;
    CMapR<T> Q(q + off, C, L), K(k + off, C, L), V(v + off, C, L), dO(dout + off, C, L);
    CMapR<T> P(probs + static_cast<std::size_t>(b) * length * length, L, L);
    if (dv) MapR<T>(dv + off, C, L).noalias() += dO * P;
    RowMat<T> dP = dO.transpose() * V;
    RowMat<T> dS(L, L);
    for (std::size_t i = 0; i < length; ++i) {
      const T* p = P.data() + i * length;
      const T* dp = dP.data() + i * length;
      T dot = 0;
      for (std::size_t j = 0; j < length; ++j) dot += dp[j] * p[j];
      T* ds = dS.data() + i * length;
      for (std::size_t j = 0; j < length; ++j) ds[j] = p[j] * (dp[j] - dot);
    }
    if (dq) MapR<T>(dq + off, C, L).noalias() += scale * (K * dS.transpose());
    if (dk) MapR<T>(dk + off, C, L).noalias() += scale * (Q * dS);
  }
}

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  if (accumulate) {
    MapR<T>(c, M, N).noalias() += CMapR<T>(a, M, K) * CMapR<T>(b, K, N);
  } else {
    MapR<T>(c, M, N).noalias() = CMapR<T>(a, M, K) * CMapR<T>(b, K, N);
  }
}

template <typename T>
void matmul_backward(const T* a, const T* b, const T* dc, T* da, T* db, std::size_t m, std::size_t k, std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  CMapR<T> A(a, M, K), Bm(b, K, N), dC(dc, M, N);
  if (da) MapR<T>(da, M, K).noalias() += dC * Bm.transpose();
  if (db) MapR<T>(db, K, N).noalias() += A.transpose() * dC;
}

#define MASKDIFF_INSTANTIATE_KERNELS(T)                                                                              \
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

MASKDIFF_INSTANTIATE_KERNELS(float)
MASKDIFF_INSTANTIATE_KERNELS(double)

}  // namespace maskdiff::kernels
