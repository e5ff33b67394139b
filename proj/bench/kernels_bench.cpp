// Parallel kernels against their serial reference counterparts at the shapes
// the toy denoiser runs (batch 8, 32x32 frames).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "maskdiff/kernels.hpp"

namespace k = maskdiff::kernels;

namespace {

std::vector<float> random_buffer(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

k::ConvGeometry conv_shape(const benchmark::State& state) {
  k::ConvGeometry g;
  g.batch = 8;
  g.in_channels = g.out_channels = static_cast<std::size_t>(state.range(0));
  g.height = g.width = static_cast<std::size_t>(state.range(1));
  g.kernel_h = g.kernel_w = 3;
  g.padding = 1;
  return g;
}

template <bool Reference>
void BM_ConvForward(benchmark::State& state) {
  const auto g = conv_shape(state);
  const auto x = random_buffer(g.batch * g.in_channels * g.height * g.width, 1);
  const auto w = random_buffer(g.out_channels * g.patch_size(), 2);
  const auto b = random_buffer(g.out_channels, 3);
  std::vector<float> y(g.batch * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (Reference) k::reference::conv2d_forward(x.data(), w.data(), b.data(), y.data(), g);
    else k::conv2d_forward(x.data(), w.data(), b.data(), y.data(), g);
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(
      2.0 * static_cast<double>(y.size() * g.patch_size()) * static_cast<double>(state.iterations()),
      benchmark::Counter::kIsRate, benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_ConvBackward(benchmark::State& state) {
  const auto g = conv_shape(state);
  const auto x = random_buffer(g.batch * g.in_channels * g.height * g.width, 4);
  const auto w = random_buffer(g.out_channels * g.patch_size(), 5);
  const auto dy = random_buffer(g.batch * g.out_channels * g.out_height() * g.out_width(), 6);
  std::vector<float> dx(x.size()), dw(w.size()), db(g.out_channels);
  for (auto _ : state) {
    if constexpr (Reference) k::reference::conv2d_backward(x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data(), g);
    else k::conv2d_backward(x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data(), g);
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Reference>
void BM_GroupNorm(benchmark::State& state) {
  k::NormGeometry g{8, static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1) * state.range(1)),
                    8};
  const auto x = random_buffer(g.batch * g.channels * g.spatial, 7);
  const auto gamma = random_buffer(g.channels, 8), beta = random_buffer(g.channels, 9);
  std::vector<float> y(x.size()), mean(g.batch * g.groups), rstd(g.batch * g.groups);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::group_norm_forward(x.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(), g, 1e-5f);
    } else {
      k::group_norm_forward(x.data(), gamma.data(), beta.data(), y.data(), mean.data(), rstd.data(), g, 1e-5f);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Reference>
void BM_Attention(benchmark::State& state) {
  const std::size_t batch = 8, channels = static_cast<std::size_t>(state.range(0));
  const std::size_t length = static_cast<std::size_t>(state.range(1) * state.range(1));
  const auto q = random_buffer(batch * channels * length, 10);
  const auto kk = random_buffer(q.size(), 11), v = random_buffer(q.size(), 12);
  std::vector<float> out(q.size()), probs(batch * length * length);
  for (auto _ : state) {
    if constexpr (Reference) {
      k::reference::attention_forward(q.data(), kk.data(), v.data(), out.data(), probs.data(), batch, channels, length);
    } else {
      k::attention_forward(q.data(), kk.data(), v.data(), out.data(), probs.data(), batch, channels, length);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Reference>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 13), b = random_buffer(n * n, 14);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Reference) k::reference::matmul(a.data(), b.data(), c.data(), n, n, n, false);
    else k::matmul(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
}

// (channels, side) pairs of the toy network's levels.
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({16, 32})->Args({32, 16})->Args({32, 8})->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/reference")->Apply(conv_args);
BENCHMARK(BM_GroupNorm<false>)->Name("group_norm/parallel")->Apply(conv_args);
BENCHMARK(BM_GroupNorm<true>)->Name("group_norm/reference")->Apply(conv_args);
BENCHMARK(BM_Attention<false>)->Name("attention/parallel")->Args({32, 8})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Attention<true>)->Name("attention/reference")->Args({32, 8})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Matmul<false>)->Name("matmul/parallel")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Matmul<true>)->Name("matmul/reference")->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
