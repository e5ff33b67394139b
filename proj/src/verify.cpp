#include "maskdiff/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace maskdiff::verify {

namespace {

using VarD = ad::Var<double>;

Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

CheckResult below(std::string name, double value, double tol, std::string detail = {}) {
  return {std::move(name), value < tol, value, tol, std::move(detail)};
}

}  // namespace

template <typename T>
ad::Var<T> ConstantEps<T>::forward(ad::Tape<T>*, const EpsQuery<T>& q) const {
  Tensor<T> out(q.y_t.shape());
  const std::size_t per = out.size() / q.batch();
  for (std::size_t i = 0; i < q.batch(); ++i) {
    const T v = q.classes[i] == kNullClass ? uncond_ : cond_;
    std::fill(out.data() + i * per, out.data() + (i + 1) * per, v);
  }
  return ad::constant(std::move(out));
}

template <typename T>
ad::Var<T> OracleEps<T>::forward(ad::Tape<T>*, const EpsQuery<T>& q) const {
  Tensor<T> out(q.y_t.shape());
  const std::size_t per = out.size() / q.batch();
  if (per != y0_.size()) throw ShapeError("OracleEps: y0 does not match the query");
  for (std::size_t i = 0; i < q.batch(); ++i) {
    const double abar = s_.alpha_bar(q.steps[i]);
    const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
    for (std::size_t p = 0; p < per; ++p) {
      const double y = static_cast<double>(q.y_t[i * per + p]);
      out[i * per + p] = static_cast<T>((y - a * static_cast<double>(y0_[p])) / b);
    }
  }
  return ad::constant(std::move(out));
}

template class ConstantEps<float>;
template class ConstantEps<double>;
template class OracleEps<float>;
template class OracleEps<double>;

CheckResult schedule_identities(int steps, double beta_start, double beta_end, double tol) {
  const NoiseSchedule s = NoiseSchedule::linear(steps, beta_start, beta_end);
  long double prod = 1.0L;
  double worst = 0;
  for (int t = 1; t <= steps; ++t) {
    const long double beta =
        steps == 1 ? static_cast<long double>(beta_start)
                   : static_cast<long double>(beta_start) +
                         (static_cast<long double>(beta_end) - beta_start) * (t - 1) / (steps - 1);
    const long double prev = prod;
    prod *= 1.0L - beta;
    const long double post = (1.0L - prev) / (1.0L - prod) * beta;
    worst = std::max(worst, static_cast<double>(std::fabs(prod - static_cast<long double>(s.alpha_bar(t)))));
    worst = std::max(worst, static_cast<double>(std::fabs(post - static_cast<long double>(s.posterior_variance(t)))));
    worst = std::max(worst, std::fabs(s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)));
  }
  return below("schedule identities T=" + std::to_string(steps), worst, tol,
               "max |error| " + fmt(worst) + ", abar_T = " + fmt(s.alpha_bar(steps)));
}

GridMoments grid_posterior(double prior_mean, double prior_var, double a, double noise_var, double y, double lo,
                           double hi, double step) {
  const std::size_t n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
  std::vector<double> logw(n);
  double peak = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = lo + step * static_cast<double>(i);
    const double dz = z - prior_mean, dy = y - a * z;
    logw[i] = -dz * dz / (2 * prior_var) - dy * dy / (2 * noise_var);
    peak = std::max(peak, logw[i]);
  }
  double mass = 0, first = 0;
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double trap = (i == 0 || i + 1 == n) ? 0.5 : 1.0;
    w[i] = trap * std::exp(logw[i] - peak);
    mass += w[i];
    first += w[i] * (lo + step * static_cast<double>(i));
  }
  const double mean = first / mass;
  double second = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = lo + step * static_cast<double>(i) - mean;
    second += w[i] * d * d;
  }
  return {mean, second / mass};
}

CheckResult posterior_oracle(const NoiseSchedule& s, std::mt19937_64& rng, int points, double tol) {
  std::uniform_int_distribution<int> pick_t(2, s.steps());
  std::uniform_real_distribution<double> pick_y0(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0;
  std::ostringstream detail;
  for (int i = 0; i < points; ++i) {
    const int t = pick_t(rng);
    const double y0 = pick_y0(rng);
    const double y_t = std::sqrt(s.alpha_bar(t)) * y0 + std::sqrt(1 - s.alpha_bar(t)) * normal(rng);
    const GridMoments g = grid_posterior(std::sqrt(s.alpha_bar(t - 1)) * y0, 1.0 - s.alpha_bar(t - 1),
                                         std::sqrt(s.alpha(t)), s.beta(t), y_t);
    const auto closed = posterior_params(s, Tensor<double>(Shape{1}, y_t), Tensor<double>(Shape{1}, y0), t);
    const double err = std::max(std::fabs(g.mean - closed.mean[0]), std::fabs(g.variance - closed.variance));
    worst = std::max(worst, err);
    detail << "t=" << t << " err=" << fmt(err) << "; ";
  }
  return below("posterior vs grid Bayes", worst, tol, detail.str());
}

std::vector<ChainMoment> chain_consistency(const NoiseSchedule& s, const std::vector<int>& ts, int trials,
                                           std::mt19937_64& rng) {
  const int last = *std::max_element(ts.begin(), ts.end());
  const std::vector<double> y0s{-1.0, 1.0};
  std::vector<double> sum(ts.size() * y0s.size()), sum2(ts.size() * y0s.size());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> sa(static_cast<std::size_t>(last + 1)), sb(static_cast<std::size_t>(last + 1));
  for (int t = 1; t <= last; ++t) {
    sa[static_cast<std::size_t>(t)] = std::sqrt(1.0 - s.beta(t));
    sb[static_cast<std::size_t>(t)] = std::sqrt(s.beta(t));
  }
  for (std::size_t p = 0; p < y0s.size(); ++p) {
    for (int n = 0; n < trials; ++n) {
      double y = y0s[p];
      for (int t = 1; t <= last; ++t) {
        y = sa[static_cast<std::size_t>(t)] * y + sb[static_cast<std::size_t>(t)] * normal(rng);
        for (std::size_t k = 0; k < ts.size(); ++k) {
          if (ts[k] == t) {
            sum[p * ts.size() + k] += y;
            sum2[p * ts.size() + k] += y * y;
          }
        }
      }
    }
  }
  std::vector<ChainMoment> out;
  const double nn = trials;
  for (std::size_t p = 0; p < y0s.size(); ++p) {
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const double m = sum[p * ts.size() + k] / nn;
      const double v = (sum2[p * ts.size() + k] - nn * m * m) / (nn - 1);
      double abar = 1;
      for (int t = 1; t <= ts[k]; ++t) abar *= 1.0 - s.beta(t);
      const double em = std::sqrt(abar) * y0s[p], ev = 1 - abar;
      out.push_back({ts[k], y0s[p], m, v, em, ev, (m - em) / std::sqrt(ev / nn),
                     (v - ev) / (ev * std::sqrt(2.0 / (nn - 1)))});
    }
  }
  return out;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return std::fabs(analytic - numeric) / denom;
}

CheckResult gradient_check(const std::string& name, const ScalarFn& f, std::vector<Tensor<double>> inputs, double h,
                           double tol) {
  ad::Tape<double> tape;
  std::vector<VarD> leaves;
  for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
  const VarD out = f(leaves);
  tape.backward(out);

  auto eval = [&]() {
    std::vector<VarD> consts;
    for (const auto& in : inputs) consts.push_back(ad::constant(in));
    return f(consts).value().item();
  };
  double worst = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<double>& g = leaves[i].grad();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double keep = inputs[i][j];
      inputs[i][j] = keep + h;
      const double up = eval();
      inputs[i][j] = keep - h;
      const double down = eval();
      inputs[i][j] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g.empty() ? 0.0 : g[j];
      worst = std::max(worst, relative_error(analytic, numeric));
      ++count;
    }
  }
  return below("grad " + name, worst, tol, std::to_string(count) + " entries, max rel err " + fmt(worst));
}

std::vector<CheckResult> primitive_gradient_suite(std::mt19937_64& rng, double tol) {
  std::vector<CheckResult> out;
  // Contract every output with a fixed random cotangent.
  auto contract = [](const VarD& y, const Tensor<double>& r) { return ad::sum(ad::mul(y, ad::constant(r))); };

  auto run = [&](const std::string& name, const std::vector<Shape>& shapes, const Shape& out_shape,
                 std::function<VarD(const std::vector<VarD>&)> op) {
    std::vector<Tensor<double>> inputs;
    for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng));
    const Tensor<double> r = random_tensor(out_shape, rng);
    out.push_back(gradient_check(
        name, [&](const std::vector<VarD>& v) { return contract(op(v), r); }, std::move(inputs), 1e-5, tol));
  };

  const Shape v6{2, 3};
  run("add", {v6, v6}, v6, [](const auto& v) { return ad::add(v[0], v[1]); });
  run("sub", {v6, v6}, v6, [](const auto& v) { return ad::sub(v[0], v[1]); });
  run("mul", {v6, v6}, v6, [](const auto& v) { return ad::mul(v[0], v[1]); });
  run("scale", {v6}, v6, [](const auto& v) { return ad::scale(v[0], -1.7); });
  run("add_scalar", {v6}, v6, [](const auto& v) { return ad::add_scalar(v[0], 0.3); });
  run("silu", {v6}, v6, [](const auto& v) { return ad::silu(v[0]); });
  run("sigmoid", {v6}, v6, [](const auto& v) { return ad::sigmoid(v[0]); });
  run("sum", {v6}, Shape{1}, [](const auto& v) { return ad::sum(v[0]); });
  run("mean", {v6}, Shape{1}, [](const auto& v) { return ad::mean(v[0]); });
  run("reshape", {v6}, Shape{3, 2}, [](const auto& v) { return ad::reshape(v[0], Shape{3, 2}); });
  run("matmul", {Shape{3, 4}, Shape{4, 2}}, Shape{3, 2}, [](const auto& v) { return ad::matmul(v[0], v[1]); });
  run("linear", {Shape{2, 4}, Shape{3, 4}, Shape{3}}, Shape{2, 3},
      [](const auto& v) { return ad::linear(v[0], v[1], v[2]); });
  run("conv2d 3x3 pad 1", {Shape{2, 2, 5, 5}, Shape{3, 2, 3, 3}, Shape{3}}, Shape{2, 3, 5, 5},
      [](const auto& v) { return ad::conv2d(v[0], v[1], v[2], 1, 1); });
  run("conv2d stride 2", {Shape{1, 2, 6, 6}, Shape{2, 2, 3, 3}}, Shape{1, 2, 2, 2},
      [](const auto& v) { return ad::conv2d(v[0], v[1], VarD{}, 2, 0); });
  run("conv2d 1x1", {Shape{2, 3, 4, 4}, Shape{2, 3, 1, 1}, Shape{2}}, Shape{2, 2, 4, 4},
      [](const auto& v) { return ad::conv2d(v[0], v[1], v[2], 1, 0); });
  run("avg_pool2", {Shape{2, 2, 4, 4}}, Shape{2, 2, 2, 2}, [](const auto& v) { return ad::avg_pool2(v[0]); });
  run("nearest_upsample2", {Shape{2, 2, 3, 3}}, Shape{2, 2, 6, 6},
      [](const auto& v) { return ad::nearest_upsample2(v[0]); });
  run("group_norm", {Shape{2, 4, 3, 3}, Shape{4}, Shape{4}}, Shape{2, 4, 3, 3},
      [](const auto& v) { return ad::group_norm(v[0], 2, v[1], v[2]); });
  run("softmax_attention", {Shape{2, 3, 2, 2}, Shape{2, 3, 2, 2}, Shape{2, 3, 2, 2}}, Shape{2, 3, 2, 2},
      [](const auto& v) { return ad::softmax_attention(v[0], v[1], v[2]); });
  run("concat_channels", {Shape{2, 1, 3, 3}, Shape{2, 2, 3, 3}}, Shape{2, 3, 3, 3},
      [](const auto& v) { return ad::concat_channels<double>({v[0], v[1]}); });
  run("add_channel_bias", {Shape{2, 3, 2, 2}, Shape{2, 3}}, Shape{2, 3, 2, 2},
      [](const auto& v) { return ad::add_channel_bias(v[0], v[1]); });
  run("gather_rows", {Shape{4, 3}}, Shape{3, 3},
      [](const auto& v) { return ad::gather_rows(v[0], std::vector<std::size_t>{2, 0, 2}); });
  return out;
}

DenoiserConfig tiny_denoiser_config() {
  DenoiserConfig c;
  c.image_size = 8;
  c.image_channels = 1;
  c.shots = 2;
  c.num_classes = 3;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.res_blocks_down = 2;
  c.res_blocks_up = 3;
  c.attention_resolutions = {4};
  c.time_embed_dim = 16;
  c.norm_groups = 4;
  return c;
}

std::vector<Episode> random_episodes(const DenoiserConfig& config, int count, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::uniform_int_distribution<int> cls(0, config.num_classes - 1);
  const std::size_t n = static_cast<std::size_t>(config.image_size);
  const std::size_t c = static_cast<std::size_t>(config.image_channels);
  std::vector<Episode> out;
  for (int i = 0; i < count; ++i) {
    Episode e;
    e.x = Tensor<float>(Shape{c, n, n});
    e.k = Tensor<float>(Shape{c * static_cast<std::size_t>(config.shots), n, n});
    e.y0 = Tensor<float>(Shape{1, n, n});
    for (auto& v : e.x.values()) v = unit(rng);
    for (auto& v : e.k.values()) v = unit(rng);
    for (auto& v : e.y0.values()) v = unit(rng) < 0.4f ? 1.0f : 0.0f;
    e.cls = cls(rng);
    e.instance_id = static_cast<std::uint64_t>(i);
    out.push_back(std::move(e));
  }
  return out;
}

CheckResult denoiser_loss_gradient(std::uint64_t seed, int per_tensor, double tol) {
  const DenoiserConfig cfg = tiny_denoiser_config();
  auto params = init_denoiser<double>(cfg, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : params.live) {
    for (auto& v : p.value.values()) v += jitter(rng);
  }
  const auto episodes = random_episodes(cfg, 3, rng);
  const NoiseSchedule s = NoiseSchedule::linear(20, 1e-3, 0.2);
  const std::uint64_t loss_seed = seed ^ 0x5eedULL;

  auto loss_with = [&](ad::Tape<double>* tape) {
    std::mt19937_64 draw(loss_seed);
    const Denoiser<double> net(cfg, params.live);
    return simple_loss<double>(tape, net, s, episodes, 0.5, draw);
  };

  ad::Tape<double> tape;
  const auto sample = loss_with(&tape);
  tape.backward(sample.loss);

  const double h = 1e-5;
  double worst = 0;
  std::size_t checked = 0;
  std::string worst_name;
  for (auto& p : params.live) {
    const Tensor<double>* g = tape.grad_of(p.value);
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (static_cast<int>(idx.size()) > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(per_tensor));
    }
    for (std::size_t j : idx) {
      const double keep = p.value[j];
      p.value[j] = keep + h;
      const double up = loss_with(nullptr).loss.value().item();
      p.value[j] = keep - h;
      const double down = loss_with(nullptr).loss.value().item();
      p.value[j] = keep;
      const double err = relative_error(g ? (*g)[j] : 0.0, (up - down) / (2 * h));
      if (err > worst) {
        worst = err;
        worst_name = p.name;
      }
      ++checked;
    }
  }
  return below("grad full simple_loss (8x8)", worst, tol,
               std::to_string(checked) + " entries over " + std::to_string(params.live.size()) +
                   " tensors, max rel err " + fmt(worst) + " at " + worst_name);
}

CheckResult guidance_linearity(std::mt19937_64& rng, int trials) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> pick_omega(-2.0, 10.0);
  const DenoiserConfig cfg = tiny_denoiser_config();
  auto episodes = random_episodes(cfg, 3, rng);
  std::size_t mismatches = 0;
  for (int i = 0; i < trials; ++i) {
    const double a = normal(rng), b = normal(rng), omega = pick_omega(rng);
    const ConstantEps<double> stub(a, b);
    std::vector<int> classes;
    for (const auto& e : episodes) classes.push_back(e.cls);
    const auto q = make_query<double>(episodes, Tensor<double>(Shape{3, 1, 8, 8}), classes, {1, 2, 3});
    const Tensor<double> got = guided_eps(stub, q, omega);
    const double want = omega * a + (1.0 - omega) * b;
    for (double v : got.values()) mismatches += v != want;
  }
  return {"guidance linearity (exact)", mismatches == 0, static_cast<double>(mismatches), 0.0,
          std::to_string(trials) + " random omegas, " + std::to_string(mismatches) + " inexact entries"};
}

CheckResult omega_one_matches_conditional(std::uint64_t seed) {
  const DenoiserConfig cfg = tiny_denoiser_config();
  auto params = init_denoiser<float>(cfg, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> jitter(0.0f, 0.1f);
  for (auto& p : params.ema) {
    for (auto& v : p.value.values()) v += jitter(rng);
  }
  const auto episodes = random_episodes(cfg, 3, rng);
  const NoiseSchedule s = NoiseSchedule::linear(20, 1e-3, 0.2);
  const Denoiser<float> net(cfg, params.ema);
  SamplerConfig guided;
  guided.omega = 1.0;
  guided.seed = seed;
  SamplerConfig plain = guided;
  plain.guided = false;
  const std::vector<std::uint64_t> ids{1, 2, 3};
  const auto a = sample_masks<float>(net, s, episodes, ids, guided);
  const auto b = sample_masks<float>(net, s, episodes, ids, plain);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.continuous.size(); ++i) diff += a.continuous[i] != b.continuous[i];
  return {"omega=1 sampling equals conditional sampling (bitwise)", diff == 0, static_cast<double>(diff), 0.0,
          std::to_string(diff) + " differing values"};
}

CheckResult oracle_reverse_step(const NoiseSchedule& s, std::mt19937_64& rng, double tol) {
  const DenoiserConfig cfg = tiny_denoiser_config();
  auto episodes = random_episodes(cfg, 1, rng);
  const Tensor<double> y0 = encode_mask<double>(episodes[0].y0);
  const OracleEps<double> oracle(s, y0);
  SamplerConfig sc;
  sc.guided = false;
  double worst = 0;
  std::uniform_int_distribution<int> pick_t(2, s.steps());
  for (int trial = 0; trial < 10; ++trial) {
    const int t = pick_t(rng);
    const Tensor<double> eps = random_tensor(y0.shape(), rng);
    const Tensor<double> y_t = q_sample(s, y0, t, eps);
    auto q = make_query<double>(episodes, y_t.reshaped(Shape{1, 1, 8, 8}), {episodes[0].cls}, {t});
    const auto zero = [&](int) { return Tensor<double>(Shape{1, 1, 8, 8}); };
    const Tensor<double> stepped = reverse_steps<double>(oracle, s, q, q.y_t, t, t, sc, zero);
    const auto post = posterior_params(s, y_t, y0, t);
    for (std::size_t i = 0; i < post.mean.size(); ++i) worst = std::max(worst, std::fabs(stepped[i] - post.mean[i]));
  }
  return below("oracle reverse step = posterior mean", worst, tol, "max |diff| " + fmt(worst));
}

CheckResult oracle_vub(const NoiseSchedule& s, std::mt19937_64& rng, double tol) {
  const DenoiserConfig cfg = tiny_denoiser_config();
  auto episodes = random_episodes(cfg, 1, rng);
  const OracleEps<double> oracle(s, encode_mask<double>(episodes[0].y0));
  VubOptions opt;
  opt.exact = true;
  const VubTerms terms = vub_terms<double>(oracle, s, episodes[0], rng, opt);
  double worst = 0;
  for (const auto& [t, v] : terms.l_t) worst = std::max(worst, std::fabs(v));
  return below("oracle stub L_t = 0 (exact mode, T=" + std::to_string(s.steps()) + ")", worst, tol,
               std::to_string(terms.l_t.size()) + " terms, max |L_t| " + fmt(worst));
}

std::vector<CheckResult> run_analytic_suites(std::uint64_t seed) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(seed);
  for (int T : {4, 100, 1000}) out.push_back(schedule_identities(T));
  const NoiseSchedule standard = NoiseSchedule::linear(1000, 1e-4, 0.02);
  out.push_back({"abar_1000 < 0.02", standard.alpha_bar(1000) < 0.02, standard.alpha_bar(1000), 0.02, {}});
  {
    double worst = 0;
    const double abar = standard.alpha_bar(1000);
    for (double y0 : {-1.0, 1.0}) {
      const double mu = std::sqrt(abar) * y0, var = 1 - abar;
      worst = std::max(worst, 0.5 * (-std::log(var) + var + mu * mu - 1.0));
    }
    out.push_back(below("L_T per pixel < 0.1 nats", worst, 0.1, fmt(worst) + " nats"));
  }
  out.push_back(posterior_oracle(standard, rng));
  {
    const auto moments = chain_consistency(standard, {10, 500, 1000}, 100000, rng);
    double worst = 0;
    for (const auto& m : moments) worst = std::max({worst, std::fabs(m.z_mean), std::fabs(m.z_var)});
    out.push_back({"forward chain vs closed-form marginal", worst <= 4.0, worst, 4.0, "max |z| " + fmt(worst)});
  }
  for (auto& r : primitive_gradient_suite(rng)) out.push_back(std::move(r));
  out.push_back(denoiser_loss_gradient(seed));
  out.push_back(guidance_linearity(rng));
  out.push_back(omega_one_matches_conditional(seed));
  out.push_back(oracle_reverse_step(standard, rng));
  out.push_back(oracle_vub(NoiseSchedule::linear(50, 2e-3, 0.4), rng));
  return out;
}

}  // namespace maskdiff::verify
