#include "maskdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "maskdiff/rng.hpp"

namespace maskdiff {

namespace {

void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const char* what) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
Tensor<T> standard_normal(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(n(rng));
  return out;
}

Shape mask_shape(const Episode& e) { return e.y0.shape(); }

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train config: learning_rate must be >= 0");
  if (!(uncond_dropout_prob >= 0.0 && uncond_dropout_prob <= 1.0)) {
    throw std::invalid_argument("train config: uncond_dropout_prob must lie in [0, 1]");
  }
  if (!(ema_rate >= 0.0 && ema_rate <= 1.0)) throw std::invalid_argument("train config: ema_rate must lie in [0, 1]");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},       {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},       {"steps", c.steps},
                     {"ema_rate", c.ema_rate},           {"ema_warmup", c.ema_warmup},
                     {"uncond_dropout_prob", c.uncond_dropout_prob}, {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                              {"learning_rate", "adam_beta1", "adam_beta2", "weight_decay", "batch_size", "steps",
                               "ema_rate", "ema_warmup", "uncond_dropout_prob", "log_every"},
                              "train config");
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.ema_rate = j.value("ema_rate", d.ema_rate);
  c.ema_warmup = j.value("ema_warmup", d.ema_warmup);
  c.uncond_dropout_prob = j.value("uncond_dropout_prob", d.uncond_dropout_prob);
  c.log_every = j.value("log_every", d.log_every);
}

void SamplerConfig::validate(const NoiseSchedule& s) const {
  if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0)) {
    throw std::invalid_argument("sampler config: binarize_threshold must lie in (0, 1)");
  }
  if (steps != 0 && steps != s.steps()) {
    throw std::invalid_argument("sampler config: steps must equal the schedule length (" + std::to_string(s.steps()) +
                                ")");
  }
  if (!std::isfinite(omega)) throw std::invalid_argument("sampler config: omega must be finite");
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = nlohmann::json{{"omega", c.omega},
                     {"guided", c.guided},
                     {"binarize_threshold", c.binarize_threshold},
                     {"seed", c.seed},
                     {"steps", c.steps}};
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
  reject_unknown(j, {"omega", "guided", "binarize_threshold", "seed", "steps"}, "sampler config");
  SamplerConfig d;
  c.omega = j.value("omega", d.omega);
  c.guided = j.value("guided", d.guided);
  c.binarize_threshold = j.value("binarize_threshold", d.binarize_threshold);
  c.seed = j.value("seed", d.seed);
  c.steps = j.value("steps", d.steps);
}

template <typename T>
Tensor<T> encode_mask(const Tensor<float>& mask01) {
  Tensor<T> out(mask01.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(2.0f * mask01[i] - 1.0f);
  return out;
}

template <typename T>
EpsQuery<T> make_query(std::span<const Episode> batch, Tensor<T> y_t, std::vector<int> classes,
                       std::vector<int> steps) {
  if (batch.empty()) throw std::invalid_argument("make_query: empty batch");
  const Shape& xs = batch[0].x.shape();
  const Shape& ks = batch[0].k.shape();
  const std::size_t b = batch.size();
  Tensor<T> x(Shape{b, xs[0], xs[1], xs[2]});
  Tensor<T> k(Shape{b, ks[0], ks[1], ks[2]});
  for (std::size_t i = 0; i < b; ++i) {
    require_same_shape(batch[i].x.shape(), xs, "make_query x");
    require_same_shape(batch[i].k.shape(), ks, "make_query k");
    std::copy(batch[i].x.values().begin(), batch[i].x.values().end(), x.data() + i * batch[i].x.size());
    std::copy(batch[i].k.values().begin(), batch[i].k.values().end(), k.data() + i * batch[i].k.size());
  }
  return EpsQuery<T>{std::move(y_t), std::move(x), std::move(k), std::move(classes), std::move(steps)};
}

template <typename T>
LossSample<T> simple_loss(ad::Tape<T>* tape, const EpsModel<T>& model, const NoiseSchedule& s,
                          std::span<const Episode> batch, double uncond_prob, std::mt19937_64& rng) {
  if (batch.empty()) throw std::invalid_argument("simple_loss: empty batch");
  const Shape ms = mask_shape(batch[0]);
  const std::size_t pixels = numel(ms);
  const std::size_t b = batch.size();
  std::uniform_int_distribution<int> pick_t(1, s.steps());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor<T> y_t(Shape{b, ms[0], ms[1], ms[2]});
  Tensor<T> eps(y_t.shape());
  std::vector<int> steps(b), classes(b);
  for (std::size_t i = 0; i < b; ++i) {
    require_same_shape(batch[i].y0.shape(), ms, "simple_loss y0");
    steps[i] = pick_t(rng);
    classes[i] = unit(rng) < uncond_prob ? kNullClass : batch[i].cls;
    Tensor<T> e = standard_normal<T>(ms, rng);
    Tensor<T> noisy = q_sample(s, encode_mask<T>(batch[i].y0), steps[i], e);
    std::copy(e.values().begin(), e.values().end(), eps.data() + i * pixels);
    std::copy(noisy.values().begin(), noisy.values().end(), y_t.data() + i * pixels);
  }
  auto query = make_query<T>(batch, std::move(y_t), classes, steps);
  auto pred = model.forward(tape, query);
  require_same_shape(pred.shape(), eps.shape(), "simple_loss prediction");
  auto diff = ad::sub(pred, ad::constant(std::move(eps)));
  return {ad::mean(ad::mul(diff, diff)), std::move(steps), std::move(classes)};
}

template <typename T>
Tensor<T> guided_eps(const EpsModel<T>& model, const EpsQuery<T>& query, double omega) {
  // Two separate passes keep the conditional half bit-identical to an
  // unguided call on the same query.
  const Tensor<T> cond = model.predict(query);
  EpsQuery<T> null_query = query;
  std::fill(null_query.classes.begin(), null_query.classes.end(), kNullClass);
  const Tensor<T> uncond = model.predict(null_query);
  const T w = static_cast<T>(omega);
  const T w_null = static_cast<T>(1.0 - omega);
  Tensor<T> mixed(cond.shape());
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = w * cond[i] + w_null * uncond[i];
  return mixed;
}

float binarize(double chain_value, double threshold) {
  return (chain_value + 1.0) / 2.0 >= threshold ? 1.0f : 0.0f;
}

template <typename T>
Tensor<T> reverse_steps(const EpsModel<T>& model, const NoiseSchedule& s, const EpsQuery<T>& conditioning,
                        Tensor<T> y, int from, int to, const SamplerConfig& config,
                        const std::function<Tensor<T>(int)>& noise,
                        const std::function<void(int, const Tensor<T>&)>& on_step) {
  if (to < 1 || from > s.steps() || to > from) throw std::out_of_range("reverse_steps: invalid step range");
  EpsQuery<T> q = conditioning;
  for (int t = from; t >= to; --t) {
    q.y_t = y;
    std::fill(q.steps.begin(), q.steps.end(), t);
    const Tensor<T> eps = config.guided ? guided_eps(model, q, config.omega) : model.predict(q);
    y = mean_from_eps(s, y, eps, t);
    if (t > 1) {
      const Tensor<T> z = noise(t);
      require_same_shape(z.shape(), y.shape(), "reverse_steps noise");
      const T sigma = static_cast<T>(std::sqrt(s.sampler_variance(t)));
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += sigma * z[i];
    }
    if (on_step) on_step(t, y);
  }
  return y;
}

template <typename T>
SampleResult<T> sample_masks(const EpsModel<T>& model, const NoiseSchedule& s, std::span<const Episode> conditioning,
                             const std::vector<std::uint64_t>& stream_ids, const SamplerConfig& config,
                             int snapshot_every) {
  if (stream_ids.size() != conditioning.size()) throw std::invalid_argument("sample_masks: one stream id per item");
  std::vector<std::mt19937_64> streams;
  streams.reserve(stream_ids.size());
  for (auto id : stream_ids) streams.push_back(make_stream(config.seed, id));
  return sample_masks_with_streams(model, s, conditioning, streams, config, snapshot_every);
}

template <typename T>
SampleResult<T> sample_masks_with_streams(const EpsModel<T>& model, const NoiseSchedule& s,
                                          std::span<const Episode> conditioning, std::vector<std::mt19937_64>& streams,
                                          const SamplerConfig& config, int snapshot_every) {
  config.validate(s);
  if (conditioning.empty()) throw std::invalid_argument("sample_masks: nothing to sample");
  if (streams.size() != conditioning.size()) throw std::invalid_argument("sample_masks: one stream per item");
  const std::size_t b = conditioning.size();
  const Shape ms = mask_shape(conditioning[0]);
  const std::size_t pixels = numel(ms);
  const Shape batch_shape{b, ms[0], ms[1], ms[2]};
  auto draw = [&](int) {
    Tensor<T> z(batch_shape);
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t p = 0; p < pixels; ++p) z[i * pixels + p] = static_cast<T>(n(streams[i]));
    }
    return z;
  };

  std::vector<int> classes(b);
  for (std::size_t i = 0; i < b; ++i) classes[i] = conditioning[i].cls;
  auto query = make_query<T>(conditioning, Tensor<T>(batch_shape), classes, std::vector<int>(b, s.steps()));

  SampleResult<T> result;
  Tensor<T> y_T = draw(s.steps());
  if (snapshot_every > 0) result.snapshots.emplace_back(s.steps(), y_T);
  std::function<void(int, const Tensor<T>&)> observer;
  if (snapshot_every > 0) {
    observer = [&](int t, const Tensor<T>& y_prev) {
      if ((t - 1) % snapshot_every == 0) result.snapshots.emplace_back(t - 1, y_prev);
    };
  }
  result.continuous = reverse_steps<T>(model, s, query, std::move(y_T), s.steps(), 1, config, draw, observer);
  result.masks = Tensor<float>(batch_shape);
  for (std::size_t i = 0; i < result.masks.size(); ++i) {
    result.masks[i] = binarize(static_cast<double>(result.continuous[i]), config.binarize_threshold);
  }
  return result;
}

double gaussian_kl(double mu1, double var1, double mu2, double var2) {
  const double d = mu1 - mu2;
  return 0.5 * (std::log(var2 / var1) + (var1 + d * d) / var2 - 1.0);
}

template <typename T>
VubTerms vub_terms(const EpsModel<T>& model, const NoiseSchedule& s, const Episode& episode, std::mt19937_64& rng,
                   const VubOptions& options) {
  if (options.stride < 1) throw std::invalid_argument("vub_terms: stride must be >= 1");
  const Tensor<T> y0 = encode_mask<T>(episode.y0);
  const Shape ms = y0.shape();
  const std::size_t pixels = y0.size();
  VubTerms terms;
  terms.pixels = pixels;

  const double abar_T = s.alpha_bar(s.steps());
  for (std::size_t i = 0; i < pixels; ++i) {
    terms.l_T += gaussian_kl(std::sqrt(abar_T) * static_cast<double>(y0[i]), 1.0 - abar_T, 0.0, 1.0);
  }

  // Model evaluations at step u = t + 1 for L_t (t = 1..T-1) and u = 1 for L_0.
  std::vector<int> evaluated;
  const int step = options.exact ? 1 : options.stride;
  for (int t = 1; t <= s.steps() - 1; t += step) evaluated.push_back(t);

  std::vector<int> model_steps;
  std::vector<Tensor<T>> states;
  for (int t : evaluated) {
    model_steps.push_back(t + 1);
    states.push_back(q_sample(s, y0, t + 1, standard_normal<T>(ms, rng)));
  }
  model_steps.push_back(1);
  states.push_back(q_sample(s, y0, 1, standard_normal<T>(ms, rng)));

  constexpr std::size_t kChunk = 32;
  std::vector<Tensor<T>> eps_hat(states.size());
  for (std::size_t first = 0; first < states.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, states.size() - first);
    std::vector<Episode> reps(count, episode);
    Tensor<T> y_t(Shape{count, ms[0], ms[1], ms[2]});
    for (std::size_t i = 0; i < count; ++i) {
      std::copy(states[first + i].values().begin(), states[first + i].values().end(), y_t.data() + i * pixels);
    }
    std::vector<int> steps(model_steps.begin() + static_cast<std::ptrdiff_t>(first),
                           model_steps.begin() + static_cast<std::ptrdiff_t>(first + count));
    auto query = make_query<T>(reps, std::move(y_t), std::vector<int>(count, episode.cls), steps);
    const Tensor<T> eps = options.omega == 1.0 ? model.predict(query) : guided_eps(model, query, options.omega);
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<T> slice(eps.values().begin() + static_cast<std::ptrdiff_t>(i * pixels),
                           eps.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * pixels));
      eps_hat[first + i] = Tensor<T>(ms, std::move(slice));
    }
  }
  for (const auto& e : eps_hat) {
    for (T v : e.values()) {
      if (!std::isfinite(static_cast<double>(v))) throw std::runtime_error("vub_terms: non-finite network output");
    }
  }

  for (std::size_t idx = 0; idx < evaluated.size(); ++idx) {
    const int u = evaluated[idx] + 1;
    const auto post = posterior_params(s, states[idx], y0, u);
    const Tensor<T> mu_model = mean_from_eps(s, states[idx], eps_hat[idx], u);
    const double model_var = s.sampler_variance(u);
    double kl = 0;
    for (std::size_t i = 0; i < pixels; ++i) {
      kl += gaussian_kl(static_cast<double>(post.mean[i]), post.variance, static_cast<double>(mu_model[i]), model_var);
    }
    terms.l_t.emplace_back(evaluated[idx], kl);
    terms.sum_l_t += kl;
  }
  if (!options.exact && !evaluated.empty()) {
    terms.sum_l_t *= static_cast<double>(s.steps() - 1) / static_cast<double>(evaluated.size());
  }

  // L_0: Gaussian decoder at t = 1. The posterior variance vanishes there, so
  // beta_1 stands in whenever sigma_1^2 would be zero.
  const Tensor<T> mu0 = mean_from_eps(s, states.back(), eps_hat.back(), 1);
  double var0 = s.sampler_variance(1);
  if (var0 <= 0.0) var0 = s.beta(1);
  for (std::size_t i = 0; i < pixels; ++i) {
    const double d = static_cast<double>(y0[i]) - static_cast<double>(mu0[i]);
    terms.l_0 += 0.5 * std::log(2.0 * std::numbers::pi * var0) + d * d / (2.0 * var0);
  }
  return terms;
}

template <typename T>
TrainReport train(TrainState<T>& state, const NoiseSchedule& s, const BatchSource& source, const TrainConfig& config,
                  std::uint64_t seed, const TrainLogger& log) {
  config.validate();
  if (!state.optimizer.first_moment().same_structure(state.params.live)) state.optimizer = AdamW<T>(state.params.live);
  std::mt19937_64 rng = make_stream(seed, state.step);
  const AdamWConfig opt = config.optimizer();
  TrainReport report;
  for (int n = 0; n < config.steps; ++n) {
    const std::vector<Episode> batch = source(rng);
    ad::Tape<T> tape;
    Denoiser<T> net(state.config, state.params.live);
    LossSample<T> sample = simple_loss<T>(&tape, net, s, batch, config.uncond_dropout_prob, rng);
    const double loss = static_cast<double>(sample.loss.value().item());
    if (!std::isfinite(loss)) {
      double norm = 0;
      for (const auto& p : state.params.live) {
        for (T v : p.value.values()) norm += static_cast<double>(v) * static_cast<double>(v);
      }
      std::ostringstream os;
      os << "non-finite loss at step " << state.step << "; t =";
      for (int t : sample.steps) os << ' ' << t;
      os << "; parameter L2 norm " << std::sqrt(norm);
      throw TrainingDiverged(os.str());
    }
    tape.backward(sample.loss);
    state.optimizer.step(state.params.live, tape, opt);
    double rate = config.ema_rate;
    if (config.ema_warmup) rate = std::min(rate, (1.0 + n) / (10.0 + n));
    ema_update(state.params, rate);
    ++state.step;
    report.losses.push_back(loss);
    if (log && config.log_every > 0 && ((n + 1) % config.log_every == 0 || n + 1 == config.steps)) {
      const std::size_t window = std::min<std::size_t>(static_cast<std::size_t>(config.log_every), report.losses.size());
      double avg = 0;
      for (std::size_t i = report.losses.size() - window; i < report.losses.size(); ++i) avg += report.losses[i];
      log({{"event", "train_step"}, {"step", state.step}, {"loss", loss}, {"loss_avg", avg / static_cast<double>(window)}});
    }
  }
  return report;
}

std::vector<double> smooth(const std::vector<double>& values, std::size_t window) {
  std::vector<double> out(values.size());
  double acc = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= window) acc -= values[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

#define MASKDIFF_INSTANTIATE_DIFFUSION(T)                                                                             \
  template Tensor<T> encode_mask<T>(const Tensor<float>&);                                                            \
  template EpsQuery<T> make_query<T>(std::span<const Episode>, Tensor<T>, std::vector<int>, std::vector<int>);        \
  template LossSample<T> simple_loss<T>(ad::Tape<T>*, const EpsModel<T>&, const NoiseSchedule&,                        \
                                        std::span<const Episode>, double, std::mt19937_64&);                          \
  template Tensor<T> guided_eps<T>(const EpsModel<T>&, const EpsQuery<T>&, double);                                   \
  template Tensor<T> reverse_steps<T>(const EpsModel<T>&, const NoiseSchedule&, const EpsQuery<T>&, Tensor<T>, int,   \
                                      int, const SamplerConfig&, const std::function<Tensor<T>(int)>&,                \
                                      const std::function<void(int, const Tensor<T>&)>&);                             \
  template SampleResult<T> sample_masks<T>(const EpsModel<T>&, const NoiseSchedule&, std::span<const Episode>,        \
                                           const std::vector<std::uint64_t>&, const SamplerConfig&, int);             \
  template SampleResult<T> sample_masks_with_streams<T>(const EpsModel<T>&, const NoiseSchedule&,                   \
                                                        std::span<const Episode>, std::vector<std::mt19937_64>&,     \
                                                        const SamplerConfig&, int);                                 \
  template VubTerms vub_terms<T>(const EpsModel<T>&, const NoiseSchedule&, const Episode&, std::mt19937_64&,          \
                                 const VubOptions&);                                                                  \
  template TrainReport train<T>(TrainState<T>&, const NoiseSchedule&, const BatchSource&, const TrainConfig&,         \
                                std::uint64_t, const TrainLogger&);

MASKDIFF_INSTANTIATE_DIFFUSION(float)
MASKDIFF_INSTANTIATE_DIFFUSION(double)

}  // namespace maskdiff
