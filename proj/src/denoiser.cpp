#include "maskdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace maskdiff {

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("denoiser config: " + msg); };
  if (image_size < 1) fail("image_size must be positive");
  if (image_channels < 1) fail("image_channels must be positive");
  if (shots < 1) fail("shots (K) must be >= 1");
  if (num_classes < 1) fail("num_classes (N) must be >= 1");
  if (base_channels < 1) fail("base_channels must be positive");
  if (channel_multipliers.empty()) fail("channel_multipliers must not be empty");
  for (int m : channel_multipliers) {
    if (m < 1) fail("channel multipliers must be positive");
  }
  const int factor = 1 << (levels() - 1);
  if (image_size % factor) fail("image_size must be divisible by 2^(levels-1)");
  if (res_blocks_down < 1) fail("res_blocks_down must be >= 1");
  if (res_blocks_up != res_blocks_down + 1) fail("res_blocks_up must equal res_blocks_down + 1 (skip pairing)");
  if (time_embed_dim < 1) fail("time_embed_dim must be positive");
  if (norm_groups < 1) fail("norm_groups must be positive");
  if (base_channels % 2) fail("base_channels must be even (sinusoidal embedding width)");
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"image_channels", c.image_channels},
                     {"shots", c.shots},
                     {"num_classes", c.num_classes},
                     {"base_channels", c.base_channels},
                     {"channel_multipliers", c.channel_multipliers},
                     {"res_blocks_down", c.res_blocks_down},
                     {"res_blocks_up", c.res_blocks_up},
                     {"attention_resolutions", c.attention_resolutions},
                     {"time_embed_dim", c.time_embed_dim},
                     {"norm_groups", c.norm_groups},
                     {"class_conditional", c.class_conditional}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  static const std::vector<std::string> known{"image_size",      "image_channels",  "shots",
                                              "num_classes",     "base_channels",   "channel_multipliers",
                                              "res_blocks_down", "res_blocks_up",   "attention_resolutions",
                                              "time_embed_dim",  "norm_groups",     "class_conditional"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("denoiser config: unknown key '" + key + "'");
    }
  }
  DenoiserConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.image_channels = j.value("image_channels", d.image_channels);
  c.shots = j.value("shots", d.shots);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.channel_multipliers = j.value("channel_multipliers", d.channel_multipliers);
  c.res_blocks_down = j.value("res_blocks_down", d.res_blocks_down);
  c.res_blocks_up = j.value("res_blocks_up", d.res_blocks_up);
  c.attention_resolutions = j.value("attention_resolutions", d.attention_resolutions);
  c.time_embed_dim = j.value("time_embed_dim", d.time_embed_dim);
  c.norm_groups = j.value("norm_groups", d.norm_groups);
  c.class_conditional = j.value("class_conditional", d.class_conditional);
}

template <typename T>
Tensor<T>& ParamSet<T>::add(std::string name, Tensor<T> value) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value)});
  return entries_.back().value;
}

template <typename T>
Tensor<T>& ParamSet<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

template <typename T>
const Tensor<T>& ParamSet<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

template <typename T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <typename T>
bool ParamSet<T>::same_structure(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || entries_[i].value.shape() != other.entries_[i].value.shape()) {
      return false;
    }
  }
  return true;
}

template <typename T>
bool ParamSet<T>::all_finite() const {
  for (const auto& e : entries_) {
    for (T v : e.value.values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template <typename T>
bool ParamSet<T>::operator==(const ParamSet& other) const {
  if (!same_structure(other)) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!(entries_[i].value == other.entries_[i].value)) return false;
  }
  return true;
}

template <typename T>
void ema_update(DenoiserParams<T>& params, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("ema rate must lie in [0, 1]");
  if (!params.ema.same_structure(params.live)) throw std::logic_error("ema shadow structure differs from live params");
  const T r = static_cast<T>(rate);
  const T one_minus = static_cast<T>(1.0 - rate);
  for (std::size_t i = 0; i < params.live.size(); ++i) {
    auto& shadow = params.ema[i].value;
    const auto& cur = params.live[i].value;
    for (std::size_t j = 0; j < shadow.size(); ++j) shadow[j] = r * shadow[j] + one_minus * cur[j];
  }
}

std::vector<double> timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[static_cast<std::size_t>(i)] = std::sin(t * freq);
    out[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
  }
  return out;
}

namespace {

enum class Init { kFanIn, kZero, kOne, kNormal };

// Resolves parameters by name. In create mode it also allocates and
// initialises them, so the forward pass doubles as the network definition.
template <typename T>
class Builder {
 public:
  Builder(ParamSet<T>* out, std::mt19937_64* rng) : out_(out), rng_(rng) {}
  Builder(const ParamSet<T>* in, ad::Tape<T>* tape) : in_(in), tape_(tape) {}

  ad::Var<T> param(const std::string& name, const Shape& shape, Init init, std::size_t fan_in = 1) {
    if (out_) {
      Tensor<T> v(shape);
      switch (init) {
        case Init::kZero: break;
        case Init::kOne: v.fill(T{1}); break;
        case Init::kFanIn: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
          std::uniform_real_distribution<double> u(-bound, bound);
          for (auto& x : v.values()) x = static_cast<T>(u(*rng_));
          break;
        }
        case Init::kNormal: {
          std::normal_distribution<double> n(0.0, 1.0);
          for (auto& x : v.values()) x = static_cast<T>(n(*rng_));
          break;
        }
      }
      return ad::constant(out_->add(name, std::move(v)));
    }
    const Tensor<T>& src = in_->at(name);
    if (src.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + to_string(src.shape()) + ", network expects " +
                       to_string(shape));
    }
    return tape_ ? tape_->parameter(src) : ad::constant(src);
  }

 private:
  ParamSet<T>* out_ = nullptr;
  std::mt19937_64* rng_ = nullptr;
  const ParamSet<T>* in_ = nullptr;
  ad::Tape<T>* tape_ = nullptr;
};

std::size_t groups_for(int norm_groups, std::size_t channels) {
  return std::gcd(static_cast<std::size_t>(norm_groups), channels);
}

template <typename T>
class UNet {
 public:
  UNet(const DenoiserConfig& cfg, Builder<T>& b) : cfg_(cfg), b_(b) {}

  ad::Var<T> run(const EpsQuery<T>& q) {
    const std::size_t batch = q.batch();
    const auto hw = static_cast<std::size_t>(cfg_.image_size);

    // Time embedding: sinusoid -> dense -> SiLU -> dense.
    const auto tdim = static_cast<std::size_t>(cfg_.base_channels);
    Tensor<T> sinus(Shape{batch, tdim});
    for (std::size_t i = 0; i < batch; ++i) {
      auto e = timestep_embedding(q.steps[i], static_cast<int>(tdim));
      for (std::size_t j = 0; j < tdim; ++j) sinus[i * tdim + j] = static_cast<T>(e[j]);
    }
    const auto edim = static_cast<std::size_t>(cfg_.time_embed_dim);
    auto temb = dense("time.0", ad::constant(std::move(sinus)), tdim, edim);
    temb = dense("time.1", ad::silu(temb), edim, edim);
    temb_act_ = ad::silu(temb);

    if (cfg_.class_conditional) {
      const auto n = static_cast<std::size_t>(cfg_.num_classes);
      auto table = b_.param("class.table", {n + 1, edim}, Init::kNormal);
      std::vector<std::size_t> rows(batch);
      for (std::size_t i = 0; i < batch; ++i) rows[i] = q.classes[i] == kNullClass ? n : static_cast<std::size_t>(q.classes[i]);
      cemb_ = ad::gather_rows(table, rows);
    }

    // Conditioning by channel concatenation of y_t, x and the supports.
    auto h = ad::concat_channels<T>({ad::constant(q.y_t), ad::constant(q.x), ad::constant(q.k)});

    auto ch = channels(0);
    h = conv("in", h, static_cast<std::size_t>(cfg_.input_channels()), ch, 3);
    std::vector<ad::Var<T>> skips{h};
    std::vector<std::size_t> skip_ch{ch};
    std::size_t res = hw;
    for (int lvl = 0; lvl < cfg_.levels(); ++lvl) {
      for (int i = 0; i < cfg_.res_blocks_down; ++i) {
        const std::string name = "down." + std::to_string(lvl) + "." + std::to_string(i);
        h = res_block(name, h, ch, channels(lvl));
        ch = channels(lvl);
        if (attends(res)) h = attention(name + ".attn", h, ch);
        skips.push_back(h);
        skip_ch.push_back(ch);
      }
      if (lvl != cfg_.levels() - 1) {
        h = ad::avg_pool2(h);
        res /= 2;
        skips.push_back(h);
        skip_ch.push_back(ch);
      }
    }

    h = res_block("mid.0", h, ch, ch);
    h = attention("mid.attn", h, ch);
    h = res_block("mid.1", h, ch, ch);

    for (int lvl = cfg_.levels() - 1; lvl >= 0; --lvl) {
      for (int i = 0; i < cfg_.res_blocks_up; ++i) {
        const std::string name = "up." + std::to_string(lvl) + "." + std::to_string(i);
        h = ad::concat_channels<T>({h, skips.back()});
        const std::size_t in_ch = ch + skip_ch.back();
        skips.pop_back();
        skip_ch.pop_back();
        h = res_block(name, h, in_ch, channels(lvl));
        ch = channels(lvl);
        if (attends(res)) h = attention(name + ".attn", h, ch);
      }
      if (lvl != 0) {
        h = conv("up." + std::to_string(lvl) + ".upsample", ad::nearest_upsample2(h), ch, ch, 3);
        res *= 2;
      }
    }

    h = ad::silu(norm("out.norm", h, ch));
    return conv("out", h, ch, 1, 3, Init::kZero);
  }

 private:
  std::size_t channels(int lvl) const {
    return static_cast<std::size_t>(cfg_.base_channels * cfg_.channel_multipliers[static_cast<std::size_t>(lvl)]);
  }
  bool attends(std::size_t res) const {
    return std::find(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end(), static_cast<int>(res)) !=
           cfg_.attention_resolutions.end();
  }

  ad::Var<T> dense(const std::string& name, const ad::Var<T>& x, std::size_t in, std::size_t out,
                   Init init = Init::kFanIn) {
    auto w = b_.param(name + ".w", {out, in}, init, in);
    auto bias = b_.param(name + ".b", {out}, init, in);
    return ad::linear(x, w, bias);
  }

  ad::Var<T> conv(const std::string& name, const ad::Var<T>& x, std::size_t in, std::size_t out, std::size_t kernel,
                  Init init = Init::kFanIn) {
    const std::size_t fan_in = in * kernel * kernel;
    auto w = b_.param(name + ".w", {out, in, kernel, kernel}, init, fan_in);
    auto bias = b_.param(name + ".b", {out}, init, fan_in);
    return ad::conv2d(x, w, bias, 1, kernel / 2);
  }

  ad::Var<T> norm(const std::string& name, const ad::Var<T>& x, std::size_t ch) {
    auto g = b_.param(name + ".g", {ch}, Init::kOne);
    auto beta = b_.param(name + ".b", {ch}, Init::kZero);
    return ad::group_norm(x, groups_for(cfg_.norm_groups, ch), g, beta);
  }

  ad::Var<T> res_block(const std::string& name, const ad::Var<T>& x, std::size_t in, std::size_t out) {
    auto h = conv(name + ".conv1", ad::silu(norm(name + ".norm1", x, in)), in, out, 3);
    const auto edim = static_cast<std::size_t>(cfg_.time_embed_dim);
    h = ad::add_channel_bias(h, dense(name + ".temb", temb_act_, edim, out));
    if (cfg_.class_conditional) h = ad::add_channel_bias(h, dense(name + ".cemb", cemb_, edim, out));
    h = conv(name + ".conv2", ad::silu(norm(name + ".norm2", h, out)), out, out, 3, Init::kZero);
    auto skip = in == out ? x : conv(name + ".skip", x, in, out, 1);
    return ad::add(skip, h);
  }

  ad::Var<T> attention(const std::string& name, const ad::Var<T>& x, std::size_t ch) {
    auto n = norm(name + ".norm", x, ch);
    auto q = conv(name + ".q", n, ch, ch, 1);
    auto k = conv(name + ".k", n, ch, ch, 1);
    auto v = conv(name + ".v", n, ch, ch, 1);
    auto a = ad::softmax_attention(q, k, v);
    return ad::add(x, conv(name + ".proj", a, ch, ch, 1, Init::kZero));
  }

  const DenoiserConfig& cfg_;
  Builder<T>& b_;
  ad::Var<T> temb_act_;
  ad::Var<T> cemb_;
};

template <typename T>
void check_query(const DenoiserConfig& cfg, const EpsQuery<T>& q) {
  const std::size_t batch = q.batch();
  if (batch == 0) throw ShapeError("denoiser: empty batch");
  if (q.steps.size() != batch) throw ShapeError("denoiser: steps and classes differ in length");
  const auto hw = static_cast<std::size_t>(cfg.image_size);
  const auto c = static_cast<std::size_t>(cfg.image_channels);
  require_same_shape(q.y_t.shape(), Shape{batch, 1, hw, hw}, "denoiser y_t");
  require_same_shape(q.x.shape(), Shape{batch, c, hw, hw}, "denoiser x");
  require_same_shape(q.k.shape(), Shape{batch, static_cast<std::size_t>(cfg.shots) * c, hw, hw}, "denoiser k");
  for (std::size_t i = 0; i < batch; ++i) {
    if (q.steps[i] < 1) throw std::out_of_range("denoiser: diffusion step must be >= 1");
    if (q.classes[i] != kNullClass && (q.classes[i] < 0 || q.classes[i] >= cfg.num_classes)) {
      throw std::out_of_range("denoiser: class index " + std::to_string(q.classes[i]) + " outside [0, " +
                              std::to_string(cfg.num_classes) + ")");
    }
  }
}

}  // namespace

template <typename T>
DenoiserParams<T> init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DenoiserParams<T> params;
  Builder<T> builder(&params.live, &rng);
  const auto hw = static_cast<std::size_t>(config.image_size);
  const auto c = static_cast<std::size_t>(config.image_channels);
  EpsQuery<T> probe{Tensor<T>(Shape{1, 1, hw, hw}), Tensor<T>(Shape{1, c, hw, hw}),
                    Tensor<T>(Shape{1, c * static_cast<std::size_t>(config.shots), hw, hw}), {kNullClass}, {1}};
  UNet<T>(config, builder).run(probe);
  params.ema = params.live;
  return params;
}

template <typename T>
ad::Var<T> Denoiser<T>::forward(ad::Tape<T>* tape, const EpsQuery<T>& query) const {
  check_query(config_, query);
  Builder<T> builder(&params_, tape);
  return UNet<T>(config_, builder).run(query);
}

template <typename T>
Tensor<T> predict_eps(const DenoiserConfig& config, const ParamSet<T>& params, const Tensor<T>& y_t,
                      const Tensor<T>& x, const Tensor<T>& k, std::optional<int> cls, int t) {
  auto batched = [](const Tensor<T>& v, const char* what) {
    if (v.rank() != 3) throw ShapeError(std::string("predict_eps: ") + what + " must be [C,H,W]");
    Shape s{1};
    s.insert(s.end(), v.shape().begin(), v.shape().end());
    return v.reshaped(s);
  };
  EpsQuery<T> q{batched(y_t, "y_t"), batched(x, "x"), batched(k, "k"), {cls.value_or(kNullClass)}, {t}};
  Denoiser<T> net(config, params);
  return net.predict(q).reshaped(y_t.shape());
}

template <typename T>
Tensor<T> permute_shots(const Tensor<T>& k, int shots, const std::vector<int>& order) {
  if (k.rank() != 4) throw ShapeError("permute_shots: expected [B,K*C,H,W]");
  if (order.size() != static_cast<std::size_t>(shots) || shots < 1 || k.dim(1) % static_cast<std::size_t>(shots)) {
    throw ShapeError("permute_shots: order does not match shot count");
  }
  const std::size_t per_shot = k.dim(1) / static_cast<std::size_t>(shots) * k.dim(2) * k.dim(3);
  const std::size_t per_item = per_shot * static_cast<std::size_t>(shots);
  Tensor<T> out(k.shape());
  for (std::size_t b = 0; b < k.dim(0); ++b) {
    for (std::size_t s = 0; s < order.size(); ++s) {
      const T* src = k.data() + b * per_item + static_cast<std::size_t>(order[s]) * per_shot;
      std::copy(src, src + per_shot, out.data() + b * per_item + s * per_shot);
    }
  }
  return out;
}

template <typename T>
double permutation_sensitivity(const EpsModel<T>& model, const EpsQuery<T>& query, int shots, int trials,
                               std::mt19937_64& rng) {
  const Tensor<T> base = model.predict(query);
  std::vector<int> order(static_cast<std::size_t>(shots));
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpsQuery<T> permuted = query;
    permuted.k = permute_shots(query.k, shots, order);
    const Tensor<T> out = model.predict(permuted);
    for (std::size_t i = 0; i < out.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(out[i]) - static_cast<double>(base[i])));
    }
  }
  return worst;
}

#define MASKDIFF_INSTANTIATE_DENOISER(T)                                                                            \
  template class ParamSet<T>;                                                                                       \
  template class Denoiser<T>;                                                                                       \
  template DenoiserParams<T> init_denoiser<T>(const DenoiserConfig&, std::uint64_t);                                \
  template void ema_update<T>(DenoiserParams<T>&, double);                                                          \
  template Tensor<T> predict_eps<T>(const DenoiserConfig&, const ParamSet<T>&, const Tensor<T>&, const Tensor<T>&, \
                                    const Tensor<T>&, std::optional<int>, int);                                     \
  template Tensor<T> permute_shots<T>(const Tensor<T>&, int, const std::vector<int>&);                              \
  template double permutation_sensitivity<T>(const EpsModel<T>&, const EpsQuery<T>&, int, int, std::mt19937_64&);

MASKDIFF_INSTANTIATE_DENOISER(float)
MASKDIFF_INSTANTIATE_DENOISER(double)

}  // namespace maskdiff
