#include "maskdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace maskdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'D', 'C', 'K', 'P', 'T', '\r', '\n'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename V>
  void pod(const V& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : p_(data), end_(data + size) {}
  template <typename V>
  V pod() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, p_, sizeof(V));
    p_ += sizeof(V);
    return v;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_, n);
    p_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(p_, n);
    p_ += n;
    return s;
  }
  bool done() const { return p_ == end_; }

 private:
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw CheckpointError("checkpoint: truncated section");
  }
  const char* p_;
  const char* end_;
};

void section(Writer& out, const char tag[4], const std::string& payload) {
  out.bytes(tag, 4);
  out.pod(static_cast<std::uint64_t>(payload.size()));
  out.buffer() += payload;
}

std::string encode_params(const ParamSet<float>& params) {
  Writer w;
  w.pod(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    w.str(e.name);
    w.pod(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.pod(static_cast<std::uint64_t>(d));
    w.bytes(e.value.data(), e.value.size() * sizeof(float));
  }
  return w.buffer();
}

ParamSet<float> decode_params(const std::string& payload) {
  Reader r(payload.data(), payload.size());
  ParamSet<float> out;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CheckpointError("checkpoint: bad tensor rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    Tensor<float> t;
    try {
      t = Tensor<float>(shape);
    } catch (const std::exception& e) {
      throw CheckpointError("checkpoint: bad tensor shape for " + name);
    }
    r.bytes(t.data(), t.size() * sizeof(float));
    out.add(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes in parameter section");
  return out;
}

std::string encode_doubles(std::span<const double> values) {
  Writer w;
  w.pod(static_cast<std::uint64_t>(values.size()));
  w.bytes(values.data(), values.size() * sizeof(double));
  return w.buffer();
}

std::vector<double> decode_doubles(Reader& r) {
  const auto n = r.pod<std::uint64_t>();
  if (n > (1u << 24)) throw CheckpointError("checkpoint: schedule array too long");
  std::vector<double> v(n);
  r.bytes(v.data(), n * sizeof(double));
  return v;
}

bool same_bits(std::span<const double> a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"beta_start", c.beta_start},
                     {"beta_end", c.beta_end},
                     {"sigma_mode", to_string(c.sigma_mode)}};
}

void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key != "steps" && key != "beta_start" && key != "beta_end" && key != "sigma_mode") {
      throw std::invalid_argument("schedule config: unknown key '" + key + "'");
    }
  }
  ScheduleConfig d;
  c.steps = j.value("steps", d.steps);
  c.beta_start = j.value("beta_start", d.beta_start);
  c.beta_end = j.value("beta_end", d.beta_end);
  c.sigma_mode = sigma_mode_from_string(j.value("sigma_mode", std::string(to_string(d.sigma_mode))));
}

std::string fnv1a_hex(const std::string& text) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(text.data(), text.size());
  return os.str();
}

std::string fingerprint_of(const nlohmann::json& document) { return fnv1a_hex(document.dump()); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& st = ckpt.state;
  nlohmann::json header{{"denoiser", st.config},
                        {"schedule", ckpt.schedule},
                        {"fingerprint", ckpt.fingerprint},
                        {"meta", ckpt.meta},
                        {"step", st.step},
                        {"optimizer_steps", st.optimizer.steps_taken()}};
  const NoiseSchedule s = ckpt.schedule.build();
  Writer sched;
  sched.buffer() += encode_doubles(s.betas());
  sched.buffer() += encode_doubles(s.alpha_bars());
  sched.buffer() += encode_doubles(s.posterior_variances());

  Writer out;
  out.bytes(kMagic, sizeof(kMagic));
  out.pod(kVersion);
  section(out, "CONF", header.dump());
  section(out, "LIVE", encode_params(st.params.live));
  section(out, "EMA_", encode_params(st.params.ema));
  section(out, "ADM1", encode_params(st.optimizer.first_moment()));
  section(out, "ADM2", encode_params(st.optimizer.second_moment()));
  section(out, "SCHD", sched.buffer());
  const std::uint64_t sum = fnv1a(out.buffer().data(), out.buffer().size());
  Writer tail;
  tail.pod(sum);
  section(out, "END_", tail.buffer());

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    f.write(out.buffer().data(), static_cast<std::streamsize>(out.buffer().size()));
    if (!f) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kMagic) + 4 || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  Reader r(data.data() + sizeof(kMagic), data.size() - sizeof(kMagic));
  if (const auto v = r.pod<std::uint32_t>(); v != kVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
  }
  std::size_t offset = sizeof(kMagic) + 4;
  std::unordered_map<std::string, std::string> sections;
  bool ended = false;
  while (!r.done()) {
    char tag[4];
    r.bytes(tag, 4);
    const auto len = r.pod<std::uint64_t>();
    if (len > data.size()) throw CheckpointError("checkpoint: section length exceeds file size");
    std::string payload(len, '\0');
    r.bytes(payload.data(), len);
    const std::string name(tag, 4);
    if (name == "END_") {
      Reader tail(payload.data(), payload.size());
      if (tail.pod<std::uint64_t>() != fnv1a(data.data(), offset)) throw CheckpointError("checkpoint: checksum mismatch");
      ended = true;
      if (!r.done()) throw CheckpointError("checkpoint: data after end marker");
      break;
    }
    sections[name] = std::move(payload);
    offset += 12 + len;
  }
  if (!ended) throw CheckpointError("checkpoint: missing end marker");
  for (const char* need : {"CONF", "LIVE", "EMA_", "ADM1", "ADM2", "SCHD"}) {
    if (!sections.count(need)) throw CheckpointError(std::string("checkpoint: missing section ") + need);
  }

  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(sections["CONF"]);
    ckpt.state.config = header.at("denoiser").get<DenoiserConfig>();
    ckpt.schedule = header.at("schedule").get<ScheduleConfig>();
    ckpt.fingerprint = header.at("fingerprint").get<std::string>();
    ckpt.meta = header.at("meta");
    ckpt.state.step = header.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad header: ") + e.what());
  }
  ckpt.state.params.live = decode_params(sections["LIVE"]);
  ckpt.state.params.ema = decode_params(sections["EMA_"]);
  ckpt.state.optimizer = AdamW<float>(ckpt.state.params.live);
  ckpt.state.optimizer.first_moment() = decode_params(sections["ADM1"]);
  ckpt.state.optimizer.second_moment() = decode_params(sections["ADM2"]);
  ckpt.state.optimizer.set_steps_taken(header.at("optimizer_steps").get<std::uint64_t>());

  const auto reference = init_denoiser<float>(ckpt.state.config, 0);
  for (const ParamSet<float>* p : {&ckpt.state.params.live, &ckpt.state.params.ema, &ckpt.state.optimizer.first_moment(),
                                   &ckpt.state.optimizer.second_moment()}) {
    if (!p->same_structure(reference.live)) {
      throw CheckpointError("checkpoint: parameter layout does not match the stored network config");
    }
  }
  if (!ckpt.state.params.live.all_finite() || !ckpt.state.params.ema.all_finite()) {
    throw CheckpointError("checkpoint: non-finite parameters");
  }

  Reader sr(sections["SCHD"].data(), sections["SCHD"].size());
  const auto betas = decode_doubles(sr);
  const auto alpha_bars = decode_doubles(sr);
  const auto post = decode_doubles(sr);
  const NoiseSchedule s = ckpt.schedule.build();
  if (!same_bits(s.betas(), betas) || !same_bits(s.alpha_bars(), alpha_bars) ||
      !same_bits(s.posterior_variances(), post)) {
    throw CheckpointError("checkpoint: stored schedule arrays disagree with the schedule parameters");
  }
  return ckpt;
}

void require_fingerprint(const Checkpoint& ckpt, const std::string& expected, const std::string& what) {
  if (ckpt.fingerprint != expected) {
    throw CheckpointError(what + ": fingerprint mismatch (checkpoint " + ckpt.fingerprint + ", expected " + expected +
                          ")");
  }
}

}  // namespace maskdiff
