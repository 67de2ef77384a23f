#include "smelt/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace smelt {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'L', 'T'};

struct Writer {
  std::string out;

  void u8(uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    out.append(s);
  }
};

struct Reader {
  const std::string& in;
  size_t pos = 0;

  explicit Reader(const std::string& s) : in(s) {}

  void need(size_t n) const {
    if (pos + n > in.size()) throw ChecksumError("checkpoint truncated");
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(in[pos++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(in[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(in[pos++])) << (8 * i);
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint64_t n = u64();
    need(n);
    std::string s = in.substr(pos, n);
    pos += n;
    return s;
  }
};

void write_param_set(Writer& w, const ParamSet& p) {
  w.u32(static_cast<uint32_t>(p.n_layers()));
  for (size_t l = 0; l < p.n_layers(); ++l) {
    const auto& spec = p.layers()[l];
    w.str(spec.name);
    w.u8(static_cast<uint8_t>(spec.kind));
    w.u32(static_cast<uint32_t>(spec.depth_index));
    w.u8(static_cast<uint8_t>(spec.shape.size()));
    for (int e : spec.shape) w.u32(static_cast<uint32_t>(e));
    for (double v : p.value(l).data()) w.f64(v);
  }
}

ParamSet read_param_set(Reader& r) {
  uint32_t n_layers = r.u32();
  Specs specs;
  std::vector<Tensor> vals;
  for (uint32_t l = 0; l < n_layers; ++l) {
    LayerSpec s;
    s.name = r.str();
    s.kind = static_cast<LayerKind>(r.u8());
    s.depth_index = static_cast<int>(r.u32());
    uint8_t nd = r.u8();
    for (uint8_t d = 0; d < nd; ++d) s.shape.push_back(static_cast<int>(r.u32()));
    Tensor t = Tensor::zeros(s.shape);
    for (auto& v : t.data()) v = r.f64();
    specs.push_back(s);
    vals.push_back(std::move(t));
  }
  return ParamSet(make_specs(std::move(specs)), std::move(vals));
}

void write_mask(Writer& w, const HardConcreteMask& m) {
  write_param_set(w, m.log_alpha);
  w.f64(m.cfg.beta);
  w.f64(m.cfg.gamma);
  w.f64(m.cfg.zeta_s);
}

HardConcreteMask read_mask(Reader& r) {
  HardConcreteMask m;
  m.log_alpha = read_param_set(r);
  m.cfg.beta = r.f64();
  m.cfg.gamma = r.f64();
  m.cfg.zeta_s = r.f64();
  m.validate();
  return m;
}

void write_adam(Writer& w, const Adam& a) {
  write_param_set(w, a.m());
  write_param_set(w, a.v());
  w.i64(a.t());
}

Adam read_adam(Reader& r) {
  ParamSet m = read_param_set(r);
  ParamSet v = read_param_set(r);
  int64_t t = r.i64();
  Adam a(m.specs());
  a.restore(std::move(m), std::move(v), t);
  return a;
}

void write_router(Writer& w, const RouterParams& router) {
  w.u32(static_cast<uint32_t>(router.cfg.embed_dim));
  w.u32(static_cast<uint32_t>(router.cfg.experts));
  w.u32(static_cast<uint32_t>(router.cfg.heads));
  w.u32(static_cast<uint32_t>(router.cfg.ffn_mult));
  w.f64(router.cfg.gumbel_temp);
  write_param_set(w, router.params);
}

RouterParams read_router(Reader& r) {
  RouterParams router;
  router.cfg.embed_dim = static_cast<int>(r.u32());
  router.cfg.experts = static_cast<int>(r.u32());
  router.cfg.heads = static_cast<int>(r.u32());
  router.cfg.ffn_mult = static_cast<int>(r.u32());
  router.cfg.gumbel_temp = r.f64();
  router.cfg.validate();
  router.params = read_param_set(r);
  return router;
}

}  // namespace

uint32_t crc32(const void* data, size_t len, uint32_t seed) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xffffffffu;
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

const ParamSet& Checkpoint::require_params() const {
  if (kind != PayloadKind::kParamsOnly)
    throw ConfigError("checkpoint: expected a parameters-only payload");
  return params;
}

const TrainState& Checkpoint::require_state() const {
  if (kind != PayloadKind::kTrainState)
    throw ConfigError("checkpoint: expected a full train-state payload");
  return state;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.out.append(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(c.config_json);
  w.u8(static_cast<uint8_t>(c.kind));
  switch (c.kind) {
    case PayloadKind::kParamsOnly:
      write_param_set(w, c.params);
      break;
    case PayloadKind::kMask:
      write_mask(w, c.mask);
      break;
    case PayloadKind::kTrainState: {
      const TrainState& st = c.state;
      st.pool.validate();
      write_param_set(w, st.pool.theta_pre);
      write_param_set(w, st.pool.theta_delta);
      w.u32(static_cast<uint32_t>(st.pool.masks.size()));
      for (const auto& m : st.pool.masks) write_mask(w, m);
      for (double l : st.pool.lambdas) w.f64(l);
      w.f64(st.pool.tau);
      write_router(w, st.router);
      w.i64(st.step);
      write_adam(w, st.opt_delta);
      write_adam(w, st.opt_router);
      w.u32(static_cast<uint32_t>(st.opt_masks.size()));
      for (const auto& a : st.opt_masks) write_adam(w, a);
      break;
    }
  }
  uint32_t crc = crc32(w.out.data(), w.out.size());
  w.u32(crc);
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw ChecksumError("checkpoint: file too small");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw VersionError("checkpoint: bad magic bytes (not a SMLT file)");
  // integrity first: trailing CRC of everything before it
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[bytes.size() - 4 + static_cast<size_t>(i)]))
              << (8 * i);
  uint32_t actual = crc32(bytes.data(), bytes.size() - 4);
  if (stored != actual) throw ChecksumError("checkpoint: checksum mismatch");

  Reader r(bytes);
  r.pos = 4;
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: unsupported format version " + std::to_string(version));

  Checkpoint c;
  c.config_json = r.str();
  c.kind = static_cast<PayloadKind>(r.u8());
  switch (c.kind) {
    case PayloadKind::kParamsOnly:
      c.params = read_param_set(r);
      break;
    case PayloadKind::kMask:
      c.mask = read_mask(r);
      break;
    case PayloadKind::kTrainState: {
      TrainState st;
      st.pool.theta_pre = read_param_set(r);
      st.pool.theta_delta = read_param_set(r);
      uint32_t m_count = r.u32();
      for (uint32_t m = 0; m < m_count; ++m) st.pool.masks.push_back(read_mask(r));
      for (uint32_t m = 0; m < m_count; ++m) st.pool.lambdas.push_back(r.f64());
      st.pool.tau = r.f64();
      st.router = read_router(r);
      st.step = r.i64();
      st.opt_delta = read_adam(r);
      st.opt_router = read_adam(r);
      uint32_t n_opts = r.u32();
      for (uint32_t m = 0; m < n_opts; ++m) st.opt_masks.push_back(read_adam(r));
      st.pool.validate();
      c.state = std::move(st);
      break;
    }
    default:
      throw VersionError("checkpoint: unknown payload kind");
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::string bytes = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace smelt
