#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace smelt {

// Counter-based deterministic random streams. Every consumer derives its own
// stream from (seed, tag, counters), so parallel episodes never share state
// and runs are bit-reproducible across platforms. We avoid <random>
// distributions on purpose: their output is implementation-defined.
class RngStream {
 public:
  RngStream() : state_(0x9e3779b97f4a7c15ull) {}
  explicit RngStream(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  static uint64_t hash_tag(std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

  // Derive a child stream; order of keys matters.
  RngStream child(uint64_t k) const {
    RngStream r;
    r.state_ = mix(state_ ^ mix(k + 0x632be59bd9b4e019ull));
    return r;
  }
  RngStream child(std::string_view tag) const { return child(hash_tag(tag)); }
  RngStream child(std::string_view tag, uint64_t a) const { return child(tag).child(a); }
  RngStream child(std::string_view tag, uint64_t a, uint64_t b) const {
    return child(tag).child(a).child(b);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in (eps, 1-eps); used for logit sampling where 0 and 1 overflow.
  double uniform_open(double eps) {
    double u = uniform();
    if (u < eps) return eps;
    if (u > 1.0 - eps) return 1.0 - eps;
    return u;
  }

  // Box-Muller; second value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform_open(1e-12);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

 private:
  static uint64_t mix(uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace smelt
