#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace mvsdf {

// Deterministic PRNG built on splitmix64/xoshiro256++. std:: engines and
// distributions are avoided on purpose: checkpoint-resume equality and
// cross-platform reproducibility need bit-stable draws.
inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  return splitmix64_next(s);
}

// FNV-1a over the stream name; streams are addressed by purpose, e.g.
// rng_stream(seed, "pixels", iteration).
inline uint64_t hash_name(std::string_view name) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

class Prng {
 public:
  explicit Prng(uint64_t key) {
    for (auto& w : s_) w = splitmix64_next(key);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second member of each pair is cached. Instances are
  // short-lived (one per stream per iteration), so the cache never leaks
  // state across checkpoints.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Bias is O(n / 2^64), irrelevant for the n used here.
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// One independent stream per (seed, subsystem name, iteration). Fresh
// instances per iteration keep training resumable from any checkpoint.
inline Prng rng_stream(uint64_t seed, std::string_view stream, uint64_t iteration = 0) {
  return Prng(mix_u64(mix_u64(seed, hash_name(stream)), iteration));
}

}  // namespace mvsdf
