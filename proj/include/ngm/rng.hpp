#pragma once

#include <cmath>
#include <cstdint>

namespace ngm {

// splitmix64 finalizer, used to mix seeds and derive stream keys.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(a) ^ b);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix64(mix64(a, b) ^ c);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                           std::uint64_t d) {
  return mix64(mix64(a, b, c) ^ d);
}

// PCG32 (XSH-RR). Self-contained so streams behave identically across
// compilers and standard libraries; std::uniform_real_distribution is
// implementation-defined and would break bit-reproducible runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0x853c49e6748fea9bull,
               std::uint64_t stream = 0xda3e39cb94b95bdbull) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    std::uint32_t xorshifted =
        static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() {
    return (static_cast<std::uint64_t>(next_u32()) << 32) | next_u32();
  }

  // Unbiased integer in [0, bound).
  std::uint32_t bounded(std::uint32_t bound) {
    std::uint32_t threshold = (-bound) % bound;
    for (;;) {
      std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Uniform in [0, 1).
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (deterministic, no cached spare).
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

// Named sub-stream domains, so independent consumers of the global seed can
// never collide.
enum class RngStream : std::uint64_t {
  kFieldInit = 1,
  kGridShift = 2,
  kFieldPick = 3,
  kRaySampling = 4,
  kSynth = 5,
  kSurfaceSampling = 6,
};

inline Rng make_stream(std::uint64_t seed, RngStream domain, std::uint64_t a = 0,
                       std::uint64_t b = 0) {
  std::uint64_t key = mix64(seed, static_cast<std::uint64_t>(domain), a, b);
  return Rng(key, mix64(key, 0x5851f42d4c957f2dull));
}

}  // namespace ngm
