#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace regformer {

// SplitMix64 finalizer; used to derive independent stream seeds from a base
// seed plus arbitrary tags (step, instance index, split id, ...).
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a) { return splitmix64(a); }

template <class... Rest>
inline uint64_t mix_seed(uint64_t a, uint64_t b, Rest... rest) {
  return mix_seed(splitmix64(a ^ (b + 0x9e3779b97f4a7c15ull)), rest...);
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// streams do not depend on the standard library's implementation details.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return double(eng_() >> 11) * (1.0 / 9007199254740992.0); }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n) without modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

  // Uniform integer in [lo, hi], inclusive.
  int range_int(int lo, int hi) { return lo + int(below(uint64_t(hi - lo) + 1)); }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a 64-bit content hash (checkpoint base references).
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace regformer
