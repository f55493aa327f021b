#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace volflow {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

// All randomness in a run flows from one root seed. Stage streams are derived
// by name so that adding a stage never shifts the draws of another.
inline uint64_t derive_seed(uint64_t root, std::string_view stage) {
  return splitmix64(root ^ fnv1a64(stage));
}

inline uint64_t derive_seed(uint64_t root, std::string_view stage, uint64_t index) {
  return splitmix64(derive_seed(root, stage) ^ splitmix64(index + 0x51ed270b7a1f3685ull));
}

// mt19937_64 with fixed bit-to-float mappings. The std distributions are
// implementation-defined, so uniform/normal are mapped here explicitly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; second draw cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection-free modulo bias is negligible for n << 2^64; keep it simple
    // and deterministic.
    return gen_() % n;
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace volflow
