#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace octfield {

// splitmix64 finalizer. Used both as a seed mixer and as a counter-based
// uniform generator for places where a stateful stream would make results
// depend on evaluation order (e.g. per-activation noise inside batched
// kernels that must replay identically in forward and backward).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a) { return mix64(a); }

// Derive an independent stream seed from a tuple of tags, order-sensitive.
template <class... Rest>
uint64_t mix_seed(uint64_t a, Rest... rest) {
  return mix64(a ^ (mix_seed(static_cast<uint64_t>(rest)...) + 0x517cc1b727220a95ull));
}

// Counter-based uniform in [0,1).
inline double hash_u01(uint64_t key) {
  return static_cast<double>(mix64(key) >> 11) * 0x1p-53;
}

// Deterministic stream RNG. Wraps std::mt19937_64 (whose sequence is fixed by
// the standard) and implements its own distributions so that draws are
// reproducible across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 1) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0,n). Modulo bias is negligible for the n used here.
  uint64_t below(uint64_t n) { return gen_() % n; }

  // Box-Muller; one value per call (the pair's second half is discarded so the
  // draw count stays predictable).
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> gen_;
    if (!is) throw std::runtime_error("rng: malformed serialized state");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace octfield
