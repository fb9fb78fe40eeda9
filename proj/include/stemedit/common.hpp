#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stemedit {

/// Bad data fed to an operation (wrong shape, out-of-range token, empty input).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad hyperparameter, unknown key, impossible request).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over the pair
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic RNG. Engine sequence is pinned by the standard; the
/// distributions are hand-rolled so draws are identical on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw InputError("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derived generator for an independent stream; insensitive to how many
  /// draws were already taken from this one.
  Rng fork(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// FNV-1a over a byte range; used for frozen-parameter integrity hashes.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace stemedit
