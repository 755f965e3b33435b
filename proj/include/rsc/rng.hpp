#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace rsc {

// Deterministic random streams. The engine is std::mt19937_64 (sequence pinned
// by the standard); the value transforms below are ours so that draws are
// reproducible independent of the standard library's distribution objects.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_base_(mix(seed)), engine_(seed_base_) {}

  // Child stream keyed by a label and an index, independent of draws taken
  // from this stream. Used to give samples/iterations their own streams.
  Rng derive(std::string_view label, std::uint64_t index = 0) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    h ^= index + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return Rng(seed_base_ ^ mix(h));
  }

  std::uint64_t bits() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<std::int64_t>(engine_());
    const std::uint64_t reject_below = (0 - range) % range;
    for (;;) {
      const std::uint64_t v = engine_();
      if (v >= reject_below) return lo + static_cast<std::int64_t>(v % range);
    }
  }

  // Box-Muller, one normal per two uniforms.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) *
                     std::cos(2.0 * 3.14159265358979323846 * u2);
    return mean + stddev * z;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {  // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_base_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace rsc
