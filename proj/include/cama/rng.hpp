#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>

namespace cama {

/// Counter-based generator keyed by (seed, stream name). Each draw hashes the
/// (key, counter) pair with the splitmix64 finalizer, so streams with different
/// names are independent and any stream can be re-created from its key alone.
/// Distributions are implemented here rather than with <random> so values are
/// identical across standard libraries.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t seed, std::string_view stream) : key_(mix(seed ^ mix(hash(stream)))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Independent child stream.
  Rng split(std::string_view name) const {
    Rng child(0, name);
    child.key_ = mix(key_ ^ mix(hash(name) + 0x632be59bd9b4e019ULL));
    return child;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // rejection keeps the draw unbiased
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t v;
    do {
      v = (*this)();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t counter() const { return counter_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t hash(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cama
