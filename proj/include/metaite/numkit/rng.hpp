#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace metaite {

/// Seeded random stream. Identical seed and identical draw sequence give
/// identical values; `position()` counts raw 64-bit engine draws.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return engine_.count; }

  /// Independent stream whose seed is derived from this stream's seed and a name.
  RngStream substream(std::string_view name) const;
  RngStream substream(std::uint64_t index) const;

  double uniform();
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double sd = 1.0);
  double gamma(double shape);
  bool bernoulli(double p);
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  /// `count` distinct indices from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count);

 private:
  struct CountingEngine {
    using result_type = std::mt19937_64::result_type;
    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() {
      ++count;
      return engine();
    }
    std::mt19937_64 engine;
    std::uint64_t count = 0;
  };

  std::uint64_t seed_;
  CountingEngine engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace metaite
