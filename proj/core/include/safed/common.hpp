#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace safed {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// How a metric-weighted tube radius is converted to a Euclidean one:
// Sqrt divides by the square root of the metric floor, Identity divides by
// the floor itself (the more conservative choice when the floor is < 1).
enum class RadiusConversion { Sqrt, Identity };

// Denominator used when converting a metric ball to a Euclidean ball.
double conversion_factor(double lambda_min_m, RadiusConversion conv);

RadiusConversion parse_conversion(const std::string& name);  // "sqrt" | "paper"
std::string conversion_name(RadiusConversion conv);

uint64_t splitmix64(uint64_t z);

// Deterministic RNG (MT19937-64 core). All draws are produced with fixed
// arithmetic so streams are reproducible bit-for-bit for a given seed,
// independent of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t raw();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal, Box-Muller
  double normal(double mu, double sigma);
  uint64_t uniform_int(uint64_t n);      // [0, n)

  // Fisher-Yates with our own bounded draws (std::shuffle is
  // implementation-defined).
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<uint64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream; distinct ids give decorrelated streams.
  Rng fork(uint64_t stream_id) const;

  uint64_t seed() const { return seed_; }

 private:
  static constexpr int kN = 312;
  uint64_t seed_;
  uint64_t mt_[kN];
  int mti_;
  bool have_cached_normal_ = false;
  double cached_normal_ = 0.0;

  void seed_state(uint64_t seed);
};

}  // namespace safed
