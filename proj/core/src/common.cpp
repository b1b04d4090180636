#include "safed/common.hpp"

#include <cmath>

namespace safed {

double conversion_factor(double lambda_min_m, RadiusConversion conv) {
  if (lambda_min_m <= 0.0) {
    throw Error("conversion_factor: metric floor must be positive, got " +
                std::to_string(lambda_min_m));
  }
  return conv == RadiusConversion::Sqrt ? std::sqrt(lambda_min_m)
                                        : lambda_min_m;
}

RadiusConversion parse_conversion(const std::string& name) {
  if (name == "sqrt") return RadiusConversion::Sqrt;
  if (name == "paper") return RadiusConversion::Identity;
  throw Error("unknown conversion '" + name + "' (expected sqrt or paper)");
}

std::string conversion_name(RadiusConversion conv) {
  return conv == RadiusConversion::Sqrt ? "sqrt" : "paper";
}

uint64_t splitmix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) : seed_(seed) { seed_state(seed); }

void Rng::seed_state(uint64_t seed) {
  mt_[0] = seed;
  for (int i = 1; i < kN; ++i) {
    mt_[i] =
        6364136223846793005ULL * (mt_[i - 1] ^ (mt_[i - 1] >> 62)) + (uint64_t)i;
  }
  mti_ = kN;
}

uint64_t Rng::raw() {
  // MT19937-64 (Matsumoto & Nishimura reference constants).
  constexpr uint64_t kMatrixA = 0xB5026F5AA96619E9ULL;
  constexpr uint64_t kUpperMask = 0xFFFFFFFF80000000ULL;
  constexpr uint64_t kLowerMask = 0x7FFFFFFFULL;
  if (mti_ >= kN) {
    constexpr int kM = 156;
    for (int i = 0; i < kN; ++i) {
      uint64_t x = (mt_[i] & kUpperMask) | (mt_[(i + 1) % kN] & kLowerMask);
      mt_[i] = mt_[(i + kM) % kN] ^ (x >> 1) ^ ((x & 1ULL) ? kMatrixA : 0ULL);
    }
    mti_ = 0;
  }
  uint64_t x = mt_[mti_++];
  x ^= (x >> 29) & 0x5555555555555555ULL;
  x ^= (x << 17) & 0x71D67FFFEDA60000ULL;
  x ^= (x << 37) & 0xFFF7EEE000000000ULL;
  x ^= (x >> 43);
  return x;
}

double Rng::uniform() {
  return static_cast<double>(raw() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(theta);
  have_cached_normal_ = true;
  return r * std::cos(theta);
}

double Rng::normal(double mu, double sigma) { return mu + sigma * normal(); }

uint64_t Rng::uniform_int(uint64_t n) {
  if (n == 0) throw Error("uniform_int: n must be positive");
  // Rejection-free modulo draw; bias is < 2^-60 for the ranges used here and
  // the arithmetic is identical on every platform.
  return raw() % n;
}

Rng Rng::fork(uint64_t stream_id) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream_id + 0x51a5d5ca55e5ULL)));
}

}  // namespace safed
