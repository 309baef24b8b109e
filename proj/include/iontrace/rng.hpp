#pragma once

#include <cmath>
#include <cstdint>

#include "iontrace/constants.hpp"

namespace iontrace {

/// Counter-based deterministic random stream. Every draw depends only on
/// (seed, stream, counter), so results are independent of scheduling and
/// worker count.
class RandomStream {
public:
  RandomStream(std::uint64_t seed, std::uint64_t stream)
      : state_(mix(mix(seed) ^ mix(stream ^ 0x9e3779b97f4a7c15ull))) {}

  /// Derive a sub-seed for a named purpose; stable across platforms.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t purpose,
                              std::uint64_t index) {
    return mix(mix(seed ^ mix(purpose)) ^ mix(index + 0x9e3779b97f4a7c15ull));
  }

  static constexpr std::uint64_t purpose_tag(const char* name) {
    std::uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
    for (; *name; ++name) h = (h ^ static_cast<std::uint64_t>(*name)) * 0x100000001b3ull;
    return h;
  }

  static std::uint64_t derive(std::uint64_t seed, const char* purpose,
                              std::uint64_t index) {
    return derive(seed, purpose_tag(purpose), index);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  /// Uniform in (0, 1): never exactly 0, safe for log().
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; bit-reproducible everywhere.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * constants::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

} // namespace iontrace
