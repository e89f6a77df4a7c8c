#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "vslm/types.hpp"

namespace vslm {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

/// Deterministic random stream. A single root seed fans out to named
/// streams so that data order, posterior noise, diffusion noise and
/// sampling draws are isolated from one another.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed) {}

  static RngStream fork(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t s = detail::splitmix64(root ^ detail::fnv1a64(name));
    s = detail::splitmix64(s + 0x9E3779B97F4A7C15ull * (index + 1));
    return RngStream(s);
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    // rejection sampling keeps the draw unbiased
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
  }

  /// Standard normal via Box-Muller. Stateless between calls so the
  /// stream state is exactly the engine state.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw std::runtime_error("RngStream: bad serialized state");
  }

 private:
  std::mt19937_64 eng_;
};

/// Matrix of i.i.d. standard-normal draws, filled column by column.
template <typename S>
MatX<S> standard_normal(RngStream& rng, int rows, int cols) {
  MatX<S> m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = static_cast<S>(rng.normal());
  return m;
}

}  // namespace vslm
