#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace llf {

// All numerics run in double precision. Gradient checks at 1e-4 relative
// tolerance are not reliable in float32.
using Scalar = double;
using Array = Eigen::ArrayXd;

// Input/usage errors (bad shapes, bad files, bad flags). CLI exit code 1.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or numerical breakdown. CLI exit code 2.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense rank-4 shape, row-major (batch, channel, row, col).
struct Shape {
  int b = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(b) * c * h * w;
  }
  std::int64_t plane() const { return static_cast<std::int64_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Deterministic RNG. mt19937_64 is bit-stable by the standard; the
// distributions are hand-rolled because std::normal_distribution is
// implementation-defined and would break cross-platform golden values.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1).
  Scalar uniform() {
    return static_cast<Scalar>(eng_() >> 11) * 0x1.0p-53;
  }

  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller, one cached spare.
  Scalar normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    Scalar u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const Scalar u2 = uniform();
    const Scalar r = std::sqrt(-2.0 * std::log(u1));
    const Scalar two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    has_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

  // Uniform integer in [lo, hi] by rejection-free scaling (ranges are tiny
  // here, modulo bias is irrelevant but we avoid it anyway).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(eng_() % span);
  }

  std::uint64_t next_u64() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  Scalar spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace llf
