// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "svae/common.hpp"

namespace svae {

// Deterministic RNG with a serializable state and a cache-free normal draw.
// std::normal_distribution keeps hidden state between calls, which breaks
// checkpoint round-trips; a Box-Muller draw from two fresh uniforms does not.
class Rng {
 public:
  Rng() : engine_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(std::uint64_t seed) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                      static_cast<std::uint32_t>(seed >> 32), 0x5eedu};
    engine_.seed(seq);
  }

  std::uint64_t raw() { return engine_(); }

  // Uniform on (0, 1]; strictly positive so log() below is safe.
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Mat normal_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw std::runtime_error("Rng::set_state: malformed state string");
  }

  // Derive an independent stream, e.g. one per sequence in a batch.
  Rng split(std::uint64_t tag) {
    Rng child;
    child.reseed(engine_() ^ (0x9e3779b97f4a7c15ull * (tag + 1)));
    return child;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace svae
