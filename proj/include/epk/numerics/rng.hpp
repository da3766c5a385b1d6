#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "epk/error.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/parallel.hpp"
#include "epk/numerics/special.hpp"

namespace epk {

namespace detail {

inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
    ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
           static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    key[0] += w0;
    key[1] += w1;
  }
  return ctr;
}

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline double to_unit(std::uint64_t bits) {  // [0, 1) with 53 random bits
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// Counter-based generator: the stream is a pure function of (seed, counter), so any block can
/// be regenerated independently of thread scheduling. Each call consumes one 128-bit block.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent stream for a named subsystem or work item.
  Rng split(std::uint64_t stream) const { return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(stream + 1))); }

  /// Copy positioned `blocks` blocks further along this stream.
  Rng advanced(std::uint64_t blocks) const { return Rng(seed_, counter_ + blocks); }

  std::array<std::uint64_t, 2> block() {
    const auto out = detail::philox4x32_10(
        {static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32), 0u, 0u},
        {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
    ++counter_;
    return {(static_cast<std::uint64_t>(out[0]) << 32) | out[1], (static_cast<std::uint64_t>(out[2]) << 32) | out[3]};
  }

  std::uint64_t next_u64() { return block()[0]; }
  double uniform() { return detail::to_unit(block()[0]); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidInput("Rng::below: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t v = next_u64();
      if (v < limit) return v % n;
    }
  }

  /// Pair of independent standard normals (Box–Muller) from one block.
  std::array<double, 2> normal_pair() {
    const auto b = block();
    const double u1 = 1.0 - detail::to_unit(b[0]);  // (0, 1]
    const double u2 = detail::to_unit(b[1]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

  double normal() { return normal_pair()[0]; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

/// n×d matrix of i.i.d. standard normals. Row r uses blocks [r·⌈d/2⌉, (r+1)·⌈d/2⌉) of the
/// stream, so rows can be filled in parallel. Advances rng past all consumed blocks.
inline Matrix standard_normal_matrix(Rng& rng, std::size_t n, std::size_t d) {
  Matrix z(n, d);
  const std::size_t per_row = (d + 1) / 2;
  const Rng base = rng;
  parallel_for(n, [&](std::size_t r) {
    Rng local = base.advanced(r * per_row);
    auto row = z.row(r);
    for (std::size_t j = 0; j < d; j += 2) {
      const auto p = local.normal_pair();
      row[j] = p[0];
      if (j + 1 < d) row[j + 1] = p[1];
    }
  });
  rng = base.advanced(n * per_row);
  return z;
}

/// n i.i.d. draws from N(mean, σ²I), one per row.
inline Matrix gaussian_sample(Rng& rng, std::span<const double> mean, double sigma, std::size_t n) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidInput("gaussian_sample: sigma must be finite and >= 0");
  if (!all_finite(mean)) throw InvalidInput("gaussian_sample: non-finite mean");
  Matrix z = standard_normal_matrix(rng, n, mean.size());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = z.row(r);
    for (std::size_t j = 0; j < mean.size(); ++j) row[j] = mean[j] + sigma * row[j];
  }
  return z;
}

/// n×d Latin-hypercube standard normals: every column places exactly one draw in each of the n
/// equiprobable strata. Each row is marginally N(0, I); rows are not independent. Used as a
/// variance-reduced alternative for Monte-Carlo stability estimates.
inline Matrix latin_hypercube_normal_matrix(Rng& rng, std::size_t n, std::size_t d) {
  Matrix z(n, d);
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 0; j < d; ++j) {
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    for (std::size_t r = 0; r < n; ++r) {
      double u = (static_cast<double>(perm[r]) + rng.uniform()) / static_cast<double>(n);
      u = std::min(std::max(u, 1e-300), 1.0 - 1e-16);
      z(r, j) = normal_quantile(u);
    }
  }
  return z;
}

}  // namespace epk
