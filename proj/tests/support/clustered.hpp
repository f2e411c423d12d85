// Random unit vectors, optionally grouped around random unit centers.
#pragma once

#include <cmath>
#include <random>
#include <vector>

namespace motis::testing {

inline void normalize(float* v, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += double(v[j]) * v[j];
  const double inv = 1.0 / std::sqrt(s);
  for (std::size_t j = 0; j < d; ++j) v[j] = static_cast<float>(v[j] * inv);
}

inline std::vector<float> random_unit(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.f, 1.f);
  std::vector<float> v(n * d);
  for (auto& x : v) x = g(rng);
  for (std::size_t i = 0; i < n; ++i) normalize(v.data() + i * d, d);
  return v;
}

// spread is the per-coordinate noise relative to a unit center.
inline std::vector<float> clustered_unit(std::size_t n, std::size_t d, std::size_t clusters, double spread,
                                         std::mt19937_64& rng) {
  auto centers = random_unit(clusters, d, rng);
  std::normal_distribution<double> g(0.0, spread / std::sqrt(double(d)));
  std::uniform_int_distribution<std::size_t> pick(0, clusters - 1);
  std::vector<float> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = pick(rng);
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = static_cast<float>(centers[c * d + j] + g(rng));
    normalize(v.data() + i * d, d);
  }
  return v;
}

}  // namespace motis::testing
