#pragma once

#include <cstdint>
#include <random>

#include "neuroalign/autodiff.hpp"

namespace neuroalign {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; derives independent stream seeds from (seed, counter).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Mat randn(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace neuroalign
