#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace sepdrop {

using Rng = std::mt19937_64;

/// Purposes keep the streams of one run apart.
enum class StreamPurpose : std::uint64_t { Init = 1, Gates = 2, Augment = 3, Shuffle = 4, Data = 5 };

/// Reproducible generator keyed by a seed and a path of integers.
Rng derive_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

/// K independent, reproducible generators. Stream 0 is the single-model
/// generator for `seed`, so K = 1 reproduces single-model training.
std::vector<Rng> replica_rng_streams(std::uint64_t seed, int k);

/// Generator used by a single model (identical to replica stream 0).
Rng single_model_rng(std::uint64_t seed);

/// Bernoulli(p) from one uniform draw: u < p. p = 1 always yields true.
inline bool bernoulli(Rng& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

}  // namespace sepdrop
