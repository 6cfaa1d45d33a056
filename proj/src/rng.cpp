#include "sepdrop/rng.hpp"

#include <stdexcept>

namespace sepdrop {

Rng derive_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                                   static_cast<std::uint32_t>(path.size())};
  for (auto p : path) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

std::vector<Rng> replica_rng_streams(std::uint64_t seed, int k) {
  if (k < 1) throw std::invalid_argument("replica_rng_streams: need at least one replica");
  std::vector<Rng> streams;
  streams.reserve(k);
  for (int i = 0; i < k; ++i) streams.push_back(derive_stream(seed, {0x5265706cULL, static_cast<std::uint64_t>(i)}));
  return streams;
}

Rng single_model_rng(std::uint64_t seed) { return replica_rng_streams(seed, 1).front(); }

}  // namespace sepdrop
