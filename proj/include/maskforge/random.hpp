#pragma once

#include <cstdint>
#include <random>

namespace maskforge {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL)); }

// Stream ids for the independent random sequences a run consumes.
enum class stream : std::uint64_t {
  model_init = 1,
  mask_init = 2,
  mask_noise = 3,
  centroids = 4,
  examples = 5,
  benchmark = 6,
};

using rng = std::mt19937_64;

inline rng make_rng(std::uint64_t seed, stream s, std::uint64_t sub = 0) {
  return rng(stream_seed(seed, (static_cast<std::uint64_t>(s) << 48) ^ sub));
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(rng& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

}  // namespace maskforge
