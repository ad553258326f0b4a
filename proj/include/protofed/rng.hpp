#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace protofed {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a path of ids,
/// e.g. derive_seed(run_seed, {kStreamTrain, t, client}). Order matters.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

// Stream tags keep the draws of different subsystems apart.
enum StreamTag : std::uint64_t {
  kStreamInit = 1,
  kStreamSelect = 2,
  kStreamStraggler = 3,
  kStreamTrain = 4,
  kStreamMmd = 5,
  kStreamData = 6,
};

}  // namespace protofed
