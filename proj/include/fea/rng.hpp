#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fea {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed for a sub-stream identified by a path of integers, e.g.
// (run seed, task, stage, epoch). Same path, same seed.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (auto p : path) h = mix_seed(h ^ mix_seed(p));
  return h;
}

inline Rng make_rng(std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(path));
}

// Salt constants keep derived streams for different purposes apart.
namespace salt {
inline constexpr std::uint64_t kInit = 0x1001;
inline constexpr std::uint64_t kShuffle = 0x1002;
inline constexpr std::uint64_t kMemory = 0x1003;
inline constexpr std::uint64_t kProbe = 0x1004;
inline constexpr std::uint64_t kStream = 0x1005;
inline constexpr std::uint64_t kSynthetic = 0x1006;
}  // namespace salt

}  // namespace fea
