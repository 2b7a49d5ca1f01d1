#pragma once

#include <cstdint>
#include <random>

namespace amx {

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a) {
  return mix64(base ^ mix64(a + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

// Training latents live below 2^63, held-out latents at or above it, so the
// two seed sets can never collide.
inline constexpr std::uint64_t kHeldoutSeedBit = 1ULL << 63;

constexpr std::uint64_t training_seed(std::uint64_t s) { return s & ~kHeldoutSeedBit; }
constexpr std::uint64_t heldout_seed(std::uint64_t index) { return kHeldoutSeedBit | index; }
constexpr bool is_heldout_seed(std::uint64_t s) { return (s & kHeldoutSeedBit) != 0; }

using Rng = std::mt19937_64;

inline std::uint64_t entropy_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

}  // namespace amx
