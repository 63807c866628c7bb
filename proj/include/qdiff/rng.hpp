#pragma once

#include <cstdint>
#include <random>

namespace qdiff {

/// 64-bit seed. Identical seeds and inputs reproduce identical outputs within
/// one build.
struct RngSeed {
  std::uint64_t value = 0;
};

/// splitmix64 finalizer; used to derive independent sub-streams.
constexpr std::uint64_t mix_seed(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for stream `index` derived from a parent seed (paths, replicates, ...).
constexpr RngSeed derive_seed(RngSeed parent, std::uint64_t index) noexcept {
  return RngSeed{mix_seed(parent.value ^ mix_seed(index + 0x632be59bd9b4e019ULL))};
}

class Rng {
 public:
  explicit Rng(RngSeed seed) : engine_(mix_seed(seed.value)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace qdiff
