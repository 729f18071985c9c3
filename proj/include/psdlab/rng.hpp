#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "psdlab/types.hpp"

namespace psdlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// A single named random stream.  Seeded from (run seed, stream name) so
/// that every consumer gets an independent, reproducible sequence.
class Rng {
 public:
  Rng() : engine_(0) {}
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}
  Rng(std::uint64_t seed, std::string_view stream)
      : engine_(splitmix64(splitmix64(seed) ^ fnv1a64(stream))) {}

  double normal() { return normal_(engine_); }

  Vec normal_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal_(engine_);
    return v;
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// The named substreams one run draws from.
struct RngStreams {
  Rng camera;
  Rng noise_a;
  Rng noise_b;
  Rng init;
  Rng tau;

  explicit RngStreams(std::uint64_t seed)
      : camera(seed, "camera"),
        noise_a(seed, "noise-a"),
        noise_b(seed, "noise-b"),
        init(seed, "init"),
        tau(seed, "tau") {}
};

}  // namespace psdlab
