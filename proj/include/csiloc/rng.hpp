#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace csiloc {

// splitmix64: cheap, well-mixed 64-bit hash used to derive independent
// substreams from (seed, stream-id) pairs without sharing engine state.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Deterministic RNG. Every consumer derives its own stream from a root seed;
// derive() depends only on (root seed, stream id), never on draw history, so
// per-sample / per-step streams can be opened in any order (or in parallel)
// and still give bit-identical results.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  Rng derive(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream ^ 0xA076'1D64'78BD'642Full)));
  }
  Rng derive(std::string_view label) const { return derive(fnv1a64(label)); }
  Rng derive(std::string_view label, std::uint64_t index) const {
    return derive(fnv1a64(label) + 0x9E3779B97F4A7C15ull * (index + 1));
  }

  std::uint64_t next_u64() { return engine_(); }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }

  // k distinct values from {0, ..., n-1}, order random (partial Fisher-Yates)
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) {
      int j = uniform_int(i, n - 1);
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<long>(last - first);
    for (long i = n - 1; i > 0; --i) {
      long j = std::uniform_int_distribution<long>(0, i)(engine_);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace csiloc
