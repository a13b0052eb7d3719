#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace conforest {

// Deterministic random stream. Distributions are hand-rolled on top of
// splitmix64/xoshiro so that a (seed, stream) pair yields the same draws on
// every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : base_seed_(seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  // xoshiro256** step.
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1) with 53 significant bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (cosine branch only).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::uint64_t i = values.size(); i > 1; --i) {
      const std::uint64_t j = uniform_index(i);
      std::swap(values[i - 1], values[j]);
    }
  }

  // Draw k distinct indices from [0, n), in draw order.
  std::vector<std::uint64_t> sample_without_replacement(std::uint64_t n,
                                                        std::uint64_t k) {
    std::vector<std::uint64_t> pool(n);
    for (std::uint64_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::uint64_t> out;
    out.reserve(k);
    for (std::uint64_t i = 0; i < k && i < n; ++i) {
      const std::uint64_t j = i + uniform_index(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  // Independent child stream. Children with distinct ids never collide with
  // each other or with the parent.
  Rng spawn(std::uint64_t stream_id) const {
    std::uint64_t x = base_seed_ ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1));
    return Rng(splitmix64(x));
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t base_seed_;
  std::uint64_t state_[4];
};

}  // namespace conforest
