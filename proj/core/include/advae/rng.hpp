#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace advae {

/// splitmix64 finalizer; used to derive independent per-record / per-stage seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// FNV-1a over the bytes of a string, for mixing names into seeds.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(master);
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ull));
  return h;
}

// Seeded engine with draw accounting. All stochastic choices in training and
// data generation go through one of these so that a run is a pure function
// of its master seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() {
    ++uniform_draws_;
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  double uniform(double lo, double hi) {
    ++uniform_draws_;
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() {
    ++normal_draws_;
    return std::normal_distribution<double>(0.0, 1.0)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next_u64() {
    ++uniform_draws_;
    return engine_();
  }

  /// Fisher-Yates; independent of the standard library's shuffle algorithm.
  template <class V>
  void shuffle(V& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_u64() % i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  std::uint64_t normal_draws() const noexcept { return normal_draws_; }
  std::uint64_t uniform_draws() const noexcept { return uniform_draws_; }

  /// Textual engine state plus draw counters; restore() is its exact inverse.
  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
  std::uint64_t normal_draws_ = 0;
  std::uint64_t uniform_draws_ = 0;
};

}  // namespace advae
