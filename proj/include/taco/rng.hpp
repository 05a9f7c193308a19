#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace taco::num {

// All randomness in the project flows through this type. The engine is
// mt19937_64, whose output sequence is pinned by the C++ standard, and every
// transform (uniform, normal, shuffles) is implemented here by hand: the
// std::*_distribution adapters are implementation-defined and would break
// cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();

  double uniform();                    // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);
  double normal();                     // Box-Muller, two engine draws per call
  double normal(double mean, double stddev);

  int uniform_int(int n);  // {0, ..., n-1}, n >= 1

  std::vector<int> permutation(int n);
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (int i = static_cast<int>(items.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(items[static_cast<size_t>(i)], items[static_cast<size_t>(j)]);
    }
  }

  // Independent deterministic sub-stream; labels document which stage owns it.
  Rng derive(std::string_view label) const;

  // Engine state serialization (decimal word dump) for run resumption.
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
};

// Stable 64-bit FNV-1a; used for sub-stream labels and config hashing.
std::uint64_t fnv1a(std::string_view s);

// splitmix64 finalizer; used to decorrelate derived seeds.
std::uint64_t mix64(std::uint64_t x);

}  // namespace taco::num
