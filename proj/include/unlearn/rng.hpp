// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace unlearn {

// SplitMix64 (Steele/Lea/Flood). Used for seed derivation only.
std::uint64_t splitmix64(std::uint64_t x);

// FNV-1a 64-bit over a string; combined with SplitMix64 to derive
// per-stage seeds from a master seed (see Rng::derive).
std::uint64_t fnv1a64(std::string_view s);

// pcg64 = PCG-XSL-RR 128/64 (O'Neill). Fixed algorithm, fixed constants,
// so streams are reproducible across platforms and standard libraries.
class Pcg64 {
 public:
  explicit Pcg64(std::uint64_t seed, std::uint64_t stream = 0);
  std::uint64_t next();

 private:
  unsigned __int128 state_;
  unsigned __int128 inc_;
};

// Deterministic sampling helpers on top of pcg64. All distribution
// algorithms live here (never std::*_distribution, whose output is
// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  // uniform in [0, 1)
  double uniform01();
  double uniform(double lo, double hi);
  // standard normal via Box-Muller (cached spare kept for determinism)
  double normal();
  double normal(double mean, double stddev);
  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n);
  // Fisher-Yates
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // stage_seed = splitmix64(master ^ fnv1a64(tag)); documented contract so
  // independent implementations can reproduce per-stage streams.
  static std::uint64_t derive(std::uint64_t master, std::string_view tag);

 private:
  Pcg64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace unlearn
