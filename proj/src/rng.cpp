// SPDX-License-Identifier: Apache-2.0
#include "unlearn/rng.hpp"

#include <cmath>

namespace unlearn {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
constexpr unsigned __int128 pcg_mult() {
  return (static_cast<unsigned __int128>(0x2360ed051fc65da4ULL) << 64) |
         0x4385df649fccf645ULL;
}

std::uint64_t rotr64(std::uint64_t v, unsigned r) {
  return (v >> r) | (v << ((64u - r) & 63u));
}
}  // namespace

Pcg64::Pcg64(std::uint64_t seed, std::uint64_t stream) {
  unsigned __int128 initstate =
      (static_cast<unsigned __int128>(splitmix64(seed)) << 64) |
      splitmix64(seed ^ 0xda3e39cb94b95bdbULL);
  unsigned __int128 initseq =
      (static_cast<unsigned __int128>(splitmix64(stream ^ 0x9e3779b97f4a7c15ULL))
       << 64) |
      splitmix64(stream);
  inc_ = (initseq << 1) | 1u;
  state_ = 0u;
  next();
  state_ += initstate;
  next();
}

std::uint64_t Pcg64::next() {
  state_ = state_ * pcg_mult() + inc_;
  std::uint64_t xored =
      static_cast<std::uint64_t>(state_ >> 64) ^ static_cast<std::uint64_t>(state_);
  unsigned rot = static_cast<unsigned>(state_ >> 122);
  return rotr64(xored, rot);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) : gen_(seed, stream) {}

std::uint64_t Rng::next_u64() { return gen_.next(); }

double Rng::uniform01() {
  return static_cast<double>(gen_.next() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 in (0,1] so log() stays finite.
  double u1 = static_cast<double>((gen_.next() >> 11) + 1) * 0x1.0p-53;
  double u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) return 0;
  std::uint64_t bound = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    std::uint64_t v = gen_.next();
    if (v >= bound) return v % n;
  }
}

std::uint64_t Rng::derive(std::uint64_t master, std::string_view tag) {
  return splitmix64(master ^ fnv1a64(tag));
}

}  // namespace unlearn
