#pragma once

#include <cstdint>
#include <cmath>
#include <utility>
#include <vector>

namespace erlab {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Counter-based deterministic RNG. A stream is (seed, counter); draws hash the
// counter, so streams are reproducible across platforms and cheap to fork.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(detail::splitmix64(seed ^ 0x6a09e667f3bcc908ull)), counter_(0) {}

  uint64_t next_u64() { return detail::splitmix64(seed_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  float uniform_float() { return float(uniform()); }

  // [0, n), unbiased enough for desk-scale n
  int uniform_int(int n) {
    return int((unsigned __int128)(next_u64()) * (unsigned __int128)(n) >> 64);
  }

  // Box-Muller; consumes two uniforms per draw, no cached spare
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  float normal_float(float mean, float stddev) { return mean + stddev * float(normal()); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(uniform_int(int(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t seed_;
  uint64_t counter_;
};

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return detail::splitmix64(a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2)));
}

// Stream labels so independent consumers of one run seed never share draws.
namespace streams {
constexpr uint64_t backbone = 0x01;
constexpr uint64_t head = 0x02;
constexpr uint64_t lora = 0x03;
constexpr uint64_t shuffle = 0x04;
constexpr uint64_t data = 0x05;
constexpr uint64_t rollout = 0x06;
constexpr uint64_t decode = 0x07;
constexpr uint64_t prompts = 0x08;
constexpr uint64_t policy = 0x09;
constexpr uint64_t minibatch = 0x0a;
}  // namespace streams

inline Rng substream(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t s = seed;
  for (uint64_t t : tags) s = hash_combine(s, t);
  return Rng(s);
}

}  // namespace erlab
