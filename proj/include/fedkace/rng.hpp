#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace fedkace {

// splitmix64 stream. Hand-rolled so draws are identical across platforms and
// standard-library versions; std::mt19937 would be stable too, but the
// distributions on top of it are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 bits of precision.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller without a cached spare: exactly two draws per variate, so the
  // stream position does not depend on call history.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = 1.0 - uniform01();  // (0,1], keeps log finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform in [0,n). Lemire's multiply-shift; bias is < 2^-64 per draw.
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

namespace stream_tag {
constexpr std::uint64_t category_means = 1;
constexpr std::uint64_t permutation = 2;
constexpr std::uint64_t train_data = 3;
constexpr std::uint64_t test_data = 4;
constexpr std::uint64_t batch_shuffle = 5;
constexpr std::uint64_t buffer_sampling = 6;
constexpr std::uint64_t model_init = 7;
}  // namespace stream_tag

inline std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent substream seed from (run seed, role tag, indices).
// Every randomized component owns such a stream, so results do not depend on
// scheduling or on how many draws other components consume.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag,
                                 std::uint64_t a = 0, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed + 0x9e3779b97f4a7c15ull);
  h = mix64(h ^ (tag + 0xff51afd7ed558ccdull));
  h = mix64(h ^ (a + 0xc4ceb9fe1a85ec53ull));
  h = mix64(h ^ (b + 0x9e3779b97f4a7c15ull));
  h = mix64(h ^ (c + 0x165667b19e3779f9ull));
  return h;
}

}  // namespace fedkace
