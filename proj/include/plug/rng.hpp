#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace plug {

// splitmix64; used both as a generator step and to derive per-sample seeds.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_seed(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
  splitmix64(s);
  return splitmix64(s);
}

inline uint64_t hash_seed(uint64_t a, uint64_t b, uint64_t c) {
  return hash_seed(hash_seed(a, b), c);
}

// Deterministic generator with hand-rolled distributions so that streams are
// stable across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // burn a couple of outputs so nearby seeds decorrelate
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0,1)
  double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + (int)uniform_int((uint64_t)(hi_inclusive - lo + 1));
  }

  // Box-Muller
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * M_PI * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates
  template <typename V>
  void shuffle(V& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = (size_t)uniform_int((uint64_t)i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n) (k << n assumed small enough for rejection)
  std::vector<int64_t> sample_distinct(int64_t n, int64_t k);

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline std::vector<int64_t> Rng::sample_distinct(int64_t n, int64_t k) {
  // Floyd's algorithm: k distinct draws without building [0,n)
  std::vector<int64_t> out;
  out.reserve((size_t)k);
  std::vector<char> seen;
  // for small n a bitmap is cheapest
  seen.assign((size_t)n, 0);
  for (int64_t j = n - k; j < n; ++j) {
    int64_t t = (int64_t)uniform_int((uint64_t)(j + 1));
    if (seen[(size_t)t]) t = j;
    seen[(size_t)t] = 1;
    out.push_back(t);
  }
  return out;
}

}  // namespace plug
