#pragma once

// Shared plumbing: error type, shape helpers, deterministic RNG.

#include <cstdint>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmim {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(msg);
}

// splitmix64, used both as a stream and to mix seeds into substreams.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  uint64_t h = splitmix64(s);
  s = h ^ (b + 0x9e3779b97f4a7c15ull);
  return splitmix64(s);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

// Deterministic generator. The std:: distributions are implementation
// defined, so draws are produced from raw bits by hand; identical seeds give
// identical streams on any platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Warm up so small seeds diverge immediately.
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n) without modulo bias.
  int64_t uniform_int(int64_t n) {
    require(n > 0, "Rng::uniform_int: n must be positive");
    uint64_t un = uint64_t(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return int64_t(x % un);
  }

  // Box-Muller; second value cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates; deterministic given the seed.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      std::swap(v[size_t(i)], v[size_t(uniform_int(i + 1))]);
    }
  }

  // First k of a shuffled [0, n) index range (sampling without replacement).
  std::vector<int64_t> sample_indices(int64_t n, int64_t k) {
    require(k >= 0 && k <= n, "Rng::sample_indices: k out of range");
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = 0; i < k; ++i) {
      int64_t j = i + uniform_int(n - i);
      std::swap(idx[size_t(i)], idx[size_t(j)]);
    }
    idx.resize(size_t(k));
    return idx;
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace ssmim
