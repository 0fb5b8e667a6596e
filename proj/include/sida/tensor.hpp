#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sida {

// Configuration / validation problems.  CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numeric breakdown.  CLI maps these to exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of 64-bit reals.
struct Tensor {
  Shape shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), v(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if (v.size() != shape_size(shape))
      throw ConfigError("tensor data size " + std::to_string(v.size()) +
                        " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double x) { return Tensor({1}, std::vector<double>{x}); }
  static Tensor row(std::vector<double> data) {
    Shape s{data.size()};
    return Tensor(std::move(s), std::move(data));
  }
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  std::size_t size() const { return v.size(); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  // For {n, d} tensors.
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : size() / shape[0]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic random stream: xoshiro-free, self-contained, identical on every
// platform.  Streams derived from the same master seed with distinct ids are
// independent for our purposes.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed, uint64_t stream = 0) {
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    s0_ = splitmix64(x);
    s1_ = splitmix64(x);
    s2_ = splitmix64(x);
    s3_ = splitmix64(x);
  }

  uint64_t next_u64() {
    // xoshiro256**
    auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    uint64_t result = rotl(s1_ * 5, 7) * 9;
    uint64_t t = s1_ << 17;
    s2_ ^= s0_;
    s3_ ^= s1_;
    s1_ ^= s2_;
    s0_ ^= s3_;
    s2_ ^= t;
    s3_ = rotl(s3_, 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (have_cache_) {
      have_cache_ = false;
      return cache_;
    }
    // Box-Muller; u1 in (0,1] so log is finite.
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cache_ = r * std::sin(a);
    have_cache_ = true;
    return r * std::cos(a);
  }

  void fill_normal(Tensor& t) {
    for (double& x : t.v) x = normal();
  }

  Tensor normal_tensor(Shape s) {
    Tensor t(std::move(s));
    fill_normal(t);
    return t;
  }

  // Index in [0, n) proportional to weights (must sum to ~1).
  std::size_t categorical(const std::vector<double>& weights) {
    double u = uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      acc += weights[k];
      if (u < acc) return k;
    }
    return weights.size() - 1;
  }

 private:
  uint64_t s0_, s1_, s2_, s3_;
  double cache_ = 0.0;
  bool have_cache_ = false;
};

}  // namespace sida
