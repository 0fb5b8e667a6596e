#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sida/tape.hpp"
#include "sida/tensor.hpp"

namespace sida::test {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0e-8, std::abs(a), std::abs(b)});
}

using LossBuilder = std::function<Value(Tape&, const BoundParams&)>;

inline double eval_loss(const LossBuilder& f, const ParamSet& params) {
  Tape tape;
  BoundParams b = bind(tape, params, false);
  return tape.val(f(tape, b)).v[0];
}

struct GradCheck {
  double max_rel = 0.0;
  bool ok(double tol = 1e-4) const { return max_rel < tol; }
};

// Central finite differences against the tape gradient, h = 1e-5 by default.
inline GradCheck gradcheck(const LossBuilder& f, ParamSet params, double h = 1e-5,
                           double abs_floor = 1e-7) {
  auto grads = grad(f, params);
  GradCheck res;
  for (std::size_t p = 0; p < params.items.size(); ++p) {
    Tensor& t = params.items[p].second;
    const Tensor& g = grads[p].second;
    for (std::size_t i = 0; i < t.size(); ++i) {
      double keep = t.v[i];
      t.v[i] = keep + h;
      double up = eval_loss(f, params);
      t.v[i] = keep - h;
      double dn = eval_loss(f, params);
      t.v[i] = keep;
      double fd = (up - dn) / (2.0 * h);
      double denom = std::max({1.0, std::abs(fd), std::abs(g.v[i])});
      double err = std::abs(fd - g.v[i]);
      if (err > abs_floor) res.max_rel = std::max(res.max_rel, err / denom);
    }
  }
  return res;
}

// Kolmogorov-Smirnov statistic against a CDF given as a callable.
inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  double d = 0.0;
  const double n = double(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double f = cdf(xs[i]);
    d = std::max(d, std::abs(f - double(i) / n));
    d = std::max(d, std::abs(f - double(i + 1) / n));
  }
  return d;
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

inline double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace sida::test
