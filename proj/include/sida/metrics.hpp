#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sida/tensor.hpp"

namespace sida {

struct MetricReport {
  double energy_distance = 0.0;
  double sliced_wasserstein = 0.0;
  double frechet_feature_distance = 0.0;
  std::size_t n_samples = 0;
  uint64_t seed = 0;
};

namespace detail {

inline double pair_mean_distance(const Tensor& a, const Tensor& b) {
  std::size_t na = a.rows(), nb = b.rows(), d = a.cols();
  double acc = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    const double* ai = a.data() + i * d;
    for (std::size_t j = 0; j < nb; ++j) {
      const double* bj = b.data() + j * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double dk = ai[k] - bj[k];
        s += dk * dk;
      }
      acc += std::sqrt(s);
    }
  }
  return acc / double(na * nb);
}

}  // namespace detail

// V-statistic energy distance 2 E||A-B|| - E||A-A'|| - E||B-B'||; exactly zero
// on identical sample sets.
inline double energy_distance(const Tensor& a, const Tensor& b) {
  if (a.rows() < 100 || b.rows() < 100)
    throw ConfigError("energy_distance: need at least 100 samples per side");
  if (a.cols() != b.cols()) throw ConfigError("energy_distance: dimension mismatch");
  // all three terms share one code path, so identical sample sets cancel exactly
  return 2.0 * detail::pair_mean_distance(a, b) - detail::pair_mean_distance(a, a) -
         detail::pair_mean_distance(b, b);
}

// Mean 1-d Wasserstein-1 over random projection directions drawn from the
// featurizer seed (frozen per experiment).
inline double sliced_wasserstein(const Tensor& a, const Tensor& b, std::size_t n_proj,
                                 uint64_t featurizer_seed) {
  if (a.rows() != b.rows()) throw ConfigError("sliced_wasserstein: need equal sample counts");
  if (a.cols() != b.cols()) throw ConfigError("sliced_wasserstein: dimension mismatch");
  std::size_t n = a.rows(), d = a.cols();
  RandomStream rng(featurizer_seed, /*stream=*/1);
  double acc = 0.0;
  std::vector<double> pa(n), pb(n), dir(d);
  for (std::size_t p = 0; p < n_proj; ++p) {
    double nrm = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dir[k] = rng.normal();
      nrm += dir[k] * dir[k];
    }
    nrm = std::sqrt(nrm) + 1e-300;
    for (std::size_t i = 0; i < n; ++i) {
      double sa = 0.0, sb = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        sa += a.v[i * d + k] * dir[k];
        sb += b.v[i * d + k] * dir[k];
      }
      pa[i] = sa / nrm;
      pb[i] = sb / nrm;
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double w1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) w1 += std::abs(pa[i] - pb[i]);
    acc += w1 / double(n);
  }
  return acc / double(n_proj);
}

struct FrechetResult {
  double value = 0.0;
  bool covariance_repaired = false;  // 1e-6 I was added to stabilize the square root
};

// Frechet distance between Gaussian fits in a fixed random-Fourier feature
// space: ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)).
inline FrechetResult frechet_feature_distance_full(const Tensor& a, const Tensor& b,
                                                   uint64_t featurizer_seed,
                                                   std::size_t feature_dim = 32) {
  std::size_t n_min = std::min(a.rows(), b.rows());
  if (feature_dim > n_min / 10)
    throw ConfigError("frechet_feature_distance: feature dimension must be <= samples/10");
  if (a.cols() != b.cols()) throw ConfigError("frechet_feature_distance: dimension mismatch");
  const std::size_t d = a.cols(), D = feature_dim;

  RandomStream rng(featurizer_seed, /*stream=*/2);
  Eigen::MatrixXd omega(D, d);
  Eigen::VectorXd phase(D);
  for (std::size_t i = 0; i < D; ++i) {
    for (std::size_t j = 0; j < d; ++j) omega(i, j) = rng.normal();
    phase(i) = rng.uniform(0.0, 2.0 * M_PI);
  }

  auto features = [&](const Tensor& x) {
    Eigen::MatrixXd f(x.rows(), D);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t k = 0; k < D; ++k) {
        double acc = phase(k);
        for (std::size_t j = 0; j < d; ++j) acc += omega(k, j) * x.v[i * d + j];
        f(i, k) = std::sqrt(2.0 / double(D)) * std::cos(acc);
      }
    return f;
  };

  auto moments = [](const Eigen::MatrixXd& f) {
    Eigen::VectorXd mu = f.colwise().mean();
    Eigen::MatrixXd centered = f.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = centered.transpose() * centered / double(f.rows() - 1);
    return std::make_pair(mu, cov);
  };

  auto [mu_a, cov_a] = moments(features(a));
  auto [mu_b, cov_b] = moments(features(b));

  FrechetResult res;
  // sqrt(Sa Sb) trace via the symmetric form sqrt(sqrt(Sa) Sb sqrt(Sa))
  auto sqrt_trace = [&](Eigen::MatrixXd sa, Eigen::MatrixXd sb, bool& repaired) -> double {
    for (int attempt = 0; attempt < 2; ++attempt) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(sa);
      if (es_a.info() == Eigen::Success && es_a.eigenvalues().minCoeff() > -1e-10) {
        Eigen::VectorXd ev = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        Eigen::MatrixXd root_a =
            es_a.eigenvectors() * ev.asDiagonal() * es_a.eigenvectors().transpose();
        Eigen::MatrixXd inner = root_a * sb * root_a;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_i(inner);
        if (es_i.info() == Eigen::Success && es_i.eigenvalues().minCoeff() > -1e-8) {
          return es_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
        }
      }
      std::size_t D2 = std::size_t(sa.rows());
      sa += 1e-6 * Eigen::MatrixXd::Identity(D2, D2);
      sb += 1e-6 * Eigen::MatrixXd::Identity(D2, D2);
      repaired = true;
    }
    throw NumericError("frechet_feature_distance: covariance square root failed after repair");
  };

  double trace_term = sqrt_trace(cov_a, cov_b, res.covariance_repaired);
  res.value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_term;
  if (res.value < 0.0 && res.value > -1e-8) res.value = 0.0;
  return res;
}

inline double frechet_feature_distance(const Tensor& a, const Tensor& b, uint64_t featurizer_seed,
                                       std::size_t feature_dim = 32) {
  return frechet_feature_distance_full(a, b, featurizer_seed, feature_dim).value;
}

inline MetricReport metric_report(const Tensor& generated, const Tensor& real, uint64_t seed) {
  MetricReport r;
  r.energy_distance = energy_distance(generated, real);
  r.sliced_wasserstein = sliced_wasserstein(generated, real, 64, seed);
  r.frechet_feature_distance = frechet_feature_distance(generated, real, seed);
  r.n_samples = std::min(generated.rows(), real.rows());
  r.seed = seed;
  return r;
}

}  // namespace sida
