#include <Eigen/Dense>
#include <catch2/catch_amalgamated.hpp>

#include "sida/metrics.hpp"
#include "sida/mixture.hpp"
#include "support/helpers.hpp"

using namespace sida;
using sida::test::median_of;

static Tensor gaussian_samples(std::size_t n, std::size_t d, double shift, RandomStream& rng) {
  Tensor t({n, d});
  for (double& x : t.v) x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) t.v[i * d] += shift;
  return t;
}

TEST_CASE("energy distance is exactly zero on identical sets") {
  RandomStream rng(1);
  Tensor a = gaussian_samples(200, 2, 0.0, rng);
  CHECK(energy_distance(a, a) == 0.0);
}

TEST_CASE("energy distance is symmetric") {
  RandomStream rng(2);
  Tensor a = gaussian_samples(150, 2, 0.0, rng);
  Tensor b = gaussian_samples(150, 2, 0.7, rng);
  CHECK(energy_distance(a, b) == Catch::Approx(energy_distance(b, a)).margin(1e-15));
}

TEST_CASE("energy distance grows with the mean shift") {
  std::vector<double> shifts{0.0, 0.5, 1.0, 2.0};
  std::vector<double> med;
  for (double s : shifts) {
    std::vector<double> vals;
    for (uint64_t seed = 0; seed < 5; ++seed) {
      RandomStream rng(10 + seed);
      Tensor a = gaussian_samples(10000, 1, 0.0, rng);
      Tensor b = gaussian_samples(10000, 1, s, rng);
      vals.push_back(energy_distance(a, b));
    }
    med.push_back(median_of(vals));
  }
  CHECK(med[0] < med[1]);
  CHECK(med[1] < med[2]);
  CHECK(med[2] < med[3]);
}

TEST_CASE("energy distance is invariant under a common rotation") {
  RandomStream rng(3);
  Tensor a = gaussian_samples(300, 2, 0.4, rng);
  Tensor b = gaussian_samples(300, 2, 0.0, rng);
  double base = energy_distance(a, b);
  double c = std::cos(0.9), s = std::sin(0.9);
  auto rotate = [&](Tensor t) {
    for (std::size_t i = 0; i < t.rows(); ++i) {
      double x = t.v[2 * i], y = t.v[2 * i + 1];
      t.v[2 * i] = c * x - s * y;
      t.v[2 * i + 1] = s * x + c * y;
    }
    return t;
  };
  CHECK(energy_distance(rotate(a), rotate(b)) == Catch::Approx(base).margin(1e-9));
}

TEST_CASE("energy distance refuses tiny sample sets") {
  RandomStream rng(4);
  Tensor a = gaussian_samples(99, 2, 0.0, rng);
  Tensor b = gaussian_samples(200, 2, 0.0, rng);
  CHECK_THROWS_AS(energy_distance(a, b), ConfigError);
}

TEST_CASE("sliced wasserstein basics") {
  RandomStream rng(5);
  Tensor a = gaussian_samples(2000, 2, 0.0, rng);
  Tensor b = gaussian_samples(2000, 2, 1.0, rng);
  CHECK(sliced_wasserstein(a, a, 32, 7) == 0.0);
  double d1 = sliced_wasserstein(a, b, 32, 7);
  CHECK(d1 > 0.0);
  CHECK(d1 == Catch::Approx(sliced_wasserstein(b, a, 32, 7)).margin(1e-12));
}

TEST_CASE("frechet feature distance vanishes on identical samples") {
  RandomStream rng(6);
  Tensor a = gaussian_samples(500, 2, 0.3, rng);
  CHECK(frechet_feature_distance(a, a, 11) == Catch::Approx(0.0).margin(1e-8));
}

// Independent oracle: Denman-Beavers iteration for the matrix square root,
// entirely separate from the eigendecomposition route inside the metric.
static double db_sqrt_trace(Eigen::MatrixXd prod) {
  Eigen::MatrixXd y = prod, z = Eigen::MatrixXd::Identity(prod.rows(), prod.cols());
  for (int it = 0; it < 60; ++it) {
    Eigen::MatrixXd yn = 0.5 * (y + z.inverse());
    Eigen::MatrixXd zn = 0.5 * (z + y.inverse());
    y = yn;
    z = zn;
  }
  return y.trace();
}

TEST_CASE("frechet distance matches the closed-form moment formula") {
  const std::size_t n = 4000, D = 4;
  RandomStream rng(7);
  Tensor a = gaussian_samples(n, 2, 0.0, rng);
  Tensor b = gaussian_samples(n, 2, 1.2, rng);
  double metric = frechet_feature_distance(a, b, 13, D);

  // replicate the feature map from the frozen featurizer seed
  RandomStream frng(13, 2);
  Eigen::MatrixXd omega(D, 2);
  Eigen::VectorXd phase(D);
  for (std::size_t i = 0; i < D; ++i) {
    for (int j = 0; j < 2; ++j) omega(i, j) = frng.normal();
    phase(i) = frng.uniform(0.0, 2.0 * M_PI);
  }
  auto feats = [&](const Tensor& x) {
    Eigen::MatrixXd f(x.rows(), D);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t k = 0; k < D; ++k)
        f(i, k) = std::sqrt(2.0 / double(D)) *
                  std::cos(omega(k, 0) * x.v[2 * i] + omega(k, 1) * x.v[2 * i + 1] + phase(k));
    return f;
  };
  auto moments = [&](const Eigen::MatrixXd& f) {
    Eigen::VectorXd mu = f.colwise().mean();
    Eigen::MatrixXd cc = f.rowwise() - mu.transpose();
    return std::make_pair(mu, Eigen::MatrixXd(cc.transpose() * cc / double(f.rows() - 1)));
  };
  auto [mu_a, cov_a] = moments(feats(a));
  auto [mu_b, cov_b] = moments(feats(b));
  double oracle = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() -
                  2.0 * db_sqrt_trace(cov_a * cov_b);
  CHECK(metric == Catch::Approx(oracle).margin(1e-6));
}

TEST_CASE("frechet distance is nondecreasing in the mean shift") {
  std::vector<double> shifts{0.0, 0.4, 0.8};
  std::vector<double> med;
  for (double s : shifts) {
    std::vector<double> vals;
    for (uint64_t seed = 0; seed < 5; ++seed) {
      RandomStream rng(40 + seed);
      Tensor a = gaussian_samples(2000, 2, 0.0, rng);
      Tensor b = gaussian_samples(2000, 2, s, rng);
      vals.push_back(frechet_feature_distance(a, b, 99));
    }
    med.push_back(median_of(vals));
  }
  CHECK(med[0] <= med[1]);
  CHECK(med[1] <= med[2]);
}

TEST_CASE("frechet refuses oversized feature spaces") {
  RandomStream rng(8);
  Tensor a = gaussian_samples(200, 2, 0.0, rng);
  Tensor b = gaussian_samples(200, 2, 0.0, rng);
  CHECK_THROWS_AS(frechet_feature_distance(a, b, 1, 32), ConfigError);
}

TEST_CASE("metric report bundles all three metrics") {
  RandomStream rng(9);
  Tensor a = gaussian_samples(600, 2, 0.0, rng);
  Tensor b = gaussian_samples(600, 2, 0.5, rng);
  MetricReport r = metric_report(a, b, 21);
  CHECK(r.energy_distance > 0.0);
  CHECK(r.sliced_wasserstein > 0.0);
  CHECK(r.frechet_feature_distance > 0.0);
  CHECK(r.n_samples == 600);
  CHECK(r.seed == 21);
}
