#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sida/schedule.hpp"
#include "sida/tape.hpp"
#include "sida/tensor.hpp"

namespace sida {

// Gaussian mixture with diagonal covariances.  Serves as the data
// distribution and, through its closed-form diffused score / posterior-mean
// oracles, as the exact teacher.
struct MixtureModel {
  std::vector<double> weights;             // K, sums to 1
  std::vector<std::vector<double>> means;  // K x d
  std::vector<std::vector<double>> vars;   // K x d, positive

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }

  void validate() const {
    if (weights.empty() || means.size() != weights.size() || vars.size() != weights.size())
      throw ConfigError("mixture: inconsistent component count");
    double sum = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw ConfigError("mixture: negative weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("mixture: weights must sum to 1");
    for (std::size_t k = 0; k < components(); ++k) {
      if (means[k].size() != dim() || vars[k].size() != dim())
        throw ConfigError("mixture: ragged component");
      for (double v : vars[k])
        if (!(v > 0.0)) throw ConfigError("mixture: variances must be positive");
    }
  }
};

inline double logsumexp(const std::vector<double>& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

namespace detail {

// Per-sample sufficient statistics of the diffused mixture at (a, sigma).
struct MixtureEval {
  std::vector<double> resp;       // K responsibilities
  std::vector<double> logits;     // K component log joint densities
  double log_density = 0.0;
};

inline MixtureEval eval_components(const MixtureModel& m, const double* x, double a, double sigma) {
  const std::size_t K = m.components(), d = m.dim();
  MixtureEval ev;
  ev.logits.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    double q = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double v = a * a * m.vars[k][j] + sigma * sigma;
      double r = x[j] - a * m.means[k][j];
      q += r * r / v + std::log(2.0 * M_PI * v);
    }
    ev.logits[k] = std::log(m.weights[k] + 1e-300) - 0.5 * q;
  }
  ev.log_density = logsumexp(ev.logits);
  ev.resp.resize(K);
  for (std::size_t k = 0; k < K; ++k) ev.resp[k] = std::exp(ev.logits[k] - ev.log_density);
  return ev;
}

}  // namespace detail

// Log density of the diffused mixture sum_k pi_k N(a mu_k, a^2 S_k + sigma^2 I).
// sigma = 0 with a = 1 gives the raw data log density.
inline double gmm_log_density(const MixtureModel& m, const double* x, double a, double sigma) {
  return detail::eval_components(m, x, a, sigma).log_density;
}

inline double gmm_log_density(const MixtureModel& m, const std::vector<double>& x,
                              const TimeDraw& draw) {
  return gmm_log_density(m, x.data(), draw.a_t, draw.sigma_t);
}

// grad_x ln p(x_t): responsibility-weighted diagonal Gaussian scores.
inline void gmm_score(const MixtureModel& m, const double* x, const TimeDraw& draw, double* out) {
  const std::size_t K = m.components(), d = m.dim();
  auto ev = detail::eval_components(m, x, draw.a_t, draw.sigma_t);
  for (std::size_t j = 0; j < d; ++j) out[j] = 0.0;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < d; ++j) {
      double v = draw.a_t * draw.a_t * m.vars[k][j] + draw.sigma_t * draw.sigma_t;
      out[j] += ev.resp[k] * (-(x[j] - draw.a_t * m.means[k][j]) / v);
    }
}

inline std::vector<double> gmm_score(const MixtureModel& m, const std::vector<double>& x,
                                     const TimeDraw& draw) {
  std::vector<double> out(m.dim());
  gmm_score(m, x.data(), draw, out.data());
  return out;
}

// E[x_0 | x_t]: responsibility-weighted per-component Gaussian posterior means.
inline void gmm_denoiser(const MixtureModel& m, const double* x, const TimeDraw& draw, double* out) {
  const std::size_t K = m.components(), d = m.dim();
  if (!(draw.sigma_t > 0.0)) throw ConfigError("gmm_denoiser: sigma_t must be positive");
  auto ev = detail::eval_components(m, x, draw.a_t, draw.sigma_t);
  const double a = draw.a_t, s2 = draw.sigma_t * draw.sigma_t;
  for (std::size_t j = 0; j < d; ++j) out[j] = 0.0;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < d; ++j) {
      double v = a * a * m.vars[k][j] + s2;
      double post = (a * m.vars[k][j] * x[j] + s2 * m.means[k][j]) / v;
      out[j] += ev.resp[k] * post;
    }
}

inline std::vector<double> gmm_denoiser(const MixtureModel& m, const std::vector<double>& x,
                                        const TimeDraw& draw) {
  std::vector<double> out(m.dim());
  gmm_denoiser(m, x.data(), draw, out.data());
  return out;
}

// Batched denoiser over {n,d} tensors.
inline Tensor gmm_denoiser_batch(const MixtureModel& m, const Tensor& x, const TimeDraw& draw) {
  Tensor out(x.shape);
  std::size_t n = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < n; ++i) gmm_denoiser(m, x.data() + i * d, draw, out.data() + i * d);
  return out;
}

// Tape node for the exact teacher: forward is the closed-form posterior mean,
// backward the hand-derived vector-Jacobian product, so generator losses can
// differentiate through the teacher's dependence on x_t.
inline Value gmm_denoiser_op(Tape& tape, const MixtureModel& model, Value x_t, const TimeDraw& draw) {
  Tensor x = tape.val(x_t);  // copy captured by the backward closure
  Tensor fwd = gmm_denoiser_batch(model, x, draw);
  MixtureModel m = model;
  return tape.custom(x_t, std::move(fwd), "gmm_denoiser",
                     [m, x, draw](const Tensor& up, Tensor& gin) {
    const std::size_t n = x.rows(), d = x.cols(), K = m.components();
    const double a = draw.a_t, s2 = draw.sigma_t * draw.sigma_t;
    std::vector<double> gk(K * d), mk(K * d), gbar(d);
    for (std::size_t i = 0; i < n; ++i) {
      const double* xi = x.data() + i * d;
      const double* ui = up.data() + i * d;
      double* oi = gin.data() + i * d;
      auto ev = detail::eval_components(m, xi, a, draw.sigma_t);
      std::fill(gbar.begin(), gbar.end(), 0.0);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < d; ++j) {
          double v = a * a * m.vars[k][j] + s2;
          gk[k * d + j] = -(xi[j] - a * m.means[k][j]) / v;
          mk[k * d + j] = (a * m.vars[k][j] * xi[j] + s2 * m.means[k][j]) / v;
          gbar[j] += ev.resp[k] * gk[k * d + j];
        }
      for (std::size_t k = 0; k < K; ++k) {
        double mu = 0.0;  // m_k . upstream
        for (std::size_t j = 0; j < d; ++j) mu += mk[k * d + j] * ui[j];
        for (std::size_t j = 0; j < d; ++j) {
          double akj = a * m.vars[k][j] / (a * a * m.vars[k][j] + s2);
          oi[j] += ev.resp[k] * ((gk[k * d + j] - gbar[j]) * mu + akj * ui[j]);
        }
      }
    }
  });
}

inline Tensor gmm_sample(const MixtureModel& m, std::size_t n, RandomStream& rng) {
  if (n < 1) throw ConfigError("gmm_sample: n must be >= 1");
  const std::size_t d = m.dim();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = rng.categorical(m.weights);
    for (std::size_t j = 0; j < d; ++j)
      out.v[i * d + j] = m.means[k][j] + std::sqrt(m.vars[k][j]) * rng.normal();
  }
  return out;
}

// Imperfect teacher: shift means by strength * unit noise and perturb
// log-weights by strength * noise (then renormalize).  Variances are kept so
// the corrupted score field has the same support geometry.
inline MixtureModel corrupt_teacher(const MixtureModel& m, double strength, RandomStream& rng) {
  if (strength < 0.0) throw ConfigError("corrupt_teacher: strength must be >= 0");
  MixtureModel out = m;
  if (strength == 0.0) return out;
  for (auto& mean : out.means)
    for (double& c : mean) c += strength * rng.normal();
  std::vector<double> logw(m.components());
  for (std::size_t k = 0; k < m.components(); ++k)
    logw[k] = std::log(m.weights[k] + 1e-300) + strength * rng.normal();
  double lse = logsumexp(logw);
  double sum = 0.0;
  for (std::size_t k = 0; k < m.components(); ++k) {
    out.weights[k] = std::exp(logw[k] - lse);
    sum += out.weights[k];
  }
  for (double& w : out.weights) w /= sum;
  return out;
}

// Generator x_g = W z + b, z ~ N(0, I_m): induces N(b, W W^T).  Used for the
// closed-form Fisher-divergence oracle.
struct LinearGenerator {
  Eigen::MatrixXd W;  // d x m
  Eigen::VectorXd b;  // d

  std::size_t dim() const { return std::size_t(W.rows()); }
  std::size_t latent_dim() const { return std::size_t(W.cols()); }
};

struct FisherEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte Carlo estimate over x_t ~ p_theta(x_t) of
// || grad ln p_data(x_t) - grad ln p_theta(x_t) ||^2, both scores exact.
inline FisherEstimate fisher_divergence_exact(const MixtureModel& data, const LinearGenerator& gen,
                                              const TimeDraw& draw, std::size_t n_mc,
                                              RandomStream& rng) {
  if (n_mc < 100) throw ConfigError("fisher_divergence_exact: n_mc must be >= 100");
  if (data.dim() != gen.dim()) throw ConfigError("fisher_divergence_exact: dimension mismatch");
  const std::size_t d = gen.dim(), m = gen.latent_dim();
  const double a = draw.a_t, sig = draw.sigma_t;

  Eigen::MatrixXd cov0 = gen.W * gen.W.transpose();
  cov0 += 1e-9 * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd cov_t = a * a * cov0 + sig * sig * Eigen::MatrixXd::Identity(d, d);
  Eigen::LLT<Eigen::MatrixXd> llt(cov_t);
  if (llt.info() != Eigen::Success)
    throw NumericError("fisher_divergence_exact: diffused generator covariance not PD");
  Eigen::VectorXd mean_t = a * gen.b;

  double sum = 0.0, sum_sq = 0.0;
  Eigen::VectorXd z(m), eps(d), x(d);
  std::vector<double> score_data(d);
  for (std::size_t i = 0; i < n_mc; ++i) {
    for (std::size_t j = 0; j < m; ++j) z[j] = rng.normal();
    for (std::size_t j = 0; j < d; ++j) eps[j] = rng.normal();
    x = a * (gen.W * z + gen.b) + sig * eps;
    Eigen::VectorXd score_gen = -llt.solve(x - mean_t);
    TimeDraw dd = draw;
    gmm_score(data, x.data(), dd, score_data.data());
    double nrm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double diff = score_data[j] - score_gen[j];
      nrm += diff * diff;
    }
    sum += nrm;
    sum_sq += nrm * nrm;
  }
  FisherEstimate est;
  est.value = sum / double(n_mc);
  double var = std::max(0.0, sum_sq / double(n_mc) - est.value * est.value);
  est.std_error = std::sqrt(var / double(n_mc));
  return est;
}

// Named data worlds used by the shipped presets.
inline MixtureModel make_mixture_preset(const std::string& name) {
  MixtureModel m;
  auto uniform_weights = [&](std::size_t k) {
    m.weights.assign(k, 1.0 / double(k));
  };
  if (name == "gauss") {
    m.weights = {1.0};
    m.means = {{1.5, -1.0}};
    m.vars = {{0.64, 1.44}};
  } else if (name == "ring-8") {
    const std::size_t K = 8;
    uniform_weights(K);
    for (std::size_t k = 0; k < K; ++k) {
      double ang = 2.0 * M_PI * double(k) / double(K);
      m.means.push_back({2.0 * std::cos(ang), 2.0 * std::sin(ang)});
      m.vars.push_back({0.04, 0.04});
    }
  } else if (name == "grid-25") {
    const int side = 5;
    uniform_weights(side * side);
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j) {
        m.means.push_back({double(i) - 2.0, double(j) - 2.0});
        m.vars.push_back({0.0225, 0.0225});
      }
  } else if (name == "two-moons-gmm") {
    const std::size_t per = 6;
    uniform_weights(2 * per);
    for (std::size_t k = 0; k < per; ++k) {
      double ang = M_PI * double(k) / double(per - 1);
      m.means.push_back({1.5 * std::cos(ang), 1.5 * std::sin(ang) - 0.35});
      m.vars.push_back({0.03, 0.03});
    }
    for (std::size_t k = 0; k < per; ++k) {
      double ang = M_PI * double(k) / double(per - 1);
      m.means.push_back({1.0 - 1.5 * std::cos(ang), 0.35 - 1.5 * std::sin(ang)});
      m.vars.push_back({0.03, 0.03});
    }
  } else {
    throw ConfigError("unknown mixture preset: " + name);
  }
  m.validate();
  return m;
}

}  // namespace sida
