#pragma once

#include <algorithm>
#include <cmath>

#include "sida/tape.hpp"
#include "sida/tensor.hpp"

namespace sida {

enum class SignalMode { edm, vp };       // a_t == 1 vs a_t = 1/sqrt(1+sigma^2)
enum class OmegaMode { unit, adaptive }; // sigma^4/a^2 (prefactor 1) vs per-batch normalizer

struct ScheduleConfig {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  int t_max = 800;             // generator times drawn from Unif[0, t_max/1000]
  double sigma_init = 2.5;     // generator input scale
  double p_mean = -1.2;        // log-normal noise proposal for the fake-score path
  double p_std = 1.2;
  SignalMode signal = SignalMode::edm;
  OmegaMode omega = OmegaMode::unit;
};

struct TimeDraw {
  double t = 0.0;
  double a_t = 1.0;
  double sigma_t = 0.0;
  double omega_t = 0.0;  // generator-path weight
  double gamma_t = 0.0;  // fake-score-path weight (SNR)
};

// Noise schedule (a_t, sigma_t) on t in [0,1].  sigma interpolates between
// sigma_min and sigma_max along the rho-warped power path, so it is strictly
// increasing and the signal-to-noise ratio a_t^2/sigma_t^2 strictly decreasing.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(ScheduleConfig cfg) : cfg_(cfg) {
    if (!(cfg.sigma_min > 0.0) || !(cfg.sigma_min < cfg.sigma_max))
      throw ConfigError("schedule: need 0 < sigma_min < sigma_max");
    if (!(cfg.rho > 0.0)) throw ConfigError("schedule: rho must be positive");
    if (cfg.t_max < 0 || cfg.t_max > 1000) throw ConfigError("schedule: t_max must be in [0,1000]");
    if (!(cfg.sigma_init > 0.0)) throw ConfigError("schedule: sigma_init must be positive");
    if (!(cfg.p_std > 0.0)) throw ConfigError("schedule: p_std must be positive");
    inv_rho_min_ = std::pow(cfg.sigma_min, 1.0 / cfg.rho);
    inv_rho_max_ = std::pow(cfg.sigma_max, 1.0 / cfg.rho);
  }

  const ScheduleConfig& config() const { return cfg_; }

  double sigma(double t) const {
    double s = inv_rho_min_ + t * (inv_rho_max_ - inv_rho_min_);
    return std::pow(s, cfg_.rho);
  }

  // Inverse of sigma(t); exact for sigma in [sigma_min, sigma_max].
  double t_of_sigma(double s) const {
    return (std::pow(s, 1.0 / cfg_.rho) - inv_rho_min_) / (inv_rho_max_ - inv_rho_min_);
  }

  double a(double t) const {
    if (cfg_.signal == SignalMode::edm) return 1.0;
    double s = sigma(t);
    return 1.0 / std::sqrt(1.0 + s * s);
  }

  TimeDraw at(double t) const {
    TimeDraw d;
    d.t = t;
    d.a_t = a(t);
    d.sigma_t = sigma(t);
    d.omega_t = std::pow(d.sigma_t, 4) / (d.a_t * d.a_t);
    d.gamma_t = (d.a_t * d.a_t) / (d.sigma_t * d.sigma_t);
    return d;
  }

  // t ~ Unif[0, t_max/1000]; weights populated for the generator path.
  TimeDraw sample_generator_time(RandomStream& rng) const {
    double hi = double(cfg_.t_max) / 1000.0;
    return at(hi == 0.0 ? 0.0 : rng.uniform(0.0, hi));
  }

  // sigma from a log-normal proposal (clamped to the schedule range), mapped
  // back to t; gamma follows the signal-to-noise convention.
  TimeDraw sample_fakescore_time(RandomStream& rng) const {
    double s = std::exp(cfg_.p_mean + cfg_.p_std * rng.normal());
    s = std::clamp(s, cfg_.sigma_min, cfg_.sigma_max);
    return at(t_of_sigma(s));
  }

 private:
  ScheduleConfig cfg_;
  double inv_rho_min_, inv_rho_max_;
};

// x_t = a_t x + sigma_t eps on the tape; gradient flows through x only.
inline Value diffuse(Tape& tape, Value x, const TimeDraw& draw, const Tensor& eps) {
  if (!tape.val(x).same_shape(eps)) throw ConfigError("diffuse: x and eps shape mismatch");
  Tensor scaled = eps;
  for (double& e : scaled.v) e *= draw.sigma_t;
  return tape.add(tape.mul_scalar(x, draw.a_t), tape.constant(std::move(scaled)));
}

// Plain-tensor variant for paths that never need gradients (real data, eval).
inline Tensor diffuse(const Tensor& x, const TimeDraw& draw, const Tensor& eps) {
  if (!x.same_shape(eps)) throw ConfigError("diffuse: x and eps shape mismatch");
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = draw.a_t * x.v[i] + draw.sigma_t * eps.v[i];
  return out;
}

}  // namespace sida
