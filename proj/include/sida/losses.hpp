#pragma once

#include <cmath>

#include "sida/schedule.hpp"
#include "sida/tape.hpp"
#include "sida/tensor.hpp"

namespace sida {

struct LossWeights {
  double alpha = 1.0;
  double lambda_sid = 100.0;
  double lambda_adv_gen = 0.01;
  double lambda_adv_fake = 1.0;
  int stage_b = 0;                // adversarial stage flag
  std::size_t pool_group = 32;    // emulated per-device batch size
  std::size_t pixel_count = 2;    // C_c * W * H of the data space

  void validate() const {
    if (!(lambda_sid >= 0.0) || !(lambda_adv_gen > 0.0) || !(lambda_adv_fake >= 0.0))
      throw ConfigError("loss weights must be positive");
    if (stage_b != 0 && stage_b != 1) throw ConfigError("stage_b must be 0 or 1");
    if (pool_group == 0) throw ConfigError("pool_group must be positive");
  }
};

enum class SidForm { eq_form, alg_form };  // -a||d||^2 + d.(f_phi - x_g)  vs  (1-a)||d||^2 + d.(f_psi - x_g)

namespace detail {

// Per-sample generator-path prefactor omega(t) a_t^2 / sigma_t^4.  The unit
// omega makes it identically 1; the adaptive normalizer divides by the
// (detached) per-sample mean absolute teacher residual times the data
// dimension, recomputed per batch.
inline Tensor generator_prefactors(Tape& t, Value f_phi, Value x_g, const TimeDraw& draw,
                                   OmegaMode mode) {
  const Tensor& fp = t.val(f_phi);
  std::size_t n = fp.rows(), d = fp.cols();
  double base = draw.omega_t * draw.a_t * draw.a_t / std::pow(draw.sigma_t, 4);
  Tensor w({n}, base);
  if (mode == OmegaMode::adaptive) {
    const Tensor& xg = t.val(x_g);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += std::abs(fp.v[i * d + j] - xg.v[i * d + j]);
      w.v[i] = 1.0 / (double(d) * (acc / double(d)) + 1e-12);
    }
  }
  return w;
}

}  // namespace detail

// Bias-corrected distillation objective; both printed forms are algebraically
// identical and both are exposed so the identity can be asserted.
// f_phi / f_psi must be network evaluations whose own parameters are frozen;
// gradient flows only through the x_t (and x_g) paths.
inline Value sid_generator_loss(Tape& t, Value f_phi, Value f_psi, Value x_g, double alpha,
                                const TimeDraw& draw, OmegaMode omega_mode = OmegaMode::unit,
                                SidForm form = SidForm::alg_form) {
  if (!t.val(f_phi).same_shape(t.val(f_psi)) || !t.val(f_phi).same_shape(t.val(x_g)))
    throw ConfigError("sid_generator_loss: shape mismatch");
  Value d = t.sub(f_phi, f_psi);
  Value sq = t.row_dot(d, d);
  Value per;
  if (form == SidForm::eq_form)
    per = t.add(t.mul_scalar(sq, -alpha), t.row_dot(d, t.sub(f_phi, x_g)));
  else
    per = t.add(t.mul_scalar(sq, 1.0 - alpha), t.row_dot(d, t.sub(f_psi, x_g)));
  Tensor w = detail::generator_prefactors(t, f_phi, x_g, draw, omega_mode);
  return t.sum_all(t.mul(per, t.constant(std::move(w))));
}

// Per-group average fakeness: mean over pool_group samples and all
// discriminator-map positions of ln D (stable log-sigmoid of the logits);
// every sample in a group receives the same pooled scalar and keeps a live
// gradient path.
inline Value pooled_fakeness(Tape& t, Value disc_logits, std::size_t pool_group) {
  const Tensor& lg = t.val(disc_logits);
  std::size_t n = lg.rows();
  if (pool_group == 0 || n % pool_group != 0)
    throw ConfigError("pooled_fakeness: batch size " + std::to_string(n) +
                      " not divisible by pool_group " + std::to_string(pool_group));
  Value log_d = t.neg(t.softplus(t.neg(disc_logits)));  // ln sigmoid(logits)
  return t.mean_group(t.row_mean(log_d), pool_group);
}

struct GeneratorLoss {
  Value total;
  Value sid;  // lambda-scaled SiD contribution
  Value adv;  // lambda-scaled adversarial contribution (zero constant when gated off)
};

// Staged generator objective: (1/2)^b * lambda_sid * SiD term plus the
// b-gated batch-pooled adversarial term that pushes D(fake) toward "real"
// (non-saturating, so minimization increases ln D of the generated batch).
inline GeneratorLoss sida_generator_loss(Tape& t, Value f_phi, Value f_psi, Value x_g,
                                         Value disc_logits, bool has_disc,
                                         const LossWeights& w, const TimeDraw& draw,
                                         OmegaMode omega_mode = OmegaMode::unit) {
  w.validate();
  GeneratorLoss out;
  double halving = w.stage_b ? 0.5 : 1.0;
  Value sid = sid_generator_loss(t, f_phi, f_psi, x_g, w.alpha, draw, omega_mode);
  out.sid = t.mul_scalar(sid, halving * w.lambda_sid);
  if (w.stage_b) {
    if (!has_disc) throw ConfigError("sida_generator_loss: stage_b=1 requires disc_logits");
    Tensor pref = detail::generator_prefactors(t, f_phi, x_g, draw, omega_mode);
    for (double& p : pref.v) p *= 0.5;  // omega a^2 / (2 sigma^4)
    Value pooled = pooled_fakeness(t, disc_logits, w.pool_group);
    Value adv_per = t.mul(t.neg(pooled), t.constant(std::move(pref)));
    out.adv = t.mul_scalar(t.sum_all(adv_per),
                           (double(w.stage_b) / 2.0) * w.lambda_adv_gen * double(w.pixel_count));
  } else {
    out.adv = t.constant(0.0);
  }
  out.total = t.add(out.sid, out.adv);
  return out;
}

// gamma(t) * sum over the batch of ||f_psi(x_t,t) - x_g||^2; x_g enters
// detached so no gradient reaches the generator during psi updates.
inline Value fake_score_denoise_loss(Tape& t, Value f_psi_denoised, Value x_g_detached,
                                     double gamma_t) {
  if (!t.val(f_psi_denoised).same_shape(t.val(x_g_detached)))
    throw ConfigError("fake_score_denoise_loss: shape mismatch");
  Value res = t.sub(f_psi_denoised, x_g_detached);
  return t.mul_scalar(t.sum_all(t.mul(res, res)), gamma_t);
}

// Negated discriminator log-likelihood (minimization improves discrimination):
// (1/(2 |B| W' H')) * sum [ softplus(-real) + softplus(fake) ].
inline Value discriminator_loss(Tape& t, Value real_logits, Value fake_logits) {
  const Tensor& r = t.val(real_logits);
  const Tensor& f = t.val(fake_logits);
  if (r.rows() != f.rows() || r.size() != f.size())
    throw ConfigError("discriminator_loss: real/fake batch mismatch");
  Value term_real = t.mean_all(t.softplus(t.neg(real_logits)));
  Value term_fake = t.mean_all(t.softplus(fake_logits));
  return t.mul_scalar(t.add(term_real, term_fake), 0.5);
}

struct FakeScoreLoss {
  Value total;
  Value denoise;  // gamma-scaled denoising term
  Value disc;     // gamma- and lambda-scaled discriminator term (zero when disabled)
};

// Joint fake-score objective: gamma multiplies both the denoising residual and
// the lambda-weighted discriminator term, summed over the batch.
inline FakeScoreLoss sida_fakescore_loss(Tape& t, Value f_psi_denoised, Value x_g_detached,
                                         Value real_logits, Value fake_logits, bool has_disc,
                                         const LossWeights& w, const TimeDraw& draw) {
  w.validate();
  FakeScoreLoss out;
  std::size_t n = t.val(f_psi_denoised).rows();
  out.denoise = fake_score_denoise_loss(t, f_psi_denoised, x_g_detached, draw.gamma_t);
  if (w.lambda_adv_fake > 0.0 && has_disc) {
    Value disc = discriminator_loss(t, real_logits, fake_logits);
    out.disc = t.mul_scalar(disc, draw.gamma_t * w.lambda_adv_fake * double(n));
  } else {
    out.disc = t.constant(0.0);
  }
  out.total = t.add(out.denoise, out.disc);
  return out;
}

enum class LogvarForm { as_printed, canonical };

// Uncertainty-weighted variant driven by the logvar head:
//   as_printed:  sum_i gamma/exp(u) * (||res_i||^2 + u + lambda L_adv)
//   canonical:   sum_i [ gamma (||res_i||^2 + lambda L_adv) / exp(u) + u ]
inline FakeScoreLoss sida_fakescore_loss_logvar(Tape& t, Value f_psi_denoised, Value x_g_detached,
                                                Value real_logits, Value fake_logits, bool has_disc,
                                                Value logvar, const LossWeights& w,
                                                const TimeDraw& draw,
                                                LogvarForm form = LogvarForm::as_printed) {
  w.validate();
  if (t.val(logvar).size() != 1) throw ConfigError("logvar must be scalar");
  std::size_t n = t.val(f_psi_denoised).rows();
  Value res = t.sub(f_psi_denoised, x_g_detached);
  Value sum_sq = t.sum_all(t.mul(res, res));
  Value disc_raw;
  bool use_disc = w.lambda_adv_fake > 0.0 && has_disc;
  if (use_disc) disc_raw = discriminator_loss(t, real_logits, fake_logits);

  Value inv_ev = t.recip(t.exp(logvar));
  FakeScoreLoss out;
  if (form == LogvarForm::as_printed) {
    Value inner = sum_sq;
    inner = t.add(inner, t.mul_scalar(logvar, double(n)));
    if (use_disc) inner = t.add(inner, t.mul_scalar(disc_raw, w.lambda_adv_fake * double(n)));
    out.total = t.mul(t.mul_scalar(inv_ev, draw.gamma_t), inner);
    out.denoise = t.mul(t.mul_scalar(inv_ev, draw.gamma_t), sum_sq);
    out.disc = use_disc ? t.mul(t.mul_scalar(inv_ev, draw.gamma_t * w.lambda_adv_fake * double(n)),
                                disc_raw)
                        : t.constant(0.0);
  } else {
    Value scaled = sum_sq;
    if (use_disc) scaled = t.add(scaled, t.mul_scalar(disc_raw, w.lambda_adv_fake * double(n)));
    out.total = t.add(t.mul(t.mul_scalar(inv_ev, draw.gamma_t), scaled),
                      t.mul_scalar(logvar, double(n)));
    out.denoise = t.mul(t.mul_scalar(inv_ev, draw.gamma_t), sum_sq);
    out.disc = use_disc ? t.mul(t.mul_scalar(inv_ev, draw.gamma_t * w.lambda_adv_fake * double(n)),
                                disc_raw)
                        : t.constant(0.0);
  }
  return out;
}

}  // namespace sida
