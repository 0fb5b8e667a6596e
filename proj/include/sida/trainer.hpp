#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sida/checkpoint.hpp"
#include "sida/losses.hpp"
#include "sida/metrics.hpp"
#include "sida/mixture.hpp"
#include "sida/nets.hpp"
#include "sida/optimizer.hpp"
#include "sida/schedule.hpp"
#include "sida/teacher.hpp"

namespace sida {

enum class RunMode { sid, sida, sid2a };

inline const char* mode_name(RunMode m) {
  switch (m) {
    case RunMode::sid: return "sid";
    case RunMode::sida: return "sida";
    case RunMode::sid2a: return "sid2a";
  }
  return "?";
}

struct TrainConfig {
  MixtureModel data;
  ScheduleConfig schedule;
  NetsConfig nets;
  LossWeights loss;
  bool logvar_enabled = false;
  LogvarForm logvar_form = LogvarForm::as_printed;
  ForceNormMode force_norm = ForceNormMode::off;
  RunMode mode = RunMode::sid;

  TeacherKind teacher_kind = TeacherKind::exact;
  double teacher_strength = 0.0;
  std::size_t teacher_budget = 100000;
  std::string teacher_path;    // optional pre-trained teacher checkpoint
  std::string sid_checkpoint;  // warm-start generator for mode=sid2a

  std::size_t batch = 32;
  std::size_t time_groups = 4;  // sub-batches drawing independent noise levels per step
  double lr_psi = 1e-4, lr_theta = 1e-4;
  double adam_beta1 = 0.0, adam_beta2 = 0.999, adam_eps = 1e-8;
  uint64_t n1 = 10000, n2 = 20000, budget = 200000;
  double ema_decay = 0.999;
  std::size_t psi_prefit_steps = 1000;
  std::size_t psi_steps_per_gen = 1;
  uint64_t seed = 0;

  uint64_t eval_every = 20000;
  std::size_t eval_samples = 10000;
  std::vector<double> fisher_sigmas = {0.05, 0.3, 1.0};
  std::size_t fisher_mc = 4000;
  bool timing_wall = false;  // real wall clock breaks byte-identical reruns; off by default

  uint64_t config_hash = 0, compat_hash = 0;

  bool adversarial_possible() const { return mode != RunMode::sid; }

  void validate() const {
    data.validate();
    nets.validate();
    loss.validate();
    if (!(n1 < n2)) throw ConfigError("train: need n1 < n2");
    if (!(lr_psi > 0.0) || !(lr_theta > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (batch == 0) throw ConfigError("train: batch must be positive");
    if (time_groups == 0 || batch % time_groups != 0)
      throw ConfigError("train: batch must be divisible by time_groups");
    if ((batch / time_groups) % loss.pool_group != 0)
      throw ConfigError("train: per-time-group batch must be divisible by pool_group");
    if (loss.pixel_count != nets.pixel_count())
      throw ConfigError("train: loss pixel_count inconsistent with the data space");
    if (psi_steps_per_gen == 0) throw ConfigError("train: psi_steps_per_gen must be >= 1");
    if (mode == RunMode::sid2a && sid_checkpoint.empty())
      throw ConfigError("train: mode=sid2a requires sid_checkpoint");
    if (force_norm == ForceNormMode::in_place && adversarial_possible())
      throw ConfigError(
          "train: in-place forced weight normalization cannot be combined with an adversarial "
          "loss; use the pre-hook mode");
    if (force_norm != ForceNormMode::off && !nets.magnitude_preserving)
      throw ConfigError("train: forced weight normalization requires magnitude-preserving layers");
    if (logvar_enabled && !nets.logvar_head)
      throw ConfigError("train: logvar loss requires the logvar head");
    if (data.dim() != nets.dim) throw ConfigError("train: data dimension != nets dim");
  }
};

struct StepLog {
  uint64_t images_seen = 0;
  int stage_b = 0;
  double loss_sid = NAN, loss_adv_gen = NAN;   // generator-path components
  double loss_denoise = NAN, loss_disc = NAN;  // fake-score-path components
  double energy_distance = NAN;                // EMA generator vs data, at eval rows
  double fisher = NAN;                         // affine generators only
  double wall = 0.0;
  bool has_eval = false;
};

struct TrainState {
  TrainConfig cfg;
  NoiseSchedule schedule{ScheduleConfig{}};
  Teacher teacher;
  ParamSet theta, psi, theta_ema;
  Adam opt_theta, opt_psi;
  uint64_t images_seen = 0;
  int stage_b = 0;
  uint64_t generator_steps = 0;
  RandomStream rng_data{0}, rng_noise{0}, rng_time{0}, rng_z{0};
  std::vector<StepLog> rows;
  uint64_t next_eval = 0;
  std::size_t eval_index = 0;
  std::size_t force_norm_warnings = 0;
  std::chrono::steady_clock::time_point started;

  bool adversarial_active() const { return cfg.adversarial_possible() && stage_b == 1; }
};

namespace detail {

inline void refresh_stage(TrainState& s) { s.stage_b = s.images_seen > s.cfg.n2 ? 1 : 0; }

inline std::vector<std::pair<std::string, Tensor>> collect_grads(Tape& t, const BoundParams& b) {
  std::vector<std::pair<std::string, Tensor>> grads;
  grads.reserve(b.items.size());
  for (auto& [name, v] : b.items) grads.emplace_back(name, t.grad(v));
  return grads;
}

inline void apply_force_norm(TrainState& s, ParamSet& params) {
  if (s.cfg.force_norm == ForceNormMode::off) return;
  s.force_norm_warnings += forced_weight_normalize(params, s.cfg.force_norm);
}

}  // namespace detail

// Generator samples with frozen parameters, in chunks.
inline Tensor generate_samples(const NetsConfig& nets, const ParamSet& theta, double sigma_init,
                               std::size_t n, RandomStream& rng) {
  Tensor out({n, nets.dim});
  const std::size_t chunk = 512;
  std::size_t done = 0;
  while (done < n) {
    std::size_t b = std::min(chunk, n - done);
    Tape t;
    BoundParams bp = bind(t, theta, false);
    Value z = t.constant(rng.normal_tensor({b, nets.latent}));
    const Tensor& xg = t.val(forward_generator(t, nets, bp, z, sigma_init));
    std::copy(xg.v.begin(), xg.v.end(), out.v.begin() + done * nets.dim);
    done += b;
  }
  return out;
}

// Affine generators (gen_hidden == 0) induce an exact Gaussian; expose it for
// the closed-form Fisher oracle.
inline std::optional<LinearGenerator> linear_generator_view(const TrainConfig& cfg,
                                                            const ParamSet& theta) {
  if (cfg.nets.grid || cfg.nets.gen_hidden != 0) return std::nullopt;
  const Tensor& w = theta.at("out.w");
  const Tensor& b = theta.at("out.b");
  LinearGenerator gen;
  gen.W.resize(cfg.nets.dim, cfg.nets.latent);
  for (std::size_t i = 0; i < cfg.nets.dim; ++i)
    for (std::size_t j = 0; j < cfg.nets.latent; ++j)
      gen.W(i, j) = cfg.schedule.sigma_init * w.v[i * cfg.nets.latent + j];
  gen.b.resize(cfg.nets.dim);
  for (std::size_t i = 0; i < cfg.nets.dim; ++i) gen.b(i) = b.v[i];
  return gen;
}

// --------------------------------------------------------------------------
// Initialization
// --------------------------------------------------------------------------

// Cosine decay to a tenth of the base rate; stabilizes the tail of the short
// denoising fits.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  double frac = double(step + 1) / double(total);
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * frac)));
}

inline void prefit_psi(TrainState& s) {
  // Stand-in for copying teacher weights when the teacher is an oracle with no
  // parameters: short denoising fit of psi against teacher targets on data.
  RandomStream rng_data(s.cfg.seed, 20), rng_noise(s.cfg.seed, 21), rng_time(s.cfg.seed, 22);
  const double base_lr = s.cfg.lr_psi * 30.0;
  Adam opt(AdamConfig{base_lr, s.cfg.adam_beta1, s.cfg.adam_beta2, s.cfg.adam_eps});
  const std::size_t d = s.cfg.data.dim();
  for (std::size_t step = 0; step < s.cfg.psi_prefit_steps; ++step) {
    TimeDraw draw = s.schedule.sample_fakescore_time(rng_time);
    Tensor x0 = gmm_sample(s.cfg.data, s.cfg.batch, rng_data);
    Tensor eps = rng_noise.normal_tensor({s.cfg.batch, d});
    Tensor xt = diffuse(x0, draw, eps);
    Tensor target = teacher_eval(s.teacher, xt, draw);
    Tape t;
    BoundParams b = bind(t, s.psi, true);
    auto out = forward_scorenet(t, s.cfg.nets, b, t.constant(xt), draw, ReturnFlag::decoder);
    Value res = t.sub(out.denoised, t.constant(target));
    Value loss = t.mul_scalar(t.sum_all(t.mul(res, res)), draw.gamma_t / double(s.cfg.batch));
    t.backward(loss);
    auto grads = detail::collect_grads(t, b);
    opt.set_lr(cosine_lr(base_lr, step, s.cfg.psi_prefit_steps));
    opt.step(s.psi, grads);
    detail::apply_force_norm(s, s.psi);
  }
}

inline TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  s.schedule = NoiseSchedule(cfg.schedule);
  s.opt_theta = Adam(AdamConfig{cfg.lr_theta, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
  s.opt_psi = Adam(AdamConfig{cfg.lr_psi, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
  s.rng_data = RandomStream(cfg.seed, 2);
  s.rng_noise = RandomStream(cfg.seed, 3);
  s.rng_time = RandomStream(cfg.seed, 4);
  s.rng_z = RandomStream(cfg.seed, 5);
  s.started = std::chrono::steady_clock::now();

  if (cfg.teacher_kind == TeacherKind::learned) {
    if (!cfg.teacher_path.empty()) {
      Checkpoint ck = load_checkpoint(cfg.teacher_path);
      if (ck.header.compat_hash != cfg.compat_hash)
        throw ConfigError("teacher checkpoint is incompatible with this config");
      s.teacher.kind = TeacherKind::learned;
      s.teacher.model = cfg.data;
      s.teacher.net_cfg = cfg.nets;
      s.teacher.params = ck.section("teacher");
      RandomStream rng_bias(cfg.seed, 14);
      s.teacher.bias = measure_teacher_bias(s.teacher, cfg.data, s.schedule, 2000, rng_bias);
    } else {
      s.teacher = pretrain_teacher(cfg.nets, cfg.data, s.schedule,
                                   AdamConfig{cfg.lr_psi * 10.0, cfg.adam_beta1, cfg.adam_beta2,
                                              cfg.adam_eps},
                                   cfg.teacher_budget, cfg.batch, cfg.seed);
    }
  } else {
    s.teacher = make_analytic_teacher(cfg.data, cfg.teacher_kind == TeacherKind::corrupted
                                                    ? cfg.teacher_strength
                                                    : 0.0,
                                      cfg.seed);
    if (s.teacher.kind == TeacherKind::corrupted) {
      RandomStream rng_bias(cfg.seed, 14);
      s.teacher.bias = measure_teacher_bias(s.teacher, cfg.data, s.schedule, 2000, rng_bias);
    }
  }

  RandomStream rng_theta(cfg.seed, 0), rng_psi(cfg.seed, 1);
  s.theta = make_generator_params(cfg.nets, rng_theta);

  if (cfg.mode == RunMode::sid2a) {
    Checkpoint ck = load_checkpoint(cfg.sid_checkpoint);
    if (ck.header.compat_hash != cfg.compat_hash)
      throw ConfigError("sid checkpoint hash does not match this config");
    s.theta = ck.section("generator");
  }

  if (cfg.teacher_kind == TeacherKind::learned) {
    s.psi = s.teacher.params;  // psi <- phi, literally
  } else {
    s.psi = make_scorenet_params(cfg.nets, rng_psi);
    detail::apply_force_norm(s, s.psi);
    prefit_psi(s);
  }
  detail::apply_force_norm(s, s.theta);
  detail::apply_force_norm(s, s.psi);
  s.theta_ema = s.theta;
  detail::refresh_stage(s);
  return s;
}

// --------------------------------------------------------------------------
// Steps
// --------------------------------------------------------------------------

struct FakeStepResult {
  double denoise = 0.0;
  double disc = NAN;  // NAN when the adversarial term is gated off
};

// One Adam step on psi.  The generator is frozen; real data enters only the
// discriminator term.  The batch splits into time_groups sub-batches, each
// drawing its own noise level; within a group the diffused real and fake
// batches share the drawn t.
inline FakeStepResult train_step_fake(TrainState& s) {
  const TrainConfig& cfg = s.cfg;
  const std::size_t d = cfg.nets.dim;
  const std::size_t gs = cfg.batch / cfg.time_groups;
  detail::refresh_stage(s);
  const bool adv = s.adversarial_active();

  Tensor z = s.rng_z.normal_tensor({cfg.batch, cfg.nets.latent});
  Tensor x_g;
  {
    Tape t;
    BoundParams bt = bind(t, s.theta, false);  // theta detached
    x_g = t.val(forward_generator(t, cfg.nets, bt, t.constant(z), cfg.schedule.sigma_init));
  }

  Tape t;
  BoundParams bp = bind(t, s.psi, true);
  LossWeights w = cfg.loss;
  w.stage_b = s.stage_b;
  Value total{}, denoise_acc{}, disc_acc{};
  for (std::size_t g = 0; g < cfg.time_groups; ++g) {
    TimeDraw draw = s.schedule.sample_fakescore_time(s.rng_time);
    Tensor xg_g({gs, d});
    std::copy(x_g.v.begin() + g * gs * d, x_g.v.begin() + (g + 1) * gs * d, xg_g.v.begin());
    Tensor eps = s.rng_noise.normal_tensor({gs, d});
    Tensor x_t = diffuse(xg_g, draw, eps);

    auto fake_out = forward_scorenet(t, cfg.nets, bp, t.constant(x_t), draw,
                                     adv ? ReturnFlag::encoder_decoder : ReturnFlag::decoder);
    Value real_logits{}, fake_logits{};
    if (adv) {
      Tensor y = gmm_sample(cfg.data, gs, s.rng_data);
      Tensor eps_y = s.rng_noise.normal_tensor({gs, d});
      Tensor y_t = diffuse(y, draw, eps_y);
      auto real_out = forward_scorenet(t, cfg.nets, bp, t.constant(y_t), draw, ReturnFlag::encoder);
      real_logits = real_out.disc_logits;
      fake_logits = fake_out.disc_logits;
    }
    Value xg_const = t.constant(xg_g);
    FakeScoreLoss loss =
        (cfg.logvar_enabled && fake_out.has_logvar)
            ? sida_fakescore_loss_logvar(t, fake_out.denoised, xg_const, real_logits, fake_logits,
                                         adv, fake_out.logvar, w, draw, cfg.logvar_form)
            : sida_fakescore_loss(t, fake_out.denoised, xg_const, real_logits, fake_logits, adv, w,
                                  draw);
    total = g == 0 ? loss.total : t.add(total, loss.total);
    denoise_acc = g == 0 ? loss.denoise : t.add(denoise_acc, loss.denoise);
    if (adv) disc_acc = g == 0 ? loss.disc : t.add(disc_acc, loss.disc);
  }
  t.backward(total);
  auto grads = detail::collect_grads(t, bp);
  FakeStepResult res;
  res.denoise = t.val(denoise_acc).v[0];
  res.disc = adv ? t.val(disc_acc).v[0] : NAN;
  s.opt_psi.step(s.psi, grads);
  detail::apply_force_norm(s, s.psi);
  return res;
}

struct GenStepResult {
  double sid = 0.0;
  double adv = NAN;  // NAN before the adversarial stage
};

// One Adam step on theta; refuses before the generator stage opens.  Each
// time group draws its own t, generates its own sub-batch and adds its loss.
inline GenStepResult train_step_generator(TrainState& s) {
  const TrainConfig& cfg = s.cfg;
  if (s.images_seen < cfg.n1)
    throw ConfigError("train_step_generator: refused, images_seen < n1 (stage contract)");
  detail::refresh_stage(s);
  const bool adv = s.adversarial_active();
  const std::size_t d = cfg.nets.dim;
  const std::size_t gs = cfg.batch / cfg.time_groups;

  Tape t;
  BoundParams bt = bind(t, s.theta, true);
  BoundParams bp = bind(t, s.psi, false);  // psi detached
  LossWeights w = cfg.loss;
  w.stage_b = adv ? 1 : 0;
  Value total{}, sid_acc{}, adv_acc{};
  for (std::size_t g = 0; g < cfg.time_groups; ++g) {
    TimeDraw draw = s.schedule.sample_generator_time(s.rng_time);
    Tensor z = s.rng_z.normal_tensor({gs, cfg.nets.latent});
    Tensor eps = s.rng_noise.normal_tensor({gs, d});
    Value xg = forward_generator(t, cfg.nets, bt, t.constant(z), cfg.schedule.sigma_init);
    Value xt = diffuse(t, xg, draw, eps);
    auto fout = forward_scorenet(t, cfg.nets, bp, xt, draw,
                                 adv ? ReturnFlag::encoder_decoder : ReturnFlag::decoder);
    Value fphi = teacher_oracle(t, s.teacher, xt, draw);
    GeneratorLoss loss = sida_generator_loss(t, fphi, fout.denoised, xg, fout.disc_logits,
                                             fout.has_disc, w, draw, cfg.schedule.omega);
    total = g == 0 ? loss.total : t.add(total, loss.total);
    sid_acc = g == 0 ? loss.sid : t.add(sid_acc, loss.sid);
    if (adv) adv_acc = g == 0 ? loss.adv : t.add(adv_acc, loss.adv);
  }
  t.backward(total);
  auto grads = detail::collect_grads(t, bt);
  GenStepResult res;
  res.sid = t.val(sid_acc).v[0];
  res.adv = adv ? t.val(adv_acc).v[0] : NAN;
  s.opt_theta.step(s.theta, grads);
  detail::apply_force_norm(s, s.theta);
  ema_update(s.theta_ema, s.theta, cfg.ema_decay);
  ++s.generator_steps;
  return res;
}

// --------------------------------------------------------------------------
// Evaluation
// --------------------------------------------------------------------------

struct EvalResult {
  double energy_distance = NAN;
  double energy_distance_raw = NAN;
  double fisher = NAN;
};

inline EvalResult evaluate_state(TrainState& s) {
  const TrainConfig& cfg = s.cfg;
  RandomStream rng(cfg.seed, 1000 + s.eval_index);
  ++s.eval_index;
  EvalResult r;
  Tensor real = gmm_sample(cfg.data, cfg.eval_samples, rng);
  Tensor gen_ema =
      generate_samples(cfg.nets, s.theta_ema, cfg.schedule.sigma_init, cfg.eval_samples, rng);
  r.energy_distance = energy_distance(gen_ema, real);
  Tensor gen_raw =
      generate_samples(cfg.nets, s.theta, cfg.schedule.sigma_init, cfg.eval_samples, rng);
  r.energy_distance_raw = energy_distance(gen_raw, real);
  if (auto lin = linear_generator_view(cfg, s.theta_ema)) {
    double acc = 0.0;
    for (double sig : cfg.fisher_sigmas) {
      TimeDraw dr = s.schedule.at(s.schedule.t_of_sigma(
          std::clamp(sig, cfg.schedule.sigma_min, cfg.schedule.sigma_max)));
      acc += fisher_divergence_exact(cfg.data, *lin, dr, cfg.fisher_mc, rng).value;
    }
    r.fisher = acc / double(cfg.fisher_sigmas.size());
  }
  return r;
}

// --------------------------------------------------------------------------
// Run loop and artifacts
// --------------------------------------------------------------------------

inline std::string format_metric(double x) {
  if (std::isnan(x)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", x);
  return buf;
}

inline const char* kMetricsHeader =
    "images_seen,stage_b,loss_sid,loss_adv_gen,loss_denoise,loss_disc,energy_distance,"
    "fisher_divergence_if_available,wall_clock";

inline std::string metrics_csv(const std::vector<StepLog>& rows) {
  std::string out = kMetricsHeader;
  out += "\n";
  for (const StepLog& r : rows) {
    out += std::to_string(r.images_seen);
    out += ",";
    out += std::to_string(r.stage_b);
    out += ",";
    out += format_metric(r.loss_sid);
    out += ",";
    out += format_metric(r.loss_adv_gen);
    out += ",";
    out += format_metric(r.loss_denoise);
    out += ",";
    out += format_metric(r.loss_disc);
    out += ",";
    out += format_metric(r.energy_distance);
    out += ",";
    out += format_metric(r.fisher);
    out += ",";
    out += format_metric(r.wall);
    out += "\n";
  }
  return out;
}

struct RunResult {
  TrainState state;
  double final_energy_distance = NAN;
  double final_fisher = NAN;
  std::filesystem::path run_dir;
};

inline void flush_artifacts(const TrainState& s, const std::filesystem::path& dir) {
  atomic_write_file(dir / "metrics.csv", metrics_csv(s.rows));
  CheckpointHeader h;
  h.config_hash = s.cfg.config_hash;
  h.compat_hash = s.cfg.compat_hash;
  h.images_seen = s.images_seen;
  h.stage_b = uint32_t(s.stage_b);
  Checkpoint final_ck;
  final_ck.header = h;
  final_ck.header.role = "train";
  final_ck.sections = {{"generator", s.theta}, {"fake_score", s.psi}};
  save_checkpoint(dir / "ckpt_final.bin", final_ck);
  Checkpoint ema_ck;
  ema_ck.header = h;
  ema_ck.header.role = "ema";
  ema_ck.sections = {{"generator", s.theta_ema}};
  save_checkpoint(dir / "ckpt_ema.bin", ema_ck);
}

// Full staged run: stage 1 trains psi only, stage 2 adds SiD generator
// updates, stage 3 switches the adversarial terms on (never, in sid mode).
inline RunResult run_training(const TrainConfig& cfg,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  TrainState s = init_state(cfg);
  if (out_dir) std::filesystem::create_directories(*out_dir);

  auto wall_now = [&]() -> double {
    if (!cfg.timing_wall) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - s.started).count();
  };

  EvalResult last_eval;
  auto run_eval = [&](StepLog& row) {
    last_eval = evaluate_state(s);
    row.energy_distance = last_eval.energy_distance;
    row.fisher = last_eval.fisher;
    row.has_eval = true;
  };

  try {
    while (s.images_seen < cfg.budget) {
      detail::refresh_stage(s);
      StepLog row;
      row.images_seen = s.images_seen;
      row.stage_b = s.stage_b;

      if (s.images_seen >= s.next_eval) {
        run_eval(row);
        s.next_eval += cfg.eval_every;
      }

      for (std::size_t k = 0; k < cfg.psi_steps_per_gen; ++k) {
        FakeStepResult f = train_step_fake(s);
        row.loss_denoise = f.denoise;
        row.loss_disc = f.disc;
      }
      if (s.images_seen >= cfg.n1) {
        GenStepResult g = train_step_generator(s);
        row.loss_sid = g.sid;
        row.loss_adv_gen = g.adv;
      }
      row.wall = wall_now();
      s.rows.push_back(row);
      s.images_seen += cfg.batch;
    }
    // terminal evaluation row
    detail::refresh_stage(s);
    StepLog row;
    row.images_seen = s.images_seen;
    row.stage_b = s.stage_b;
    run_eval(row);
    row.wall = wall_now();
    s.rows.push_back(row);
  } catch (const NumericError&) {
    if (out_dir) {
      flush_artifacts(s, *out_dir);
      atomic_write_file(*out_dir / "diagnostics.json",
                        std::string("{\"failed_at_images_seen\": ") +
                            std::to_string(s.images_seen) + "}\n");
    }
    throw;
  }

  RunResult res;
  res.final_energy_distance = last_eval.energy_distance;
  res.final_fisher = last_eval.fisher;
  if (out_dir) {
    flush_artifacts(s, *out_dir);
    res.run_dir = *out_dir;
  }
  res.state = std::move(s);
  return res;
}

}  // namespace sida
