#pragma once

#include <string>

#include "sida/mixture.hpp"
#include "sida/nets.hpp"
#include "sida/optimizer.hpp"
#include "sida/schedule.hpp"
#include "sida/tape.hpp"

namespace sida {

enum class TeacherKind { exact, corrupted, learned };

// Frozen denoiser f_phi: either a closed-form mixture oracle (exact teacher or
// a deliberately corrupted copy) or a score network pretrained on data.
// Gradients never reach teacher parameters; they do flow through x_t.
struct Teacher {
  TeacherKind kind = TeacherKind::exact;
  MixtureModel model;   // oracle mixture (exact or corrupted)
  NetsConfig net_cfg;   // learned teacher architecture
  ParamSet params;      // learned teacher weights
  double bias = 0.0;    // mean denoising gap vs the exact oracle ("teacher bias")
};

inline Value teacher_oracle(Tape& t, const Teacher& teacher, Value x_t, const TimeDraw& draw) {
  if (teacher.kind == TeacherKind::learned) {
    BoundParams frozen = bind(t, teacher.params, false);
    return forward_scorenet(t, teacher.net_cfg, frozen, x_t, draw, ReturnFlag::decoder).denoised;
  }
  return gmm_denoiser_op(t, teacher.model, x_t, draw);
}

// Plain-tensor teacher evaluation for paths that never need gradients.
inline Tensor teacher_eval(const Teacher& teacher, const Tensor& x_t, const TimeDraw& draw) {
  if (teacher.kind == TeacherKind::learned) {
    Tape t;
    BoundParams frozen = bind(t, teacher.params, false);
    return t.val(
        forward_scorenet(t, teacher.net_cfg, frozen, t.constant(x_t), draw, ReturnFlag::decoder)
            .denoised);
  }
  return gmm_denoiser_batch(teacher.model, x_t, draw);
}

// Mean denoising gap || f_phi - f_phi* || over diffused data draws; this is
// the published teacher-bias number.
inline double measure_teacher_bias(const Teacher& teacher, const MixtureModel& data,
                                   const NoiseSchedule& sched, std::size_t n, RandomStream& rng) {
  const std::size_t d = data.dim();
  double acc = 0.0;
  const std::size_t chunk = 256;
  std::size_t done = 0;
  while (done < n) {
    std::size_t b = std::min(chunk, n - done);
    TimeDraw draw = sched.sample_fakescore_time(rng);
    Tensor x0 = gmm_sample(data, b, rng);
    Tensor eps = rng.normal_tensor({b, d});
    Tensor xt = diffuse(x0, draw, eps);
    Tensor fphi = teacher_eval(teacher, xt, draw);
    Tensor fstar = gmm_denoiser_batch(data, xt, draw);
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double diff = fphi.v[i * d + j] - fstar.v[i * d + j];
        s += diff * diff;
      }
      acc += std::sqrt(s);
    }
    done += b;
  }
  return acc / double(n);
}

// Denoising score matching on data draws: min gamma(t) ||f(x_t,t) - x_0||^2.
// Uses the same noise-level proposal as the fake-score path so the bias
// measurement stays comparable.
inline Teacher pretrain_teacher(const NetsConfig& net_cfg, const MixtureModel& data,
                                const NoiseSchedule& sched, const AdamConfig& adam_cfg,
                                std::size_t budget_samples, std::size_t batch, uint64_t seed) {
  if (budget_samples < 1000) throw ConfigError("pretrain_teacher: budget must be >= 1000 samples");
  Teacher teacher;
  teacher.kind = TeacherKind::learned;
  teacher.model = data;
  teacher.net_cfg = net_cfg;
  RandomStream rng_init(seed, 13), rng_data(seed, 10), rng_noise(seed, 11), rng_time(seed, 12);
  teacher.params = make_scorenet_params(net_cfg, rng_init);
  Adam opt(adam_cfg);

  const std::size_t d = data.dim();
  const double base_lr = adam_cfg.lr;
  std::size_t steps = budget_samples / batch;
  for (std::size_t s = 0; s < steps; ++s) {
    TimeDraw draw = sched.sample_fakescore_time(rng_time);
    Tensor x0 = gmm_sample(data, batch, rng_data);
    Tensor eps = rng_noise.normal_tensor({batch, d});
    Tensor xt = diffuse(x0, draw, eps);
    Tape t;
    BoundParams b = bind(t, teacher.params, true);
    auto out = forward_scorenet(t, net_cfg, b, t.constant(xt), draw, ReturnFlag::decoder);
    Value res = t.sub(out.denoised, t.constant(x0));
    Value loss = t.mul_scalar(t.sum_all(t.mul(res, res)), draw.gamma_t / double(batch));
    t.backward(loss);
    std::vector<std::pair<std::string, Tensor>> grads;
    for (auto& [name, v] : b.items) grads.emplace_back(name, t.grad(v));
    double frac = double(s + 1) / double(steps);
    opt.set_lr(base_lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * frac))));
    opt.step(teacher.params, grads);
  }
  RandomStream rng_bias(seed, 14);
  teacher.bias = measure_teacher_bias(teacher, data, sched, 2000, rng_bias);
  return teacher;
}

inline Teacher make_analytic_teacher(const MixtureModel& data, double corruption_strength,
                                     uint64_t seed) {
  Teacher t;
  if (corruption_strength > 0.0) {
    t.kind = TeacherKind::corrupted;
    RandomStream rng(seed, 6);
    t.model = corrupt_teacher(data, corruption_strength, rng);
  } else {
    t.kind = TeacherKind::exact;
    t.model = data;
  }
  return t;
}

}  // namespace sida
