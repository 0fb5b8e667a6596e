#include <catch2/catch_amalgamated.hpp>

#include "sida/teacher.hpp"
#include "sida/trainer.hpp"
#include "support/helpers.hpp"

using namespace sida;
using sida::test::median_of;

TEST_CASE("exact mode delegates to the closed-form denoiser bit-exactly") {
  MixtureModel data = make_mixture_preset("ring-8");
  Teacher t = make_analytic_teacher(data, 0.0, 1);
  RandomStream rng(2);
  Tensor x = rng.normal_tensor({16, 2});
  TimeDraw d;
  d.a_t = 1.0;
  d.sigma_t = 0.7;
  d.gamma_t = 1.0 / 0.49;
  Tensor via_teacher = teacher_eval(t, x, d);
  Tensor direct = gmm_denoiser_batch(data, x, d);
  CHECK(via_teacher.v == direct.v);
}

TEST_CASE("zero corruption equals the exact teacher on all inputs") {
  MixtureModel data = make_mixture_preset("two-moons-gmm");
  Teacher exact = make_analytic_teacher(data, 0.0, 3);
  Teacher zero = make_analytic_teacher(data, 0.0, 4);
  CHECK(exact.kind == TeacherKind::exact);
  RandomStream rng(5);
  Tensor x = rng.normal_tensor({8, 2});
  TimeDraw d;
  d.a_t = 1.0;
  d.sigma_t = 1.3;
  CHECK(teacher_eval(exact, x, d).v == teacher_eval(zero, x, d).v);
}

TEST_CASE("corrupted teacher reports a positive bias that grows with strength") {
  MixtureModel data = make_mixture_preset("ring-8");
  ScheduleConfig scfg;
  NoiseSchedule sched(scfg);
  std::vector<double> strengths{0.0, 0.25, 0.5, 1.0};
  std::vector<double> biases;
  for (double s : strengths) {
    std::vector<double> per_seed;
    for (uint64_t seed = 0; seed < 5; ++seed) {
      Teacher t = make_analytic_teacher(data, s, 100 + seed);
      RandomStream rng(200 + seed);
      per_seed.push_back(measure_teacher_bias(t, data, sched, 1000, rng));
    }
    biases.push_back(median_of(per_seed));
  }
  CHECK(biases[0] == 0.0);
  CHECK(biases[0] < biases[1]);
  CHECK(biases[1] < biases[2]);
  CHECK(biases[2] < biases[3]);
}

TEST_CASE("learned teacher output is deterministic per checkpoint") {
  NetsConfig nets;
  nets.dim = 2;
  nets.latent = 2;
  nets.score_width = 16;
  MixtureModel data = make_mixture_preset("gauss");
  NoiseSchedule sched((ScheduleConfig()));
  Teacher t = pretrain_teacher(nets, data, sched, AdamConfig{1e-3}, 2000, 16, 42);
  RandomStream rng(6);
  Tensor x = rng.normal_tensor({4, 2});
  TimeDraw d;
  d.a_t = 1.0;
  d.sigma_t = 0.5;
  CHECK(teacher_eval(t, x, d).v == teacher_eval(t, x, d).v);
  Teacher t2 = pretrain_teacher(nets, data, sched, AdamConfig{1e-3}, 2000, 16, 42);
  CHECK(teacher_eval(t, x, d).v == teacher_eval(t2, x, d).v);
}

TEST_CASE("pretraining budget refuses tiny budgets") {
  NetsConfig nets;
  nets.dim = 2;
  nets.latent = 2;
  MixtureModel data = make_mixture_preset("gauss");
  NoiseSchedule sched((ScheduleConfig()));
  CHECK_THROWS_AS(pretrain_teacher(nets, data, sched, AdamConfig{}, 500, 16, 1), ConfigError);
}

TEST_CASE("large-budget teacher approaches the conjugate closed form") {
  NetsConfig nets;
  nets.dim = 2;
  nets.latent = 2;
  nets.score_width = 64;
  MixtureModel data;
  data.weights = {1.0};
  data.means = {{0.8, -0.4}};
  data.vars = {{1.0, 1.0}};
  NoiseSchedule sched((ScheduleConfig()));
  Teacher t = pretrain_teacher(nets, data, sched, AdamConfig{3e-3}, 256000, 64, 17);

  // relative error of the learned denoiser against the exact posterior mean,
  // median over a grid of typical diffused points
  std::vector<double> rel;
  RandomStream rng(18);
  for (double sig : {0.3, 0.7, 1.5}) {
    TimeDraw d;
    d.a_t = 1.0;
    d.sigma_t = sig;
    d.gamma_t = 1.0 / (sig * sig);
    Tensor x0 = gmm_sample(data, 64, rng);
    Tensor eps = rng.normal_tensor({64, 2});
    Tensor xt = diffuse(x0, d, eps);
    Tensor learned = teacher_eval(t, xt, d);
    Tensor exact = gmm_denoiser_batch(data, xt, d);
    for (int i = 0; i < 64; ++i) {
      double num = std::hypot(learned.v[2 * i] - exact.v[2 * i],
                              learned.v[2 * i + 1] - exact.v[2 * i + 1]);
      double den = std::max(1e-8, std::hypot(exact.v[2 * i], exact.v[2 * i + 1]));
      rel.push_back(num / den);
    }
  }
  double med = median_of(rel);
  INFO("median relative error " << med);
  CHECK(med < 0.05);
  CHECK(t.bias > 0.0);
}

TEST_CASE("minimal budget leaves a strictly larger denoising gap") {
  NetsConfig nets;
  nets.dim = 2;
  nets.latent = 2;
  nets.score_width = 32;
  MixtureModel data = make_mixture_preset("gauss");
  NoiseSchedule sched((ScheduleConfig()));
  std::vector<double> small_gaps, big_gaps;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Teacher small = pretrain_teacher(nets, data, sched, AdamConfig{3e-3}, 1000, 16, 30 + seed);
    Teacher big = pretrain_teacher(nets, data, sched, AdamConfig{3e-3}, 30000, 16, 30 + seed);
    small_gaps.push_back(small.bias);
    big_gaps.push_back(big.bias);
  }
  CHECK(median_of(big_gaps) < median_of(small_gaps));
}

TEST_CASE("learned-teacher runs copy phi into psi") {
  TrainConfig c;
  c.data = make_mixture_preset("gauss");
  c.nets.dim = 2;
  c.nets.latent = 2;
  c.nets.gen_width = 16;
  c.nets.score_width = 16;
  c.loss.pool_group = 4;
  c.loss.pixel_count = 2;
  c.batch = 8;
  c.time_groups = 2;
  c.n1 = 80;
  c.n2 = 160;
  c.budget = 240;
  c.eval_samples = 128;
  c.teacher_kind = TeacherKind::learned;
  c.teacher_budget = 2000;
  TrainState s = init_state(c);
  REQUIRE(s.teacher.kind == TeacherKind::learned);
  REQUIRE(s.psi.items.size() == s.teacher.params.items.size());
  for (std::size_t i = 0; i < s.psi.items.size(); ++i)
    CHECK(s.psi.items[i].second.v == s.teacher.params.items[i].second.v);
}
