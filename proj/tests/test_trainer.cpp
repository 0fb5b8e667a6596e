#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "sida/trainer.hpp"
#include "support/helpers.hpp"

using namespace sida;
namespace fs = std::filesystem;

static TrainConfig tiny_cfg() {
  TrainConfig c;
  c.data = make_mixture_preset("gauss");
  c.nets.dim = 2;
  c.nets.latent = 2;
  c.nets.gen_hidden = 2;
  c.nets.gen_width = 24;
  c.nets.score_width = 24;
  c.loss.pool_group = 4;
  c.loss.pixel_count = 2;
  c.batch = 8;
  c.time_groups = 2;
  c.n1 = 160;
  c.n2 = 320;
  c.budget = 640;
  c.eval_every = 320;
  c.eval_samples = 128;
  c.psi_prefit_steps = 40;
  c.fisher_mc = 400;
  c.compat_hash = 0x1234;
  return c;
}

static bool params_equal(const ParamSet& a, const ParamSet& b) {
  if (a.items.size() != b.items.size()) return false;
  for (std::size_t i = 0; i < a.items.size(); ++i)
    if (a.items[i].first != b.items[i].first || a.items[i].second.v != b.items[i].second.v)
      return false;
  return true;
}

TEST_CASE("init_state is deterministic per seed") {
  TrainConfig c = tiny_cfg();
  c.seed = 7;
  TrainState s1 = init_state(c);
  TrainState s2 = init_state(c);
  CHECK(params_equal(s1.theta, s2.theta));
  CHECK(params_equal(s1.psi, s2.psi));
  CHECK(params_equal(s1.theta_ema, s2.theta_ema));
}

TEST_CASE("sid2a without a checkpoint path is a startup error") {
  TrainConfig c = tiny_cfg();
  c.mode = RunMode::sid2a;
  CHECK_THROWS_AS(init_state(c), ConfigError);
}

TEST_CASE("psi prefit shrinks the teacher gap by 10x") {
  TrainConfig c = tiny_cfg();
  c.seed = 3;
  c.nets.score_width = 64;
  c.psi_prefit_steps = 0;
  TrainState raw = init_state(c);
  c.psi_prefit_steps = 2000;
  TrainState fit = init_state(c);

  auto gap = [&](TrainState& s) {
    RandomStream rng(999, 50);
    double acc = 0.0;
    const int n = 512;
    for (int i = 0; i < n; i += 64) {
      TimeDraw draw = s.schedule.sample_fakescore_time(rng);
      Tensor x0 = gmm_sample(c.data, 64, rng);
      Tensor eps = rng.normal_tensor({64, 2});
      Tensor xt = diffuse(x0, draw, eps);
      Tensor target = teacher_eval(s.teacher, xt, draw);
      Tape t;
      BoundParams b = bind(t, s.psi, false);
      const Tensor& out =
          t.val(forward_scorenet(t, c.nets, b, t.constant(xt), draw, ReturnFlag::decoder).denoised);
      for (int r = 0; r < 64; ++r)
        acc += std::hypot(out.v[2 * r] - target.v[2 * r], out.v[2 * r + 1] - target.v[2 * r + 1]);
    }
    return acc / n;
  };
  double before = gap(raw), after = gap(fit);
  INFO("before " << before << " after " << after);
  CHECK(after * 10.0 <= before);
}

TEST_CASE("generator step refuses before n1") {
  TrainConfig c = tiny_cfg();
  TrainState s = init_state(c);
  CHECK(s.images_seen < c.n1);
  CHECK_THROWS_AS(train_step_generator(s), ConfigError);
}

TEST_CASE("budget below n1 leaves the generator untouched") {
  TrainConfig c = tiny_cfg();
  c.budget = c.n1 / 2;
  RunResult r = run_training(c);
  CHECK(r.state.generator_steps == 0);
  for (const StepLog& row : r.state.rows) CHECK(std::isnan(row.loss_sid));
}

TEST_CASE("stage flag matches the images-seen gate in every row") {
  TrainConfig c = tiny_cfg();
  c.mode = RunMode::sida;
  RunResult r = run_training(c);
  CHECK(!r.state.rows.empty());
  for (const StepLog& row : r.state.rows) {
    CHECK(row.stage_b == (row.images_seen > c.n2 ? 1 : 0));
    if (row.images_seen < c.n1) CHECK(std::isnan(row.loss_sid));
    if (row.images_seen <= c.n2) {
      CHECK(std::isnan(row.loss_adv_gen));
      CHECK(std::isnan(row.loss_disc));
    } else if (!std::isnan(row.loss_denoise)) {  // skip the terminal eval-only row
      CHECK_FALSE(std::isnan(row.loss_adv_gen));
      CHECK_FALSE(std::isnan(row.loss_disc));
    }
  }
}

TEST_CASE("sid and sida share a trajectory until n2, then diverge") {
  TrainConfig c = tiny_cfg();
  c.seed = 11;
  c.mode = RunMode::sid;
  RunResult sid = run_training(c);
  c.mode = RunMode::sida;
  RunResult sida = run_training(c);
  REQUIRE(sid.state.rows.size() == sida.state.rows.size());
  bool diverged = false;
  for (std::size_t i = 0; i < sid.state.rows.size(); ++i) {
    const StepLog& a = sid.state.rows[i];
    const StepLog& b = sida.state.rows[i];
    if (a.images_seen <= c.n2) {
      CHECK(format_metric(a.loss_denoise) == format_metric(b.loss_denoise));
      CHECK(format_metric(a.loss_sid) == format_metric(b.loss_sid));
    } else if (format_metric(a.loss_denoise) != format_metric(b.loss_denoise) ||
               format_metric(a.loss_sid) != format_metric(b.loss_sid)) {
      diverged = true;
    }
  }
  CHECK(diverged);
}

TEST_CASE("metric log reruns byte-identically") {
  TrainConfig c = tiny_cfg();
  c.seed = 5;
  c.mode = RunMode::sida;
  RunResult a = run_training(c);
  RunResult b = run_training(c);
  CHECK(metrics_csv(a.state.rows) == metrics_csv(b.state.rows));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  TrainConfig c = tiny_cfg();
  c.config_hash = 0xabcdef;
  RunResult r = run_training(c, fs::temp_directory_path() / "sida_test_ckpt");
  Checkpoint ck = load_checkpoint(r.run_dir / "ckpt_final.bin");
  CHECK(ck.header.config_hash == 0xabcdef);
  CHECK(ck.header.compat_hash == c.compat_hash);
  CHECK(ck.header.images_seen == c.budget);
  CHECK(params_equal(ck.section("generator"), r.state.theta));
  CHECK(params_equal(ck.section("fake_score"), r.state.psi));
  // save again and compare bytes
  save_checkpoint(r.run_dir / "ckpt_roundtrip.bin", ck);
  std::ifstream f1(r.run_dir / "ckpt_final.bin", std::ios::binary);
  std::ifstream f2(r.run_dir / "ckpt_roundtrip.bin", std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}

TEST_CASE("sid2a warm start loads the ema generator and honors hash checks") {
  TrainConfig c = tiny_cfg();
  c.seed = 9;
  fs::path dir = fs::temp_directory_path() / "sida_test_warm";
  RunResult sid = run_training(c, dir);

  TrainConfig c2 = c;
  c2.mode = RunMode::sid2a;
  c2.sid_checkpoint = (dir / "ckpt_ema.bin").string();
  TrainState warm = init_state(c2);
  CHECK(params_equal(warm.theta, sid.state.theta_ema));
  CHECK(params_equal(warm.theta_ema, sid.state.theta_ema));

  TrainConfig c3 = c2;
  c3.compat_hash = 0x9999;  // pretend the architecture changed
  CHECK_THROWS_AS(init_state(c3), ConfigError);
}

TEST_CASE("teacher parameters stay frozen across steps") {
  TrainConfig c = tiny_cfg();
  c.teacher_kind = TeacherKind::corrupted;
  c.teacher_strength = 0.4;
  c.budget = c.n1 + 10 * c.batch;
  TrainState s = init_state(c);
  MixtureModel before = s.teacher.model;
  s.images_seen = c.n1;
  for (int i = 0; i < 3; ++i) {
    train_step_fake(s);
    train_step_generator(s);
    s.images_seen += c.batch;
  }
  CHECK(s.teacher.model.weights == before.weights);
  CHECK(s.teacher.model.means == before.means);
}

TEST_CASE("numeric failure aborts with diagnostics and partial artifacts") {
  TrainConfig c = tiny_cfg();
  c.nets.logvar_head = true;
  c.logvar_enabled = true;
  c.lr_psi = 1e18;  // one step puts the logvar head at ~1e18, so exp() overflows
  c.lr_theta = 1e18;
  c.psi_prefit_steps = 0;
  fs::path dir = fs::temp_directory_path() / "sida_test_blowup";
  std::error_code ec;
  fs::remove_all(dir, ec);
  CHECK_THROWS_AS(run_training(c, dir), NumericError);
  CHECK(fs::exists(dir / "diagnostics.json"));
  CHECK(fs::exists(dir / "metrics.csv"));
}

TEST_CASE("forced normalization keeps rows normalized after every step") {
  TrainConfig c = tiny_cfg();
  c.mode = RunMode::sida;
  c.nets.magnitude_preserving = true;
  c.nets.logvar_head = true;
  c.logvar_enabled = true;
  c.force_norm = ForceNormMode::pre_hook;
  c.n1 = 16;
  c.n2 = 32;
  c.budget = 160;
  TrainState s = init_state(c);
  auto check_rows = [&](const ParamSet& p) {
    for (auto& [name, w] : p.items) {
      if (name.size() < 2 || name.substr(name.size() - 2) != ".w" || w.shape.size() < 2) continue;
      std::size_t rows = w.rows(), cols = w.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        double nrm = 0.0;
        for (std::size_t cidx = 0; cidx < cols; ++cidx)
          nrm += w.v[r * cols + cidx] * w.v[r * cols + cidx];
        REQUIRE(std::sqrt(nrm) == Catch::Approx(std::sqrt(double(cols))).epsilon(1e-9));
      }
    }
  };
  while (s.images_seen < c.budget) {
    train_step_fake(s);
    if (s.images_seen >= c.n1) train_step_generator(s);
    check_rows(s.psi);
    check_rows(s.theta);
    s.images_seen += c.batch;
  }
  CHECK(s.generator_steps > 0);
}

TEST_CASE("in-place forced normalization with adversarial loss is rejected at startup") {
  TrainConfig c = tiny_cfg();
  c.nets.magnitude_preserving = true;
  c.force_norm = ForceNormMode::in_place;
  c.mode = RunMode::sida;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  // without the adversarial path the same mode is allowed
  c.mode = RunMode::sid;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation catches structural mistakes") {
  TrainConfig c = tiny_cfg();
  c.n1 = 500;
  c.n2 = 400;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = tiny_cfg();
  c.batch = 6;  // not divisible by time_groups * pool_group
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = tiny_cfg();
  c.time_groups = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = tiny_cfg();
  c.loss.pixel_count = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = tiny_cfg();
  c.lr_theta = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
