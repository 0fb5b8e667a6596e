#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sida/schedule.hpp"
#include "sida/tape.hpp"
#include "sida/tensor.hpp"

namespace sida {

enum class ReturnFlag { decoder, encoder, encoder_decoder };
enum class ForceNormMode { off, in_place, pre_hook };

struct NetsConfig {
  bool grid = false;            // vector data (MLP) vs grid data (conv)
  std::size_t dim = 2;          // data dimension; for grid data equals chan*height*width
  std::size_t chan = 1, height = 0, width = 0;
  std::size_t latent = 2;       // generator input dimension m
  std::size_t gen_hidden = 3;
  std::size_t gen_width = 128;
  bool gen_input_skip = true;   // learned near-identity bypass (requires latent == dim)
  std::size_t score_width = 128;  // MLP width for vector data
  std::size_t score_hidden = 3;   // hidden layers of the vector-data score net
  std::size_t score_encoder_layers = 2;  // split point: disc pooling reads this layer
  std::size_t score_chan = 8;     // conv base channels for grid data
  std::size_t gen_chan = 8;
  std::size_t time_features = 16;  // even
  double sigma_data = 0.5;
  bool magnitude_preserving = false;  // traditional weight normalization in the forward map
  bool logvar_head = false;

  std::size_t pixel_count() const { return grid ? chan * height * width : dim; }

  void validate() const {
    if (dim == 0 || latent == 0) throw ConfigError("nets: zero dimension");
    if (grid) {
      if (chan * height * width != dim) throw ConfigError("nets: grid dims inconsistent with dim");
      if (height % 4 != 0 || width % 4 != 0)
        throw ConfigError("nets: grid height/width must be divisible by 4");
    }
    if (!grid && gen_input_skip && latent != dim && gen_hidden > 0)
      throw ConfigError("nets: input skip requires latent == dim");
    if (time_features % 2 != 0) throw ConfigError("nets: time_features must be even");
    if (!grid && (score_hidden < 1 || score_encoder_layers < 1 ||
                  score_encoder_layers > score_hidden))
      throw ConfigError("nets: encoder split must lie within the score-net hidden layers");
  }
};

// Fixed Fourier embedding of ln(sigma)/4; log-spaced frequencies, no
// learnable state, identical across runs.
inline Tensor time_embedding(const NetsConfig& cfg, double sigma_t) {
  std::size_t half = cfg.time_features / 2;
  Tensor out({cfg.time_features});
  double u = std::log(sigma_t) / 4.0;
  for (std::size_t i = 0; i < half; ++i) {
    double freq = std::pow(2.0, double(i)) / 8.0;
    out.v[2 * i] = std::sin(2.0 * M_PI * freq * u);
    out.v[2 * i + 1] = std::cos(2.0 * M_PI * freq * u);
  }
  return out;
}

namespace detail {

inline Tensor init_weight(RandomStream& rng, Shape shape, double scale_mult = 1.0) {
  Tensor t(shape);
  std::size_t fan_in = shape_size(shape) / shape[0];
  double scale = scale_mult / std::sqrt(double(fan_in));
  for (double& x : t.v) x = scale * rng.normal();
  return t;
}

// Linear layer; with magnitude-preserving style the forward uses
// w_eff = normalize(w) * gain / sqrt(fan_in), differentiated through.
inline Value affine(Tape& t, const NetsConfig& cfg, const BoundParams& b, const std::string& name,
                    Value x) {
  Value w = b.at(name + ".w");
  if (cfg.magnitude_preserving) {
    std::size_t rows = t.val(w).rows();
    Value norm = t.sqrt(t.add_scalar(t.row_dot(w, w), 1e-24));
    Value scale = t.mul(t.broadcast(b.at(name + ".g"), rows),
                        t.recip(t.add_scalar(norm, 1e-12)));
    w = t.mul_colvec(w, scale);
  }
  return t.add_rowvec(t.matmul_nt(x, w), b.at(name + ".b"));
}

inline Value conv_layer(Tape& t, const NetsConfig& cfg, const BoundParams& b,
                        const std::string& name, Value x, std::size_t stride, std::size_t pad,
                        bool transposed) {
  Value w = b.at(name + ".w");
  if (cfg.magnitude_preserving) {
    std::size_t rows = t.val(w).rows();
    Value norm = t.sqrt(t.add_scalar(t.row_dot(w, w), 1e-24));
    Value scale = t.mul(t.broadcast(b.at(name + ".g"), rows),
                        t.recip(t.add_scalar(norm, 1e-12)));
    w = t.mul_colvec(w, scale);
  }
  return t.add_chanvec(t.conv2d(x, w, stride, pad, transposed), b.at(name + ".b"));
}

inline void add_layer(ParamSet& p, const NetsConfig& cfg, RandomStream& rng,
                      const std::string& name, Shape wshape, double scale_mult = 1.0) {
  p.add(name + ".w", init_weight(rng, wshape, scale_mult));
  p.add(name + ".b", Tensor({wshape[0]}));
  if (cfg.magnitude_preserving) p.add(name + ".g", Tensor::scalar(scale_mult));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator G_theta
// ---------------------------------------------------------------------------

inline ParamSet make_generator_params(const NetsConfig& cfg, RandomStream& rng) {
  cfg.validate();
  ParamSet p;
  if (!cfg.grid) {
    if (cfg.gen_hidden == 0) {
      // pure affine map: near-identity init, exactly N(b, W W^T) as a sampler
      Tensor w({cfg.dim, cfg.latent});
      for (std::size_t i = 0; i < std::min(cfg.dim, cfg.latent); ++i)
        w.v[i * cfg.latent + i] = 1.0;
      p.add("out.w", std::move(w));
      p.add("out.b", Tensor({cfg.dim}));
      if (cfg.magnitude_preserving) p.add("out.g", Tensor::scalar(1.0));
      return p;
    }
    detail::add_layer(p, cfg, rng, "l1", {cfg.gen_width, cfg.latent});
    for (std::size_t i = 2; i <= cfg.gen_hidden; ++i)
      detail::add_layer(p, cfg, rng, "l" + std::to_string(i), {cfg.gen_width, cfg.gen_width});
    detail::add_layer(p, cfg, rng, "out", {cfg.dim, cfg.gen_width}, 0.1);
    if (cfg.gen_input_skip) {
      Tensor skip({cfg.dim, cfg.latent});
      for (std::size_t i = 0; i < std::min(cfg.dim, cfg.latent); ++i)
        skip.v[i * cfg.latent + i] = 1.0;
      p.add("skip.w", std::move(skip));
      if (cfg.magnitude_preserving) p.add("skip.g", Tensor::scalar(1.0));
    }
  } else {
    std::size_t g = cfg.gen_chan, h4 = cfg.height / 4, w4 = cfg.width / 4;
    detail::add_layer(p, cfg, rng, "l1", {2 * g * h4 * w4, cfg.latent});
    detail::add_layer(p, cfg, rng, "up1", {g, 2 * g, 4, 4});      // transposed, h4 -> h2
    detail::add_layer(p, cfg, rng, "up2", {g, g, 4, 4});          // transposed, h2 -> h
    detail::add_layer(p, cfg, rng, "out", {cfg.chan, g, 3, 3}, 0.1);
  }
  return p;
}

// x_g = network(sigma_init * z); differentiable in parameters and z.
inline Value forward_generator(Tape& t, const NetsConfig& cfg, const BoundParams& b, Value z,
                               double sigma_init) {
  Value u = t.mul_scalar(z, sigma_init);
  if (!cfg.grid) {
    if (cfg.gen_hidden == 0) return detail::affine(t, cfg, b, "out", u);
    Value h = t.silu(detail::affine(t, cfg, b, "l1", u));
    for (std::size_t i = 2; i <= cfg.gen_hidden; ++i)
      h = t.silu(detail::affine(t, cfg, b, "l" + std::to_string(i), h));
    Value out = detail::affine(t, cfg, b, "out", h);
    if (cfg.gen_input_skip) {
      Value sw = b.at("skip.w");
      if (cfg.magnitude_preserving) {
        std::size_t rows = t.val(sw).rows();
        Value norm = t.sqrt(t.add_scalar(t.row_dot(sw, sw), 1e-24));
        Value scale = t.mul(t.broadcast(b.at("skip.g"), rows),
                            t.recip(t.add_scalar(norm, 1e-12)));
        sw = t.mul_colvec(sw, scale);
      }
      out = t.add(out, t.matmul_nt(u, sw));
    }
    return out;
  }
  std::size_t n = t.val(z).rows();
  std::size_t g = cfg.gen_chan, h4 = cfg.height / 4, w4 = cfg.width / 4;
  Value h = t.silu(detail::affine(t, cfg, b, "l1", u));
  Value grid = t.reshape(h, {n, 2 * g, h4, w4});
  grid = t.silu(detail::conv_layer(t, cfg, b, "up1", grid, 2, 1, true));
  grid = t.silu(detail::conv_layer(t, cfg, b, "up2", grid, 2, 1, true));
  Value out = detail::conv_layer(t, cfg, b, "out", grid, 1, 1, false);
  return t.reshape(out, {n, cfg.dim});
}

// ---------------------------------------------------------------------------
// Fake score network f_psi: shared encoder feeds both the denoising decoder
// and the parameterless discriminator pooling.
// ---------------------------------------------------------------------------

inline ParamSet make_scorenet_params(const NetsConfig& cfg, RandomStream& rng) {
  cfg.validate();
  ParamSet p;
  if (!cfg.grid) {
    std::size_t w = cfg.score_width;
    detail::add_layer(p, cfg, rng, "l1", {w, cfg.dim});
    p.add("time.w", detail::init_weight(rng, {w, cfg.time_features}));
    if (cfg.magnitude_preserving) p.add("time.g", Tensor::scalar(1.0));
    for (std::size_t i = 2; i <= cfg.score_hidden; ++i)
      detail::add_layer(p, cfg, rng, "l" + std::to_string(i), {w, w});
    detail::add_layer(p, cfg, rng, "out", {cfg.dim, w}, 0.1);
  } else {
    std::size_t g = cfg.score_chan;
    detail::add_layer(p, cfg, rng, "enc0", {g, cfg.chan, 3, 3});
    p.add("time.w", detail::init_weight(rng, {g, cfg.time_features}));
    if (cfg.magnitude_preserving) p.add("time.g", Tensor::scalar(1.0));
    detail::add_layer(p, cfg, rng, "enc1", {2 * g, g, 3, 3});
    detail::add_layer(p, cfg, rng, "enc2", {4 * g, 2 * g, 3, 3});
    detail::add_layer(p, cfg, rng, "dec1", {2 * g, 4 * g, 4, 4});  // transposed
    detail::add_layer(p, cfg, rng, "dec2", {g, 2 * g, 4, 4});      // transposed
    detail::add_layer(p, cfg, rng, "out", {cfg.chan, g, 3, 3}, 0.1);
  }
  if (cfg.logvar_head) {
    p.add("logvar.w", detail::init_weight(rng, {1, cfg.time_features}, 0.1));
    p.add("logvar.b", Tensor({1}));
  }
  return p;
}

// Parameter-group classification used by checkpoints and the structural
// "no extra discriminator parameters" assertion.  The encoder is everything
// up to the discriminator pooling point.
inline bool scorenet_param_in_encoder(const NetsConfig& cfg, const std::string& name) {
  if (name.rfind("time", 0) == 0) return true;
  if (cfg.grid) return name.rfind("enc", 0) == 0;
  if (name.rfind("l", 0) != 0) return false;
  std::size_t layer = std::size_t(std::atoi(name.c_str() + 1));
  return layer >= 1 && layer <= cfg.score_encoder_layers;
}
inline bool scorenet_param_in_decoder(const NetsConfig& cfg, const std::string& name) {
  if (name.rfind("out", 0) == 0) return true;
  if (cfg.grid) return name.rfind("dec", 0) == 0;
  if (name.rfind("l", 0) != 0) return false;
  std::size_t layer = std::size_t(std::atoi(name.c_str() + 1));
  return layer > cfg.score_encoder_layers && layer <= cfg.score_hidden;
}
inline bool scorenet_param_in_logvar(const std::string& name) {
  return name.rfind("logvar", 0) == 0;
}

struct ScoreNetOut {
  Value denoised;     // present iff flag != encoder
  Value disc_logits;  // present iff flag != decoder; {n} (1x1 map) or {n,h',w'}
  Value logvar;       // present iff the logvar head is enabled
  bool has_denoised = false, has_disc = false, has_logvar = false;
};

namespace detail {
inline ScoreNetOut& finish_logvar_impl(Tape& t, const NetsConfig& cfg, const BoundParams& b,
                                       Value tfeat, ScoreNetOut& out) {
  if (cfg.logvar_head && b.has("logvar.w")) {
    Value lw = b.at("logvar.w");
    out.logvar = t.add(t.reshape(t.matmul_nt(tfeat, lw), {1}), b.at("logvar.b"));
    out.has_logvar = true;
  }
  return out;
}
}  // namespace detail

// EDM-style preconditioning around the raw network; the encoder is evaluated
// once and shared between the decoder path and the discriminator pooling.
inline ScoreNetOut forward_scorenet(Tape& t, const NetsConfig& cfg, const BoundParams& b,
                                    Value x_t, const TimeDraw& draw, ReturnFlag flag) {
  if (!(draw.sigma_t > 0.0)) throw ConfigError("forward_scorenet: sigma_t must be positive");
  const double sd = cfg.sigma_data, sig = draw.sigma_t;
  const double c_in = 1.0 / std::sqrt(sig * sig + sd * sd);
  const double c_skip = sd * sd / (sig * sig + sd * sd);
  const double c_out = sig * sd / std::sqrt(sig * sig + sd * sd);

  Value in = t.mul_scalar(x_t, c_in);
  Tensor tf_row = time_embedding(cfg, sig);
  tf_row.shape = {1, cfg.time_features};
  Value tfeat = t.constant(tf_row);

  ScoreNetOut out;
  std::size_t n = t.val(x_t).rows();

  auto time_bias = [&]() {
    Value tw = b.at("time.w");
    if (cfg.magnitude_preserving) {
      std::size_t rows = t.val(tw).rows();
      Value norm = t.sqrt(t.add_scalar(t.row_dot(tw, tw), 1e-24));
      Value scale = t.mul(t.broadcast(b.at("time.g"), rows),
                          t.recip(t.add_scalar(norm, 1e-12)));
      tw = t.mul_colvec(tw, scale);
    }
    return t.reshape(t.matmul_nt(tfeat, tw), {t.val(tw).rows()});
  };

  if (!cfg.grid) {
    Value h = t.silu(t.add_rowvec(detail::affine(t, cfg, b, "l1", in), time_bias()));
    for (std::size_t i = 1; i <= cfg.score_hidden; ++i) {
      if (i > 1) h = t.silu(detail::affine(t, cfg, b, "l" + std::to_string(i), h));
      if (cfg.score_encoder_layers == i && flag != ReturnFlag::decoder) {
        out.disc_logits = t.row_mean(h);  // 1x1 discriminator map per sample
        out.has_disc = true;
        if (flag == ReturnFlag::encoder) return detail::finish_logvar_impl(t, cfg, b, tfeat, out);
      }
    }
    if (flag != ReturnFlag::encoder) {
      Value raw = detail::affine(t, cfg, b, "out", h);
      out.denoised = t.add(t.mul_scalar(x_t, c_skip), t.mul_scalar(raw, c_out));
      out.has_denoised = true;
    }
  } else {
    Value img = t.reshape(in, {n, cfg.chan, cfg.height, cfg.width});
    Value e0 = t.silu(t.add_chanvec(detail::conv_layer(t, cfg, b, "enc0", img, 1, 1, false),
                                    time_bias()));
    Value e1 = t.silu(detail::conv_layer(t, cfg, b, "enc1", e0, 2, 1, false));
    Value e2 = t.silu(detail::conv_layer(t, cfg, b, "enc2", e1, 2, 1, false));
    if (flag != ReturnFlag::decoder) {
      out.disc_logits = t.channel_mean(e2);  // {n, h/4, w/4}
      out.has_disc = true;
    }
    if (flag != ReturnFlag::encoder) {
      Value d1 = t.add(t.silu(detail::conv_layer(t, cfg, b, "dec1", e2, 2, 1, true)), e1);
      Value d2 = t.add(t.silu(detail::conv_layer(t, cfg, b, "dec2", d1, 2, 1, true)), e0);
      Value raw = t.reshape(detail::conv_layer(t, cfg, b, "out", d2, 1, 1, false), {n, cfg.dim});
      out.denoised = t.add(t.mul_scalar(x_t, c_skip), t.mul_scalar(raw, c_out));
      out.has_denoised = true;
    }
  }
  return detail::finish_logvar_impl(t, cfg, b, tfeat, out);
}

// ---------------------------------------------------------------------------
// Weight normalization and EMA
// ---------------------------------------------------------------------------

// Effective weights of the differentiated ("traditional") normalization:
// normalize(w) * gain / sqrt(fan_in) == w * gain / (||row|| + 1e-12).
inline Tensor traditional_weight_normalize_forward(const Tensor& w, double gain) {
  Tensor out = w;
  std::size_t rows = w.rows(), cols = w.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double nrm = 0.0;
    for (std::size_t c = 0; c < cols; ++c) nrm += w.v[r * cols + c] * w.v[r * cols + c];
    nrm = std::sqrt(nrm) + 1e-12;
    double s = gain / nrm;
    for (std::size_t c = 0; c < cols; ++c) out.v[r * cols + c] *= s;
  }
  return out;
}

// Forced normalization: rescale each weight row to norm sqrt(fan_in) (unit
// RMS) outside of any gradient computation.  Returns the number of zero-norm
// rows that had to be skipped.
inline std::size_t forced_weight_normalize(ParamSet& params, ForceNormMode mode) {
  if (mode == ForceNormMode::off) return 0;
  std::size_t skipped = 0;
  for (auto& [name, w] : params.items) {
    if (name.size() < 2 || name.substr(name.size() - 2) != ".w") continue;
    if (w.shape.size() < 2) continue;
    std::size_t rows = w.rows(), cols = w.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double nrm = 0.0;
      for (std::size_t c = 0; c < cols; ++c) nrm += w.v[r * cols + c] * w.v[r * cols + c];
      nrm = std::sqrt(nrm);
      if (nrm == 0.0) {
        ++skipped;
        continue;
      }
      double s = std::sqrt(double(cols)) / nrm;
      for (std::size_t c = 0; c < cols; ++c) w.v[r * cols + c] *= s;
    }
  }
  return skipped;
}

// ema <- decay * ema + (1 - decay) * current, elementwise.
inline void ema_update(ParamSet& ema, const ParamSet& current, double decay) {
  if (ema.items.size() != current.items.size()) throw ConfigError("ema_update: param set mismatch");
  for (std::size_t i = 0; i < ema.items.size(); ++i) {
    Tensor& e = ema.items[i].second;
    const Tensor& c = current.items[i].second;
    if (!e.same_shape(c)) throw ConfigError("ema_update: shape mismatch at " + ema.items[i].first);
    for (std::size_t k = 0; k < e.size(); ++k)
      e.v[k] = decay * e.v[k] + (1.0 - decay) * c.v[k];
  }
}

}  // namespace sida
