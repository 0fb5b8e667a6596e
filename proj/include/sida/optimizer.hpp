#pragma once

#include <cmath>
#include <vector>

#include "sida/tensor.hpp"

namespace sida {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;  // the distillation convention: no first-moment memory
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(ParamSet& params, const std::vector<std::pair<std::string, Tensor>>& grads) {
    if (grads.size() != params.items.size()) throw ConfigError("adam: gradient set mismatch");
    if (m_.empty()) {
      for (auto& [name, t] : params.items) {
        m_.push_back(Tensor::zeros(t.shape));
        v_.push_back(Tensor::zeros(t.shape));
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t p = 0; p < params.items.size(); ++p) {
      Tensor& w = params.items[p].second;
      const Tensor& g = grads[p].second;
      if (!w.same_shape(g))
        throw ConfigError("adam: gradient shape mismatch at " + params.items[p].first);
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[p].v[i] = cfg_.beta1 * m_[p].v[i] + (1.0 - cfg_.beta1) * g.v[i];
        v_[p].v[i] = cfg_.beta2 * v_[p].v[i] + (1.0 - cfg_.beta2) * g.v[i] * g.v[i];
        double mh = m_[p].v[i] / bc1;
        double vh = v_[p].v[i] / bc2;
        w.v[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace sida
