#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "erlab/tensor.hpp"

namespace erlab::optim {

struct TrainingDiverged : std::runtime_error {
  int step;
  float lr;
  double grad_norm;
  TrainingDiverged(int step_, float lr_, double grad_norm_)
      : std::runtime_error("training diverged: loss is not finite at step " +
                           std::to_string(step_) + " (lr " + std::to_string(lr_) +
                           ", grad norm " + std::to_string(grad_norm_) + ")"),
        step(step_),
        lr(lr_),
        grad_norm(grad_norm_) {}
};

enum class Schedule { Cosine, Constant };

// Warmup is linear from zero; cosine decays to zero at total_steps.
inline float lr_at(float base_lr, Schedule schedule, int step, int total_steps, int warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) return base_lr * float(step + 1) / float(warmup_steps);
  if (schedule == Schedule::Constant) return base_lr;
  const int decay_steps = std::max(1, total_steps - warmup_steps);
  const float progress = std::min(1.f, float(step - warmup_steps) / float(decay_steps));
  return base_lr * 0.5f * (1.f + std::cos(3.14159265358979323846f * progress));
}

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.f;
};

// Adam with decoupled weight decay. Only tensors with requires_grad at
// construction are stepped; frozen tensors stay bitwise untouched.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {}) : cfg_(cfg) {
    for (auto& p : params)
      if (p.requires_grad()) params_.push_back(p);
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(size_t(params_[i].numel()), 0.f);
      v_[i].assign(size_t(params_[i].numel()), 0.f);
    }
  }

  void step(float lr) {
    ++t_;
    const float bc1 = 1.f - std::pow(cfg_.beta1, float(t_));
    const float bc2 = 1.f - std::pow(cfg_.beta2, float(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i].data();
      auto g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < p.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.f - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.f - cfg_.beta2) * g[j] * g[j];
        const float mhat = m[j] / bc1;
        const float vhat = v[j] / bc2;
        p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // L2 norm over all managed grads; used in divergence diagnostics
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (float g : p.grad()) s += double(g) * double(g);
    return std::sqrt(s);
  }

  size_t num_params() const { return params_.size(); }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

}  // namespace erlab::optim
