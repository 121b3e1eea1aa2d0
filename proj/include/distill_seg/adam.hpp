#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "distill_seg/error.hpp"
#include "distill_seg/tensor.hpp"

namespace distill_seg {

struct AdamOptions {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction. Holds one (m, v) moment pair per parameter.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {}) : params_(std::move(params)), opt_(options) {
    if (!(opt_.lr > 0.0f)) fail_validation("adam: learning rate must be positive, got ", opt_.lr);
    if (opt_.beta1 < 0.0f || opt_.beta1 >= 1.0f || opt_.beta2 < 0.0f || opt_.beta2 >= 1.0f)
      fail_validation("adam: betas must lie in [0, 1)");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Applies one update using the gradients currently stored on the params.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(opt_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(opt_.beta2), static_cast<double>(t_));
    const float step_size = static_cast<float>(opt_.lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto value = params_[i].data();
      auto grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        const float g = grad[j];
        m[j] = opt_.beta1 * m[j] + (1.0f - opt_.beta1) * g;
        v[j] = opt_.beta2 * v[j] + (1.0f - opt_.beta2) * g * g;
        value[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + opt_.eps);
      }
    }
  }

  std::int64_t steps_taken() const noexcept { return t_; }
  const AdamOptions& options() const noexcept { return opt_; }

 private:
  std::vector<Tensor> params_;
  AdamOptions opt_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t t_ = 0;
};

}  // namespace distill_seg
