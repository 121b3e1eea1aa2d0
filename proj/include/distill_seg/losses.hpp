#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <type_traits>
#include <vector>

#include "distill_seg/error.hpp"
#include "distill_seg/ops.hpp"
#include "distill_seg/tensor.hpp"

namespace distill_seg {

// Per-pixel class labels for a batch, row-major [N, H, W].
struct MaskBatch {
  std::int64_t n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> labels;

  std::size_t pixels() const noexcept { return labels.size(); }
};

template <typename T>
struct BasicTemperedDistribution {
  BasicTensor<T> probs;  // [N, K, H, W]
  T temperature = 1;
};
using TemperedDistribution = BasicTemperedDistribution<float>;

struct LossWeights {
  double alpha = 0.1;

  explicit LossWeights(double a = 0.1) : alpha(a) {
    if (!(alpha >= 0.0f && alpha <= 1.0f))
      fail_validation("loss weight alpha must lie in [0, 1], got ", alpha);
  }
};

namespace detail {

template <typename T>
void require_logits(const BasicTensor<T>& logits, const char* op) {
  require_rank(logits, 4, op, "logits");
}

inline void require_temperature(double tau, const char* op) {
  if (!(tau > 0.0) || !std::isfinite(tau))
    fail_validation(op, ": temperature must be positive, got ", tau);
}

// Softmax of z/tau over the channel axis for one pixel; writes
// log-probabilities (double) into logp.
template <typename T>
void log_softmax_pixel(const T* z, std::size_t K, std::size_t stride, double tau,
                              double* logp) {
  double mx = z[0] / tau;
  for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[k * stride] / tau);
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) total += std::exp(z[k * stride] / tau - mx);
  const double lse = mx + std::log(total);
  for (std::size_t k = 0; k < K; ++k) logp[k] = z[k * stride] / tau - lse;
}

}  // namespace detail

// Channel-wise softmax of logits / tau, computed with max subtraction.
template <typename T>
BasicTemperedDistribution<T> tempered_softmax(const BasicTensor<T>& logits, std::type_identity_t<T> tau) {
  detail::require_logits(logits, "tempered_softmax");
  detail::require_temperature(tau, "tempered_softmax");
  const std::size_t N = static_cast<std::size_t>(logits.dim(0));
  const std::size_t K = static_cast<std::size_t>(logits.dim(1));
  const std::size_t P = static_cast<std::size_t>(logits.dim(2) * logits.dim(3));
  std::vector<T> probs(logits.numel());
  std::vector<double> logp(K);
  auto z = logits.data();
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = s * K * P + p;
      detail::log_softmax_pixel(z.data() + base, K, P, tau, logp.data());
      for (std::size_t k = 0; k < K; ++k) probs[base + k * P] = static_cast<T>(std::exp(logp[k]));
    }
  return {BasicTensor<T>::from(logits.shape(), std::move(probs)), tau};
}

// Mean over all N*H*W pixels of -log softmax(logits)[label].
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const MaskBatch& labels) {
  detail::require_logits(logits, "cross_entropy");
  const std::size_t N = static_cast<std::size_t>(logits.dim(0));
  const std::size_t K = static_cast<std::size_t>(logits.dim(1));
  const std::size_t H = static_cast<std::size_t>(logits.dim(2));
  const std::size_t W = static_cast<std::size_t>(logits.dim(3));
  const std::size_t P = H * W;
  if (labels.n != logits.dim(0) || labels.h != logits.dim(2) || labels.w != logits.dim(3) ||
      labels.labels.size() != N * P)
    fail_validation("cross_entropy: labels [", labels.n, ",", labels.h, ",", labels.w,
                    "] do not match logits ", shape_str(logits.shape()));
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    if (labels.labels[i] >= K) {
      const std::size_t s = i / P, y = (i % P) / W, x = i % W;
      fail_validation("cross_entropy: label ", int(labels.labels[i]), " out of range [0,", K,
                      ") at pixel (n=", s, ", y=", y, ", x=", x, ")");
    }

  auto z = logits.data();
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  std::vector<double> logp(K);
  double total = 0.0;
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = s * K * P + p;
      detail::log_softmax_pixel(z.data() + base, K, P, 1.0, logp.data());
      total -= logp[labels.labels[s * P + p]];
      for (std::size_t k = 0; k < K; ++k) (*probs)[base + k * P] = static_cast<T>(std::exp(logp[k]));
    }
  const double count = static_cast<double>(N * P);
  auto targets = std::make_shared<std::vector<std::uint8_t>>(labels.labels);
  return detail::make_result<T>(
      {}, {static_cast<T>(total / count)}, {&logits},
      [probs, targets, N, K, P, count](detail::Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const T up = static_cast<T>(self.grad[0] / count);
        for (std::size_t s = 0; s < N; ++s)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t base = s * K * P + p;
            const std::size_t label = (*targets)[s * P + p];
            for (std::size_t k = 0; k < K; ++k) {
              const T target = k == label ? T(1) : T(0);
              g[base + k * P] += up * ((*probs)[base + k * P] - target);
            }
          }
      });
}

// Mean over pixels (and batch) of KL(p_student || p_teacher) with both
// distributions softened by tau. The teacher side never receives gradient.
template <typename T>
BasicTensor<T> kd_loss(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                       std::type_identity_t<T> tau) {
  detail::require_logits(student_logits, "kd_loss");
  detail::require_logits(teacher_logits, "kd_loss");
  detail::require_same_shape(student_logits, teacher_logits, "kd_loss");
  detail::require_temperature(tau, "kd_loss");
  const std::size_t N = static_cast<std::size_t>(student_logits.dim(0));
  const std::size_t K = static_cast<std::size_t>(student_logits.dim(1));
  const std::size_t P = static_cast<std::size_t>(student_logits.dim(2) * student_logits.dim(3));
  auto zs = student_logits.data();
  auto zt = teacher_logits.data();

  // Per-pixel factor (1/tau) * p_s * (log p_s - log p_t - KL) is the gradient.
  auto grad_factor = std::make_shared<std::vector<T>>(student_logits.numel());
  std::vector<double> ls(K), lt(K);
  double total = 0.0;
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = s * K * P + p;
      detail::log_softmax_pixel(zs.data() + base, K, P, tau, ls.data());
      detail::log_softmax_pixel(zt.data() + base, K, P, tau, lt.data());
      double kl = 0.0;
      for (std::size_t k = 0; k < K; ++k) kl += std::exp(ls[k]) * (ls[k] - lt[k]);
      total += kl;
      for (std::size_t k = 0; k < K; ++k)
        (*grad_factor)[base + k * P] =
            static_cast<T>(std::exp(ls[k]) * (ls[k] - lt[k] - kl) / tau);
    }
  const double count = static_cast<double>(N * P);
  return detail::make_result<T>({}, {static_cast<T>(total / count)}, {&student_logits},
                             [grad_factor, count](detail::Node<T>& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               const T up = static_cast<T>(self.grad[0] / count);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += up * (*grad_factor)[i];
                             });
}

// (1 - alpha) * seg + alpha * kd
template <typename T>
BasicTensor<T> student_loss(const BasicTensor<T>& seg, const BasicTensor<T>& kd, LossWeights weights) {
  if (seg.numel() != 1 || kd.numel() != 1) fail_validation("student_loss: inputs must be scalars");
  if (!std::isfinite(seg.item()) || !std::isfinite(kd.item()))
    fail_validation("student_loss: inputs must be finite");
  const T a = weights.alpha;
  return add(scale(seg, T(1) - a), scale(kd, a));
}

// Mean binary cross-entropy on raw logits of shape [N, 1] (or [N]).
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits,
                               std::span<const std::type_identity_t<T>> targets) {
  if (logits.numel() != targets.size())
    fail_validation("bce_with_logits: ", logits.numel(), " logits but ", targets.size(), " targets");
  auto x = logits.data();
  double total = 0.0;
  auto sig = std::make_shared<std::vector<T>>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double xi = x[i];
    total += std::max(xi, 0.0) - xi * targets[i] + std::log1p(std::exp(-std::abs(xi)));
    (*sig)[i] = static_cast<T>(1.0 / (1.0 + std::exp(-xi)));
  }
  const double count = static_cast<double>(targets.size());
  auto t = std::make_shared<std::vector<T>>(targets.begin(), targets.end());
  return detail::make_result<T>({}, {static_cast<T>(total / count)}, {&logits},
                             [sig, t, count](detail::Node<T>& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               const T up = static_cast<T>(self.grad[0] / count);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += up * ((*sig)[i] - (*t)[i]);
                             });
}

inline float sigmoid(float x) { return static_cast<float>(1.0 / (1.0 + std::exp(-double(x)))); }

}  // namespace distill_seg
