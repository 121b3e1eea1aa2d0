#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "distill_seg/conv_kernels.hpp"
#include "distill_seg/error.hpp"
#include "distill_seg/gemm.hpp"
#include "distill_seg/tensor.hpp"

namespace distill_seg {

namespace detail {

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank)
    fail_validation(op, ": ", arg, " must have rank ", rank, ", got shape ", shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    fail_validation(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

struct ConvGeometry {
  std::size_t c_in, h, w, k, stride, pad, h_out, w_out;
  std::size_t patch() const { return c_in * k * k; }
  std::size_t pixels_out() const { return h_out * w_out; }
};

// cols[(c*k + ky)*k + kx, oy*w_out + ox] = x[c, oy*s + ky - pad, ox*s + kx - pad]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.pixels_out();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.w_out, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void conv_bias_grad(const T* gy, std::size_t N, std::size_t CO, std::size_t P,
                           std::vector<T>& gb) {
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t co = 0; co < CO; ++co) {
      const T* row = gy + (s * CO + co) * P;
      double acc = 0.0;
      for (std::size_t p = 0; p < P; ++p) acc += row[p];
      gb[co] += static_cast<T>(acc);
    }
}

// c[M, N] += a[M, K] * b[K, N]; element (i, p) of a sits at a[i*a_rs + p*a_cs].
template <typename T>
void matmul(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t a_rs,
            std::size_t a_cs, const T* b, T* c) {
  if constexpr (std::is_same_v<T, float>) {
    gemm::multiply(M, N, K, a, a_rs, a_cs, b, c);
  } else {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t p = 0; p < K; ++p) {
        const T av = a[i * a_rs + p * a_cs];
        for (std::size_t j = 0; j < N; ++j) c[i * N + j] += av * b[p * N + j];
      }
  }
}

// c[M, K] += a[M, N] * b[K, N]^T
template <typename T>
void matmul_bt(std::size_t M, std::size_t K, std::size_t N, const T* a, const T* b, T* c) {
  if constexpr (std::is_same_v<T, float>) {
    gemm::multiply_bt(M, K, N, a, b, c);
  } else {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        T acc = 0;
        for (std::size_t j = 0; j < N; ++j) acc += a[i * N + j] * b[k * N + j];
        c[i * K + k] += acc;
      }
  }
}

// 3x3, stride 1, pad 1: direct kernels over padded planes instead of im2col.
inline Tensor conv3x3_same(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const std::size_t N = static_cast<std::size_t>(input.dim(0)), CI = static_cast<std::size_t>(input.dim(1));
  const std::size_t H = static_cast<std::size_t>(input.dim(2)), W = static_cast<std::size_t>(input.dim(3));
  const std::size_t CO = static_cast<std::size_t>(weight.dim(0));
  const std::size_t plane = (H + 2) * (W + 2), in_stride = CI * H * W, out_stride = CO * H * W;
  const bool track = grad_enabled() &&
                     (input.requires_grad() || weight.requires_grad() || bias.requires_grad());

  std::vector<float> out(N * out_stride);
  auto padded = std::make_shared<std::vector<float>>((track ? N : 1) * CI * plane);
  const float* x = input.data().data();
  for (std::size_t s = 0; s < N; ++s) {
    float* pad = padded->data() + (track ? s * CI * plane : 0);
    conv3x3::pad(x + s * in_stride, CI, H, W, pad);
    conv3x3::forward(pad, CI, H, W, weight.data().data(), bias.data().data(), CO, false,
                     out.data() + s * out_stride);
  }

  Shape out_shape = input.shape();
  out_shape[1] = static_cast<std::int64_t>(CO);
  return make_result<float>(
      std::move(out_shape), std::move(out), {&input, &weight, &bias},
      [N, CI, CO, H, W, plane, in_stride, out_stride, padded](Node<float>& self) {
        auto& xin = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const float* gy = self.grad.data();
        if (bn.requires_grad) conv_bias_grad(gy, N, CO, H * W, bn.ensure_grad());
        if (wn.requires_grad)
          conv3x3::weight_grad(padded->data(), gy, N, CI, H, W, CO, wn.ensure_grad().data());
        if (xin.requires_grad) {
          auto& gx = xin.ensure_grad();
          std::vector<float> wf(CO * CI * 9), gpad(CO * plane);
          conv3x3::flip_transpose(wn.value.data(), CO, CI, wf.data());
          for (std::size_t s = 0; s < N; ++s) {
            conv3x3::pad(gy + s * out_stride, CO, H, W, gpad.data());
            conv3x3::forward(gpad.data(), CO, H, W, wf.data(), nullptr, CI, true,
                             gx.data() + s * in_stride);
          }
        }
      });
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.pixels_out();
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// 2-D cross-correlation over NCHW input with square kernels.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                     std::int64_t stride = 1, std::int64_t padding = 0) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  detail::require_rank(bias, 1, "conv2d", "bias");
  if (stride < 1) fail_validation("conv2d: stride must be positive, got ", stride);
  if (padding < 0) fail_validation("conv2d: padding must be non-negative, got ", padding);
  const std::int64_t n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t c_out = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c_in)
    fail_validation("conv2d: weight in-channels (dim 1) is ", weight.dim(1),
                    " but input channels (dim 1) is ", c_in);
  if (weight.dim(3) != k)
    fail_validation("conv2d: kernel must be square, got ", k, "x", weight.dim(3));
  if (bias.dim(0) != c_out)
    fail_validation("conv2d: bias length (dim 0) is ", bias.dim(0), " but out-channels is ", c_out);
  if (k > h + 2 * padding)
    fail_validation("conv2d: kernel ", k, " exceeds padded height (dim 2) ", h + 2 * padding);
  if (k > w + 2 * padding)
    fail_validation("conv2d: kernel ", k, " exceeds padded width (dim 3) ", w + 2 * padding);

  if constexpr (std::is_same_v<T, float>)
    if (k == 3 && stride == 1 && padding == 1) return detail::conv3x3_same(input, weight, bias);

  detail::ConvGeometry g{static_cast<std::size_t>(c_in), static_cast<std::size_t>(h),
                         static_cast<std::size_t>(w), static_cast<std::size_t>(k),
                         static_cast<std::size_t>(stride), static_cast<std::size_t>(padding),
                         static_cast<std::size_t>((h + 2 * padding - k) / stride + 1),
                         static_cast<std::size_t>((w + 2 * padding - k) / stride + 1)};
  const std::size_t N = static_cast<std::size_t>(n), CO = static_cast<std::size_t>(c_out);
  const std::size_t P = g.pixels_out(), Kdim = g.patch();
  const std::size_t in_stride = g.c_in * g.h * g.w, out_stride = CO * P;

  const bool track = grad_enabled() &&
                     (input.requires_grad() || weight.requires_grad() || bias.requires_grad());
  const bool one_by_one = g.k == 1 && g.stride == 1 && g.pad == 0;

  std::vector<T> out(N * out_stride);
  // Patch matrices are kept for the backward pass when recording.
  auto cols = std::make_shared<std::vector<T>>();
  if (!one_by_one) cols->resize((track ? N : 1) * Kdim * P);

  const T* x = input.data().data();
  const T* wt = weight.data().data();
  const T* b = bias.data().data();
  for (std::size_t s = 0; s < N; ++s) {
    T* o = out.data() + s * out_stride;
    for (std::size_t co = 0; co < CO; ++co) std::fill(o + co * P, o + (co + 1) * P, b[co]);
    const T* patches = x + s * in_stride;
    if (!one_by_one) {
      T* dst = cols->data() + (track ? s * Kdim * P : 0);
      detail::im2col(x + s * in_stride, g, dst);
      patches = dst;
    }
    detail::matmul(CO, P, Kdim, wt, Kdim, 1, patches, o);
  }

  Shape out_shape{n, c_out, static_cast<std::int64_t>(g.h_out), static_cast<std::int64_t>(g.w_out)};
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {&input, &weight, &bias},
      [g, N, CO, P, Kdim, in_stride, out_stride, one_by_one, cols](detail::Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const T* gy = self.grad.data();
        if (bn.requires_grad) detail::conv_bias_grad(gy, N, CO, P, bn.ensure_grad());
        if (wn.requires_grad) {
          auto& gw = wn.ensure_grad();
          for (std::size_t s = 0; s < N; ++s) {
            const T* patches =
                one_by_one ? xin.value.data() + s * in_stride : cols->data() + s * Kdim * P;
            detail::matmul_bt(CO, Kdim, P, gy + s * out_stride, patches, gw.data());
          }
        }
        if (xin.requires_grad) {
          auto& gx = xin.ensure_grad();
          std::vector<T> dcols(one_by_one ? 0 : Kdim * P);
          for (std::size_t s = 0; s < N; ++s) {
            if (one_by_one) {
              detail::matmul(Kdim, P, CO, wn.value.data(), 1, Kdim, gy + s * out_stride,
                             gx.data() + s * in_stride);
            } else {
              std::fill(dcols.begin(), dcols.end(), T(0));
              detail::matmul(Kdim, P, CO, wn.value.data(), 1, Kdim, gy + s * out_stride,
                             dcols.data());
              detail::col2im(dcols.data(), g, gx.data() + s * in_stride);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in.value[i] > T(0)) g[i] += self.grad[i];
  });
}

// Non-overlapping max pooling. The gradient goes to the first maximal
// element of each window in row-major order.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::int64_t window = 2) {
  detail::require_rank(x, 4, "max_pool2d", "input");
  if (window < 1) fail_validation("max_pool2d: window must be positive");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  if (h % window != 0)
    fail_validation("max_pool2d: height (dim 2) ", h, " not divisible by window ", window);
  if (w % window != 0)
    fail_validation("max_pool2d: width (dim 3) ", w, " not divisible by window ", window);
  const std::size_t planes = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::size_t H = static_cast<std::size_t>(h), W = static_cast<std::size_t>(w);
  const std::size_t k = static_cast<std::size_t>(window), ho = H / k, wo = W / k;
  std::vector<T> out(planes * ho * wo);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * H * W + oy * k * W + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = p * H * W + (oy * k + dy) * W + ox * k + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = xv[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  Shape shape{x.dim(0), x.dim(1), static_cast<std::int64_t>(ho), static_cast<std::int64_t>(wo)};
  return detail::make_result<T>(std::move(shape), std::move(out), {&x}, [argmax](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
  });
}

template <typename T>
BasicTensor<T> upsample_nearest_2x(const BasicTensor<T>& x) {
  detail::require_rank(x, 4, "upsample_nearest_2x", "input");
  const std::size_t planes = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::size_t H = static_cast<std::size_t>(x.dim(2)), W = static_cast<std::size_t>(x.dim(3));
  std::vector<T> out(planes * 4 * H * W);
  auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y) {
      const T* src = xv.data() + (p * H + y / 2) * W;
      T* dst = out.data() + (p * 2 * H + y) * 2 * W;
      for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
    }
  Shape shape{x.dim(0), x.dim(1), x.dim(2) * 2, x.dim(3) * 2};
  return detail::make_result<T>(std::move(shape), std::move(out), {&x},
                             [planes, H, W](detail::Node<T>& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t y = 0; y < 2 * H; ++y) {
                                   const T* src = self.grad.data() + (p * 2 * H + y) * 2 * W;
                                   T* dst = g.data() + (p * H + y / 2) * W;
                                   for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
                                 }
                             });
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a, 4, "concat_channels", "a");
  detail::require_rank(b, 4, "concat_channels", "b");
  for (std::size_t d : {0u, 2u, 3u})
    if (a.dim(d) != b.dim(d))
      fail_validation("concat_channels: dim ", d, " differs (", a.dim(d), " vs ", b.dim(d), ")");
  const std::size_t N = static_cast<std::size_t>(a.dim(0));
  const std::size_t plane = static_cast<std::size_t>(a.dim(2) * a.dim(3));
  const std::size_t ca = static_cast<std::size_t>(a.dim(1)) * plane;
  const std::size_t cb = static_cast<std::size_t>(b.dim(1)) * plane;
  std::vector<T> out(N * (ca + cb));
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t s = 0; s < N; ++s) {
    std::copy_n(av.data() + s * ca, ca, out.data() + s * (ca + cb));
    std::copy_n(bv.data() + s * cb, cb, out.data() + s * (ca + cb) + ca);
  }
  Shape shape{a.dim(0), a.dim(1) + b.dim(1), a.dim(2), a.dim(3)};
  return detail::make_result<T>(std::move(shape), std::move(out), {&a, &b},
                             [N, ca, cb](detail::Node<T>& self) {
                               auto& na = *self.inputs[0];
                               auto& nb = *self.inputs[1];
                               for (std::size_t s = 0; s < N; ++s) {
                                 const T* g = self.grad.data() + s * (ca + cb);
                                 if (na.requires_grad) {
                                   T* d = na.ensure_grad().data() + s * ca;
                                   for (std::size_t i = 0; i < ca; ++i) d[i] += g[i];
                                 }
                                 if (nb.requires_grad) {
                                   T* d = nb.ensure_grad().data() + s * cb;
                                   for (std::size_t i = 0; i < cb; ++i) d[i] += g[ca + i];
                                 }
                               }
                             });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, std::type_identity_t<T> s) {
  std::vector<T> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [s](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  return detail::make_result<T>({}, {static_cast<T>(acc)}, {&a}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const T up = self.grad[0];
    for (auto& v : g) v += up;
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// [N, C, H, W] -> [N, C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t planes = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::size_t P = static_cast<std::size_t>(x.dim(2) * x.dim(3));
  std::vector<T> out(planes);
  auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < P; ++i) acc += xv[p * P + i];
    out[p] = static_cast<T>(acc / static_cast<double>(P));
  }
  return detail::make_result<T>({x.dim(0), x.dim(1)}, std::move(out), {&x},
                             [planes, P](detail::Node<T>& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               const T inv = T(1) / static_cast<T>(P);
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t i = 0; i < P; ++i)
                                   g[p * P + i] += self.grad[p] * inv;
                             });
}

// y[N, out] = x[N, in] * weight[out, in]^T + bias[out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  detail::require_rank(bias, 1, "linear", "bias");
  const std::size_t N = static_cast<std::size_t>(x.dim(0)), in = static_cast<std::size_t>(x.dim(1));
  const std::size_t out_f = static_cast<std::size_t>(weight.dim(0));
  if (static_cast<std::size_t>(weight.dim(1)) != in)
    fail_validation("linear: weight dim 1 is ", weight.dim(1), " but input features is ", in);
  if (static_cast<std::size_t>(bias.dim(0)) != out_f)
    fail_validation("linear: bias length is ", bias.dim(0), " but out features is ", out_f);
  std::vector<T> out(N * out_f);
  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t o = 0; o < out_f; ++o) {
      double acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += double(xv[s * in + i]) * wv[o * in + i];
      out[s * out_f + o] = static_cast<T>(acc);
    }
  return detail::make_result<T>(
      {x.dim(0), weight.dim(0)}, std::move(out), {&x, &weight, &bias},
      [N, in, out_f](detail::Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& nw = *self.inputs[1];
        auto& nb = *self.inputs[2];
        const T* gy = self.grad.data();
        if (nb.requires_grad) {
          auto& gb = nb.ensure_grad();
          for (std::size_t s = 0; s < N; ++s)
            for (std::size_t o = 0; o < out_f; ++o) gb[o] += gy[s * out_f + o];
        }
        if (nw.requires_grad) {
          auto& gw = nw.ensure_grad();
          for (std::size_t s = 0; s < N; ++s)
            for (std::size_t o = 0; o < out_f; ++o)
              for (std::size_t i = 0; i < in; ++i)
                gw[o * in + i] += gy[s * out_f + o] * nx.value[s * in + i];
        }
        if (nx.requires_grad) {
          auto& gx = nx.ensure_grad();
          for (std::size_t s = 0; s < N; ++s)
            for (std::size_t o = 0; o < out_f; ++o)
              for (std::size_t i = 0; i < in; ++i)
                gx[s * in + i] += gy[s * out_f + o] * nw.value[o * in + i];
        }
      });
}

}  // namespace distill_seg
