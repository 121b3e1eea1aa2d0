#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>

// Direct 3x3, stride-1, pad-1 convolution kernels over zero-padded planes.
// Output channels are processed in blocks of 4 so each input load feeds
// four accumulators.

// Everything here inlines, so the vector-ABI notes GCC emits for builds
// without AVX are moot.
#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wpsabi"
#endif

namespace distill_seg::conv3x3 {

inline constexpr std::size_t kBlock = 4;

// Copies [C, H, W] into a zeroed [C, H+2, W+2] buffer.
inline void pad(const float* in, std::size_t C, std::size_t H, std::size_t W, float* out) {
  const std::size_t Wp = W + 2, plane = (H + 2) * Wp;
  std::fill(out, out + C * plane, 0.0f);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(in + (c * H + y) * W, W, out + c * plane + (y + 1) * Wp + 1);
}

namespace detail {

// GCC/Clang vector extensions; lowered to whatever SIMD width the target has.
typedef float v16 __attribute__((vector_size(64)));
typedef float v8 __attribute__((vector_size(32)));
typedef float v1 __attribute__((vector_size(4)));

template <class V>
inline constexpr std::size_t lanes_of = sizeof(V) / sizeof(float);

template <class V>
inline V load(const float* p) {
  V v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <class V>
inline void store(float* p, const V& v) {
  std::memcpy(p, &v, sizeof v);
}

template <class V>
inline float hsum(const V& v) {
  float s = 0.0f;
  for (std::size_t i = 0; i < lanes_of<V>; ++i) s += v[i];
  return s;
}

// R output channels x NV vectors of one output row, starting at column x0.
template <class V, std::size_t R, std::size_t NV>
inline void forward_tile(const float* inpad, std::size_t C_in, std::size_t H, std::size_t W,
                         const float* w, std::size_t co0, const float* bias, bool accumulate,
                         float* out, std::size_t y, std::size_t x0) {
  constexpr std::size_t L = lanes_of<V>;
  const std::size_t Wp = W + 2, plane = (H + 2) * Wp;
  V acc[R][NV];
  for (std::size_t r = 0; r < R; ++r) {
    float* o = out + ((co0 + r) * H + y) * W + x0;
    for (std::size_t v = 0; v < NV; ++v)
      acc[r][v] = accumulate ? load<V>(o + v * L) : V{} + (bias ? bias[co0 + r] : 0.0f);
  }
  for (std::size_t ci = 0; ci < C_in; ++ci) {
    const float* wc = w + (co0 * C_in + ci) * 9;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      const float* row = inpad + ci * plane + (y + ky) * Wp + x0;
      for (std::size_t kx = 0; kx < 3; ++kx) {
        V in[NV];
        for (std::size_t v = 0; v < NV; ++v) in[v] = load<V>(row + kx + v * L);
        for (std::size_t r = 0; r < R; ++r) {
          const float wv = wc[r * C_in * 9 + ky * 3 + kx];
          for (std::size_t v = 0; v < NV; ++v) acc[r][v] += wv * in[v];
        }
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    float* o = out + ((co0 + r) * H + y) * W + x0;
    for (std::size_t v = 0; v < NV; ++v) store(o + v * L, acc[r][v]);
  }
}

template <std::size_t R>
inline void forward_rows(const float* inpad, std::size_t C_in, std::size_t H, std::size_t W,
                         const float* w, std::size_t co0, const float* bias, bool accumulate,
                         float* out) {
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t x0 = 0;
    for (; x0 + 32 <= W; x0 += 32)
      forward_tile<v16, R, 2>(inpad, C_in, H, W, w, co0, bias, accumulate, out, y, x0);
    for (; x0 + 16 <= W; x0 += 16)
      forward_tile<v16, R, 1>(inpad, C_in, H, W, w, co0, bias, accumulate, out, y, x0);
    for (; x0 + 8 <= W; x0 += 8)
      forward_tile<v8, R, 1>(inpad, C_in, H, W, w, co0, bias, accumulate, out, y, x0);
    for (; x0 < W; ++x0)
      forward_tile<v1, R, 1>(inpad, C_in, H, W, w, co0, bias, accumulate, out, y, x0);
  }
}

// acc[r][kx] += dy[co0+r, y, x0..] * inpad[ci, y+ky, x0+kx..] over one row tile.
template <class V, std::size_t R>
inline void weight_grad_row(const float* row, const float* g, std::size_t HW, std::size_t x0,
                            std::size_t x1, V (&acc)[R][3]) {
  constexpr std::size_t L = lanes_of<V>;
  for (; x0 + L <= x1; x0 += L) {
    const V in0 = load<V>(row + x0), in1 = load<V>(row + x0 + 1), in2 = load<V>(row + x0 + 2);
    for (std::size_t r = 0; r < R; ++r) {
      const V d = load<V>(g + r * HW + x0);
      acc[r][0] += d * in0;
      acc[r][1] += d * in1;
      acc[r][2] += d * in2;
    }
  }
}

template <std::size_t R>
inline void weight_grad_block(const float* inpad, const float* dy, std::size_t N, std::size_t C_in,
                              std::size_t H, std::size_t W, std::size_t C_out, std::size_t co0,
                              float* gw) {
  const std::size_t Wp = W + 2, plane = (H + 2) * Wp, HW = H * W;
  const std::size_t in_stride = C_in * plane, out_stride = C_out * HW;
  const std::size_t w16 = W / 16 * 16, w8 = w16 + (W - w16) / 8 * 8;
  for (std::size_t ci = 0; ci < C_in; ++ci)
    for (std::size_t ky = 0; ky < 3; ++ky) {
      v16 a16[R][3] = {};
      v8 a8[R][3] = {};
      float a1[R][3] = {};
      for (std::size_t s = 0; s < N; ++s)
        for (std::size_t y = 0; y < H; ++y) {
          const float* row = inpad + s * in_stride + ci * plane + (y + ky) * Wp;
          const float* g = dy + s * out_stride + co0 * HW + y * W;
          weight_grad_row<v16, R>(row, g, HW, 0, w16, a16);
          weight_grad_row<v8, R>(row, g, HW, w16, w8, a8);
          for (std::size_t x = w8; x < W; ++x)
            for (std::size_t r = 0; r < R; ++r)
              for (std::size_t kx = 0; kx < 3; ++kx) a1[r][kx] += g[r * HW + x] * row[x + kx];
        }
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t kx = 0; kx < 3; ++kx)
          gw[((co0 + r) * C_in + ci) * 9 + ky * 3 + kx] +=
              hsum(a16[r][kx]) + hsum(a8[r][kx]) + a1[r][kx];
    }
}

}  // namespace detail

// out[C_out, H, W] = (accumulate ? out : bias) + conv(inpad, w), with w laid
// out as [C_out, C_in, 3, 3] and bias optional.
inline void forward(const float* inpad, std::size_t C_in, std::size_t H, std::size_t W,
                    const float* w, const float* bias, std::size_t C_out, bool accumulate,
                    float* out) {
  std::size_t co = 0;
  for (; co + kBlock <= C_out; co += kBlock)
    detail::forward_rows<kBlock>(inpad, C_in, H, W, w, co, bias, accumulate, out);
  for (; co < C_out; ++co) detail::forward_rows<1>(inpad, C_in, H, W, w, co, bias, accumulate, out);
}

// gw[C_out, C_in, 3, 3] += sum over samples of dy (x) inpad, where inpad holds
// N padded [C_in, H+2, W+2] inputs and dy N [C_out, H, W] output gradients.
inline void weight_grad(const float* inpad, const float* dy, std::size_t N, std::size_t C_in,
                        std::size_t H, std::size_t W, std::size_t C_out, float* gw) {
  std::size_t co = 0;
  for (; co + kBlock <= C_out; co += kBlock)
    detail::weight_grad_block<kBlock>(inpad, dy, N, C_in, H, W, C_out, co, gw);
  for (; co < C_out; ++co) detail::weight_grad_block<1>(inpad, dy, N, C_in, H, W, C_out, co, gw);
}

// Weights for the input-gradient pass: transposed channels, flipped taps.
inline void flip_transpose(const float* w, std::size_t C_out, std::size_t C_in, float* wf) {
  for (std::size_t co = 0; co < C_out; ++co)
    for (std::size_t ci = 0; ci < C_in; ++ci)
      for (std::size_t t = 0; t < 9; ++t) wf[(ci * C_out + co) * 9 + (8 - t)] = w[(co * C_in + ci) * 9 + t];
}

}  // namespace distill_seg::conv3x3

#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic pop
#endif
