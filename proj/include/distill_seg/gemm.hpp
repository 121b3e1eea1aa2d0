#pragma once

#include <algorithm>
#include <cstddef>

// Small single-threaded float GEMM kernels used by the convolution ops.
// All matrices are row-major and every kernel accumulates into C.

namespace distill_seg::gemm {

namespace detail {

inline constexpr std::size_t kRows = 4;
inline constexpr std::size_t kCols = 64;

// C[i0:i0+R, j0:j0+kCols] += A(i, p) * B[p, j] for a full column tile.
template <std::size_t R>
inline void tile(std::size_t K, const float* a, std::size_t a_rs, std::size_t a_cs,
                 const float* b, std::size_t ldb, float* c, std::size_t ldc) {
  float acc[R][kCols];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < kCols; ++j) acc[r][j] = c[r * ldc + j];
  for (std::size_t p = 0; p < K; ++p) {
    const float* brow = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const float av = a[r * a_rs + p * a_cs];
      for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < kCols; ++j) c[r * ldc + j] = acc[r][j];
}

inline void tail(std::size_t rows, std::size_t cols, std::size_t K, const float* a,
                 std::size_t a_rs, std::size_t a_cs, const float* b, std::size_t ldb,
                 float* c, std::size_t ldc) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* crow = c + r * ldc;
    for (std::size_t p = 0; p < K; ++p) {
      const float av = a[r * a_rs + p * a_cs];
      const float* brow = b + p * ldb;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// C[M,N] += A[M,K] * B[K,N], where A is addressed as a[i*a_rs + p*a_cs].
// Passing (a_rs, a_cs) = (K, 1) gives A, (1, M) gives the transpose of a
// K x M buffer.
inline void multiply(std::size_t M, std::size_t N, std::size_t K, const float* a,
                     std::size_t a_rs, std::size_t a_cs, const float* b, float* c) {
  using detail::kCols;
  using detail::kRows;
  const std::size_t n_full = N - N % kCols;
  std::size_t i = 0;
  for (; i + kRows <= M; i += kRows) {
    for (std::size_t j = 0; j < n_full; j += kCols)
      detail::tile<kRows>(K, a + i * a_rs, a_rs, a_cs, b + j, N, c + i * N + j, N);
    if (n_full < N)
      detail::tail(kRows, N - n_full, K, a + i * a_rs, a_rs, a_cs, b + n_full, N,
                   c + i * N + n_full, N);
  }
  for (; i < M; ++i) {
    for (std::size_t j = 0; j < n_full; j += kCols)
      detail::tile<1>(K, a + i * a_rs, a_rs, a_cs, b + j, N, c + i * N + j, N);
    if (n_full < N)
      detail::tail(1, N - n_full, K, a + i * a_rs, a_rs, a_cs, b + n_full, N,
                   c + i * N + n_full, N);
  }
}

// C[M,K] += A[M,N] * B[K,N]^T (row-by-row dot products over N).
inline void multiply_bt(std::size_t M, std::size_t K, std::size_t N, const float* a,
                        const float* b, float* c) {
  constexpr std::size_t L = 16;
  constexpr std::size_t R = 4;
  const std::size_t n_full = N - N % L;
  auto dot_block = [&](std::size_t i, std::size_t p, std::size_t rows, std::size_t cols) {
    float lanes[R][R][L] = {};
    for (std::size_t j = 0; j < n_full; j += L)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q)
          for (std::size_t l = 0; l < L; ++l)
            lanes[r][q][l] += a[(i + r) * N + j + l] * b[(p + q) * N + j + l];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t q = 0; q < cols; ++q) {
        float s = 0.0f;
        for (std::size_t l = 0; l < L; ++l) s += lanes[r][q][l];
        for (std::size_t j = n_full; j < N; ++j) s += a[(i + r) * N + j] * b[(p + q) * N + j];
        c[(i + r) * K + p + q] += s;
      }
  };
  for (std::size_t i = 0; i < M; i += R) {
    const std::size_t rows = std::min(R, M - i);
    for (std::size_t p = 0; p < K; p += R) {
      const std::size_t cols = std::min(R, K - p);
      if (rows == R && cols == R) {
        float lanes[R][R][L] = {};
        for (std::size_t j = 0; j < n_full; j += L)
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t q = 0; q < R; ++q)
              for (std::size_t l = 0; l < L; ++l)
                lanes[r][q][l] += a[(i + r) * N + j + l] * b[(p + q) * N + j + l];
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t q = 0; q < R; ++q) {
            float s = 0.0f;
            for (std::size_t l = 0; l < L; ++l) s += lanes[r][q][l];
            for (std::size_t j = n_full; j < N; ++j) s += a[(i + r) * N + j] * b[(p + q) * N + j];
            c[(i + r) * K + p + q] += s;
          }
      } else {
        dot_block(i, p, rows, cols);
      }
    }
  }
}

}  // namespace distill_seg::gemm
