#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace bytelm {

/// Dense row-major matrix.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T value = T(0)) : rows(r), cols(c), data(r * c, value) {}

  /// Changes the shape, keeping the allocation; contents are unspecified.
  void reshape(std::size_t r, std::size_t c) {
    rows = r;
    cols = c;
    data.resize(r * c);
  }
  /// Changes the shape and zero-fills, keeping the allocation.
  void zeros(std::size_t r, std::size_t c) {
    reshape(r, c);
    std::fill(data.begin(), data.end(), T(0));
  }

  T* ptr() noexcept { return data.data(); }
  const T* ptr() const noexcept { return data.data(); }
  T* row_ptr(std::size_t i) noexcept { return data.data() + i * cols; }
  const T* row_ptr(std::size_t i) const noexcept { return data.data() + i * cols; }
  std::span<T> row(std::size_t i) { return {row_ptr(i), cols}; }
  std::span<const T> row(std::size_t i) const { return {row_ptr(i), cols}; }
  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  T operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

namespace kernels {

// Every output element of gemm is accumulated over the inner dimension in
// ascending order, starting from zero, with the same expression on the
// blocked and the remainder paths. A row of the result therefore depends
// only on the matching row of `a`, never on how many rows are processed.

namespace detail {

template <class T>
inline constexpr std::size_t kPanelWidth = sizeof(T) <= 8 ? 256 / sizeof(T) : 16;

// One MR x kPanelWidth block of c against a packed [k x kPanelWidth] panel
// of b, four 64-byte vectors per panel row.
template <class T, std::size_t MR>
  requires(sizeof(T) <= 8)
[[gnu::always_inline]] inline void gemm_tile(const T* a, std::size_t lda, std::size_t a_step,
                                             const T* panel, T* c, std::size_t ldc, std::size_t k,
                                             const T* bias, bool accumulate) {
  constexpr std::size_t NB = kPanelWidth<T>;
  constexpr std::size_t W = 64 / sizeof(T);
  constexpr std::size_t NV = NB / W;
  typedef T V __attribute__((vector_size(64)));
  typedef T VU __attribute__((vector_size(64), aligned(alignof(T)), may_alias));
  V acc[MR][NV];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t v = 0; v < NV; ++v) acc[r][v] = V{};
  for (std::size_t p = 0; p < k; ++p) {
    V bv[NV];
    for (std::size_t v = 0; v < NV; ++v) bv[v] = *reinterpret_cast<const VU*>(panel + p * NB + v * W);
    for (std::size_t r = 0; r < MR; ++r) {
      const T av = a[r * lda + p * a_step];
      for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    T* crow = c + r * ldc;
    for (std::size_t v = 0; v < NV; ++v) {
      V out = acc[r][v];
      if (bias) out += *reinterpret_cast<const VU*>(bias + v * W);
      if (accumulate) out = *reinterpret_cast<const VU*>(crow + v * W) + out;
      *reinterpret_cast<VU*>(crow + v * W) = out;
    }
  }
}

template <class T>
inline void gemm_edge(const T* a, std::size_t lda, std::size_t a_step, const T* b, std::size_t ldb, T* c,
                      std::size_t ldc, std::size_t rows, std::size_t k, std::size_t width,
                      const T* bias, bool accumulate) {
  T acc[kPanelWidth<T>];
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(acc, acc + width, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[r * lda + p * a_step];
      const T* brow = b + p * ldb;
      for (std::size_t j = 0; j < width; ++j) acc[j] += av * brow[j];
    }
    T* crow = c + r * ldc;
    for (std::size_t j = 0; j < width; ++j) {
      T v = acc[j];
      if (bias) v += bias[j];
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

}  // namespace detail

/// c = a * b (+ bias) for c[m x n], where a(i, p) = a[i * lda + p * a_step]
/// and b(p, j) = b[p * ldb + j]; with `accumulate` the result is added onto
/// c instead.
template <class T>
void gemm_strided(const T* a, std::size_t lda, std::size_t a_step, const T* b, std::size_t ldb,
                  T* c, std::size_t ldc,
                  std::size_t m, std::size_t k, std::size_t n, const T* bias = nullptr,
                  bool accumulate = false) {
  constexpr std::size_t MR = 6;
  constexpr std::size_t NB = detail::kPanelWidth<T>;
  constexpr std::size_t MC = 16 * MR;  // rows per block; the block of a stays in cache
  std::size_t full_panels = 0;
  std::size_t tiled_rows = 0;
  if constexpr (sizeof(T) <= 8) {
    full_panels = m >= MR ? n / NB : 0;
    tiled_rows = full_panels ? m - m % MR : 0;
    if (full_panels) {
      thread_local std::vector<T> packed;
      packed.resize(full_panels * k * NB);
      for (std::size_t jp = 0; jp < full_panels; ++jp)
        for (std::size_t p = 0; p < k; ++p)
          std::copy_n(b + p * ldb + jp * NB, NB, packed.data() + (jp * k + p) * NB);
      for (std::size_t i0 = 0; i0 < tiled_rows; i0 += MC) {
        const std::size_t i1 = std::min(tiled_rows, i0 + MC);
        for (std::size_t jp = 0; jp < full_panels; ++jp) {
          const T* panel = packed.data() + jp * k * NB;
          const T* bias_j = bias ? bias + jp * NB : nullptr;
          for (std::size_t i = i0; i < i1; i += MR) {
            detail::gemm_tile<T, MR>(a + i * lda, lda, a_step, panel, c + i * ldc + jp * NB, ldc, k, bias_j,
                                     accumulate);
          }
        }
      }
    }
  }
  // rows below the tiled block, for every column
  for (std::size_t j0 = 0; j0 < n && tiled_rows < m; j0 += NB) {
    const std::size_t width = std::min(NB, n - j0);
    detail::gemm_edge<T>(a + tiled_rows * lda, lda, a_step, b + j0, ldb, c + tiled_rows * ldc + j0, ldc,
                         m - tiled_rows, k, width, bias ? bias + j0 : nullptr, accumulate);
  }
  // columns right of the full panels, for the tiled rows
  for (std::size_t j0 = full_panels * NB; j0 < n && tiled_rows > 0; j0 += NB) {
    const std::size_t width = std::min(NB, n - j0);
    detail::gemm_edge<T>(a, lda, a_step, b + j0, ldb, c + j0, ldc, tiled_rows, k, width,
                         bias ? bias + j0 : nullptr, accumulate);
  }
}

/// c[m x n] = a[m x k] * b[k x n] (+ bias[n]); with `accumulate` the
/// product is added onto c instead.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          const T* bias = nullptr, bool accumulate = false) {
  gemm_strided(a, k, std::size_t{1}, b, n, c, n, m, k, n, bias, accumulate);
}

/// dst[cols x rows] = transpose of src[rows x cols].
template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B)
    for (std::size_t j0 = 0; j0 < cols; j0 += B)
      for (std::size_t i = i0; i < std::min(rows, i0 + B); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + B); ++j) dst[j * rows + i] = src[i * cols + j];
}

/// grad_b[k x n] += a^T * grad_c, for a[m x k] and grad_c[m x n]. The
/// inner dimension m is consumed in chunks that are added onto grad_b in
/// order.
template <class T>
void gemm_at_b_accumulate(const T* a, const T* grad_c, T* grad_b, std::size_t m, std::size_t k,
                          std::size_t n) {
  constexpr std::size_t KC = 256;
  for (std::size_t r0 = 0; r0 < m; r0 += KC) {
    const std::size_t len = std::min(KC, m - r0);
    gemm_strided(a + r0 * k, std::size_t{1}, k, grad_c + r0 * n, n, grad_b, n, k, len, n,
                 static_cast<const T*>(nullptr), true);
  }
}

/// grad_a[m x k] (=|+=) grad_c[m x n] * b^T, for b[k x n].
template <class T>
void gemm_a_bt(const T* grad_c, const T* b, T* grad_a, std::size_t m, std::size_t k, std::size_t n,
               std::vector<T>& scratch, bool accumulate = false) {
  scratch.resize(k * n);
  transpose(b, k, n, scratch.data());
  gemm(grad_c, scratch.data(), grad_a, m, n, k, static_cast<const T*>(nullptr), accumulate);
}

/// out[j] += sum over rows of m[i, j].
template <class T>
void column_sum_accumulate(const T* m, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j] += m[i * cols + j];
}

}  // namespace kernels
}  // namespace bytelm
