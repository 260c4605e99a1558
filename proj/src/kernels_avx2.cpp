// AVX2 kernel variants. Compiled with -mavx2 (no -mfma) and -ffp-contract=off
// in its own translation unit; only reached through runtime dispatch after a
// cpuid check. Every loop keeps the scalar reference's per-element rounding
// sequence: mul then add, k ascending, one accumulator per output element.

#include "pltnet/kernels.hpp"

#include <immintrin.h>

#include <cstring>

namespace pltnet::kernels {
namespace {

// One row of C against a K x N panel of B.
inline void gemm_row(const float* arow, const float* b, float* crow, int k, int n) {
  int j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256 acc0 = _mm256_loadu_ps(crow + j);
    __m256 acc1 = _mm256_loadu_ps(crow + j + 8);
    for (int p = 0; p < k; ++p) {
      const float* brow = b + static_cast<size_t>(p) * n + j;
      const __m256 av = _mm256_set1_ps(arow[p]);
      acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(av, _mm256_loadu_ps(brow)));
      acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 8)));
    }
    _mm256_storeu_ps(crow + j, acc0);
    _mm256_storeu_ps(crow + j + 8, acc1);
  }
  for (; j + 8 <= n; j += 8) {
    __m256 acc = _mm256_loadu_ps(crow + j);
    for (int p = 0; p < k; ++p) {
      const __m256 av = _mm256_set1_ps(arow[p]);
      acc = _mm256_add_ps(acc, _mm256_mul_ps(av, _mm256_loadu_ps(b + static_cast<size_t>(p) * n + j)));
    }
    _mm256_storeu_ps(crow + j, acc);
  }
  for (; j < n; ++j) {
    float acc = crow[j];
    for (int p = 0; p < k; ++p) {
      acc += arow[p] * b[static_cast<size_t>(p) * n + j];
    }
    crow[j] = acc;
  }
}

void gemm_avx2(const float* a, const float* b, float* c, int m, int k, int n,
               bool accumulate) {
  if (!accumulate) {
    std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * static_cast<size_t>(n));
  }
  int i = 0;
  // 4-row blocks share each B load.
  for (; i + 4 <= m; i += 4) {
    const float* a0 = a + static_cast<size_t>(i) * k;
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    float* c0 = c + static_cast<size_t>(i) * n;
    float* c1 = c0 + n;
    float* c2 = c1 + n;
    float* c3 = c2 + n;
    int j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc0 = _mm256_loadu_ps(c0 + j);
      __m256 acc1 = _mm256_loadu_ps(c1 + j);
      __m256 acc2 = _mm256_loadu_ps(c2 + j);
      __m256 acc3 = _mm256_loadu_ps(c3 + j);
      for (int p = 0; p < k; ++p) {
        const __m256 bv = _mm256_loadu_ps(b + static_cast<size_t>(p) * n + j);
        acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(_mm256_set1_ps(a0[p]), bv));
        acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(_mm256_set1_ps(a1[p]), bv));
        acc2 = _mm256_add_ps(acc2, _mm256_mul_ps(_mm256_set1_ps(a2[p]), bv));
        acc3 = _mm256_add_ps(acc3, _mm256_mul_ps(_mm256_set1_ps(a3[p]), bv));
      }
      _mm256_storeu_ps(c0 + j, acc0);
      _mm256_storeu_ps(c1 + j, acc1);
      _mm256_storeu_ps(c2 + j, acc2);
      _mm256_storeu_ps(c3 + j, acc3);
    }
    for (; j < n; ++j) {
      float s0 = c0[j], s1 = c1[j], s2 = c2[j], s3 = c3[j];
      for (int p = 0; p < k; ++p) {
        const float bv = b[static_cast<size_t>(p) * n + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] = s0;
      c1[j] = s1;
      c2[j] = s2;
      c3[j] = s3;
    }
  }
  for (; i < m; ++i) {
    gemm_row(a + static_cast<size_t>(i) * k, b, c + static_cast<size_t>(i) * n, k, n);
  }
}

void add_avx2(const float* x, const float* y, float* z, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(z + i, _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) z[i] = x[i] + y[i];
}

void mul_avx2(const float* x, const float* y, float* z, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(z + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

void axpy_avx2(float alpha, const float* x, float* y, size_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(float alpha, const float* x, float* y, size_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) y[i] = alpha * x[i];
}

void relu_avx2(const float* x, float* y, size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    // maxps returns the second operand for ties and NaN, matching x > 0 ? x : 0.
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_avx2(const float* x, const float* dy, float* dx, size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    const __m256 dxa = _mm256_loadu_ps(dx + i);
    const __m256 sum = _mm256_add_ps(dxa, _mm256_loadu_ps(dy + i));
    // Blend rather than add-zero so untouched lanes keep their exact bits.
    _mm256_storeu_ps(dx + i, _mm256_blendv_ps(dxa, sum, mask));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table = {
      "avx2",    gemm_avx2,  add_avx2,  mul_avx2,
      axpy_avx2, scale_avx2, relu_avx2, relu_backward_avx2,
  };
  return table;
}

}  // namespace pltnet::kernels
