#include "pltnet/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace pltnet::kernels {
namespace {

// Reference GEMM. Loop order is m, k, n with a single accumulator per output
// element, so every C[m,n] sees: C += round(A[m,k] * B[k,n]) for k ascending.
// SIMD variants replicate exactly this sequence.
void gemm_scalar(const float* a, const float* b, float* c, int m, int k, int n,
                 bool accumulate) {
  if (!accumulate) {
    std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * static_cast<size_t>(n));
  }
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

void add_scalar(const float* x, const float* y, float* z, size_t n) {
  for (size_t i = 0; i < n; ++i) z[i] = x[i] + y[i];
}

void mul_scalar(const float* x, const float* y, float* z, size_t n) {
  for (size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

void axpy_scalar(float alpha, const float* x, float* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(float alpha, const float* x, float* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}

void relu_scalar(const float* x, float* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_scalar(const float* x, const float* dy, float* dx, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0f) dx[i] += dy[i];
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table = {
      "scalar",      gemm_scalar,  add_scalar,  mul_scalar,
      axpy_scalar,   scale_scalar, relu_scalar, relu_backward_scalar,
  };
  return table;
}

}  // namespace pltnet::kernels
