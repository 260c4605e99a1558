#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops behind the tensor ops. Every kernel has a scalar
// reference implementation; SIMD variants are selected at runtime and must
// reproduce the scalar results bit-exactly (same per-element rounding
// sequence: one mul rounding + one add rounding per accumulation step, k
// ascending, no fma, no reassociation).
namespace pltnet::kernels {

struct KernelTable {
  const char* isa_name;

  // C[M,N] (+)= A[M,K] * B[K,N], all row-major, contiguous.
  // accumulate=false zero-fills C first.
  void (*gemm)(const float* a, const float* b, float* c, int m, int k, int n,
               bool accumulate);

  void (*add)(const float* x, const float* y, float* z, size_t n);  // z = x + y
  void (*mul)(const float* x, const float* y, float* z, size_t n);  // z = x * y
  void (*axpy)(float alpha, const float* x, float* y, size_t n);    // y += alpha * x
  void (*scale)(float alpha, const float* x, float* y, size_t n);   // y = alpha * x
  void (*relu)(const float* x, float* y, size_t n);                 // y = max(x, 0)
  // dx += dy where x > 0
  void (*relu_backward)(const float* x, const float* dy, float* dx, size_t n);
};

const KernelTable& scalar_table();

bool cpu_has_avx2();
// Only valid to call when cpu_has_avx2(); present only in builds that could
// compile the AVX2 translation unit.
const KernelTable& avx2_table();

enum class Isa { kAuto, kScalar, kAvx2 };

// Explicit selection, mainly for the equivalence tests. kAuto re-resolves
// from the CPU and the PLTNET_SIMD environment variable (auto|scalar|avx2).
void select_isa(Isa isa);
const KernelTable& active();

}  // namespace pltnet::kernels
