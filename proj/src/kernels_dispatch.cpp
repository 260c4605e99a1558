#include "pltnet/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace pltnet::kernels {
namespace {

const KernelTable* g_active = nullptr;

const KernelTable* resolve_auto() {
  if (const char* env = std::getenv("PLTNET_SIMD")) {
    const std::string v(env);
    if (v == "scalar") return &scalar_table();
    if (v == "avx2") {
      if (!cpu_has_avx2()) throw std::runtime_error("PLTNET_SIMD=avx2: cpu lacks avx2");
      return &avx2_table();
    }
    // anything else falls through to auto
  }
  return cpu_has_avx2() ? &avx2_table() : &scalar_table();
}

}  // namespace

bool cpu_has_avx2() {
#if defined(PLTNET_HAVE_AVX2_TU)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

#if !defined(PLTNET_HAVE_AVX2_TU)
const KernelTable& avx2_table() {
  throw std::runtime_error("avx2 kernels not built for this target");
}
#endif

void select_isa(Isa isa) {
  switch (isa) {
    case Isa::kAuto:
      g_active = resolve_auto();
      break;
    case Isa::kScalar:
      g_active = &scalar_table();
      break;
    case Isa::kAvx2:
      if (!cpu_has_avx2()) throw std::runtime_error("select_isa: cpu lacks avx2");
      g_active = &avx2_table();
      break;
  }
}

const KernelTable& active() {
  if (g_active == nullptr) g_active = resolve_auto();
  return *g_active;
}

}  // namespace pltnet::kernels
