#include <atomic>
#include <cstdlib>
#include <string>

#include "crp/simd/kernels.hpp"

namespace crp::simd {

#if defined(CRP_HAVE_AVX2)
namespace avx2 {
const KernelTable& table() noexcept;
}
#endif
#if defined(CRP_HAVE_NEON)
namespace neon {
const KernelTable& table() noexcept;
}
#endif

const KernelTable* avx2_kernels() noexcept {
#if defined(CRP_HAVE_AVX2)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return &avx2::table();
#endif
  return nullptr;
}

const KernelTable* neon_kernels() noexcept {
#if defined(CRP_HAVE_NEON)
  return &neon::table();
#else
  return nullptr;
#endif
}

std::vector<const KernelTable*> available_kernels() {
  std::vector<const KernelTable*> out{&scalar_kernels()};
  if (const auto* t = avx2_kernels()) out.push_back(t);
  if (const auto* t = neon_kernels()) out.push_back(t);
  return out;
}

namespace {

const KernelTable* by_name(std::string_view name) {
  if (name == "scalar") return &scalar_kernels();
  if (name == "avx2") return avx2_kernels();
  if (name == "neon") return neon_kernels();
  return nullptr;
}

const KernelTable* detect() {
  if (const char* env = std::getenv("CRP_SIMD")) {
    const std::string_view want(env);
    if (want != "auto") {
      if (const auto* t = by_name(want)) return t;
    }
  }
  if (const auto* t = avx2_kernels()) return t;
  if (const auto* t = neon_kernels()) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{detect()};
  return current;
}

}  // namespace

const KernelTable& active() noexcept { return *slot().load(std::memory_order_acquire); }

bool select(std::string_view name) {
  const KernelTable* t = name == "auto" ? detect() : by_name(name);
  if (t == nullptr) return false;
  slot().store(t, std::memory_order_release);
  return true;
}

}  // namespace crp::simd
