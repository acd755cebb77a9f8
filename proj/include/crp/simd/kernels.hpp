#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

// Double-precision inner loops shared by the forward pass and every
// relevance rule. Each instruction set provides one KernelTable; the active
// table is chosen once per process from CPU features, or forced with the
// CRP_SIMD environment variable (scalar | avx2 | neon | auto).

namespace crp::simd {

struct KernelTable {
  const char* name;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  double (*sum_abs)(const double* x, std::size_t n);
  // out[i] = a[i] * b[i]
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
};

const KernelTable& scalar_kernels() noexcept;
// nullptr when the variant was not compiled in or the CPU lacks support.
const KernelTable* avx2_kernels() noexcept;
const KernelTable* neon_kernels() noexcept;

/// Every table usable on this machine, scalar first.
std::vector<const KernelTable*> available_kernels();

const KernelTable& active() noexcept;

/// Replaces the active table; returns false if `name` is unavailable.
bool select(std::string_view name);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}
inline double sum(std::span<const double> x) { return active().sum(x.data(), x.size()); }
inline double sum_abs(std::span<const double> x) { return active().sum_abs(x.data(), x.size()); }

}  // namespace crp::simd
