#pragma once
// Dense arithmetic kernels used by every numeric layer of the library.
//
// Each kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2+FMA variant. The active variant is chosen once at startup from the
// CPU feature flags; SEMTOK_KERNELS=scalar|avx2 overrides the choice.

#include <atomic>
#include <cstddef>
#include <string_view>

namespace semtok::kernels {

enum class Isa { kScalar, kAvx2 };

enum class Trans { kNo, kYes };

struct KernelTable {
  Isa isa;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // sum_i (a[i] - b[i])^2
  double (*sq_dist)(const double* a, const double* b, std::size_t n);
  // y[i] = exp(x[i]); in-place allowed.
  void (*exp)(const double* x, double* y, std::size_t n);
  // C = alpha * op(A) * op(B) + beta * C, row-major, op(A) is m x k, op(B) is k x n.
  void (*gemm)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
               double alpha, const double* a, std::size_t lda, const double* b,
               std::size_t ldb, double beta, double* c, std::size_t ldc);
};

const KernelTable& scalar_table();
// Null when the build or the CPU lacks AVX2+FMA.
const KernelTable* avx2_table();

namespace detail {
extern std::atomic<const KernelTable*> g_table;
const KernelTable& init_table();
}  // namespace detail

// Active table. Selection happens on first use.
inline const KernelTable& active() {
  const KernelTable* t = detail::g_table.load(std::memory_order_relaxed);
  return t ? *t : detail::init_table();
}
// Forces a variant; returns false when it is unavailable on this machine.
bool select(Isa isa);
std::string_view isa_name(Isa isa);

inline double dot(const double* a, const double* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline double sq_dist(const double* a, const double* b, std::size_t n) {
  return active().sq_dist(a, b, n);
}
inline void vexp(const double* x, double* y, std::size_t n) { active().exp(x, y, n); }
inline void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                 double alpha, const double* a, std::size_t lda, const double* b,
                 std::size_t ldb, double beta, double* c, std::size_t ldc) {
  active().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace semtok::kernels
