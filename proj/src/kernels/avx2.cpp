// AVX2+FMA kernels. This translation unit is compiled with -mavx2 -mfma and is
// only entered after the dispatcher has confirmed CPU support.

#include "semtok/kernels.hpp"

#if defined(SEMTOK_HAVE_AVX2)

#include <immintrin.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <iterator>
#include <vector>

namespace semtok::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double sq_dist_avx2(const double* a, const double* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    s0 = _mm256_fmadd_pd(d, d, s0);
  }
  double s = hsum(s0);
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// exp(x) = 2^k * exp(r), r = x - k ln2 in [-ln2/2, ln2/2]; exp(r) from a
// degree-13 Taylor polynomial (truncation error below 1 ulp on that range).
void exp_avx2(const double* x, double* y, std::size_t n) {
  const __m256d log2e = _mm256_set1_pd(1.4426950408889634);
  const __m256d ln2_hi = _mm256_set1_pd(6.93147180369123816490e-01);
  const __m256d ln2_lo = _mm256_set1_pd(1.90821492927058770002e-10);
  const __m256d hi_lim = _mm256_set1_pd(709.0);
  const __m256d lo_lim = _mm256_set1_pd(-708.0);
  static constexpr double kCoef[] = {
      1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0, 1.0 / 3628800.0, 1.0 / 362880.0,
      1.0 / 40320.0,      1.0 / 5040.0,      1.0 / 720.0,      1.0 / 120.0,     1.0 / 24.0,
      1.0 / 6.0,          0.5,               1.0,              1.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    const __m256d in_range = _mm256_and_pd(_mm256_cmp_pd(v, hi_lim, _CMP_LE_OQ),
                                           _mm256_cmp_pd(v, lo_lim, _CMP_GE_OQ));
    if (_mm256_movemask_pd(in_range) != 0xF) {
      for (std::size_t j = i; j < i + 4; ++j) y[j] = std::exp(x[j]);
      continue;
    }
    const __m256d kf = _mm256_round_pd(_mm256_mul_pd(v, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_fnmadd_pd(kf, ln2_hi, v);
    r = _mm256_fnmadd_pd(kf, ln2_lo, r);
    __m256d p = _mm256_set1_pd(kCoef[0]);
    for (std::size_t c = 1; c < std::size(kCoef); ++c) p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(kCoef[c]));
    // 2^k via the exponent field.
    const __m128i k32 = _mm256_cvtpd_epi32(kf);
    const __m256i k64 = _mm256_cvtepi32_epi64(k32);
    const __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(k64, _mm256_set1_epi64x(1023)), 52);
    _mm256_storeu_pd(y + i, _mm256_mul_pd(p, _mm256_castsi256_pd(bits)));
  }
  for (; i < n; ++i) y[i] = std::exp(x[i]);
}

// Register tile: kMr rows x kNr columns of C held in 12 ymm accumulators.
constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 8;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 120;
constexpr std::size_t kNc = 1024;

struct Operand {
  const double* p;
  std::size_t ld;
  bool trans;
  double at(std::size_t r, std::size_t c) const { return trans ? p[c * ld + r] : p[r * ld + c]; }
};

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into kMr-row panels.
void pack_a(const Operand& a, std::size_t i0, std::size_t mc, std::size_t p0, std::size_t kc,
            double* out) {
  for (std::size_t ip = 0; ip < mc; ip += kMr) {
    const std::size_t rows = std::min(kMr, mc - ip);
    if (!a.trans) {
      for (std::size_t p = 0; p < kc; ++p) {
        for (std::size_t r = 0; r < rows; ++r) out[r] = a.p[(i0 + ip + r) * a.ld + p0 + p];
        for (std::size_t r = rows; r < kMr; ++r) out[r] = 0.0;
        out += kMr;
      }
    } else {
      for (std::size_t p = 0; p < kc; ++p) {
        const double* src = a.p + (p0 + p) * a.ld + i0 + ip;
        for (std::size_t r = 0; r < rows; ++r) out[r] = src[r];
        for (std::size_t r = rows; r < kMr; ++r) out[r] = 0.0;
        out += kMr;
      }
    }
  }
}

// Packs rows [p0, p0+kc) x cols [j0, j0+nc) of op(B) into kNr-column panels.
void pack_b(const Operand& b, std::size_t p0, std::size_t kc, std::size_t j0, std::size_t nc,
            double* out) {
  for (std::size_t jp = 0; jp < nc; jp += kNr) {
    const std::size_t cols = std::min(kNr, nc - jp);
    if (!b.trans) {
      for (std::size_t p = 0; p < kc; ++p) {
        const double* src = b.p + (p0 + p) * b.ld + j0 + jp;
        if (cols == kNr) {
          _mm256_storeu_pd(out, _mm256_loadu_pd(src));
          _mm256_storeu_pd(out + 4, _mm256_loadu_pd(src + 4));
        } else {
          for (std::size_t c = 0; c < cols; ++c) out[c] = src[c];
          for (std::size_t c = cols; c < kNr; ++c) out[c] = 0.0;
        }
        out += kNr;
      }
    } else {
      for (std::size_t p = 0; p < kc; ++p) {
        for (std::size_t c = 0; c < cols; ++c) out[c] = b.p[(j0 + jp + c) * b.ld + p0 + p];
        for (std::size_t c = cols; c < kNr; ++c) out[c] = 0.0;
        out += kNr;
      }
    }
  }
}

// acc = packed_a(kMr x kc) * packed_b(kc x kNr); C_tile = alpha * acc + beta * C_tile.
void micro_kernel(std::size_t kc, const double* pa, const double* pb, double alpha, double beta,
                  double* c, std::size_t ldc, std::size_t rows, std::size_t cols) {
  __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
  __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
  __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
  __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
  __m256d c40 = _mm256_setzero_pd(), c41 = _mm256_setzero_pd();
  __m256d c50 = _mm256_setzero_pd(), c51 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < kc; ++p) {
    const __m256d b0 = _mm256_loadu_pd(pb);
    const __m256d b1 = _mm256_loadu_pd(pb + 4);
    __m256d a = _mm256_broadcast_sd(pa + 0);
    c00 = _mm256_fmadd_pd(a, b0, c00);
    c01 = _mm256_fmadd_pd(a, b1, c01);
    a = _mm256_broadcast_sd(pa + 1);
    c10 = _mm256_fmadd_pd(a, b0, c10);
    c11 = _mm256_fmadd_pd(a, b1, c11);
    a = _mm256_broadcast_sd(pa + 2);
    c20 = _mm256_fmadd_pd(a, b0, c20);
    c21 = _mm256_fmadd_pd(a, b1, c21);
    a = _mm256_broadcast_sd(pa + 3);
    c30 = _mm256_fmadd_pd(a, b0, c30);
    c31 = _mm256_fmadd_pd(a, b1, c31);
    a = _mm256_broadcast_sd(pa + 4);
    c40 = _mm256_fmadd_pd(a, b0, c40);
    c41 = _mm256_fmadd_pd(a, b1, c41);
    a = _mm256_broadcast_sd(pa + 5);
    c50 = _mm256_fmadd_pd(a, b0, c50);
    c51 = _mm256_fmadd_pd(a, b1, c51);
    pa += kMr;
    pb += kNr;
  }
  alignas(32) std::array<double, kMr * kNr> tile;
  _mm256_store_pd(&tile[0], c00);
  _mm256_store_pd(&tile[4], c01);
  _mm256_store_pd(&tile[8], c10);
  _mm256_store_pd(&tile[12], c11);
  _mm256_store_pd(&tile[16], c20);
  _mm256_store_pd(&tile[20], c21);
  _mm256_store_pd(&tile[24], c30);
  _mm256_store_pd(&tile[28], c31);
  _mm256_store_pd(&tile[32], c40);
  _mm256_store_pd(&tile[36], c41);
  _mm256_store_pd(&tile[40], c50);
  _mm256_store_pd(&tile[44], c51);
  if (rows == kMr && cols == kNr) {
    const __m256d va = _mm256_set1_pd(alpha);
    for (std::size_t r = 0; r < kMr; ++r) {
      double* crow = c + r * ldc;
      __m256d t0 = _mm256_mul_pd(va, _mm256_load_pd(&tile[r * kNr]));
      __m256d t1 = _mm256_mul_pd(va, _mm256_load_pd(&tile[r * kNr + 4]));
      if (beta != 0.0) {
        const __m256d vb = _mm256_set1_pd(beta);
        t0 = _mm256_fmadd_pd(vb, _mm256_loadu_pd(crow), t0);
        t1 = _mm256_fmadd_pd(vb, _mm256_loadu_pd(crow + 4), t1);
      }
      _mm256_storeu_pd(crow, t0);
      _mm256_storeu_pd(crow + 4, t1);
    }
    return;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    double* crow = c + r * ldc;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = alpha * tile[r * kNr + j];
      crow[j] = beta == 0.0 ? v : v + beta * crow[j];
    }
  }
}

void gemm_avx2(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
               const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
               double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = beta == 0.0 ? 0.0 : beta * c[i * ldc + j];
    return;
  }
  const Operand opa{a, lda, ta == Trans::kYes};
  const Operand opb{b, ldb, tb == Trans::kYes};
  thread_local std::vector<double> buf_a;
  thread_local std::vector<double> buf_b;
  buf_a.resize(((kMc + kMr - 1) / kMr) * kMr * kKc);
  buf_b.resize(((kNc + kNr - 1) / kNr) * kNr * kKc);

  for (std::size_t j0 = 0; j0 < n; j0 += kNc) {
    const std::size_t nc = std::min(kNc, n - j0);
    for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
      const std::size_t kc = std::min(kKc, k - p0);
      const double beta_eff = p0 == 0 ? beta : 1.0;
      pack_b(opb, p0, kc, j0, nc, buf_b.data());
      for (std::size_t i0 = 0; i0 < m; i0 += kMc) {
        const std::size_t mc = std::min(kMc, m - i0);
        pack_a(opa, i0, mc, p0, kc, buf_a.data());
        for (std::size_t jr = 0; jr < nc; jr += kNr) {
          const double* pb = buf_b.data() + (jr / kNr) * kNr * kc;
          const std::size_t cols = std::min(kNr, nc - jr);
          for (std::size_t ir = 0; ir < mc; ir += kMr) {
            const double* pa = buf_a.data() + (ir / kMr) * kMr * kc;
            const std::size_t rows = std::min(kMr, mc - ir);
            micro_kernel(kc, pa, pb, alpha, beta_eff, c + (i0 + ir) * ldc + j0 + jr, ldc, rows,
                         cols);
          }
        }
      }
    }
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::kAvx2, dot_avx2, axpy_avx2, sq_dist_avx2, exp_avx2, gemm_avx2};
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &table : nullptr;
}

}  // namespace semtok::kernels

#else

namespace semtok::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace semtok::kernels

#endif
