#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <vector>

#include "oracles.hpp"
#include "semtok/kernels.hpp"

using namespace semtok::kernels;

namespace {

double scale_of(const std::vector<double>& v) {
  double m = 1.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST_CASE("dispatch picks a usable table") {
  CHECK(isa_name(active().isa).size() > 0);
  CHECK(select(Isa::kScalar));
  CHECK(active().isa == Isa::kScalar);
  if (avx2_table()) {
    CHECK(select(Isa::kAvx2));
    CHECK(active().isa == Isa::kAvx2);
  }
}

TEST_CASE("vector kernels agree with the scalar reference") {
  const KernelTable* simd = avx2_table();
  if (!simd) {
    MESSAGE("no AVX2 on this machine; skipping");
    return;
  }
  const KernelTable& ref = scalar_table();
  std::mt19937_64 rng(7);
  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 7u, 8u, 15u, 16u, 17u, 31u, 64u, 100u, 1023u}) {
    CAPTURE(n);
    auto a = oracle::uniform(n, rng, -3, 3);
    auto b = oracle::uniform(n, rng, -3, 3);
    const double tol = 1e-12 * std::max<double>(1.0, n);
    CHECK(std::abs(simd->dot(a.data(), b.data(), n) - ref.dot(a.data(), b.data(), n)) <= tol * 9);
    CHECK(std::abs(simd->sq_dist(a.data(), b.data(), n) - ref.sq_dist(a.data(), b.data(), n)) <= tol * 36);

    auto y1 = b, y2 = b;
    ref.axpy(0.37, a.data(), y1.data(), n);
    simd->axpy(0.37, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-15 * scale_of(y1));

    auto x = oracle::uniform(n, rng, -700, 700);
    std::vector<double> e1(n), e2(n);
    ref.exp(x.data(), e1.data(), n);
    simd->exp(x.data(), e2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(oracle::rel_err(e1[i], e2[i], 1e-300) <= 1e-13);
  }
}

TEST_CASE("vector exp handles extreme arguments") {
  const KernelTable* simd = avx2_table();
  if (!simd) return;
  std::vector<double> x{-1e4, -745.2, -708.5, -1e-300, 0.0, 1e-300, 709.7, 710.0, 1e4};
  std::vector<double> y(x.size());
  simd->exp(x.data(), y.data(), x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double ref = std::exp(x[i]);
    if (std::isinf(ref)) {
      CHECK(std::isinf(y[i]));
    } else if (ref < 1e-300) {
      CHECK(y[i] <= 1e-300);
    } else {
      CHECK(oracle::rel_err(ref, y[i], 1e-300) <= 1e-13);
    }
  }
}

TEST_CASE("gemm agrees with the scalar reference for every transpose") {
  const KernelTable* simd = avx2_table();
  if (!simd) return;
  const KernelTable& ref = scalar_table();
  std::mt19937_64 rng(11);
  const std::size_t sizes[][3] = {{1, 1, 1}, {3, 5, 7}, {4, 8, 4}, {13, 17, 9}, {33, 65, 31}, {64, 96, 128}, {5, 130, 70}};
  for (auto [m, n, k] : sizes) {
    for (Trans ta : {Trans::kNo, Trans::kYes}) {
      for (Trans tb : {Trans::kNo, Trans::kYes}) {
        for (double beta : {0.0, 1.0, -0.5}) {
          CAPTURE(m);
          CAPTURE(n);
          CAPTURE(k);
          const std::size_t lda = (ta == Trans::kNo ? k : m) + 2;
          const std::size_t ldb = (tb == Trans::kNo ? n : k) + 1;
          const std::size_t ldc = n + 3;
          auto a = oracle::uniform((ta == Trans::kNo ? m : k) * lda, rng);
          auto b = oracle::uniform((tb == Trans::kNo ? k : n) * ldb, rng);
          auto c1 = oracle::uniform(m * ldc, rng);
          auto c2 = c1;
          ref.gemm(ta, tb, m, n, k, 1.3, a.data(), lda, b.data(), ldb, beta, c1.data(), ldc);
          simd->gemm(ta, tb, m, n, k, 1.3, a.data(), lda, b.data(), ldb, beta, c2.data(), ldc);
          double worst = 0;
          for (std::size_t i = 0; i < c1.size(); ++i) worst = std::max(worst, std::abs(c1[i] - c2[i]));
          CHECK(worst <= 1e-12 * static_cast<double>(k + 1));
        }
      }
    }
  }
}
