#pragma once

#include <cstdint>
#include <vector>

#include "semtok/nn/matrix.hpp"

namespace semtok::memory::detail {

struct KMeansResult {
  nn::Matrix centers;
  std::vector<std::uint32_t> assignment;
  std::vector<double> objective;  // mean squared error after each assignment
};

// Lloyd iterations from k-means++ seeds. rows must hold at least k rows.
KMeansResult kmeans(const nn::Matrix& rows, std::size_t k, std::uint64_t seed, std::size_t max_iters,
                    double rel_tol);

// Index of the nearest center; ties resolve to the lowest index.
std::uint32_t nearest(const double* x, const nn::Matrix& centers, double* best_dist = nullptr);

}  // namespace semtok::memory::detail
