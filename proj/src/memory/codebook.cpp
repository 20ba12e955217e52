#include <algorithm>
#include <limits>
#include <random>

#include "kmeans.hpp"
#include "semtok/codec.hpp"
#include "semtok/error.hpp"
#include "semtok/hash.hpp"
#include "semtok/kernels.hpp"
#include "semtok/memory.hpp"
#include "semtok/seed.hpp"

namespace semtok::memory {

namespace detail {

std::uint32_t nearest(const double* x, const nn::Matrix& centers, double* best_dist) {
  const std::size_t k = centers.rows(), d = centers.cols();
  std::uint32_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double dist = kernels::sq_dist(x, centers.row(c), d);
    if (dist < bd) {
      bd = dist;
      best = static_cast<std::uint32_t>(c);
    }
  }
  if (best_dist) *best_dist = bd;
  return best;
}

namespace {

nn::Matrix seed_plus_plus(const nn::Matrix& rows, std::size_t k, Rng64& rng) {
  const std::size_t n = rows.rows(), d = rows.cols();
  nn::Matrix centers(k, d);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t first = pick(rng);
  std::copy_n(rows.row(first), d, centers.row(0));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = kernels::sq_dist(rows.row(i), centers.row(0), d);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      const double r = u(rng);
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > r && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
      // Rounding can leave acc <= r; fall back to the last point with mass.
      if (d2[chosen] == 0.0) {
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            chosen = i;
            break;
          }
        }
      }
    } else {
      chosen = pick(rng);  // every point already coincides with a center
    }
    std::copy_n(rows.row(chosen), d, centers.row(c));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], kernels::sq_dist(rows.row(i), centers.row(c), d));
    }
  }
  return centers;
}

}  // namespace

KMeansResult kmeans(const nn::Matrix& rows, std::size_t k, std::uint64_t seed, std::size_t max_iters,
                    double rel_tol) {
  const std::size_t n = rows.rows(), d = rows.cols();
  if (k == 0) throw ValidationError("k", "codebook size must be positive");
  if (n < k) {
    throw SizeError("k-means: " + std::to_string(n) + " points cannot seed " + std::to_string(k) +
                    " centers");
  }
  Rng64 rng(derive_seed(seed, 0x6b6d65616e73ULL));
  KMeansResult out;
  out.centers = seed_plus_plus(rows, k, rng);
  out.assignment.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k);
  nn::Matrix sums(k, d);
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out.assignment[i] = nearest(rows.row(i), out.centers, &dist[i]);
      obj += dist[i];
    }
    obj /= static_cast<double>(n);
    const bool has_prev = !out.objective.empty();
    const double prev = has_prev ? out.objective.back() : 0.0;
    out.objective.push_back(obj);
    if (obj == 0.0) break;
    if (has_prev && prev - obj <= rel_tol * prev) break;
    if (it + 1 == max_iters) break;

    sums.fill(0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t a = out.assignment[i];
      kernels::axpy(1.0, rows.row(i), sums.row(a), d);
      ++counts[a];
    }
    std::vector<std::size_t> order;  // points by descending error, for empty clusters
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        const double inv = 1.0 / static_cast<double>(counts[c]);
        for (std::size_t j = 0; j < d; ++j) out.centers(c, j) = sums(c, j) * inv;
        continue;
      }
      if (order.empty()) {
        order.resize(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
      }
      const std::size_t p = order.front();
      order.erase(order.begin());
      std::copy_n(rows.row(p), d, out.centers.row(c));
      dist[p] = 0.0;
    }
  }
  return out;
}

}  // namespace detail

std::uint64_t corpus_hash(const nn::Matrix& tokens) {
  return Fnv1a().u64(tokens.rows()).u64(tokens.cols()).doubles(tokens.span()).value();
}

Codebook build_codebook(const nn::Matrix& tokens, std::size_t k, std::uint64_t seed,
                        const KMeansConfig& cfg) {
  auto res = detail::kmeans(tokens, k, seed, cfg.max_iters, cfg.rel_tol);
  Codebook cb;
  cb.codewords = std::move(res.centers);
  cb.build_seed = seed;
  cb.source_hash = corpus_hash(tokens);
  cb.objective = std::move(res.objective);
  return cb;
}

std::size_t assign_codeword(std::span<const double> token, const Codebook& codebook) {
  if (token.size() != codebook.length()) {
    throw ShapeError("assign_codeword: token length " + std::to_string(token.size()) +
                     " does not match codebook length " + std::to_string(codebook.length()));
  }
  if (codebook.size() == 0) throw SizeError("assign_codeword: empty codebook");
  return detail::nearest(token.data(), codebook.codewords);
}

Datastore build_datastore(const nn::Matrix& full_tokens, double rho, const Codebook& codebook) {
  if (full_tokens.cols() != codebook.length()) {
    throw ShapeError("build_datastore: token length does not match codebook");
  }
  Datastore ds;
  ds.full_len = full_tokens.cols();
  ds.prefix_len = codec::prefix_length(ds.full_len, rho);
  ds.keep_ratio = rho;
  const std::size_t n = full_tokens.rows();
  ds.keys = nn::Matrix(n, ds.prefix_len);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(full_tokens.row(i), ds.prefix_len, ds.keys.row(i));
    ds.labels[i] = detail::nearest(full_tokens.row(i), codebook.codewords);
  }
  return ds;
}

}  // namespace semtok::memory
