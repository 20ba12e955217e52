#include <algorithm>
#include <limits>
#include <queue>

#include "kmeans.hpp"
#include "semtok/error.hpp"
#include "semtok/kernels.hpp"
#include "semtok/memory.hpp"
#include "semtok/seed.hpp"

namespace semtok::memory {

namespace {

bool closer(const Neighbor& a, const Neighbor& b) {
  return a.dist < b.dist || (a.dist == b.dist && a.id < b.id);
}

// Bounded max-heap keeping the `cap` closest candidates.
class TopK {
 public:
  explicit TopK(std::size_t cap) : cap_(cap) { heap_.reserve(cap + 1); }
  double bound() const {
    return heap_.size() < cap_ ? std::numeric_limits<double>::infinity() : heap_.front().dist;
  }
  void push(std::uint32_t id, double dist) {
    if (cap_ == 0) return;
    Neighbor nb{id, dist};
    if (heap_.size() < cap_) {
      heap_.push_back(nb);
      std::push_heap(heap_.begin(), heap_.end(), closer);
    } else if (closer(nb, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), closer);
      heap_.back() = nb;
      std::push_heap(heap_.begin(), heap_.end(), closer);
    }
  }
  std::vector<Neighbor> sorted() && {
    std::sort(heap_.begin(), heap_.end(), closer);
    return std::move(heap_);
  }

 private:
  std::size_t cap_;
  std::vector<Neighbor> heap_;
};

void check_query(std::size_t got, std::size_t want) {
  if (got != want) {
    throw ShapeError("knn search: query has " + std::to_string(got) + " dims, index has " +
                     std::to_string(want));
  }
}

class ExactIndex final : public NeighborIndex {
 public:
  explicit ExactIndex(nn::Matrix rows) : rows_(std::move(rows)), norms_(rows_.rows()) {
    for (std::size_t i = 0; i < rows_.rows(); ++i) {
      norms_[i] = kernels::dot(rows_.row(i), rows_.row(i), rows_.cols());
    }
  }
  std::size_t size() const override { return rows_.rows(); }
  std::size_t dim() const override { return rows_.cols(); }

  std::vector<Neighbor> search(std::span<const double> q, std::size_t k) const override {
    check_query(q.size(), dim());
    TopK top(std::min(k, size()));
    for (std::size_t i = 0; i < size(); ++i) {
      top.push(static_cast<std::uint32_t>(i), kernels::sq_dist(q.data(), rows_.row(i), dim()));
    }
    return std::move(top).sorted();
  }

  // Screens candidates with the expanded form |q|^2 + |x|^2 - 2 q.x computed
  // by GEMM, then re-ranks a slightly larger candidate set with direct
  // distances so the answer matches search() exactly.
  std::vector<std::vector<Neighbor>> search_batch(const nn::Matrix& queries,
                                                  std::size_t k) const override {
    check_query(queries.cols(), dim());
    const std::size_t nq = queries.rows(), n = size(), d = dim();
    const std::size_t kk = std::min(k, n);
    const std::size_t cap = std::min(n, kk + 8 + kk / 4);
    std::vector<std::vector<Neighbor>> out(nq);
    if (kk == 0) return out;
    constexpr std::size_t kQ = 64, kN = 4096;
    nn::Matrix tile = nn::Matrix::uninit(kQ, kN);
    std::vector<TopK> tops;
    for (std::size_t q0 = 0; q0 < nq; q0 += kQ) {
      const std::size_t qb = std::min(kQ, nq - q0);
      tops.assign(qb, TopK(cap));
      for (std::size_t n0 = 0; n0 < n; n0 += kN) {
        const std::size_t nb = std::min(kN, n - n0);
        kernels::gemm(kernels::Trans::kNo, kernels::Trans::kYes, qb, nb, d, -2.0, queries.row(q0), d,
                      rows_.row(n0), d, 0.0, tile.data(), kN);
        for (std::size_t a = 0; a < qb; ++a) {
          const double* t = tile.data() + a * kN;
          TopK& top = tops[a];
          for (std::size_t b = 0; b < nb; ++b) {
            const double v = t[b] + norms_[n0 + b];
            if (v <= top.bound()) top.push(static_cast<std::uint32_t>(n0 + b), v);
          }
        }
      }
      for (std::size_t a = 0; a < qb; ++a) {
        auto cand = std::move(tops[a]).sorted();
        const double* q = queries.row(q0 + a);
        for (auto& c : cand) c.dist = kernels::sq_dist(q, rows_.row(c.id), d);
        std::sort(cand.begin(), cand.end(), closer);
        cand.resize(kk);
        out[q0 + a] = std::move(cand);
      }
    }
    return out;
  }

 private:
  nn::Matrix rows_;
  std::vector<double> norms_;
};

// Inverted file over a coarse k-means partition; residuals to the partition
// centroid are product-quantized with 8-bit sub-codes.
class IvfPqIndex final : public NeighborIndex {
 public:
  IvfPqIndex(const nn::Matrix& rows, const IndexConfig& cfg) : n_(rows.rows()), d_(rows.cols()) {
    if (n_ == 0) throw SizeError("ivfpq: empty datastore");
    nlist_ = std::clamp<std::size_t>(cfg.nlist, 1, n_);
    nprobe_ = std::clamp<std::size_t>(cfg.nprobe, 1, nlist_);
    // Sub-quantizer count: the largest divisor of the dimension not above code_size.
    m_ = 1;
    for (std::size_t m = std::min(cfg.code_size, d_); m >= 1; --m) {
      if (d_ % m == 0) {
        m_ = m;
        break;
      }
    }
    dsub_ = d_ / m_;
    ksub_ = std::min<std::size_t>(256, n_);

    auto coarse = detail::kmeans(rows, nlist_, derive_seed(cfg.seed, 1), kTrainIters, 0.0);
    centroids_ = std::move(coarse.centers);
    nn::Matrix resid(n_, d_);
    for (std::size_t i = 0; i < n_; ++i) {
      const double* c = centroids_.row(coarse.assignment[i]);
      for (std::size_t j = 0; j < d_; ++j) resid(i, j) = rows(i, j) - c[j];
    }
    codebooks_.reserve(m_);
    nn::Matrix sub(n_, dsub_);
    for (std::size_t s = 0; s < m_; ++s) {
      for (std::size_t i = 0; i < n_; ++i) std::copy_n(resid.row(i) + s * dsub_, dsub_, sub.row(i));
      codebooks_.push_back(detail::kmeans(sub, ksub_, derive_seed(cfg.seed, 2 + s), kTrainIters, 0.0).centers);
    }
    lists_.assign(nlist_, {});
    codes_.assign(nlist_, {});
    for (std::size_t i = 0; i < n_; ++i) {
      const std::uint32_t l = coarse.assignment[i];
      lists_[l].push_back(static_cast<std::uint32_t>(i));
      for (std::size_t s = 0; s < m_; ++s) {
        codes_[l].push_back(static_cast<std::uint8_t>(detail::nearest(resid.row(i) + s * dsub_, codebooks_[s])));
      }
    }
  }

  std::size_t size() const override { return n_; }
  std::size_t dim() const override { return d_; }

  std::vector<Neighbor> search(std::span<const double> q, std::size_t k) const override {
    check_query(q.size(), d_);
    TopK probe(nprobe_);
    for (std::size_t l = 0; l < nlist_; ++l) {
      probe.push(static_cast<std::uint32_t>(l), kernels::sq_dist(q.data(), centroids_.row(l), d_));
    }
    TopK top(std::min(k, n_));
    std::vector<double> resid(d_), lut(m_ * ksub_);
    for (const auto& p : std::move(probe).sorted()) {
      const auto& ids = lists_[p.id];
      if (ids.empty()) continue;
      const double* c = centroids_.row(p.id);
      for (std::size_t j = 0; j < d_; ++j) resid[j] = q[j] - c[j];
      for (std::size_t s = 0; s < m_; ++s) {
        for (std::size_t j = 0; j < ksub_; ++j) {
          lut[s * ksub_ + j] = kernels::sq_dist(resid.data() + s * dsub_, codebooks_[s].row(j), dsub_);
        }
      }
      const std::uint8_t* code = codes_[p.id].data();
      for (std::size_t e = 0; e < ids.size(); ++e, code += m_) {
        double dist = 0.0;
        for (std::size_t s = 0; s < m_; ++s) dist += lut[s * ksub_ + code[s]];
        top.push(ids[e], dist);
      }
    }
    return std::move(top).sorted();
  }

 private:
  static constexpr std::size_t kTrainIters = 25;
  std::size_t n_, d_, nlist_ = 1, nprobe_ = 1, m_ = 1, dsub_ = 1, ksub_ = 1;
  nn::Matrix centroids_;
  std::vector<nn::Matrix> codebooks_;
  std::vector<std::vector<std::uint32_t>> lists_;
  std::vector<std::vector<std::uint8_t>> codes_;
};

}  // namespace

std::vector<std::vector<Neighbor>> NeighborIndex::search_batch(const nn::Matrix& queries,
                                                               std::size_t k) const {
  std::vector<std::vector<Neighbor>> out(queries.rows());
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    out[i] = search(std::span<const double>(queries.row(i), queries.cols()), k);
  }
  return out;
}

std::unique_ptr<NeighborIndex> build_knn_index(const nn::Matrix& rows, const IndexConfig& cfg) {
  if (cfg.mode == IndexMode::kIvfPq) return std::make_unique<IvfPqIndex>(rows, cfg);
  return std::make_unique<ExactIndex>(rows);
}

std::unique_ptr<NeighborIndex> build_knn_index(const Datastore& store, const IndexConfig& cfg) {
  return build_knn_index(store.keys, cfg);
}

}  // namespace semtok::memory
