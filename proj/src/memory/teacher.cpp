#include <algorithm>
#include <cmath>
#include <map>

#include "semtok/error.hpp"
#include "semtok/memory.hpp"

namespace semtok::memory {

std::vector<double> TeacherDistribution::dense(std::size_t k) const {
  std::vector<double> out(k, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw DistributionError("teacher label outside the codebook");
    out[labels[i]] = probs[i];
  }
  return out;
}

TeacherDistribution teacher_from_neighbors(const std::vector<Neighbor>& neighbors,
                                           const std::vector<std::uint32_t>& labels, double tau,
                                           std::int64_t query_id) {
  if (!(tau > 0.0)) throw ValidationError("tau", "temperature must be positive");
  if (neighbors.empty()) throw SizeError("teacher: no neighbors retrieved");
  double dmin = neighbors.front().dist;
  for (const auto& nb : neighbors) dmin = std::min(dmin, nb.dist);
  std::map<std::uint32_t, double> mass;
  double total = 0.0;
  for (const auto& nb : neighbors) {
    if (nb.id >= labels.size()) throw SizeError("teacher: neighbor id outside the datastore");
    // Shifting by the nearest distance leaves the normalized result unchanged.
    const double w = std::exp(-(nb.dist - dmin) / tau);
    mass[labels[nb.id]] += w;
    total += w;
  }
  TeacherDistribution t;
  t.query_id = query_id;
  for (const auto& [label, w] : mass) {
    t.labels.push_back(label);
    t.probs.push_back(w / total);
  }
  return t;
}

namespace {

std::vector<Neighbor> drop_self(std::vector<Neighbor> nbs, std::uint32_t self, std::size_t k) {
  auto it = std::find_if(nbs.begin(), nbs.end(), [&](const Neighbor& n) { return n.id == self; });
  if (it != nbs.end()) nbs.erase(it);
  if (nbs.size() > k) nbs.resize(k);
  return nbs;
}

void check_k(std::size_t k, std::size_t available) {
  if (k == 0) throw ValidationError("k", "neighbor count must be positive");
  if (k > available) {
    throw SizeError("teacher: k = " + std::to_string(k) + " exceeds the " + std::to_string(available) +
                    " available datastore entries");
  }
}

}  // namespace

TeacherDistribution teacher_distribution(std::span<const double> query, const NeighborIndex& index,
                                         const std::vector<std::uint32_t>& labels, std::size_t k,
                                         double tau, std::optional<std::uint32_t> exclude_id) {
  if (labels.size() != index.size()) throw SizeError("teacher: labels and index differ in size");
  check_k(k, index.size() - (exclude_id ? 1 : 0));
  if (!exclude_id) return teacher_from_neighbors(index.search(query, k), labels, tau);
  auto nbs = drop_self(index.search(query, k + 1), *exclude_id, k);
  return teacher_from_neighbors(nbs, labels, tau, *exclude_id);
}

std::vector<TeacherDistribution> build_teachers(const Datastore& store, const NeighborIndex& index,
                                                std::size_t k, double tau) {
  if (store.size() != index.size()) throw SizeError("teacher: datastore and index differ in size");
  check_k(k, store.size() - 1);
  auto all = index.search_batch(store.keys, k + 1);
  std::vector<TeacherDistribution> out(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto self = static_cast<std::uint32_t>(i);
    out[i] = teacher_from_neighbors(drop_self(std::move(all[i]), self, k), store.labels, tau, self);
  }
  return out;
}

}  // namespace semtok::memory
