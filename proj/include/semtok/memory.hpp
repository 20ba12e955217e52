#pragma once
// Parametric memory: a k-means codebook over full tokens, a datastore of
// truncated tokens labelled with their full token's nearest codeword, kNN
// teacher distributions, and a small decoder-only transformer that maps a
// zero-padded truncated token to a distribution over codewords.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semtok/nn/layers.hpp"

namespace semtok::memory {

using nn::Matrix;

// ---------------------------------------------------------------------------
// Codebook

struct KMeansConfig {
  std::size_t max_iters = 50;
  double rel_tol = 1e-5;  // stop when the objective improves by less than this fraction
};

struct Codebook {
  Matrix codewords;  // K x L
  std::uint64_t build_seed = 0;
  std::uint64_t source_hash = 0;
  // Mean squared quantization error after each assignment step.
  std::vector<double> objective;

  std::size_t size() const { return codewords.rows(); }
  std::size_t length() const { return codewords.cols(); }
};

// Hash identifying a token corpus (shape and exact values).
std::uint64_t corpus_hash(const Matrix& tokens);

// k-means with k-means++ seeding. Throws SizeError when rows < k.
Codebook build_codebook(const Matrix& tokens, std::size_t k, std::uint64_t seed,
                        const KMeansConfig& cfg = {});

// Nearest codeword by Euclidean distance; ties go to the lowest index.
std::size_t assign_codeword(std::span<const double> token, const Codebook& codebook);

// ---------------------------------------------------------------------------
// Datastore

struct Datastore {
  Matrix keys;  // N x L_p truncated tokens
  std::vector<std::uint32_t> labels;
  std::size_t prefix_len = 0;
  std::size_t full_len = 0;
  double keep_ratio = 1.0;

  std::size_t size() const { return labels.size(); }
};

Datastore build_datastore(const Matrix& full_tokens, double rho, const Codebook& codebook);

// ---------------------------------------------------------------------------
// Neighbor search

struct Neighbor {
  std::uint32_t id;
  double dist;  // squared Euclidean (approximate in IVF-PQ mode)
};

enum class IndexMode { kExact, kIvfPq };

struct IndexConfig {
  IndexMode mode = IndexMode::kExact;
  std::size_t nlist = 2048;    // coarse partitions
  std::size_t code_size = 32;  // PQ sub-quantizers (bytes per code)
  std::size_t nprobe = 32;
  std::uint64_t seed = 0;
};

class NeighborIndex {
 public:
  virtual ~NeighborIndex() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t dim() const = 0;
  // k nearest stored rows, ascending by distance (ties by id).
  virtual std::vector<Neighbor> search(std::span<const double> query, std::size_t k) const = 0;
  // Batched search; row i of the result answers row i of `queries`.
  virtual std::vector<std::vector<Neighbor>> search_batch(const Matrix& queries, std::size_t k) const;
};

std::unique_ptr<NeighborIndex> build_knn_index(const Datastore& store, const IndexConfig& cfg);
std::unique_ptr<NeighborIndex> build_knn_index(const Matrix& rows, const IndexConfig& cfg);

// ---------------------------------------------------------------------------
// Teacher distributions

struct TeacherDistribution {
  std::vector<std::uint32_t> labels;  // ascending, unique
  std::vector<double> probs;          // aligned with labels, sums to 1
  std::int64_t query_id = -1;

  std::vector<double> dense(std::size_t k) const;
};

// p(c) proportional to sum over the k retrieved neighbors with label c of
// exp(-d_i / tau). With exclude_id set, that datastore entry is skipped.
TeacherDistribution teacher_distribution(std::span<const double> query, const NeighborIndex& index,
                                         const std::vector<std::uint32_t>& labels, std::size_t k,
                                         double tau, std::optional<std::uint32_t> exclude_id = {});
TeacherDistribution teacher_from_neighbors(const std::vector<Neighbor>& neighbors,
                                           const std::vector<std::uint32_t>& labels, double tau,
                                           std::int64_t query_id = -1);

// One teacher per datastore entry, each excluding the entry itself.
std::vector<TeacherDistribution> build_teachers(const Datastore& store, const NeighborIndex& index,
                                                std::size_t k, double tau);

// ---------------------------------------------------------------------------
// Memory network

struct MemoryNetConfig {
  std::size_t token_len = 16;
  std::size_t codebook_size = 256;
  std::size_t dim = 64;
  std::size_t blocks = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;

  static MemoryNetConfig desk(std::size_t token_len, std::size_t codebook_size);
  // GPT-2 small widths (768, 12 heads) with three blocks.
  static MemoryNetConfig paper(std::size_t token_len, std::size_t codebook_size);
  void validate() const;
  std::string canonical() const;
};

class MemoryNet {
 public:
  MemoryNet(const MemoryNetConfig& cfg, std::uint64_t seed);
  MemoryNet(const MemoryNet&) = delete;
  MemoryNet& operator=(const MemoryNet&) = delete;
  MemoryNet(MemoryNet&&) = default;
  MemoryNet& operator=(MemoryNet&&) = default;

  const MemoryNetConfig& config() const { return cfg_; }
  // tokens: n x L (zero-padded truncated tokens) -> n x K logits.
  nn::Var logits(nn::Graph& g, const nn::Var& tokens) const;
  // Softmax-normalized codeword distribution for one token.
  std::vector<double> forward(std::span<const double> token) const;
  Matrix probabilities(const Matrix& tokens) const;

  const nn::ParamList& params() const { return params_; }
  MemoryNet clone() const;

  // Overwrites transformer-block weights from a parameter blob whose entries
  // are named "block<i>.<...>" with matching shapes.
  void load_pretrained_blocks(std::istream& is);

 private:
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::Linear qkv, proj;
    nn::Mlp mlp;
  };

  MemoryNetConfig cfg_;
  std::uint64_t seed_;
  nn::Linear embed_;  // scalar -> dim
  nn::Var positions_;  // L x dim
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
  nn::ParamList params_;
  nn::ParamList block_params_;
};

// Expectation of the codewords under `probs`. Throws DistributionError when
// probs is not a distribution over the codebook.
std::vector<double> recover_token(std::span<const double> probs, const Codebook& codebook);

// alpha * KL(p_t || p_m) + (1 - alpha) * CE(p_m, target); logs floored at 1e-12.
double memory_loss(std::span<const double> p_m, std::span<const double> p_t, std::size_t target,
                   double alpha);

struct MemoryTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 256;
  double lr = 1e-4;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
};

struct MemoryTrainResult {
  std::vector<double> epoch_loss;
  double accuracy = 0.0;  // top-1 agreement with datastore labels after training
};

// Trains on zero-padded datastore keys (or `inputs`, same row count, when the
// caller supplies channel-corrupted prefixes). Throws SizeError when teachers
// are not aligned with the datastore.
MemoryTrainResult train_memory(MemoryNet& net, const Datastore& store,
                               const std::vector<TeacherDistribution>& teachers,
                               const MemoryTrainConfig& cfg, const Matrix* inputs = nullptr);

// Zero-pads an N x L_p matrix to N x L.
Matrix pad_rows(const Matrix& prefixes, std::size_t full_len);

// Top-1 agreement of the net's argmax with datastore labels.
double label_accuracy(const MemoryNet& net, const Datastore& store, const Matrix* inputs = nullptr);

// ---------------------------------------------------------------------------
// Persistence: binary blobs with a JSON manifest alongside.

void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);
void save_datastore(const Datastore& ds, const std::string& path);
Datastore load_datastore(const std::string& path);
void save_teachers(const std::vector<TeacherDistribution>& t, const std::string& path);
std::vector<TeacherDistribution> load_teachers(const std::string& path);

}  // namespace semtok::memory
