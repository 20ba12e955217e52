#pragma once
// Three-stage training, evaluation and online evolution of the full system:
// encode -> truncate -> MIMO channel -> zero-pad -> memory recovery -> decode.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "semtok/channel.hpp"
#include "semtok/codec.hpp"
#include "semtok/memory.hpp"
#include "semtok/metrics.hpp"

namespace semtok::pipeline {

using Dataset = std::vector<Image>;

enum class Stage { kBaseline, kMemoryTrained, kJoint };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);

// Full token replacement by the codebook expectation, or keep the received
// prefix and take only the suffix from the expectation.
enum class Recovery { kReplace, kSplice };

// SNR used by each training batch: one fixed value or a uniform draw from a set.
struct SnrPolicy {
  bool random = false;
  double fixed_db = 10.0;
  std::vector<double> choices{0.0, 5.0, 10.0, 15.0, 20.0};

  double draw(std::uint64_t seed) const;
  void validate() const;
};

struct TrainHyper {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  std::size_t max_steps = 0;  // 0: run all epochs
  double lr = 1e-4;
  double clip_norm = 0.0;
  std::uint64_t seed = 0;
  SnrPolicy snr;
  channel::LinkConfig link;  // snr_db is taken from the policy
};

struct MemoryHyper {
  std::size_t codebook_size = 256;
  std::size_t neighbors = 64;
  double tau = 8.0;
  double alpha = 0.5;
  std::size_t dim = 64;
  std::size_t blocks = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t epochs = 3;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool augment = false;  // feed channel-corrupted prefixes to the memory net
  bool warm_start = false;  // keep the current memory net instead of a fresh one
  memory::IndexConfig index;
  memory::KMeansConfig kmeans;
  std::string pretrained_blocks;  // optional parameter blob for the transformer blocks
};

struct SystemState {
  codec::TokenCodec codec;
  std::optional<memory::MemoryNet> memory_net;
  std::optional<memory::Codebook> codebook;
  Stage stage = Stage::kBaseline;
  double rho = 1.0;
  Recovery recovery = Recovery::kReplace;
  SnrPolicy snr;
  std::uint64_t seed = 0;
  std::size_t round = 0;

  SystemState(codec::TokenCodec c) : codec(std::move(c)) {}
  SystemState clone() const;
  // Throws StageError when the stage tag and artifacts disagree.
  void check() const;
};

struct TrainLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
  // Stage 2 diagnostics.
  std::size_t datastore_size = 0;
  std::uint64_t source_hash = 0;
  double memory_accuracy = 0.0;
  std::vector<double> memory_loss;
};

// Which signal path a forward pass takes.
enum class Path { kFull, kTruncated, kMemory };
std::string path_name(Path p);

struct ForwardOptions {
  Path path = Path::kFull;
  double rho = 1.0;
  channel::LinkConfig link;
  bool channel = true;  // false bypasses the channel entirely
};

// One forward pass over a batch; returns decoded pixels in patch-row layout.
// seeds[i] fixes the channel realization and noise for image i.
nn::Var system_forward(nn::Graph& g, const SystemState& state, const Dataset& batch,
                       const ForwardOptions& opt, const std::vector<std::uint64_t>& seeds);
std::vector<Image> reconstruct(const SystemState& state, const Dataset& batch, const ForwardOptions& opt,
                               const std::vector<std::uint64_t>& seeds);

// Stage 1: codec trained through the channel on full tokens.
SystemState train_stage1(const Dataset& train, const codec::CodecConfig& cfg, const TrainHyper& hyper,
                         TrainLog* log = nullptr);
// Continues stage-1 style training of an existing state (used for equal-budget comparisons).
void continue_stage1(SystemState& state, const Dataset& train, const TrainHyper& hyper, TrainLog* log = nullptr);

// Stage 2: frozen encoder -> tokens -> codebook, datastore, index, teachers -> memory net.
SystemState train_stage2(SystemState state, const Dataset& train, double rho, const MemoryHyper& hyper,
                         TrainLog* log = nullptr);

struct Stage3Options {
  bool use_memory = true;  // false: truncation with zero padding only
  bool train_memory_net = true;
};
// Stage 3: fine-tune the whole pipeline under truncation.
SystemState train_stage3(SystemState state, const Dataset& train, const TrainHyper& hyper,
                         const Stage3Options& opt = {}, TrainLog* log = nullptr);

struct EvalOptions {
  std::vector<double> snr_db{10.0};
  std::vector<std::uint64_t> seeds{0};
  std::vector<Path> modes{Path::kFull, Path::kTruncated, Path::kMemory};
  channel::LinkConfig link;
  std::size_t batch_size = 32;
  std::string stage_label;  // defaults to the state's stage name
  std::string mode_label;   // overrides the mode column when set
  std::optional<double> rho;  // defaults to the state's rho
};

// Rows = |snr| x |seeds| x |modes|, in that nesting order (snr outermost).
MetricsReport evaluate(const SystemState& state, const Dataset& data, const EvalOptions& opt);
// Per-image PSNR for one (mode, snr, seed) cell.
std::vector<double> psnr_per_image(const SystemState& state, const Dataset& data, Path path, double snr_db,
                                   std::uint64_t seed, const EvalOptions& opt);

struct EvolutionSchedule {
  double interval = 0.2;
  std::uint64_t order_seed = 0;
  bool shuffle = false;
  std::size_t rounds_completed = 0;
  std::vector<std::vector<std::size_t>> chunks;  // stream indices per round

  std::size_t chunk_count() const;
  // Fills `chunks` for a stream of n samples. Throws when a chunk would be empty.
  void partition(std::size_t n);
};

struct EvolveOptions {
  MemoryHyper memory;
  TrainHyper finetune;
  EvalOptions eval;        // snr/seed grid used for per-round PSNR (mode is memory)
  bool final_update = true;  // update after the last chunk for the deliverable model
  bool report_frozen = true;
};

struct EvolveResult {
  SystemState state;
  MetricsReport report;
  std::size_t metric_updates = 0;  // updates that precede an evaluated chunk
  std::size_t total_updates = 0;
  std::vector<std::uint64_t> codebook_hashes;  // source hash per round, round 0 first
  std::vector<double> evolved_psnr;  // mean PSNR per chunk
  std::vector<double> frozen_psnr;
};

EvolveResult evolve(const SystemState& state, const Dataset& stream, EvolutionSchedule& schedule,
                    const Dataset& train_set, const EvolveOptions& opt);

// Checkpoint directory: params, codebook, memory net and a JSON manifest.
// The manifest records `config_hash` so artifacts stay attributable to a run.
void save_checkpoint(const SystemState& state, const std::string& dir, const std::string& config_hash = "");
SystemState load_checkpoint(const std::string& dir);

// Encodes a dataset with the frozen encoder: (N*C) x L token rows.
nn::Matrix extract_tokens(const codec::TokenCodec& codec, const Dataset& data, std::size_t batch = 32);

}  // namespace semtok::pipeline
