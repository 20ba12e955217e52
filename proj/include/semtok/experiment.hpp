#pragma once
// Declarative experiments: YAML config loading and validation, dataset
// ingestion, stage orchestration with resumable checkpoints, and plot data.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "semtok/codec.hpp"
#include "semtok/dataset.hpp"
#include "semtok/metrics.hpp"
#include "semtok/pipeline.hpp"

namespace semtok::experiment {

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | directory
  std::string path;                // directory kind: train images; test images in path + "/test" if present
  std::size_t size = 32;
  std::size_t train = 512;
  std::size_t test = 128;
  std::size_t stream = 100;        // evolution stream length
  bool shift_test = false;         // test split drawn from the shifted texture statistics
  bool shift_stream = true;        // evolution stream drawn from the shifted statistics
  data::TextureSpec texture;
};

struct StageHyper {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double lr = 1e-4;
};

struct EvolutionSpec {
  bool enabled = false;
  double interval = 0.2;
  bool final_update = true;
  bool shuffle = false;
};

struct ExperimentConfig {
  std::string preset = "desk";
  DatasetSpec dataset;
  codec::CodecConfig codec;
  double rho = 0.25;
  std::vector<double> snr_db{0.0, 5.0, 10.0, 15.0, 20.0};
  pipeline::SnrPolicy train_snr;
  channel::LinkConfig link;
  pipeline::MemoryHyper memory;
  pipeline::Recovery recovery = pipeline::Recovery::kReplace;
  StageHyper stage1;
  StageHyper stage3;
  EvolutionSpec evolution;
  std::vector<std::uint64_t> seeds{0};
  std::size_t eval_batch = 32;
  std::string output_dir = "runs/default";

  // Preset defaults before any file overrides.
  static ExperimentConfig defaults(const std::string& preset);
  // Throws ValidationError naming the offending key.
  void validate() const;
  // Canonical JSON of every field that affects results (output_dir excluded).
  std::string canonical() const;
  std::string hash() const;
};

ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const std::string& yaml_text);

struct Datasets {
  pipeline::Dataset train;
  pipeline::Dataset test;
  pipeline::Dataset stream;
};
Datasets load_datasets(const ExperimentConfig& cfg, std::uint64_t seed);

enum class Goal { kStage1, kStage2, kStage3, kEvaluate, kEvolve };

struct RunOptions {
  Goal goal = Goal::kEvaluate;
  std::function<void(const std::string&)> progress;  // optional log sink
};

// Executes the stages needed for `goal` for every seed. Completed stages with
// a matching config hash are loaded from their checkpoint instead of rerun.
// The report is written to <output_dir>/report.csv when evaluation runs.
MetricsReport run(const ExperimentConfig& cfg, const RunOptions& opt = {});

// One series per mode; x comes from the axis column ("snr" or "cbr"), y is
// the mean PSNR with its std. Seeds at the same x are averaged.
struct PlotPoint {
  double x = 0.0;
  double y = 0.0;
  double std = 0.0;
  std::size_t rows = 0;
};
struct PlotSeries {
  std::string name;
  std::string mode;
  std::vector<PlotPoint> points;
};
std::vector<PlotSeries> plot_series(const MetricsReport& report, const std::string& axis);
void emit_plot_data(const MetricsReport& report, const std::string& axis, const std::string& path);

}  // namespace semtok::experiment
