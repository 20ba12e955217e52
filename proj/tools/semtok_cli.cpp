#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "semtok/error.hpp"
#include "semtok/experiment.hpp"

using namespace semtok;

namespace {

experiment::ExperimentConfig load(const std::string& path, const std::optional<std::uint64_t>& seed,
                                  const std::string& out) {
  auto cfg = experiment::load_config(path);
  if (seed) cfg.seeds = {*seed};
  if (!out.empty()) cfg.output_dir = out;
  cfg.validate();
  return cfg;
}

void print_rows(const MetricsReport& rep) { rep.write_csv(std::cout); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic token communication with a parametric memory network"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  app.add_option("--seed", seed, "Run a single seed instead of the config's seed list");
  app.add_option("--out", out, "Output directory (overrides output_dir)");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

  std::string config;
  auto* validate = app.add_subcommand("validate", "Check a config and print its resolved form and hash");
  validate->add_option("config", config, "YAML experiment config")->required();

  int stage = 3;
  auto* train = app.add_subcommand("train", "Run training stages up to --stage");
  train->add_option("config", config, "YAML experiment config")->required();
  train->add_option("--stage", stage, "Last stage to run (1, 2 or 3)")->check(CLI::IsMember({1, 2, 3}));

  auto* evolve = app.add_subcommand("evolve", "Train, evaluate and run online evolution");
  evolve->add_option("config", config, "YAML experiment config")->required();

  auto* eval = app.add_subcommand("eval", "Train (or resume) and evaluate; writes report.csv");
  eval->add_option("config", config, "YAML experiment config")->required();

  std::string report, axis = "snr", plot_out;
  auto* plot = app.add_subcommand("plot-data", "Turn a report into one series per mode");
  plot->add_option("report", report, "report.csv from eval or evolve")->required();
  plot->add_option("--axis", axis, "x axis: snr or cbr");
  plot->add_option("-o,--output", plot_out, "Output file (default: <report dir>/plot_<axis>.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    experiment::RunOptions ro;
    if (!quiet) ro.progress = [](const std::string& m) { std::cerr << "[semtok] " << m << "\n"; };
    if (*validate) {
      const auto cfg = load(config, seed, out);
      std::cout << "config_hash " << cfg.hash() << "\n" << cfg.canonical() << "\n";
    } else if (*train) {
      const auto cfg = load(config, seed, out);
      ro.goal = stage == 1 ? experiment::Goal::kStage1 : stage == 2 ? experiment::Goal::kStage2 : experiment::Goal::kStage3;
      experiment::run(cfg, ro);
    } else if (*eval) {
      const auto cfg = load(config, seed, out);
      ro.goal = experiment::Goal::kEvaluate;
      print_rows(experiment::run(cfg, ro));
    } else if (*evolve) {
      const auto cfg = load(config, seed, out);
      ro.goal = experiment::Goal::kEvolve;
      print_rows(experiment::run(cfg, ro));
    } else if (*plot) {
      const auto rep = MetricsReport::read_csv(report);
      if (plot_out.empty()) {
        const auto slash = report.find_last_of('/');
        const std::string dir = slash == std::string::npos ? "." : report.substr(0, slash);
        plot_out = dir + "/plot_" + axis + ".csv";
      }
      experiment::emit_plot_data(rep, axis, plot_out);
      std::cout << plot_out << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
