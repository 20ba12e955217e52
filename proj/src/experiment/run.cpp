#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "semtok/error.hpp"
#include "semtok/experiment.hpp"
#include "semtok/seed.hpp"

namespace semtok::experiment {

namespace fs = std::filesystem;
using pipeline::Path;
using pipeline::SystemState;

Datasets load_datasets(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& d = cfg.dataset;
  Datasets out;
  data::TextureSpec base = d.texture;
  base.size = d.size;
  base.channels = cfg.codec.channels;
  data::TextureSpec shifted = data::TextureSpec::shifted();
  shifted.size = d.size;
  shifted.channels = cfg.codec.channels;
  if (d.kind == "synthetic") {
    out.train = data::synthetic_textures(d.train, base, derive_seed(seed, 1));
    out.test = data::synthetic_textures(d.test, d.shift_test ? shifted : base, derive_seed(seed, 2));
    if (cfg.evolution.enabled) {
      out.stream = data::synthetic_textures(d.stream, d.shift_stream ? shifted : base, derive_seed(seed, 3));
    }
    return out;
  }
  const fs::path root(d.path);
  if (fs::is_directory(root / "train")) {
    out.train = data::load_image_dir((root / "train").string(), d.size);
    if (!fs::is_directory(root / "test")) throw IoError("'" + d.path + "' has train/ but no test/");
    out.test = data::load_image_dir((root / "test").string(), d.size);
  } else {
    auto all = data::load_image_dir(d.path, d.size);
    if (all.size() < d.train + d.test) {
      throw SizeError("'" + d.path + "' holds " + std::to_string(all.size()) + " images, need " +
                      std::to_string(d.train + d.test));
    }
    out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(d.train));
    out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(d.train),
                    all.begin() + static_cast<std::ptrdiff_t>(d.train + d.test));
  }
  if (out.train.size() > d.train) out.train.resize(d.train);
  if (out.test.size() > d.test) out.test.resize(d.test);
  if (cfg.evolution.enabled) {
    out.stream.assign(out.test.begin(), out.test.begin() + static_cast<std::ptrdiff_t>(std::min(d.stream, out.test.size())));
  }
  return out;
}

namespace {

pipeline::TrainHyper train_hyper(const ExperimentConfig& cfg, const StageHyper& s, std::uint64_t seed) {
  pipeline::TrainHyper h;
  h.epochs = s.epochs;
  h.batch_size = s.batch_size;
  h.lr = s.lr;
  h.seed = seed;
  h.snr = cfg.train_snr;
  h.link = cfg.link;
  return h;
}

bool checkpoint_matches(const fs::path& dir, const std::string& hash) {
  std::ifstream is(dir / "manifest.json");
  if (!is) return false;
  try {
    return nlohmann::json::parse(is).value("config_hash", "") == hash;
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const RunOptions& opt) : cfg_(cfg), opt_(opt), hash_(cfg.hash()) {}

  void log(const std::string& msg) const {
    if (opt_.progress) opt_.progress(msg);
  }

  // Loads the checkpoint at `dir` when it was produced by this config,
  // otherwise runs `make` and saves its result there.
  template <typename Make>
  SystemState stage(const std::string& name, const fs::path& dir, Make&& make) {
    if (checkpoint_matches(dir, hash_)) {
      log(name + ": resumed from " + dir.string());
      return pipeline::load_checkpoint(dir.string());
    }
    log(name + ": running");
    try {
      SystemState s = make();
      pipeline::save_checkpoint(s, dir.string(), hash_);
      return s;
    } catch (const Error& e) {
      throw StageError(name + " failed: " + e.what());
    }
  }

  MetricsReport run_seed(std::uint64_t seed) {
    const fs::path root = fs::path(cfg_.output_dir) / ("seed_" + std::to_string(seed));
    const Datasets data = load_datasets(cfg_, seed);
    MetricsReport rep;

    SystemState s1 = stage("stage 1", root / "stage1", [&] {
      return pipeline::train_stage1(data.train, cfg_.codec, train_hyper(cfg_, cfg_.stage1, derive_seed(seed, 11)));
    });
    if (opt_.goal == Goal::kStage1) return rep;

    SystemState s2 = stage("stage 2", root / "stage2", [&] {
      pipeline::MemoryHyper mh = cfg_.memory;
      mh.seed = derive_seed(seed, 12);
      auto s = pipeline::train_stage2(s1.clone(), data.train, cfg_.rho, mh);
      s.recovery = cfg_.recovery;
      return s;
    });
    if (opt_.goal == Goal::kStage2) return rep;

    // The zero-padding baseline gets the same stage-3 budget, batches and channels.
    const auto h3 = train_hyper(cfg_, cfg_.stage3, derive_seed(seed, 13));
    SystemState s3 = stage("stage 3", root / "stage3", [&] { return pipeline::train_stage3(s2.clone(), data.train, h3); });
    SystemState trunc = stage("truncation baseline", root / "baseline", [&] {
      SystemState b = s1.clone();
      b.rho = cfg_.rho;
      return pipeline::train_stage3(std::move(b), data.train, h3, {false, false});
    });
    if (opt_.goal == Goal::kStage3) return rep;

    log("evaluation");
    pipeline::EvalOptions eo;
    eo.snr_db = cfg_.snr_db;
    eo.seeds = {seed};
    eo.link = cfg_.link;
    eo.batch_size = cfg_.eval_batch;
    eo.modes = {Path::kFull};
    rep.append(pipeline::evaluate(s1, data.test, eo));
    eo.modes = {Path::kTruncated};
    eo.rho = cfg_.rho;
    rep.append(pipeline::evaluate(trunc, data.test, eo));
    eo.modes = {Path::kMemory};
    rep.append(pipeline::evaluate(s3, data.test, eo));

    if (opt_.goal == Goal::kEvolve) {
      if (!cfg_.evolution.enabled) throw ValidationError("evolution.enabled", "evolution is disabled in this config");
      log("evolution");
      pipeline::EvolutionSchedule sched;
      sched.interval = cfg_.evolution.interval;
      sched.shuffle = cfg_.evolution.shuffle;
      sched.order_seed = derive_seed(seed, 16);
      pipeline::EvolveOptions vo;
      vo.memory = cfg_.memory;
      vo.memory.seed = derive_seed(seed, 15);
      vo.finetune = train_hyper(cfg_, cfg_.stage3, derive_seed(seed, 14));
      vo.eval = eo;
      vo.final_update = cfg_.evolution.final_update;
      try {
        auto res = pipeline::evolve(s3, data.stream, sched, data.train, vo);
        pipeline::save_checkpoint(res.state, (root / "evolved").string(), hash_);
        rep.append(res.report);
      } catch (const Error& e) {
        throw StageError(std::string("evolution failed: ") + e.what());
      }
    }
    return rep;
  }

 private:
  const ExperimentConfig& cfg_;
  const RunOptions& opt_;
  std::string hash_;
};

}  // namespace

MetricsReport run(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(cfg.output_dir);
  {
    std::ofstream os(fs::path(cfg.output_dir) / "config.json");
    os << nlohmann::json{{"config_hash", cfg.hash()}, {"config", nlohmann::json::parse(cfg.canonical())}}.dump(2)
       << "\n";
    if (!os) throw IoError("cannot write to '" + cfg.output_dir + "'");
  }
  Runner runner(cfg, opt);
  MetricsReport rep;
  rep.config_hash = cfg.hash();
  for (std::uint64_t seed : cfg.seeds) rep.append(runner.run_seed(seed));
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (opt.goal == Goal::kEvaluate || opt.goal == Goal::kEvolve) {
    rep.write_csv((fs::path(cfg.output_dir) / "report.csv").string());
  }
  return rep;
}

std::vector<PlotSeries> plot_series(const MetricsReport& report, const std::string& axis) {
  if (axis != "snr" && axis != "cbr") throw ValidationError("axis", "unknown axis '" + axis + "' (expected snr or cbr)");
  if (report.rows.empty()) throw SizeError("plot data: empty report");
  static const std::vector<std::pair<std::string, std::string>> kNames = {
      {"full", "full-token"},
      {"truncated", "truncated-no-memory"},
      {"memory", "truncated-with-memory"},
      {"evolved", "evolved"},
      {"frozen", "frozen"}};
  std::vector<std::string> modes;
  for (const auto& [m, _] : kNames) modes.push_back(m);
  std::vector<std::string> extra;
  for (const auto& r : report.rows) {
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end() &&
        std::find(extra.begin(), extra.end(), r.mode) == extra.end()) {
      extra.push_back(r.mode);
    }
  }
  std::sort(extra.begin(), extra.end());
  modes.insert(modes.end(), extra.begin(), extra.end());

  std::vector<PlotSeries> out;
  for (const auto& mode : modes) {
    std::map<double, std::vector<const MetricsRow*>> by_x;
    for (const auto& r : report.rows) {
      if (r.mode == mode) by_x[axis == "snr" ? r.snr_db : r.cbr].push_back(&r);
    }
    if (by_x.empty()) continue;
    PlotSeries s;
    s.mode = mode;
    s.name = mode;
    for (const auto& [m, name] : kNames) {
      if (m == mode) s.name = name;
    }
    for (const auto& [x, rows] : by_x) {
      PlotPoint p;
      p.x = x;
      p.rows = rows.size();
      if (rows.size() == 1) {
        p.y = rows.front()->psnr_mean;
        p.std = rows.front()->psnr_std;
      } else {
        for (const auto* r : rows) p.y += r->psnr_mean;
        p.y /= static_cast<double>(rows.size());
        double ss = 0.0;
        for (const auto* r : rows) ss += (r->psnr_mean - p.y) * (r->psnr_mean - p.y);
        p.std = std::sqrt(ss / static_cast<double>(rows.size() - 1));
      }
      s.points.push_back(p);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void emit_plot_data(const MetricsReport& report, const std::string& axis, const std::string& path) {
  const auto series = plot_series(report, axis);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  os << "series,mode," << (axis == "snr" ? "snr_db" : "cbr") << ",psnr_mean,psnr_std,rows\n";
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      os << s.name << ',' << s.mode << ',' << format_number(p.x) << ',' << format_number(p.y) << ','
         << format_number(p.std) << ',' << p.rows << "\n";
    }
  }
  if (!os) throw IoError("write to '" + path + "' failed");
}

}  // namespace semtok::experiment
