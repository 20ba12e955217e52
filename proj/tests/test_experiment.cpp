#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "semtok/error.hpp"
#include "semtok/experiment.hpp"

using namespace semtok;
using namespace semtok::experiment;
namespace fs = std::filesystem;

namespace {

std::string key_of(const std::string& yaml) {
  try {
    parse_config(yaml);
  } catch (const ValidationError& e) {
    return e.key();
  }
  return "";
}

const char* kTiny = R"(
version: 1
rho: 0.25
snr_db: [5, 15]
seeds: [3]
dataset: {size: 8, train: 12, test: 4, stream: 10}
codec: {dims: [8, 12], depths: [1, 1], heads: [2, 2], token_len: 8, mlp_ratio: 2}
memory: {codebook_size: 8, neighbors: 8, dim: 8, blocks: 1, heads: 2, epochs: 1, batch_size: 64}
stage1: {epochs: 2, batch_size: 4}
stage3: {epochs: 1, batch_size: 4}
evolution: {enabled: true, interval: 0.5}
)";

}  // namespace

TEST_CASE("psnr closed form") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto x = oracle::uniform(10 + i, rng, 0, 255);
    const auto y = oracle::uniform(10 + i, rng, 0, 255);
    CHECK(std::abs(compute_psnr(x, y) - oracle::psnr255(x, y)) <= 1e-9);
  }
  const std::vector<double> a(16, 0.0), b(16, 255.0);
  CHECK(compute_psnr(a, b) == doctest::Approx(0.0));
  std::vector<double> c(16, 0.0);
  for (auto& v : c) v = 255.0 / std::pow(10.0, 1.5);  // MSE = 255^2 / 1000
  CHECK(compute_psnr(a, c) == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(std::isinf(compute_psnr(a, a)));
  Image p(2, 2, 3, 0.5), q(2, 2, 3, 0.5);
  q.pixels[0] = 0.6;
  CHECK(image_psnr(p, q) == doctest::Approx(oracle::psnr255({127.5}, {153.0}) + 10 * std::log10(12.0)));
  CHECK_THROWS(compute_psnr(std::vector<double>(3), std::vector<double>(4)));
}

TEST_CASE("numbers format and parse losslessly") {
  std::mt19937_64 rng(2);
  for (double v : oracle::uniform(200, rng, -1e6, 1e6)) CHECK(parse_number(format_number(v)) == v);
  CHECK(format_number(INFINITY) == "inf");
  CHECK(format_number(-INFINITY) == "-inf");
  CHECK(std::isnan(parse_number(format_number(NAN))));
  CHECK(std::isinf(parse_number("inf")));
}

TEST_CASE("metrics reports round-trip through csv") {
  const fs::path dir = fs::temp_directory_path() / "semtok_report_test";
  fs::create_directories(dir);
  MetricsReport rep;
  rep.config_hash = "feed";
  rep.rows.push_back({"joint", 0, 10.0, 1.0 / 24, 0.25, 1, "memory", 21.5, 0.75, 128});
  rep.rows.push_back({"joint", 2, 5.0, 1.0 / 24, 0.25, 2, "truncated", INFINITY, 0.0, 128});
  const std::string path = (dir / "r.csv").string();
  rep.write_csv(path);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "stage,round,snr_db,cbr,rho,seed,mode,psnr_mean,psnr_std,n_samples");
  const auto back = MetricsReport::read_csv(path);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[0].cbr == rep.rows[0].cbr);
  CHECK(back.rows[1].round == 2);
  CHECK(std::isinf(back.rows[1].psnr_mean));
  CHECK(back.config_hash == "feed");
  fs::remove_all(dir);
}

TEST_CASE("plot data has one series per mode and averages seeds") {
  MetricsReport rep;
  for (std::uint64_t seed : {0, 1})
    for (double snr : {0.0, 10.0})
      for (const char* mode : {"full", "memory"})
        rep.rows.push_back({"joint", 0, snr, 0.04, 0.25, seed, mode, 20.0 + snr + seed, 0.1, 8});
  const auto series = plot_series(rep, "snr");
  REQUIRE(series.size() == 2);
  CHECK(series[0].name == "full-token");
  CHECK(series[1].name == "truncated-with-memory");
  REQUIRE(series[0].points.size() == 2);
  CHECK(series[0].points[1].x == 10.0);
  CHECK(series[0].points[1].y == 30.5);
  CHECK(series[0].points[1].rows == 2);
  const auto by_cbr = plot_series(rep, "cbr");
  CHECK(by_cbr[0].points.size() == 1);
  CHECK_THROWS_AS(plot_series(rep, "rho"), ValidationError);
}

TEST_CASE("paper preset carries the published hyperparameters") {
  const auto c = ExperimentConfig::defaults("paper");
  CHECK(c.codec.dims == std::vector<std::size_t>{128, 192, 256});
  CHECK(c.codec.token_len == 48);
  CHECK(c.memory.codebook_size == 10240);
  CHECK(c.memory.neighbors == 512);
  CHECK(c.memory.tau == 8.0);
  CHECK(c.memory.alpha == 0.5);
  CHECK(c.memory.index.mode == memory::IndexMode::kIvfPq);
  CHECK(c.memory.index.nlist == 2048);
  CHECK(c.memory.index.code_size == 32);
  CHECK(c.memory.index.nprobe == 32);
  CHECK(c.memory.epochs == 100);
  CHECK(c.memory.batch_size == 1024);
  CHECK(c.memory.lr == 1e-4);
  CHECK(c.stage1.epochs == 500);
  CHECK(c.stage1.batch_size == 32);
  CHECK(c.stage1.lr == 1e-4);
  CHECK(c.stage3.lr == 5e-5);
  CHECK(c.dataset.size == 64);
  CHECK_THROWS_AS(ExperimentConfig::defaults("huge"), ValidationError);
}

TEST_CASE("config validation names the offending key") {
  CHECK(key_of("rho: 1.5") == "rho");
  CHECK(key_of("rho: 0") == "rho");
  CHECK(key_of("bogus: 1") == "bogus");
  CHECK(key_of("memory: {tua: 8}") == "memory.tua");
  CHECK(key_of("memory: {index: {mode: hnsw}}") == "memory.index.mode");
  CHECK(key_of("memory: {tau: -1}") == "memory.tau");
  CHECK(key_of("dataset: {size: 30}") == "dataset.size");
  CHECK(key_of("recovery: blend") == "recovery");
  CHECK(key_of("version: 2") == "version");
  CHECK(key_of("rho: [1, 2]") == "rho");
  CHECK(key_of("train_snr: {policy: random, choices: []}") == "train_snr");
  CHECK(key_of("rho: 0.5\nseeds: [1, 2]") == "");
}

TEST_CASE("train snr accepts a number, random, or a mapping") {
  CHECK(parse_config("train_snr: 7").train_snr.fixed_db == 7.0);
  CHECK_FALSE(parse_config("train_snr: 7").train_snr.random);
  CHECK(parse_config("train_snr: random").train_snr.random);
  const auto c = parse_config("train_snr: {policy: random, choices: [1, 2]}");
  CHECK(c.train_snr.choices == std::vector<double>{1, 2});
}

TEST_CASE("config hash is stable and ignores the output directory") {
  const auto a = parse_config(kTiny);
  const auto b = parse_config(kTiny);
  CHECK(a.hash() == b.hash());
  CHECK(a.canonical() == b.canonical());
  auto c = a;
  c.output_dir = "elsewhere";
  CHECK(c.hash() == a.hash());
  c.rho = 0.5;
  CHECK(c.hash() != a.hash());
  CHECK(parse_config("preset: desk").hash() == ExperimentConfig::defaults("desk").hash());
}

TEST_CASE("shipped configs load") {
  for (const char* name : {"desk.yaml", "paper.yaml", "smoke.yaml"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_config(std::string(SEMTOK_SOURCE_DIR) + "/configs/" + name));
  }
  CHECK_THROWS_AS(load_config("/nonexistent.yaml"), IoError);
}

TEST_CASE("synthetic textures are seed-deterministic and in range") {
  data::TextureSpec spec;
  const auto a = data::synthetic_textures(4, spec, 9);
  const auto b = data::synthetic_textures(4, spec, 9);
  const auto c = data::synthetic_textures(4, spec, 10);
  CHECK(a[3].pixels == b[3].pixels);
  CHECK(a[0].pixels != c[0].pixels);
  for (const auto& img : a) {
    CHECK(img.height == 32);
    for (double v : img.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  auto bad = spec;
  bad.sigma_min = 5;
  bad.sigma_max = 1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("ppm images round-trip and directories load in order") {
  const fs::path dir = fs::temp_directory_path() / "semtok_ppm_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto imgs = data::synthetic_textures(3, {}, 1);
  for (std::size_t i = 0; i < 3; ++i) data::write_ppm(imgs[i], (dir / ("img" + std::to_string(i) + ".ppm")).string());
  const auto back = data::load_image_dir(dir.string(), 32);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < imgs[1].size(); ++i) CHECK(std::abs(back[1].pixels[i] - imgs[1].pixels[i]) <= 0.5 / 255 + 1e-12);
  CHECK_THROWS_AS(data::load_image_dir(dir.string(), 64), GeometryError);
  std::ofstream(dir / "broken.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(data::load_image_dir(dir.string(), 32), IoError);
  fs::remove_all(dir);
}

TEST_CASE("experiments run end to end and resume from checkpoints") {
  const fs::path dir = fs::temp_directory_path() / "semtok_run_test";
  fs::remove_all(dir);
  auto cfg = parse_config(kTiny);
  cfg.output_dir = dir.string();
  RunOptions opt;
  opt.goal = Goal::kEvolve;
  std::vector<std::string> log;
  opt.progress = [&](const std::string& m) { log.push_back(m); };
  const auto a = run(cfg, opt);
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "seed_3" / "stage3" / "manifest.json"));
  // 2 snrs x 3 modes, plus 2 chunks x 2 snrs x (evolved, frozen).
  CHECK(a.rows.size() == 6 + 8);

  log.clear();
  const auto b = run(cfg, opt);
  std::size_t resumed = 0;
  for (const auto& m : log) resumed += m.find("resumed") != std::string::npos;
  CHECK(resumed == 4);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].psnr_mean == b.rows[i].psnr_mean);

  const auto report = MetricsReport::read_csv((dir / "report.csv").string());
  CHECK(report.rows.size() == a.rows.size());
  CHECK(report.config_hash == cfg.hash());
  emit_plot_data(report, "snr", (dir / "plot.csv").string());
  std::ifstream is(dir / "plot.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) ++lines;
  CHECK(lines == 1 + 5 * 2);  // header + five modes at two SNRs
  fs::remove_all(dir);
}
