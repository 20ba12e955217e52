#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "semtok/dataset.hpp"
#include "semtok/error.hpp"
#include "semtok/pipeline.hpp"

using namespace semtok;
using namespace semtok::pipeline;
namespace fs = std::filesystem;

namespace {

codec::CodecConfig tiny() {
  codec::CodecConfig c;
  c.dims = {8, 12};
  c.depths = {1, 1};
  c.heads = {2, 2};
  c.window = 2;
  c.mlp_ratio = 2;
  c.patch = 2;
  c.token_len = 8;
  return c;
}

Dataset images(std::size_t n, std::uint64_t seed, bool shifted = false) {
  auto spec = shifted ? data::TextureSpec::shifted() : data::TextureSpec{};
  spec.size = 8;
  spec.sigma_min = std::min(spec.sigma_min, 1.0);
  spec.sigma_max = std::min(spec.sigma_max, 2.0);
  return data::synthetic_textures(n, spec, seed);
}

TrainHyper quick(std::size_t steps, std::uint64_t seed = 1) {
  TrainHyper h;
  h.epochs = 1000;
  h.max_steps = steps;
  h.batch_size = 4;
  h.lr = 3e-3;
  h.seed = seed;
  h.snr.fixed_db = 20.0;
  return h;
}

MemoryHyper small_memory(std::uint64_t seed = 2) {
  MemoryHyper m;
  m.codebook_size = 8;
  m.neighbors = 8;
  m.dim = 8;
  m.blocks = 1;
  m.heads = 2;
  m.mlp_ratio = 2;
  m.epochs = 2;
  m.batch_size = 64;
  m.seed = seed;
  return m;
}

// Shared trained artifacts for the heavier cases.
struct Fixture {
  Dataset train = images(24, 10);
  Dataset test = images(8, 11);
  SystemState s1 = train_stage1(train, tiny(), quick(30));
  SystemState s2 = train_stage2(s1.clone(), train, 0.25, small_memory());
  SystemState s3 = train_stage3(s2.clone(), train, quick(10, 3));
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("two images can be overfit through the channel") {
  const Dataset two = images(2, 5);
  TrainHyper h = quick(200);
  h.batch_size = 2;
  TrainLog log;
  train_stage1(two, tiny(), h, &log);
  REQUIRE(log.step_loss.size() == 200);
  CHECK(log.step_loss.back() <= 0.1 * log.step_loss.front());
}

TEST_CASE("stages must run in order") {
  auto& f = fixture();
  CHECK(f.s1.stage == Stage::kBaseline);
  CHECK(f.s2.stage == Stage::kMemoryTrained);
  CHECK(f.s3.stage == Stage::kJoint);
  CHECK_THROWS_AS(train_stage3(f.s1.clone(), f.train, quick(1)), StageError);
  CHECK_THROWS_AS(train_stage2(f.s3.clone(), f.train, 0.25, small_memory()), StageError);
  EvolutionSchedule sched;
  CHECK_THROWS_AS(evolve(f.s2, images(10, 1), sched, f.train, {}), StageError);
  EvalOptions eo;
  eo.modes = {Path::kMemory};
  CHECK_THROWS_AS(evaluate(f.s1, f.test, eo), StageError);
  CHECK(parse_stage(stage_name(Stage::kJoint)) == Stage::kJoint);
  CHECK_THROWS_AS(parse_stage("stage9"), ValidationError);
}

TEST_CASE("stage 2 artifacts are consistent") {
  auto& f = fixture();
  TrainLog log;
  const auto s = train_stage2(f.s1.clone(), f.train, 0.25, small_memory(), &log);
  CHECK(log.datastore_size == f.train.size() * f.s1.codec.tokens_per_image());
  REQUIRE(s.codebook);
  CHECK(s.codebook->size() == 8);
  CHECK(s.codebook->source_hash == log.source_hash);
  CHECK(log.memory_accuracy > 1.0 / 8);
  CHECK(s.rho == 0.25);
  // The encoder is frozen during stage 2.
  CHECK(s.codec.params().flatten() == f.s1.codec.params().flatten());
}

TEST_CASE("memory disabled at full rate is stage-1 training") {
  auto& f = fixture();
  SystemState a = f.s1.clone();
  a.rho = 1.0;
  const auto h = quick(5, 9);
  a = train_stage3(std::move(a), f.train, h, {false, false});
  SystemState b = f.s1.clone();
  continue_stage1(b, f.train, h);
  CHECK(a.codec.params().flatten() == b.codec.params().flatten());
}

TEST_CASE("truncated baseline leaves the memory artifacts untouched") {
  auto& f = fixture();
  SystemState b = f.s1.clone();
  b.rho = 0.25;
  b = train_stage3(std::move(b), f.train, quick(3), {false, false});
  CHECK_FALSE(b.memory_net.has_value());
}

TEST_CASE("evaluation rows follow snr, seed, mode nesting and are reproducible") {
  auto& f = fixture();
  EvalOptions eo;
  eo.snr_db = {0, 10, 20};
  eo.seeds = {1, 2};
  const auto a = evaluate(f.s3, f.test, eo);
  REQUIRE(a.rows.size() == 3 * 2 * 3);
  CHECK(a.rows[0].snr_db == 0);
  CHECK(a.rows[0].mode == "full");
  CHECK(a.rows[1].mode == "truncated");
  CHECK(a.rows[2].mode == "memory");
  CHECK(a.rows[3].seed == 2);
  CHECK(a.rows[6].snr_db == 10);
  CHECK(a.rows[0].n_samples == f.test.size());
  CHECK(a.rows[0].cbr == doctest::Approx(8.0 * 4 / (2 * 8 * 8 * 3)));
  CHECK(a.rows[1].cbr == doctest::Approx(2.0 * 4 / (2 * 8 * 8 * 3)));
  const auto b = evaluate(f.s3, f.test, eo);
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].psnr_mean == b.rows[i].psnr_mean);
  // Full tokens at high SNR reconstruct better than a quarter of them.
  CHECK(a.rows[12].psnr_mean > a.rows[13].psnr_mean);
}

TEST_CASE("forward paths without the channel") {
  auto& f = fixture();
  ForwardOptions o;
  o.channel = false;
  o.path = Path::kFull;
  const Dataset one(f.test.begin(), f.test.begin() + 2);
  const auto a = reconstruct(f.s3, one, o, {0, 1});
  const auto b = reconstruct(f.s3, one, o, {5, 6});
  CHECK(a[0].pixels == b[0].pixels);
  o.path = Path::kTruncated;
  o.rho = 0.25;
  const auto c = reconstruct(f.s3, one, o, {0, 1});
  CHECK(c[0].pixels != a[0].pixels);
}

TEST_CASE("checkpoints round-trip") {
  auto& f = fixture();
  const fs::path dir = fs::temp_directory_path() / "semtok_ckpt_test";
  fs::remove_all(dir);
  save_checkpoint(f.s3, dir.string(), "abc123");
  CHECK(fs::exists(dir / "manifest.json"));
  const auto s = load_checkpoint(dir.string());
  CHECK(s.stage == Stage::kJoint);
  CHECK(s.rho == f.s3.rho);
  CHECK(s.codec.params().flatten() == f.s3.codec.params().flatten());
  CHECK(s.memory_net->params().flatten() == f.s3.memory_net->params().flatten());
  CHECK(s.codebook->codewords.vec() == f.s3.codebook->codewords.vec());
  EvalOptions eo;
  const auto a = evaluate(f.s3, f.test, eo), b = evaluate(s, f.test, eo);
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].psnr_mean == b.rows[i].psnr_mean);
  fs::remove(dir / "codec.bin");
  CHECK_THROWS_AS(load_checkpoint(dir.string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("evolution schedule partitions the stream") {
  EvolutionSchedule s;
  s.interval = 0.2;
  CHECK(s.chunk_count() == 5);
  s.partition(100);
  REQUIRE(s.chunks.size() == 5);
  for (std::size_t c = 0; c < 5; ++c) {
    CHECK(s.chunks[c].size() == 20);
    CHECK(s.chunks[c].front() == c * 20);
  }
  s.interval = 0.3;
  CHECK(s.chunk_count() == 4);
  s.partition(10);
  std::size_t total = 0;
  for (const auto& c : s.chunks) total += c.size();
  CHECK(total == 10);
  s.interval = 1.0;
  CHECK(s.chunk_count() == 1);
  s.interval = 0.2;
  s.shuffle = true;
  s.order_seed = 4;
  s.partition(100);
  std::set<std::size_t> seen;
  for (const auto& c : s.chunks) seen.insert(c.begin(), c.end());
  CHECK(seen.size() == 100);
  CHECK(s.chunks[0] != std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19});
  CHECK_THROWS_AS(s.partition(3), SizeError);
  s.interval = 0.0;
  CHECK_THROWS_AS(s.chunk_count(), ValidationError);
}

TEST_CASE("evolution runs one round per chunk and rebuilds the codebook") {
  auto& f = fixture();
  const Dataset stream = images(20, 12, true);
  EvolutionSchedule sched;
  sched.interval = 0.2;
  EvolveOptions opt;
  opt.memory = small_memory(3);
  opt.memory.epochs = 1;
  opt.finetune = quick(2, 4);
  opt.eval.snr_db = {10};
  opt.eval.seeds = {0};
  const auto res = evolve(f.s3, stream, sched, f.train, opt);
  CHECK(sched.chunks.size() == 5);
  CHECK(res.metric_updates == 4);
  CHECK(res.total_updates == 5);
  CHECK(res.evolved_psnr.size() == 5);
  CHECK(res.frozen_psnr.size() == 5);
  CHECK(res.evolved_psnr[0] == res.frozen_psnr[0]);
  REQUIRE(res.codebook_hashes.size() == 6);
  for (std::size_t i = 1; i < res.codebook_hashes.size(); ++i) CHECK(res.codebook_hashes[i] != res.codebook_hashes[i - 1]);
  std::size_t evolved_rows = 0, frozen_rows = 0;
  for (const auto& r : res.report.rows) {
    evolved_rows += r.mode == "evolved";
    frozen_rows += r.mode == "frozen";
  }
  CHECK(evolved_rows == 5);
  CHECK(frozen_rows == 5);
  CHECK(res.state.round == 5);
}
