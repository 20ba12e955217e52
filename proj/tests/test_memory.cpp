#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "semtok/error.hpp"
#include "semtok/memory.hpp"

using namespace semtok;
using namespace semtok::memory;

namespace {

Matrix random_rows(std::size_t n, std::size_t d, std::mt19937_64& rng, double s = 1.0) {
  return Matrix(n, d, oracle::uniform(n * d, rng, -s, s));
}

std::vector<double> row_of(const Matrix& m, std::size_t r) { return {m.row(r), m.row(r) + m.cols()}; }

// Two tight blobs: prefix sign encodes the blob.
Matrix two_blobs(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.1);
  Matrix m(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = (i % 2 ? 1.0 : -1.0) + noise(rng);
  return m;
}

Codebook manual_codebook(Matrix codewords) {
  Codebook cb;
  cb.codewords = std::move(codewords);
  return cb;
}

double oracle_memory_loss(const std::vector<double>& pm, const std::vector<double>& pt, std::size_t target,
                          double alpha) {
  double kl = 0;
  for (std::size_t j = 0; j < pm.size(); ++j)
    if (pt[j] > 0) kl += pt[j] * std::log(pt[j] / std::max(pm[j], 1e-12));
  return alpha * kl - (1 - alpha) * std::log(std::max(pm[target], 1e-12));
}

std::vector<double> random_simplex(std::size_t k, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(k);
  for (auto& x : p) x = e(rng);
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& x : p) x /= s;
  return p;
}

MemoryNetConfig tiny_net() {
  MemoryNetConfig c;
  c.token_len = 4;
  c.codebook_size = 5;
  c.dim = 8;
  c.blocks = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

}  // namespace

TEST_CASE("k-means objective never increases and separates two blobs") {
  std::mt19937_64 rng(1);
  const Matrix data = two_blobs(400, 6, rng);
  const auto cb = build_codebook(data, 2, 7);
  REQUIRE(cb.size() == 2);
  for (std::size_t i = 1; i < cb.objective.size(); ++i) CHECK(cb.objective[i] <= cb.objective[i - 1] + 1e-15);
  const double a = cb.codewords(0, 0), b = cb.codewords(1, 0);
  CHECK(std::min(a, b) == doctest::Approx(-1.0).epsilon(0.05));
  CHECK(std::max(a, b) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(cb.source_hash == corpus_hash(data));
  CHECK(cb.build_seed == 7);
}

TEST_CASE("k-means on random data stays monotone and is seed-deterministic") {
  std::mt19937_64 rng(2);
  const Matrix data = random_rows(600, 5, rng);
  const auto a = build_codebook(data, 16, 3);
  const auto b = build_codebook(data, 16, 3);
  const auto c = build_codebook(data, 16, 4);
  for (std::size_t i = 1; i < a.objective.size(); ++i) CHECK(a.objective[i] <= a.objective[i - 1]);
  CHECK(a.codewords.vec() == b.codewords.vec());
  CHECK(a.codewords.vec() != c.codewords.vec());
  CHECK_THROWS_AS(build_codebook(random_rows(3, 2, rng), 4, 0), SizeError);
  const auto exact = build_codebook(random_rows(8, 3, rng), 8, 0);
  CHECK(exact.objective.back() == doctest::Approx(0.0));
}

TEST_CASE("assign_codeword matches an exhaustive scan") {
  std::mt19937_64 rng(3);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t k = 1 + c % 40, d = 1 + c % 9;
    Matrix cw = random_rows(k, d, rng);
    if (k > 3 && c % 5 == 0) std::copy_n(cw.row(1), d, cw.row(k - 1));  // duplicate: tie to lowest index
    const auto cb = manual_codebook(cw);
    const auto q = c % 5 == 0 && k > 3 ? row_of(cw, 1) : oracle::uniform(d, rng);
    std::size_t best = 0;
    double bd = INFINITY;
    for (std::size_t i = 0; i < k; ++i) {
      const double dd = oracle::sq(q, row_of(cw, i));
      if (dd < bd) bd = dd, best = i;
    }
    CHECK(assign_codeword(q, cb) == best);
  }
}

TEST_CASE("datastore keeps prefixes and labels full tokens") {
  std::mt19937_64 rng(4);
  const Matrix full = random_rows(100, 8, rng);
  const auto cb = build_codebook(full, 6, 1);
  const auto ds = build_datastore(full, 0.25, cb);
  CHECK(ds.size() == 100);
  CHECK(ds.prefix_len == 2);
  CHECK(ds.full_len == 8);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(ds.keys(i, 0) == full(i, 0));
    CHECK(ds.keys(i, 1) == full(i, 1));
    CHECK(ds.labels[i] == assign_codeword(row_of(full, i), cb));
  }
  CHECK_THROWS_AS(build_datastore(random_rows(4, 6, rng), 0.5, cb), ShapeError);
}

TEST_CASE("exact kNN matches a brute-force sort") {
  std::mt19937_64 rng(5);
  const Matrix store = random_rows(1000, 4, rng);
  const Matrix queries = random_rows(1000, 4, rng);
  const auto index = build_knn_index(store, {});
  const std::size_t k = 10;
  const auto batch = index->search_batch(queries, k);
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    std::vector<std::pair<double, std::uint32_t>> all;
    for (std::uint32_t i = 0; i < store.rows(); ++i) all.push_back({oracle::sq(row_of(queries, q), row_of(store, i)), i});
    std::sort(all.begin(), all.end());
    const auto single = index->search(row_of(queries, q), k);
    REQUIRE(batch[q].size() == k);
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(batch[q][j].id == all[j].second);
      CHECK(single[j].id == all[j].second);
      CHECK(batch[q][j].dist == doctest::Approx(all[j].first).epsilon(1e-12));
    }
  }
  CHECK(index->search(row_of(queries, 0), 5000).size() == 1000);
}

TEST_CASE("IVF-PQ recall at 10 is at least 0.8") {
  std::mt19937_64 rng(6);
  const std::size_t n = 4000, d = 16;
  // Clustered data, as token corpora are.
  const Matrix centers = random_rows(40, d, rng, 2.0);
  std::normal_distribution<double> nz(0.0, 0.3);
  Matrix store(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) store(i, j) = centers(i % 40, j) + nz(rng);
  IndexConfig cfg;
  cfg.mode = IndexMode::kIvfPq;
  cfg.nlist = 64;
  cfg.code_size = 8;
  cfg.nprobe = 16;
  cfg.seed = 1;
  const auto ivf = build_knn_index(store, cfg);
  const auto exact = build_knn_index(store, {});
  std::size_t hits = 0, total = 0;
  for (std::size_t q = 0; q < 200; ++q) {
    std::vector<double> query = row_of(store, q * 17 % n);
    for (auto& v : query) v += nz(rng);
    const auto a = ivf->search(query, 10);
    const auto b = exact->search(query, 10);
    for (const auto& x : b) {
      ++total;
      for (const auto& y : a) hits += x.id == y.id;
    }
  }
  const double recall = double(hits) / double(total);
  MESSAGE("IVF-PQ recall@10 = " << recall);
  CHECK(recall >= 0.8);
}

TEST_CASE("IVF-PQ clamps partitions and sub-quantizers to the data") {
  std::mt19937_64 rng(7);
  const Matrix store = random_rows(50, 6, rng);
  IndexConfig cfg;
  cfg.mode = IndexMode::kIvfPq;
  const auto idx = build_knn_index(store, cfg);  // nlist 2048 > 50 rows, 32 codes > 6 dims
  CHECK(idx->size() == 50);
  CHECK(idx->dim() == 6);
  CHECK(idx->search(row_of(store, 3), 5).size() == 5);
}

TEST_CASE("teacher distribution limits") {
  SUBCASE("one label among all neighbours is one-hot") {
    const std::vector<Neighbor> nb{{0, 0.1}, {1, 0.5}, {2, 3.0}};
    const std::vector<std::uint32_t> labels{4, 4, 4};
    const auto t = teacher_from_neighbors(nb, labels, 8.0);
    REQUIRE(t.labels.size() == 1);
    CHECK(t.labels[0] == 4);
    CHECK(std::abs(t.probs[0] - 1.0) < 1e-4);
  }
  SUBCASE("equidistant neighbours with different labels split evenly") {
    Matrix store(2, 2, std::vector<double>{1, 0, -1, 0});
    const auto idx = build_knn_index(store, {});
    const std::vector<double> q{0, 0.3};
    const auto t = teacher_distribution(q, *idx, {0, 1}, 2, 8.0);
    const auto d = t.dense(2);
    CHECK(std::abs(d[0] - 0.5) < 1e-4);
    CHECK(std::abs(d[1] - 0.5) < 1e-4);
  }
  SUBCASE("very large tau gives the label histogram") {
    std::mt19937_64 rng(8);
    const Matrix store = random_rows(200, 3, rng);
    std::vector<std::uint32_t> labels(200);
    for (auto& l : labels) l = rng() % 6;
    const auto idx = build_knn_index(store, {});
    const std::vector<double> q{0.1, -0.2, 0.3};
    const auto nb = idx->search(q, 40);
    std::vector<double> hist(6, 0.0);
    for (const auto& n : nb) hist[labels[n.id]] += 1.0 / 40;
    const auto t = teacher_distribution(q, *idx, labels, 40, 1e6).dense(6);
    for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(t[c] - hist[c]) < 1e-4);
  }
  SUBCASE("closer neighbours weigh more and self is excluded") {
    Matrix store(3, 1, std::vector<double>{0.0, 1.0, 2.0});
    const auto idx = build_knn_index(store, {});
    const std::vector<std::uint32_t> labels{0, 1, 2};
    const std::vector<double> q{0.0};
    const auto t = teacher_distribution(q, *idx, labels, 2, 1.0, 0u).dense(3);
    CHECK(t[0] == 0.0);
    CHECK(t[1] / t[2] == doctest::Approx(std::exp(3.0)));  // squared distances 1 and 4
    const auto teachers = build_teachers(Datastore{store, labels, 1, 1, 1.0}, *idx, 2, 1.0);
    REQUIRE(teachers.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(teachers[i].dense(3)[i] == 0.0);
  }
}

TEST_CASE("recover_token is the codebook expectation") {
  Matrix cw(3, 2, std::vector<double>{1, 2, 3, 4, -5, 6});
  const auto cb = manual_codebook(cw);
  CHECK(recover_token(std::vector<double>{0, 1, 0}, cb) == std::vector<double>{3, 4});
  const auto u = recover_token(std::vector<double>{1. / 3, 1. / 3, 1. / 3}, cb);
  CHECK(u[0] == doctest::Approx(-1.0 / 3).epsilon(1e-15));
  CHECK(u[1] == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(recover_token(std::vector<double>{0.5, 0.5, 0}, cb) == std::vector<double>{2, 3});
  CHECK_THROWS_AS(recover_token(std::vector<double>{0.5, 0.6, -0.1}, cb), DistributionError);
  CHECK_THROWS_AS(recover_token(std::vector<double>{0.5, 0.4, 0.0}, cb), DistributionError);
  CHECK_THROWS_AS(recover_token(std::vector<double>{1.0, 0.0}, cb), DistributionError);
  CHECK_THROWS_AS(recover_token(std::vector<double>{NAN, 1.0, 0.0}, cb), DistributionError);
}

TEST_CASE("memory loss matches its closed form and KL is non-negative") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> a(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = 2 + i % 30;
    auto pm = random_simplex(k, rng), pt = random_simplex(k, rng);
    if (i % 4 == 0) pt[i % k] = 0.0;  // sparse teacher
    const double alpha = a(rng);
    const std::size_t target = rng() % k;
    CHECK(std::abs(memory_loss(pm, pt, target, alpha) - oracle_memory_loss(pm, pt, target, alpha)) <= 1e-10);
    // alpha = 1 leaves only the KL term, which is zero iff the distributions match.
    CHECK(memory_loss(pm, random_simplex(k, rng), target, 1.0) >= -1e-12);
  }
  const std::vector<double> p{0.2, 0.8};
  CHECK(memory_loss(p, p, 0, 1.0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(memory_loss(p, p, 2, 0.5), ShapeError);
  CHECK_THROWS_AS(memory_loss(p, p, 0, 1.5), ValidationError);
}

TEST_CASE("memory net outputs distributions and is causal in the token position") {
  MemoryNet net(tiny_net(), 3);
  std::mt19937_64 rng(10);
  auto t = oracle::uniform(4, rng);
  const auto p = net.forward(t);
  CHECK(p.size() == 5);
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
  CHECK(MemoryNetConfig::desk(16, 256).dim == 64);
  const auto paper = MemoryNetConfig::paper(48, 10240);
  CHECK(paper.dim == 768);
  CHECK(paper.heads == 12);
  CHECK(paper.blocks == 3);
  auto clone = net.clone();
  CHECK(clone.forward(t) == p);
}

TEST_CASE("memory loss gradient through the net and recover_token") {
  MemoryNet net(tiny_net(), 5);
  CHECK(net.params().count() <= 10000);
  std::mt19937_64 rng(11);
  const std::size_t n = 3, k = 5;
  auto input = nn::make_param(random_rows(n, 4, rng));
  const Matrix codewords = random_rows(k, 4, rng);
  const Matrix target = random_rows(n, 4, rng);
  Matrix teacher(n, k);
  for (std::size_t r = 0; r < n; ++r) {
    const auto s = random_simplex(k, rng);
    std::copy(s.begin(), s.end(), teacher.row(r));
  }
  const std::vector<std::uint32_t> labels{1, 4, 0};
  auto build = [&](nn::Graph& g) {
    auto logits = net.logits(g, input);
    auto recovered = g.linear(g.softmax_rows(logits), nn::make_const(codewords));
    return g.add(g.memory_loss(logits, teacher, labels, 0.5), g.mse(recovered, target));
  };
  auto f = [&] {
    nn::Graph g(false);
    return build(g)->value(0, 0);
  };
  {
    // The graph's recovered rows equal recover_token of the net's distribution.
    nn::Graph g(false);
    const auto rec = g.linear(g.softmax_rows(net.logits(g, input)), nn::make_const(codewords))->value;
    const auto probs = net.forward(row_of(input->value, 1));
    const auto tok = recover_token(probs, manual_codebook(codewords));
    for (std::size_t j = 0; j < 4; ++j) CHECK(rec(1, j) == doctest::Approx(tok[j]).epsilon(1e-12));
  }
  net.params().zero_grad();
  input->zero_grad();
  nn::Graph g;
  g.backward(build(g));
  double worst = 0;
  auto check = [&](nn::Var& v) {
    for (std::size_t i = 0; i < v->value.size(); ++i) {
      const double err = oracle::rel_err(v->grad.empty() ? 0.0 : v->grad.vec()[i],
                                         oracle::central_diff(f, v->value.vec()[i], 1e-5), 1e-6);
      worst = std::max(worst, err);
      CHECK(err <= 1e-4);
    }
  };
  check(input);
  for (auto p : net.params().items()) check(p.var);
  MESSAGE("memory net: " << net.params().count() << " parameters, worst relative error " << worst);
}

TEST_CASE("memory net training reduces loss on a toy datastore") {
  std::mt19937_64 rng(12);
  const Matrix full = random_rows(50, 4, rng);
  const auto cb = build_codebook(full, 5, 0);
  const auto ds = build_datastore(full, 0.5, cb);
  const auto idx = build_knn_index(ds, {});
  const auto teachers = build_teachers(ds, *idx, 8, 1.0);
  MemoryNet net(tiny_net(), 1);
  MemoryTrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 10;
  cfg.lr = 3e-3;
  const auto res = train_memory(net, ds, teachers, cfg);
  REQUIRE(res.epoch_loss.size() == 60);
  CHECK(res.epoch_loss.back() <= 0.5 * res.epoch_loss.front());
  std::vector<TeacherDistribution> short_list(teachers.begin(), teachers.begin() + 10);
  CHECK_THROWS_AS(train_memory(net, ds, short_list, cfg), SizeError);
}

TEST_CASE("memory net separates two clusters") {
  std::mt19937_64 rng(13);
  const Matrix full = two_blobs(200, 4, rng);
  const auto cb = build_codebook(full, 2, 0);
  const auto ds = build_datastore(full, 0.25, cb);
  const auto idx = build_knn_index(ds, {});
  const auto teachers = build_teachers(ds, *idx, 8, 8.0);
  auto cfg_net = tiny_net();
  cfg_net.codebook_size = 2;
  MemoryNet net(cfg_net, 2);
  MemoryTrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 20;
  cfg.lr = 3e-3;
  const auto res = train_memory(net, ds, teachers, cfg);
  CHECK(res.accuracy >= 0.95);
  CHECK(label_accuracy(net, ds) == doctest::Approx(res.accuracy));
}

TEST_CASE("codebooks, datastores and teachers persist exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "semtok_memory_persist";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::mt19937_64 rng(14);
  const Matrix full = random_rows(60, 4, rng);
  const auto cb = build_codebook(full, 4, 9);
  const auto ds = build_datastore(full, 0.5, cb);
  const auto idx = build_knn_index(ds, {});
  const auto teachers = build_teachers(ds, *idx, 6, 2.0);

  save_codebook(cb, (dir / "cb.bin").string());
  save_datastore(ds, (dir / "ds.bin").string());
  save_teachers(teachers, (dir / "t.bin").string());
  CHECK(fs::exists(dir / "cb.bin.json"));
  const auto cb2 = load_codebook((dir / "cb.bin").string());
  CHECK(cb2.codewords.vec() == cb.codewords.vec());
  CHECK(cb2.source_hash == cb.source_hash);
  CHECK(cb2.objective == cb.objective);
  const auto ds2 = load_datastore((dir / "ds.bin").string());
  CHECK(ds2.keys.vec() == ds.keys.vec());
  CHECK(ds2.labels == ds.labels);
  CHECK(ds2.keep_ratio == ds.keep_ratio);
  const auto t2 = load_teachers((dir / "t.bin").string());
  REQUIRE(t2.size() == teachers.size());
  for (std::size_t i = 0; i < t2.size(); ++i) {
    CHECK(t2[i].labels == teachers[i].labels);
    CHECK(t2[i].probs == teachers[i].probs);
    CHECK(t2[i].query_id == teachers[i].query_id);
  }
  std::ofstream(dir / "junk.bin") << "not a codebook";
  CHECK_THROWS_AS(load_codebook((dir / "junk.bin").string()), IoError);
  CHECK_THROWS_AS(load_datastore((dir / "cb.bin").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("pretrained transformer blocks load into a fresh net") {
  MemoryNet a(tiny_net(), 1);
  MemoryNet b(tiny_net(), 2);
  nn::ParamList blocks;
  for (const auto& p : a.params().items())
    if (p.name.rfind("block", 0) == 0) blocks.add(p.name, p.var);
  std::stringstream ss;
  blocks.save(ss);
  b.load_pretrained_blocks(ss);
  for (std::size_t i = 0; i < a.params().items().size(); ++i) {
    const auto& pa = a.params().items()[i];
    const auto& pb = b.params().items()[i];
    if (pa.name.rfind("block", 0) == 0) CHECK(pa.var->value.vec() == pb.var->value.vec());
  }
  std::stringstream bad("garbage");
  CHECK_THROWS(b.load_pretrained_blocks(bad));
}
