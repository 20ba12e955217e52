#include "semtok/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "semtok/error.hpp"
#include "semtok/seed.hpp"

namespace semtok::pipeline {

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kBaseline:
      return "baseline";
    case Stage::kMemoryTrained:
      return "memory-trained";
    case Stage::kJoint:
      return "joint";
  }
  return "unknown";
}

Stage parse_stage(const std::string& s) {
  if (s == "baseline") return Stage::kBaseline;
  if (s == "memory-trained") return Stage::kMemoryTrained;
  if (s == "joint") return Stage::kJoint;
  throw ValidationError("stage", "unknown stage '" + s + "'");
}

std::string path_name(Path p) {
  switch (p) {
    case Path::kFull:
      return "full";
    case Path::kTruncated:
      return "truncated";
    case Path::kMemory:
      return "memory";
  }
  return "unknown";
}

double SnrPolicy::draw(std::uint64_t seed) const {
  if (!random) return fixed_db;
  Rng64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
  return choices[pick(rng)];
}

void SnrPolicy::validate() const {
  if (random && choices.empty()) throw ValidationError("train_snr", "random policy needs at least one SNR");
  if (!random && std::isnan(fixed_db)) throw ValidationError("train_snr", "fixed SNR must be a number");
}

SystemState SystemState::clone() const {
  SystemState out(codec.clone());
  if (memory_net) out.memory_net = memory_net->clone();
  out.codebook = codebook;
  out.stage = stage;
  out.rho = rho;
  out.recovery = recovery;
  out.snr = snr;
  out.seed = seed;
  out.round = round;
  return out;
}

void SystemState::check() const {
  if (stage != Stage::kBaseline && (!memory_net || !codebook)) {
    throw StageError("state tagged '" + stage_name(stage) + "' lacks a memory net or codebook");
  }
  if (memory_net && codebook) {
    const auto& mc = memory_net->config();
    if (mc.codebook_size != codebook->size() || mc.token_len != codebook->length() ||
        codebook->length() != codec.config().token_len) {
      throw StageError("memory net, codebook and codec disagree on token geometry");
    }
  }
}

namespace {

// Sends each image's token block through its own channel realization.
nn::Var channel_op(nn::Graph& g, const nn::Var& tokens, std::size_t batch, const channel::LinkConfig& link,
                   const std::vector<std::uint64_t>& seeds) {
  const nn::Matrix& x = tokens->value;
  if (seeds.size() != batch) throw ShapeError("channel: one seed per image required");
  if (batch == 0 || x.rows() % batch != 0) throw ShapeError("channel: token rows not divisible by batch");
  const std::size_t len = x.size() / batch;
  auto links = std::make_shared<std::vector<channel::LinkResult>>();
  links->reserve(batch);
  nn::Matrix y = nn::Matrix::uninit(x.rows(), x.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    links->push_back(channel::run_link(std::span<const double>(x.data() + b * len, len), link, seeds[b]));
    std::copy_n(links->back().received.data(), len, y.data() + b * len);
  }
  return g.custom({tokens}, std::move(y), [tokens, links, batch, len](const nn::Matrix& gy) {
    if (!tokens->needs_grad) return;
    double* gx = tokens->grad_buffer().data();
    const double* xv = tokens->value.data();
    for (std::size_t b = 0; b < batch; ++b) {
      auto gb = channel::link_backward((*links)[b], std::span<const double>(xv + b * len, len),
                                       std::span<const double>(gy.data() + b * len, len));
      for (std::size_t i = 0; i < len; ++i) gx[b * len + i] += gb[i];
    }
  });
}

std::uint64_t snr_key(double snr_db) { return std::bit_cast<std::uint64_t>(snr_db); }

std::vector<std::uint64_t> image_seeds(std::uint64_t base, std::size_t first, std::size_t count) {
  std::vector<std::uint64_t> s(count);
  for (std::size_t i = 0; i < count; ++i) s[i] = derive_seed(base, first + i);
  return s;
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  Dataset out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(data[idx[i]]);
  return out;
}

void require_data(const Dataset& d, const char* what) {
  if (d.empty()) throw SizeError(std::string(what) + ": empty dataset");
}

// Shared loop for stage 1 and stage 3.
void train_loop(SystemState& s, const Dataset& train, const TrainHyper& h, Path path, bool train_memory,
                TrainLog* log) {
  require_data(train, "training");
  if (h.batch_size == 0) throw ValidationError("batch_size", "must be positive");
  h.snr.validate();
  nn::ParamList params;
  params.append(s.codec.params(), "codec.");
  const bool mem_params = path == Path::kMemory && train_memory;
  if (mem_params) params.append(s.memory_net->params(), "memory.");
  nn::AdamConfig ac;
  ac.lr = h.lr;
  ac.clip_norm = h.clip_norm;
  nn::Adam opt(params, ac);

  Rng64 order_rng(derive_seed(h.seed, 0x6f72646572ULL));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < h.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t b0 = 0; b0 < train.size(); b0 += h.batch_size) {
      if (h.max_steps && step >= h.max_steps) break;
      const std::size_t b1 = std::min(train.size(), b0 + h.batch_size);
      const Dataset batch = subset(train, order, b0, b1);
      const std::uint64_t step_seed = derive_seed(h.seed, 0x100000000ULL + step);
      ForwardOptions fo;
      fo.path = path;
      fo.rho = s.rho;
      fo.link = h.link;
      fo.link.snr_db = h.snr.draw(derive_seed(step_seed, 1));
      nn::Graph g;
      nn::Var out = system_forward(g, s, batch, fo, image_seeds(derive_seed(step_seed, 2), 0, batch.size()));
      nn::Var loss = g.mse(out, s.codec.patch_target(batch));
      g.backward(loss);
      opt.step();
      if (path == Path::kMemory && !mem_params) s.memory_net->params().zero_grad();
      const double lv = loss->value(0, 0);
      if (log) log->step_loss.push_back(lv);
      total += lv * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
    }
    if (seen == 0) break;
    if (log) log->epoch_loss.push_back(total / static_cast<double>(seen));
  }
}

// Algorithm 1 on the current encoder; attaches codebook and memory net.
void build_memory(SystemState& s, const Dataset& train, double rho, const MemoryHyper& h, TrainLog* log) {
  require_data(train, "memory construction");
  const auto& cc = s.codec.config();
  const nn::Matrix tokens = extract_tokens(s.codec, train);
  memory::Codebook cb = memory::build_codebook(tokens, h.codebook_size, derive_seed(h.seed, 1), h.kmeans);
  memory::Datastore ds = memory::build_datastore(tokens, rho, cb);
  memory::IndexConfig ic = h.index;
  ic.seed = derive_seed(h.seed, 3);
  auto index = memory::build_knn_index(ds, ic);
  auto teachers = memory::build_teachers(ds, *index, h.neighbors, h.tau);

  memory::MemoryNetConfig mc;
  mc.token_len = cc.token_len;
  mc.codebook_size = h.codebook_size;
  mc.dim = h.dim;
  mc.blocks = h.blocks;
  mc.heads = h.heads;
  mc.mlp_ratio = h.mlp_ratio;
  const bool warm = h.warm_start && s.memory_net && s.memory_net->config().canonical() == mc.canonical();
  memory::MemoryNet net = warm ? s.memory_net->clone() : memory::MemoryNet(mc, derive_seed(h.seed, 2));
  if (!warm && !h.pretrained_blocks.empty()) {
    std::ifstream is(h.pretrained_blocks, std::ios::binary);
    if (!is) throw IoError("cannot open pretrained blocks '" + h.pretrained_blocks + "'");
    net.load_pretrained_blocks(is);
  }

  nn::Matrix noisy;
  if (h.augment) {
    // Each image's prefixes pass through the channel at the training SNR policy.
    const std::size_t per = s.codec.tokens_per_image() * ds.prefix_len;
    noisy = nn::Matrix::uninit(ds.keys.rows(), ds.keys.cols());
    channel::LinkConfig link;
    for (std::size_t b = 0; b < train.size(); ++b) {
      const std::uint64_t sd = derive_seed(h.seed, 0x61756700ULL + b);
      link.snr_db = s.snr.draw(derive_seed(sd, 1));
      auto res = channel::run_link(std::span<const double>(ds.keys.data() + b * per, per), link, sd);
      std::copy_n(res.received.data(), per, noisy.data() + b * per);
    }
  }
  memory::MemoryTrainConfig tc;
  tc.epochs = h.epochs;
  tc.batch_size = h.batch_size;
  tc.lr = h.lr;
  tc.alpha = h.alpha;
  tc.seed = derive_seed(h.seed, 4);
  auto tr = memory::train_memory(net, ds, teachers, tc, h.augment ? &noisy : nullptr);

  if (log) {
    log->datastore_size = ds.size();
    log->source_hash = cb.source_hash;
    log->memory_accuracy = tr.accuracy;
    log->memory_loss = tr.epoch_loss;
  }
  s.memory_net = std::move(net);
  s.codebook = std::move(cb);
  s.rho = rho;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

nn::Var system_forward(nn::Graph& g, const SystemState& state, const Dataset& batch, const ForwardOptions& opt,
                       const std::vector<std::uint64_t>& seeds) {
  const std::size_t len = state.codec.config().token_len;
  const std::size_t lp = opt.path == Path::kFull ? len : codec::prefix_length(len, opt.rho);
  nn::Var tok = state.codec.encode(g, batch);
  nn::Var sent = lp < len ? g.slice_cols(tok, 0, lp) : tok;
  nn::Var recv = opt.channel ? channel_op(g, sent, batch.size(), opt.link, seeds) : sent;
  nn::Var padded = lp < len ? g.pad_cols(recv, len) : recv;
  nn::Var rec = padded;
  if (opt.path == Path::kMemory) {
    if (!state.memory_net || !state.codebook) throw StageError("memory path requires a memory net and codebook");
    nn::Var probs = g.softmax_rows(state.memory_net->logits(g, padded));
    rec = g.linear(probs, nn::make_const(state.codebook->codewords));
    if (state.recovery == Recovery::kSplice && lp < len) rec = g.splice_cols(rec, recv);
  }
  return state.codec.decode(g, rec, batch.size());
}

std::vector<Image> reconstruct(const SystemState& state, const Dataset& batch, const ForwardOptions& opt,
                               const std::vector<std::uint64_t>& seeds) {
  nn::Graph g(false);
  nn::Var out = system_forward(g, state, batch, opt, seeds);
  return state.codec.images_from_patches(out->value, batch.size());
}

nn::Matrix extract_tokens(const codec::TokenCodec& codec, const Dataset& data, std::size_t batch) {
  require_data(data, "token extraction");
  const std::size_t per = codec.tokens_per_image(), len = codec.config().token_len;
  nn::Matrix out = nn::Matrix::uninit(data.size() * per, len);
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch) {
    const std::size_t b1 = std::min(data.size(), b0 + batch);
    nn::Graph g(false);
    nn::Var t = codec.encode(g, Dataset(data.begin() + static_cast<std::ptrdiff_t>(b0),
                                        data.begin() + static_cast<std::ptrdiff_t>(b1)));
    std::copy_n(t->value.data(), t->value.size(), out.row(b0 * per));
  }
  return out;
}

SystemState train_stage1(const Dataset& train, const codec::CodecConfig& cfg, const TrainHyper& hyper,
                         TrainLog* log) {
  require_data(train, "stage 1");
  const Image& first = train.front();
  codec::Geometry geo{first.height, first.width, first.channels};
  SystemState s(codec::TokenCodec(cfg, derive_seed(hyper.seed, 0x636f646563ULL), geo));
  s.seed = hyper.seed;
  s.snr = hyper.snr;
  s.rho = 1.0;
  train_loop(s, train, hyper, Path::kFull, false, log);
  return s;
}

void continue_stage1(SystemState& state, const Dataset& train, const TrainHyper& hyper, TrainLog* log) {
  train_loop(state, train, hyper, Path::kFull, false, log);
}

SystemState train_stage2(SystemState state, const Dataset& train, double rho, const MemoryHyper& hyper,
                         TrainLog* log) {
  state.check();
  if (state.stage != Stage::kBaseline) throw StageError("stage 2 expects a baseline state");
  codec::prefix_length(state.codec.config().token_len, rho);
  build_memory(state, train, rho, hyper, log);
  state.stage = Stage::kMemoryTrained;
  return state;
}

SystemState train_stage3(SystemState state, const Dataset& train, const TrainHyper& hyper,
                         const Stage3Options& opt, TrainLog* log) {
  state.check();
  if (opt.use_memory) {
    if (state.stage == Stage::kBaseline) throw StageError("stage 3 needs the memory artifacts from stage 2");
    train_loop(state, train, hyper, Path::kMemory, opt.train_memory_net, log);
    state.stage = Stage::kJoint;
  } else {
    train_loop(state, train, hyper, Path::kTruncated, false, log);
  }
  return state;
}

std::vector<double> psnr_per_image(const SystemState& state, const Dataset& data, Path path, double snr_db,
                                   std::uint64_t seed, const EvalOptions& opt) {
  require_data(data, "evaluation");
  ForwardOptions fo;
  fo.path = path;
  fo.rho = opt.rho.value_or(state.rho);
  fo.link = opt.link;
  fo.link.snr_db = snr_db;
  // Seeds depend on (seed, snr, image) only, so every mode sees the same channels.
  const std::uint64_t base = derive_seed(seed, snr_key(snr_db));
  std::vector<double> out;
  out.reserve(data.size());
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t b0 = 0; b0 < data.size(); b0 += bs) {
    const std::size_t b1 = std::min(data.size(), b0 + bs);
    const Dataset batch(data.begin() + static_cast<std::ptrdiff_t>(b0), data.begin() + static_cast<std::ptrdiff_t>(b1));
    const auto rec = reconstruct(state, batch, fo, image_seeds(base, b0, batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(image_psnr(batch[i], rec[i]));
  }
  return out;
}

MetricsReport evaluate(const SystemState& state, const Dataset& data, const EvalOptions& opt) {
  state.check();
  require_data(data, "evaluation");
  const auto& cc = state.codec.config();
  const double rho = opt.rho.value_or(state.rho);
  const std::size_t lp = codec::prefix_length(cc.token_len, rho);
  const auto& geo = state.codec.geometry();
  MetricsReport rep;
  for (double snr : opt.snr_db) {
    for (std::uint64_t seed : opt.seeds) {
      for (Path mode : opt.modes) {
        if (mode == Path::kMemory && (!state.memory_net || !state.codebook)) {
          throw StageError("memory mode requested for a state without a memory net");
        }
        const auto p = psnr_per_image(state, data, mode, snr, seed, opt);
        MetricsRow r;
        r.stage = opt.stage_label.empty() ? stage_name(state.stage) : opt.stage_label;
        r.round = state.round;
        r.snr_db = snr;
        const std::size_t used = mode == Path::kFull ? cc.token_len : lp;
        r.cbr = codec::compute_cbr(used, state.codec.tokens_per_image(), geo.height, geo.width, geo.channels);
        r.rho = mode == Path::kFull ? 1.0 : rho;
        r.seed = seed;
        r.mode = opt.mode_label.empty() ? path_name(mode) : opt.mode_label;
        r.psnr_mean = mean_of(p);
        r.psnr_std = std_of(p);
        r.n_samples = p.size();
        rep.rows.push_back(std::move(r));
      }
    }
  }
  return rep;
}

std::size_t EvolutionSchedule::chunk_count() const {
  if (!(interval > 0.0 && interval <= 1.0)) throw ValidationError("interval", "must lie in (0, 1]");
  // Guard against 1/0.2 evaluating to 5.000000000000001.
  return static_cast<std::size_t>(std::ceil(1.0 / interval - 1e-9));
}

void EvolutionSchedule::partition(std::size_t n) {
  const std::size_t k = chunk_count();
  if (n < k) {
    throw SizeError("evolution: " + std::to_string(n) + " samples cannot fill " + std::to_string(k) + " chunks");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Rng64 rng(derive_seed(order_seed, 0x73747265616dULL));
    std::shuffle(order.begin(), order.end(), rng);
  }
  chunks.assign(k, {});
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t b = c * n / k, e = (c + 1) * n / k;
    chunks[c].assign(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  rounds_completed = 0;
}

EvolveResult evolve(const SystemState& state, const Dataset& stream, EvolutionSchedule& schedule,
                    const Dataset& train_set, const EvolveOptions& opt) {
  state.check();
  if (state.stage != Stage::kJoint) throw StageError("evolution expects a jointly trained state");
  require_data(stream, "evolution stream");
  schedule.partition(stream.size());
  const std::size_t n = schedule.chunks.size();

  EvolveResult res{state.clone(), {}, 0, 0, {}, {}, {}};
  res.codebook_hashes.push_back(state.codebook->source_hash);
  Dataset pool = train_set;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& idx = schedule.chunks[r];
    Dataset chunk;
    for (std::size_t i : idx) chunk.push_back(stream[i]);

    EvalOptions eo = opt.eval;
    eo.modes = {Path::kMemory};
    eo.stage_label = "evolve";
    eo.mode_label = "evolved";
    res.state.round = r;
    auto ev = evaluate(res.state, chunk, eo);
    double acc = 0.0;
    for (const auto& row : ev.rows) acc += row.psnr_mean;
    res.evolved_psnr.push_back(acc / static_cast<double>(ev.rows.size()));
    res.report.append(ev);
    if (opt.report_frozen) {
      eo.mode_label = "frozen";
      auto fr = evaluate(state, chunk, eo);
      acc = 0.0;
      for (auto& row : fr.rows) {
        row.round = r;
        acc += row.psnr_mean;
      }
      res.frozen_psnr.push_back(acc / static_cast<double>(fr.rows.size()));
      res.report.append(fr);
    }

    const bool last = r + 1 == n;
    if (!last || opt.final_update) {
      pool.insert(pool.end(), chunk.begin(), chunk.end());
      MemoryHyper mh = opt.memory;
      mh.seed = derive_seed(opt.memory.seed, r + 1);
      build_memory(res.state, pool, res.state.rho, mh, nullptr);
      TrainHyper th = opt.finetune;
      th.seed = derive_seed(opt.finetune.seed, r + 1);
      train_loop(res.state, pool, th, Path::kMemory, true, nullptr);
      res.state.stage = Stage::kJoint;
      res.state.round = r + 1;
      res.codebook_hashes.push_back(res.state.codebook->source_hash);
      ++res.total_updates;
      if (!last) ++res.metric_updates;
    }
    schedule.rounds_completed = r + 1;
  }
  return res;
}

}  // namespace semtok::pipeline
