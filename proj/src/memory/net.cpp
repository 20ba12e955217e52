#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <random>
#include <sstream>

#include "semtok/error.hpp"
#include "semtok/kernels.hpp"
#include "semtok/memory.hpp"
#include "semtok/seed.hpp"

namespace semtok::memory {

MemoryNetConfig MemoryNetConfig::desk(std::size_t token_len, std::size_t codebook_size) {
  MemoryNetConfig c;
  c.token_len = token_len;
  c.codebook_size = codebook_size;
  return c;
}

MemoryNetConfig MemoryNetConfig::paper(std::size_t token_len, std::size_t codebook_size) {
  MemoryNetConfig c;
  c.token_len = token_len;
  c.codebook_size = codebook_size;
  c.dim = 768;
  c.heads = 12;
  c.blocks = 3;
  c.mlp_ratio = 4;
  return c;
}

void MemoryNetConfig::validate() const {
  if (token_len == 0) throw ValidationError("token_len", "must be positive");
  if (codebook_size == 0) throw ValidationError("codebook_size", "must be positive");
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ValidationError("memory_heads", "width must be a positive multiple of the head count");
  }
  if (blocks == 0) throw ValidationError("memory_blocks", "must be positive");
  if (mlp_ratio == 0) throw ValidationError("memory_mlp_ratio", "must be positive");
}

std::string MemoryNetConfig::canonical() const {
  std::ostringstream os;
  os << "memnet{L=" << token_len << ",K=" << codebook_size << ",d=" << dim << ",blocks=" << blocks
     << ",heads=" << heads << ",mlp=" << mlp_ratio << "}";
  return os.str();
}

MemoryNet::MemoryNet(const MemoryNetConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  nn::Rng rng(derive_seed(seed, 0x6d656d6e6574ULL));
  const std::size_t d = cfg_.dim;
  embed_ = nn::Linear(1, d, rng);
  std::normal_distribution<double> pos(0.0, 0.02);
  Matrix p(cfg_.token_len, d);
  for (double& v : p.vec()) v = pos(rng);
  positions_ = nn::make_param(std::move(p));
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    blocks_.push_back(Block{nn::LayerNorm(d), nn::LayerNorm(d), nn::Linear(d, 3 * d, rng),
                            nn::Linear(d, d, rng), nn::Mlp(d, d * cfg_.mlp_ratio, rng)});
  }
  final_norm_ = nn::LayerNorm(d);
  head_ = nn::Linear(d, cfg_.codebook_size, rng);

  embed_.register_params(params_, "embed");
  params_.add("positions", positions_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string pre = "block" + std::to_string(b);
    const Block& blk = blocks_[b];
    blk.ln1.register_params(block_params_, pre + ".ln1");
    blk.qkv.register_params(block_params_, pre + ".qkv");
    blk.proj.register_params(block_params_, pre + ".proj");
    blk.ln2.register_params(block_params_, pre + ".ln2");
    blk.mlp.register_params(block_params_, pre + ".mlp");
  }
  params_.append(block_params_, "");
  final_norm_.register_params(params_, "ln_f");
  head_.register_params(params_, "head");
}

nn::Var MemoryNet::logits(nn::Graph& g, const nn::Var& tokens) const {
  const std::size_t n = tokens->value.rows(), len = cfg_.token_len;
  if (tokens->value.cols() != len) {
    throw ShapeError("memory net: expected tokens of length " + std::to_string(len) + ", got " +
                     std::to_string(tokens->value.cols()));
  }
  nn::Var h = embed_(g, g.reshape(tokens, n * len, 1));
  h = g.add_periodic_rows(h, positions_);
  nn::AttentionSpec spec;
  spec.heads = cfg_.heads;
  spec.group = len;
  spec.causal = true;
  for (const Block& blk : blocks_) {
    h = g.add(h, blk.proj(g, g.attention(blk.qkv(g, blk.ln1(g, h)), spec)));
    h = g.add(h, blk.mlp(g, blk.ln2(g, h)));
  }
  return head_(g, g.group_mean(final_norm_(g, h), len));
}

Matrix MemoryNet::probabilities(const Matrix& tokens) const {
  const std::size_t n = tokens.rows(), len = tokens.cols();
  Matrix out(n, cfg_.codebook_size);
  constexpr std::size_t kChunk = 512;
  for (std::size_t r0 = 0; r0 < n; r0 += kChunk) {
    const std::size_t rb = std::min(kChunk, n - r0);
    Matrix part(rb, len);
    std::copy_n(tokens.row(r0), rb * len, part.data());
    nn::Graph g(false);
    nn::Var p = g.softmax_rows(logits(g, nn::make_const(std::move(part))));
    std::copy_n(p->value.data(), p->value.size(), out.row(r0));
  }
  return out;
}

std::vector<double> MemoryNet::forward(std::span<const double> token) const {
  Matrix t(1, token.size(), std::vector<double>(token.begin(), token.end()));
  return probabilities(t).to_vector();
}

MemoryNet MemoryNet::clone() const {
  MemoryNet copy(cfg_, seed_);
  copy.params_.assign(params_.flatten());
  return copy;
}

void MemoryNet::load_pretrained_blocks(std::istream& is) {
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!is) throw IoError("pretrained blocks: unreadable header");
  std::size_t loaded = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t len = 0, r = 0, c = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!is || len > 4096) throw IoError("pretrained blocks: corrupt tensor name");
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    is.read(reinterpret_cast<char*>(&r), sizeof r);
    is.read(reinterpret_cast<char*>(&c), sizeof c);
    if (!is) throw IoError("pretrained blocks: truncated header for '" + name + "'");
    Matrix buf(r, c);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(r * c * sizeof(double)));
    if (!is) throw IoError("pretrained blocks: truncated data for '" + name + "'");
    for (const auto& p : block_params_.items()) {
      if (p.name != name) continue;
      if (!p.var->value.same_shape(buf)) throw ShapeError("pretrained blocks: shape mismatch for '" + name + "'");
      p.var->value = std::move(buf);
      ++loaded;
      break;
    }
  }
  if (loaded == 0) throw IoError("pretrained blocks: no matching block tensors");
}

std::vector<double> recover_token(std::span<const double> probs, const Codebook& codebook) {
  const std::size_t k = codebook.size(), len = codebook.length();
  if (probs.size() != k) {
    throw DistributionError("recover_token: " + std::to_string(probs.size()) + " probabilities for " +
                            std::to_string(k) + " codewords");
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw DistributionError("recover_token: negative or non-finite probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw DistributionError("recover_token: probabilities do not sum to 1");
  std::vector<double> out(len, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    if (probs[c] != 0.0) kernels::axpy(probs[c], codebook.codewords.row(c), out.data(), len);
  }
  return out;
}

double memory_loss(std::span<const double> p_m, std::span<const double> p_t, std::size_t target,
                   double alpha) {
  if (p_m.size() != p_t.size()) throw ShapeError("memory_loss: distributions differ in size");
  if (target >= p_m.size()) throw ShapeError("memory_loss: target outside the codebook");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha", "must lie in [0, 1]");
  const double lf = std::log(nn::kLogFloor);
  double kl = 0.0;
  for (std::size_t j = 0; j < p_t.size(); ++j) {
    if (p_t[j] <= 0.0) continue;
    kl += p_t[j] * (std::log(std::max(p_t[j], nn::kLogFloor)) - std::max(std::log(p_m[j]), lf));
  }
  const double ce = -std::max(std::log(p_m[target]), lf);
  return alpha * kl + (1.0 - alpha) * ce;
}

Matrix pad_rows(const Matrix& prefixes, std::size_t full_len) {
  if (prefixes.cols() > full_len) throw ShapeError("pad_rows: prefix longer than the full token");
  Matrix out(prefixes.rows(), full_len);
  for (std::size_t i = 0; i < prefixes.rows(); ++i) std::copy_n(prefixes.row(i), prefixes.cols(), out.row(i));
  return out;
}

namespace {

const Matrix& check_inputs(const Datastore& store, const Matrix* inputs) {
  const Matrix& x = inputs ? *inputs : store.keys;
  if (x.rows() != store.size()) throw SizeError("memory training: inputs and datastore differ in size");
  return x;
}

}  // namespace

double label_accuracy(const MemoryNet& net, const Datastore& store, const Matrix* inputs) {
  const Matrix& x = check_inputs(store, inputs);
  if (store.size() == 0) return 0.0;
  Matrix probs = net.probabilities(pad_rows(x, net.config().token_len));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const double* p = probs.row(i);
    const auto best = std::max_element(p, p + probs.cols()) - p;
    hits += static_cast<std::size_t>(best) == store.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(store.size());
}

MemoryTrainResult train_memory(MemoryNet& net, const Datastore& store,
                               const std::vector<TeacherDistribution>& teachers,
                               const MemoryTrainConfig& cfg, const Matrix* inputs) {
  const Matrix& x = check_inputs(store, inputs);
  if (teachers.size() != store.size()) {
    throw SizeError("memory training: " + std::to_string(teachers.size()) + " teachers for " +
                    std::to_string(store.size()) + " datastore entries");
  }
  if (cfg.batch_size == 0) throw ValidationError("batch_size", "must be positive");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ValidationError("alpha", "must lie in [0, 1]");
  const std::size_t n = store.size(), len = net.config().token_len, k = net.config().codebook_size;
  const Matrix padded = pad_rows(x, len);

  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.clip_norm = cfg.clip_norm;
  nn::Adam opt(net.params(), ac);
  Rng64 rng(derive_seed(cfg.seed, 0x747261696eULL));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  MemoryTrainResult res;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t bs = std::min(cfg.batch_size, n - b0);
      Matrix xb = Matrix::uninit(bs, len);
      Matrix tb(bs, k);
      std::vector<std::uint32_t> lb(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t src = order[b0 + i];
        std::copy_n(padded.row(src), len, xb.row(i));
        const auto& t = teachers[src];
        for (std::size_t j = 0; j < t.labels.size(); ++j) {
          if (t.labels[j] >= k) throw DistributionError("teacher label outside the codebook");
          tb(i, t.labels[j]) = t.probs[j];
        }
        lb[i] = store.labels[src];
      }
      nn::Graph g;
      nn::Var loss = g.memory_loss(net.logits(g, nn::make_const(std::move(xb))), tb, lb, cfg.alpha);
      g.backward(loss);
      opt.step();
      total += loss->value(0, 0) * static_cast<double>(bs);
    }
    res.epoch_loss.push_back(total / static_cast<double>(n));
  }
  res.accuracy = label_accuracy(net, store, inputs);
  return res;
}

}  // namespace semtok::memory
