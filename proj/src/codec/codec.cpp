#include "semtok/codec.hpp"

#include <cmath>
#include <sstream>

#include "semtok/error.hpp"
#include "semtok/hash.hpp"
#include "semtok/seed.hpp"

namespace semtok::codec {

using nn::Graph;
using nn::Matrix;
using nn::Var;

CodecConfig CodecConfig::desk() {
  CodecConfig c;
  c.dims = {32, 64};
  c.depths = {1, 1};
  c.heads = {2, 4};
  c.window = 2;
  c.mlp_ratio = 4;
  c.patch = 2;
  c.token_len = 16;
  return c;
}

CodecConfig CodecConfig::paper() {
  CodecConfig c;
  c.dims = {128, 192, 256};
  c.depths = {2, 2, 6};
  c.heads = {4, 6, 8};
  c.window = 4;
  c.mlp_ratio = 4;
  c.patch = 2;
  c.token_len = 48;
  return c;
}

std::size_t CodecConfig::downsample() const {
  return stages() == 0 ? patch : patch << (stages() - 1);
}

void CodecConfig::validate() const {
  if (dims.empty()) throw ValidationError("codec.dims", "at least one stage required");
  if (depths.size() != dims.size()) throw ValidationError("codec.depths", "one entry per stage required");
  if (heads.size() != dims.size()) throw ValidationError("codec.heads", "one entry per stage required");
  for (std::size_t s = 0; s < dims.size(); ++s) {
    if (dims[s] == 0 || heads[s] == 0 || dims[s] % heads[s] != 0) {
      throw ValidationError("codec.heads", "stage width must be divisible by its head count");
    }
    if (depths[s] == 0) throw ValidationError("codec.depths", "each stage needs at least one block");
  }
  if (window == 0) throw ValidationError("codec.window", "must be positive");
  if (mlp_ratio == 0) throw ValidationError("codec.mlp_ratio", "must be positive");
  if (patch == 0) throw ValidationError("codec.patch", "must be positive");
  if (token_len == 0) throw ValidationError("codec.token_len", "must be positive");
  if (channels == 0) throw ValidationError("codec.channels", "must be positive");
}

void CodecConfig::check_geometry(std::size_t height, std::size_t width, std::size_t ch) const {
  validate();
  const std::size_t f = downsample();
  if (height == 0 || width == 0 || height % f != 0 || width % f != 0) {
    throw GeometryError("image " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by the downsampling factor " + std::to_string(f));
  }
  if (ch != channels) throw GeometryError("image channel count does not match codec");
  for (std::size_t s = 0; s < stages(); ++s) {
    const std::size_t gh = height / (patch << s), gw = width / (patch << s);
    const std::size_t w = std::min({window, gh, gw});
    if (gh % w != 0 || gw % w != 0) {
      throw GeometryError("window size does not divide the stage " + std::to_string(s) + " grid");
    }
  }
}

std::string CodecConfig::canonical() const {
  std::ostringstream os;
  auto list = [&](const char* name, const std::vector<std::size_t>& v) {
    os << name << '=';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << ';';
  };
  list("dims", dims);
  list("depths", depths);
  list("heads", heads);
  os << "window=" << window << ";mlp_ratio=" << mlp_ratio << ";patch=" << patch
     << ";token_len=" << token_len << ";channels=" << channels << ';';
  return os.str();
}

std::uint64_t CodecConfig::hash() const { return Fnv1a().text(canonical()).value(); }

std::size_t prefix_length(std::size_t full_len, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("rho", "keep ratio must lie in (0, 1]");
  // Tolerance keeps ratios like 0.29 * 100 from flooring to 28.
  const auto lp = static_cast<std::size_t>(std::floor(rho * static_cast<double>(full_len) + 1e-9));
  return std::max<std::size_t>(1, std::min(lp, full_len));
}

TruncatedTokens truncate_prefix(const SemanticTokens& tokens, double rho) {
  const std::size_t l = tokens.length();
  const std::size_t lp = prefix_length(l, rho);
  TruncatedTokens t;
  t.prefixes = Matrix(tokens.count(), lp);
  for (std::size_t i = 0; i < tokens.count(); ++i) {
    std::copy_n(tokens.values.row(i), lp, t.prefixes.row(i));
  }
  t.prefix_len = lp;
  t.full_len = l;
  t.keep_ratio = rho;
  t.geometry = tokens.geometry;
  t.grid_h = tokens.grid_h;
  t.grid_w = tokens.grid_w;
  return t;
}

SemanticTokens zero_pad(const TruncatedTokens& trunc) {
  SemanticTokens t;
  t.values = Matrix(trunc.prefixes.rows(), trunc.full_len);
  for (std::size_t i = 0; i < trunc.prefixes.rows(); ++i) {
    std::copy_n(trunc.prefixes.row(i), trunc.prefix_len, t.values.row(i));
  }
  t.geometry = trunc.geometry;
  t.grid_h = trunc.grid_h;
  t.grid_w = trunc.grid_w;
  return t;
}

double compute_cbr(std::size_t l_p, std::size_t c, std::size_t h, std::size_t w, std::size_t c_img) {
  if (l_p == 0 || c == 0 || h == 0 || w == 0 || c_img == 0) {
    throw ValidationError("cbr", "all arguments must be positive");
  }
  return static_cast<double>(l_p) * static_cast<double>(c) /
         (2.0 * static_cast<double>(h) * static_cast<double>(w) * static_cast<double>(c_img));
}

double reconstruction_loss(const Image& x, const Image& x_hat) {
  if (!x.same_shape(x_hat)) throw ShapeError("reconstruction_loss: shape mismatch");
  if (x.size() == 0) throw ShapeError("reconstruction_loss: empty image");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.pixels[i] - x_hat.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

// ---------------------------------------------------------------------------

SwinBlock::SwinBlock(std::size_t dim, std::size_t heads, std::size_t grid_h, std::size_t grid_w,
                     std::size_t window, bool shifted, std::size_t mlp_ratio, nn::Rng& rng)
    : dim_(dim),
      heads_(heads),
      grid_h_(grid_h),
      grid_w_(grid_w),
      window_(std::min({window, grid_h, grid_w})),
      shift_(0),
      norm1_(dim),
      norm2_(dim),
      qkv_(dim, 3 * dim, rng),
      proj_(dim, dim, rng),
      mlp_(dim, dim * mlp_ratio, rng) {
  const std::size_t w = window_;
  if (shifted && grid_h > w && grid_w > w) shift_ = w / 2;
  const std::size_t span = 2 * w - 1;
  bias_table_ = nn::make_param(Matrix(span * span, heads));
  bias_index_.resize(w * w * w * w);
  for (std::size_t i = 0; i < w * w; ++i) {
    for (std::size_t j = 0; j < w * w; ++j) {
      const std::size_t dy = i / w + w - 1 - j / w;
      const std::size_t dx = i % w + w - 1 - j % w;
      bias_index_[i * w * w + j] = static_cast<std::uint32_t>(dy * span + dx);
    }
  }
  if (shift_ > 0) {
    const std::size_t nwh = grid_h / w, nww = grid_w / w;
    mask_slots_ = nwh * nww;
    mask_.assign(mask_slots_ * w * w * w * w, 0);
    auto label = [&](std::size_t pos, std::size_t extent) -> int {
      if (pos < extent - w) return 0;
      if (pos < extent - shift_) return 1;
      return 2;
    };
    for (std::size_t wy = 0; wy < nwh; ++wy) {
      for (std::size_t wx = 0; wx < nww; ++wx) {
        std::uint8_t* m = mask_.data() + (wy * nww + wx) * w * w * w * w;
        for (std::size_t i = 0; i < w * w; ++i) {
          const int li = label(wy * w + i / w, grid_h) * 3 + label(wx * w + i % w, grid_w);
          for (std::size_t j = 0; j < w * w; ++j) {
            const int lj = label(wy * w + j / w, grid_h) * 3 + label(wx * w + j % w, grid_w);
            m[i * w * w + j] = li == lj ? 1 : 0;
          }
        }
      }
    }
  }
}

Var SwinBlock::operator()(Graph& g, const Var& x, std::size_t batch) const {
  const std::size_t w = window_;
  const std::size_t nwh = grid_h_ / w, nww = grid_w_ / w;
  const std::size_t n = batch * grid_h_ * grid_w_;
  if (x->value.rows() != n) throw ShapeError("swin block: row count does not match grid");
  std::vector<std::uint32_t> to_win(n), from_win(n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t wy = 0; wy < nwh; ++wy) {
      for (std::size_t wx = 0; wx < nww; ++wx) {
        for (std::size_t iy = 0; iy < w; ++iy) {
          for (std::size_t ix = 0; ix < w; ++ix) {
            const std::size_t r = ((b * nwh + wy) * nww + wx) * w * w + iy * w + ix;
            const std::size_t sy = (wy * w + iy + shift_) % grid_h_;
            const std::size_t sx = (wx * w + ix + shift_) % grid_w_;
            const std::size_t src = (b * grid_h_ + sy) * grid_w_ + sx;
            to_win[r] = static_cast<std::uint32_t>(src);
            from_win[src] = static_cast<std::uint32_t>(r);
          }
        }
      }
    }
  }
  nn::AttentionSpec spec;
  spec.heads = heads_;
  spec.group = w * w;
  spec.bias_table = bias_table_;
  spec.bias_index = bias_index_;
  if (shift_ > 0) {
    spec.mask = mask_;
    spec.mask_slots = mask_slots_;
  }
  Var h = g.gather_rows(norm1_(g, x), std::move(to_win));
  h = proj_(g, g.attention(qkv_(g, h), spec));
  Var x1 = g.add(x, g.gather_rows(h, std::move(from_win)));
  return g.add(x1, mlp_(g, norm2_(g, x1)));
}

void SwinBlock::register_params(nn::ParamList& p, const std::string& prefix) const {
  norm1_.register_params(p, prefix + ".norm1");
  qkv_.register_params(p, prefix + ".qkv");
  p.add(prefix + ".rel_bias", bias_table_);
  proj_.register_params(p, prefix + ".proj");
  norm2_.register_params(p, prefix + ".norm2");
  mlp_.register_params(p, prefix + ".mlp");
}

// ---------------------------------------------------------------------------

namespace {

// Rows of a (b, y, x) grid regrouped as (b, y/2, x/2, sub) with sub = dy + 2*dx.
std::vector<std::uint32_t> merge_index(std::size_t batch, std::size_t gh, std::size_t gw) {
  const std::size_t h2 = gh / 2, w2 = gw / 2;
  std::vector<std::uint32_t> idx(batch * gh * gw);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < h2; ++y)
      for (std::size_t x = 0; x < w2; ++x)
        for (std::size_t sub = 0; sub < 4; ++sub) {
          const std::size_t dy = sub & 1, dx = sub >> 1;
          idx[((b * h2 + y) * w2 + x) * 4 + sub] =
              static_cast<std::uint32_t>((b * gh + 2 * y + dy) * gw + 2 * x + dx);
        }
  return idx;
}

// Inverse of merge_index: fine-grid rows gathered from (coarse row, sub) rows.
std::vector<std::uint32_t> expand_index(std::size_t batch, std::size_t gh, std::size_t gw) {
  const std::size_t h2 = gh / 2, w2 = gw / 2;
  std::vector<std::uint32_t> idx(batch * gh * gw);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < gh; ++y)
      for (std::size_t x = 0; x < gw; ++x) {
        const std::size_t sub = (y & 1) + 2 * (x & 1);
        idx[(b * gh + y) * gw + x] =
            static_cast<std::uint32_t>(((b * h2 + y / 2) * w2 + x / 2) * 4 + sub);
      }
  return idx;
}

}  // namespace

TokenCodec::TokenCodec(const CodecConfig& cfg, std::uint64_t seed, Geometry geometry)
    : cfg_(cfg), geometry_(geometry), seed_(seed) {
  cfg_.check_geometry(geometry.height, geometry.width, geometry.channels);
  nn::Rng rng(derive_seed(seed, 0xc0dec));
  build(rng);
}

std::size_t TokenCodec::grid_h() const { return geometry_.height / cfg_.downsample(); }
std::size_t TokenCodec::grid_w() const { return geometry_.width / cfg_.downsample(); }

void TokenCodec::build(nn::Rng& rng) {
  const std::size_t ns = cfg_.stages();
  const std::size_t pdim = cfg_.patch * cfg_.patch * cfg_.channels;
  auto make_stage = [&](std::size_t s, std::size_t depth) {
    Stage st;
    st.dim = cfg_.dims[s];
    st.grid_h = geometry_.height / (cfg_.patch << s);
    st.grid_w = geometry_.width / (cfg_.patch << s);
    for (std::size_t b = 0; b < depth; ++b) {
      st.blocks.emplace_back(st.dim, cfg_.heads[s], st.grid_h, st.grid_w, cfg_.window, b % 2 == 1,
                             cfg_.mlp_ratio, rng);
    }
    return st;
  };

  patch_embed_ = nn::Linear(pdim, cfg_.dims[0], rng);
  patch_norm_ = nn::LayerNorm(cfg_.dims[0]);
  for (std::size_t s = 0; s < ns; ++s) {
    enc_stages_.push_back(make_stage(s, cfg_.depths[s]));
    if (s + 1 < ns) {
      Resample m;
      m.norm = nn::LayerNorm(4 * cfg_.dims[s]);
      m.linear = nn::Linear(4 * cfg_.dims[s], cfg_.dims[s + 1], rng, false);
      m.grid_h = enc_stages_.back().grid_h;
      m.grid_w = enc_stages_.back().grid_w;
      merges_.push_back(std::move(m));
    }
  }
  enc_norm_ = nn::LayerNorm(cfg_.dims[ns - 1]);
  enc_head_ = nn::Linear(cfg_.dims[ns - 1], cfg_.token_len, rng);

  dec_in_ = nn::Linear(cfg_.token_len, cfg_.dims[ns - 1], rng);
  for (std::size_t r = 0; r < ns; ++r) {
    const std::size_t s = ns - 1 - r;
    dec_stages_.push_back(make_stage(s, cfg_.depths[s]));
    if (s > 0) {
      Resample e;
      e.norm = nn::LayerNorm(cfg_.dims[s]);
      e.linear = nn::Linear(cfg_.dims[s], 4 * cfg_.dims[s - 1], rng, false);
      e.grid_h = geometry_.height / (cfg_.patch << (s - 1));
      e.grid_w = geometry_.width / (cfg_.patch << (s - 1));
      expands_.push_back(std::move(e));
    }
  }
  dec_norm_ = nn::LayerNorm(cfg_.dims[0]);
  dec_head_ = nn::Linear(cfg_.dims[0], pdim, rng);

  patch_embed_.register_params(params_, "enc.patch_embed");
  patch_norm_.register_params(params_, "enc.patch_norm");
  for (std::size_t s = 0; s < ns; ++s) {
    for (std::size_t b = 0; b < enc_stages_[s].blocks.size(); ++b) {
      enc_stages_[s].blocks[b].register_params(params_, "enc.stage" + std::to_string(s) + ".block" + std::to_string(b));
    }
    if (s < merges_.size()) {
      merges_[s].norm.register_params(params_, "enc.merge" + std::to_string(s) + ".norm");
      merges_[s].linear.register_params(params_, "enc.merge" + std::to_string(s) + ".linear");
    }
  }
  enc_norm_.register_params(params_, "enc.norm");
  enc_head_.register_params(params_, "enc.head");
  dec_in_.register_params(params_, "dec.input");
  for (std::size_t r = 0; r < ns; ++r) {
    for (std::size_t b = 0; b < dec_stages_[r].blocks.size(); ++b) {
      dec_stages_[r].blocks[b].register_params(params_, "dec.stage" + std::to_string(r) + ".block" + std::to_string(b));
    }
    if (r < expands_.size()) {
      expands_[r].norm.register_params(params_, "dec.expand" + std::to_string(r) + ".norm");
      expands_[r].linear.register_params(params_, "dec.expand" + std::to_string(r) + ".linear");
    }
  }
  dec_norm_.register_params(params_, "dec.norm");
  dec_head_.register_params(params_, "dec.head");
}

void TokenCodec::check_images(const std::vector<Image>& images) const {
  if (images.empty()) throw ShapeError("codec: empty image batch");
  for (const Image& im : images) {
    if (im.height != geometry_.height || im.width != geometry_.width || im.channels != geometry_.channels) {
      throw GeometryError("codec: image geometry differs from the codec geometry");
    }
  }
}

Matrix TokenCodec::patch_target(const std::vector<Image>& images) const {
  check_images(images);
  return to_patch_rows(images, cfg_.patch);
}

std::vector<Image> TokenCodec::images_from_patches(const Matrix& rows, std::size_t batch) const {
  return from_patch_rows(rows, batch, geometry_.height, geometry_.width, geometry_.channels, cfg_.patch);
}

Var TokenCodec::encode(Graph& g, const std::vector<Image>& images) const {
  const std::size_t batch = images.size();
  Var x = nn::make_const(patch_target(images));
  x = patch_norm_(g, patch_embed_(g, x));
  for (std::size_t s = 0; s < enc_stages_.size(); ++s) {
    for (const SwinBlock& blk : enc_stages_[s].blocks) x = blk(g, x, batch);
    if (s < merges_.size()) {
      const Resample& m = merges_[s];
      x = g.gather_rows(x, merge_index(batch, m.grid_h, m.grid_w));
      x = g.reshape(x, x->value.rows() / 4, x->value.cols() * 4);
      x = m.linear(g, m.norm(g, x));
    }
  }
  return enc_head_(g, enc_norm_(g, x));
}

Var TokenCodec::decode(Graph& g, const Var& tokens, std::size_t batch) const {
  if (tokens->value.rows() != batch * tokens_per_image() || tokens->value.cols() != cfg_.token_len) {
    throw ShapeError("codec: token matrix does not match the configured shape");
  }
  Var x = dec_in_(g, tokens);
  for (std::size_t r = 0; r < dec_stages_.size(); ++r) {
    for (const SwinBlock& blk : dec_stages_[r].blocks) x = blk(g, x, batch);
    if (r < expands_.size()) {
      const Resample& e = expands_[r];
      x = e.linear(g, e.norm(g, x));
      x = g.reshape(x, x->value.rows() * 4, x->value.cols() / 4);
      x = g.gather_rows(x, expand_index(batch, e.grid_h, e.grid_w));
    }
  }
  return g.sigmoid(dec_head_(g, dec_norm_(g, x)));
}

SemanticTokens TokenCodec::encode(const Image& image) const {
  Graph g(false);
  SemanticTokens t;
  t.values = encode(g, {image})->value;
  t.geometry = geometry_;
  t.grid_h = grid_h();
  t.grid_w = grid_w();
  return t;
}

Image TokenCodec::decode(const SemanticTokens& tokens) const {
  if (tokens.count() != tokens_per_image() || tokens.length() != cfg_.token_len) {
    throw ShapeError("codec: token matrix does not match the configured shape");
  }
  Graph g(false);
  const Var out = decode(g, nn::make_const(tokens.values), 1);
  return images_from_patches(out->value, 1).front();
}

TokenCodec TokenCodec::clone() const {
  TokenCodec copy(cfg_, seed_, geometry_);
  copy.params_.assign(params_.flatten());
  return copy;
}

}  // namespace semtok::codec
