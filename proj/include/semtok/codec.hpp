#pragma once
// Image <-> semantic token codec (hierarchical shifted-window transformer),
// prefix truncation and channel bandwidth accounting.

#include <cstdint>
#include <string>
#include <vector>

#include "semtok/image.hpp"
#include "semtok/nn/layers.hpp"

namespace semtok::codec {

struct CodecConfig {
  std::vector<std::size_t> dims;    // embedding width per stage
  std::vector<std::size_t> depths;  // transformer blocks per stage
  std::vector<std::size_t> heads;   // attention heads per stage
  std::size_t window = 2;
  std::size_t mlp_ratio = 4;
  std::size_t patch = 2;
  std::size_t token_len = 16;
  std::size_t channels = 3;

  // Two stages, 32/64 wide, one block each; runs comfortably on a CPU.
  static CodecConfig desk();
  // Three stages 128/192/256, blocks 2/2/6, heads 4/6/8, window 4, L = 48.
  static CodecConfig paper();

  std::size_t stages() const { return dims.size(); }
  // Spatial reduction from pixels to token grid: patch * 2^(stages-1).
  std::size_t downsample() const;
  // Throws ValidationError on inconsistent fields.
  void validate() const;
  // Throws GeometryError when the image cannot be tiled by this config.
  void check_geometry(std::size_t height, std::size_t width, std::size_t channels) const;
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct Geometry {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
};

// C tokens of length L, token-major (row i is token i in raster order of the grid).
struct SemanticTokens {
  nn::Matrix values;  // C x L
  Geometry geometry;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t count() const { return values.rows(); }
  std::size_t length() const { return values.cols(); }
};

struct TruncatedTokens {
  nn::Matrix prefixes;  // C x L_p
  std::size_t prefix_len = 0;
  std::size_t full_len = 0;
  double keep_ratio = 1.0;
  Geometry geometry;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

// L_p = max(1, floor(rho * L)); throws ValidationError for rho outside (0, 1].
std::size_t prefix_length(std::size_t full_len, double rho);
TruncatedTokens truncate_prefix(const SemanticTokens& tokens, double rho);
SemanticTokens zero_pad(const TruncatedTokens& trunc);
// Transmitted complex symbols per source dimension: l_p * c / (2 h w c_img).
double compute_cbr(std::size_t l_p, std::size_t c, std::size_t h, std::size_t w, std::size_t c_img);
// Mean over all pixels of the squared difference.
double reconstruction_loss(const Image& x, const Image& x_hat);

class SwinBlock {
 public:
  SwinBlock(std::size_t dim, std::size_t heads, std::size_t grid_h, std::size_t grid_w,
            std::size_t window, bool shifted, std::size_t mlp_ratio, nn::Rng& rng);
  nn::Var operator()(nn::Graph& g, const nn::Var& x, std::size_t batch) const;
  void register_params(nn::ParamList& p, const std::string& prefix) const;

 private:
  std::size_t dim_, heads_, grid_h_, grid_w_, window_, shift_;
  nn::LayerNorm norm1_, norm2_;
  nn::Linear qkv_, proj_;
  nn::Var bias_table_;
  nn::Mlp mlp_;
  std::vector<std::uint32_t> bias_index_;
  std::vector<std::uint8_t> mask_;
  std::size_t mask_slots_ = 0;
};

class TokenCodec {
 public:
  TokenCodec(const CodecConfig& cfg, std::uint64_t seed, Geometry geometry);
  // Copies would alias parameters; use clone().
  TokenCodec(const TokenCodec&) = delete;
  TokenCodec& operator=(const TokenCodec&) = delete;
  TokenCodec(TokenCodec&&) = default;
  TokenCodec& operator=(TokenCodec&&) = default;

  const CodecConfig& config() const { return cfg_; }
  const Geometry& geometry() const { return geometry_; }
  std::size_t grid_h() const;
  std::size_t grid_w() const;
  std::size_t tokens_per_image() const { return grid_h() * grid_w(); }

  // images -> (B*C) x L token rows.
  nn::Var encode(nn::Graph& g, const std::vector<Image>& images) const;
  // (B*C) x L token rows -> pixels in patch-row layout (see image.hpp).
  nn::Var decode(nn::Graph& g, const nn::Var& tokens, std::size_t batch) const;

  SemanticTokens encode(const Image& image) const;
  Image decode(const SemanticTokens& tokens) const;

  // Pixel target in the layout produced by decode().
  nn::Matrix patch_target(const std::vector<Image>& images) const;
  std::vector<Image> images_from_patches(const nn::Matrix& rows, std::size_t batch) const;

  const nn::ParamList& params() const { return params_; }
  // Independent copy of the parameters.
  TokenCodec clone() const;

 private:
  struct Stage {
    std::vector<SwinBlock> blocks;
    std::size_t dim = 0, grid_h = 0, grid_w = 0;
  };
  struct Resample {  // patch merging (encoder) or reverse merging (decoder)
    nn::LayerNorm norm;
    nn::Linear linear;
    std::size_t grid_h = 0, grid_w = 0;  // grid on the fine side
  };

  void build(nn::Rng& rng);
  void check_images(const std::vector<Image>& images) const;

  CodecConfig cfg_;
  Geometry geometry_;
  std::uint64_t seed_;

  nn::Linear patch_embed_;
  nn::LayerNorm patch_norm_;
  std::vector<Stage> enc_stages_;
  std::vector<Resample> merges_;
  nn::LayerNorm enc_norm_;
  nn::Linear enc_head_;

  nn::Linear dec_in_;
  std::vector<Stage> dec_stages_;
  std::vector<Resample> expands_;
  nn::LayerNorm dec_norm_;
  nn::Linear dec_head_;

  nn::ParamList params_;
};

}  // namespace semtok::codec
