#pragma once
// Image datasets: a seed-deterministic synthetic texture generator and a
// loader for directories of 8-bit RGB images.

#include <cstdint>
#include <string>
#include <vector>

#include "semtok/image.hpp"

namespace semtok::data {

// Gaussian-filtered noise fields. Each image draws a blur width per axis
// from [sigma_min, sigma_max] (pixels), so the range sets the spectral
// content; the color mix correlates channels.
struct TextureSpec {
  std::size_t size = 32;
  std::size_t channels = 3;
  double sigma_min = 1.5;
  double sigma_max = 4.0;
  double contrast = 0.22;      // std of pixel values around the image mean
  double color_mix = 0.6;      // weight of the shared component across channels
  double brightness_jitter = 0.15;

  // Finer, higher-contrast and less correlated statistics whose blur range
  // does not overlap the default one.
  static TextureSpec shifted();
  void validate() const;
};

std::vector<Image> synthetic_textures(std::size_t count, const TextureSpec& spec, std::uint64_t seed);

// Reads every binary PPM (P6, maxval 255) file in `dir` in lexicographic
// order; all images must be square with side `size`.
std::vector<Image> load_image_dir(const std::string& dir, std::size_t size);

Image read_ppm(const std::string& path);
void write_ppm(const Image& img, const std::string& path);

}  // namespace semtok::data
