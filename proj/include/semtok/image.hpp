#pragma once

#include <cstddef>
#include <vector>

#include "semtok/nn/matrix.hpp"

namespace semtok {

// HWC image with values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

// Patch-row layout: one row per (image, patch_y, patch_x) in raster order;
// columns run over (dy, dx, channel) inside the patch.
nn::Matrix to_patch_rows(const std::vector<Image>& images, std::size_t patch);
std::vector<Image> from_patch_rows(const nn::Matrix& rows, std::size_t batch, std::size_t height,
                                   std::size_t width, std::size_t channels, std::size_t patch);

}  // namespace semtok
