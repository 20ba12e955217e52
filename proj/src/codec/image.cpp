#include "semtok/image.hpp"

#include "semtok/error.hpp"

namespace semtok {

nn::Matrix to_patch_rows(const std::vector<Image>& images, std::size_t patch) {
  if (images.empty()) throw ShapeError("to_patch_rows: empty batch");
  const Image& first = images.front();
  if (patch == 0 || first.height % patch != 0 || first.width % patch != 0) {
    throw GeometryError("to_patch_rows: image not divisible by patch size");
  }
  const std::size_t gh = first.height / patch, gw = first.width / patch, c = first.channels;
  nn::Matrix out(images.size() * gh * gw, patch * patch * c);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& im = images[b];
    if (!im.same_shape(first)) throw ShapeError("to_patch_rows: mixed image shapes in batch");
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        double* row = out.row((b * gh + py) * gw + px);
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch)
              row[(dy * patch + dx) * c + ch] = im.at(py * patch + dy, px * patch + dx, ch);
      }
    }
  }
  return out;
}

std::vector<Image> from_patch_rows(const nn::Matrix& rows, std::size_t batch, std::size_t height,
                                   std::size_t width, std::size_t channels, std::size_t patch) {
  const std::size_t gh = height / patch, gw = width / patch;
  if (rows.rows() != batch * gh * gw || rows.cols() != patch * patch * channels) {
    throw ShapeError("from_patch_rows: layout does not match geometry");
  }
  std::vector<Image> out(batch, Image(height, width, channels));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        const double* row = rows.row((b * gh + py) * gw + px);
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t ch = 0; ch < channels; ++ch)
              out[b].at(py * patch + dy, px * patch + dx, ch) = row[(dy * patch + dx) * channels + ch];
      }
    }
  }
  return out;
}

}  // namespace semtok
