#include "semtok/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "semtok/error.hpp"
#include "semtok/seed.hpp"

namespace semtok::data {

TextureSpec TextureSpec::shifted() {
  TextureSpec s;
  s.sigma_min = 0.5;
  s.sigma_max = 1.2;
  s.contrast = 0.3;
  s.color_mix = 0.2;
  return s;
}

void TextureSpec::validate() const {
  if (size == 0) throw ValidationError("dataset.size", "must be positive");
  if (channels == 0) throw ValidationError("dataset.channels", "must be positive");
  if (!(sigma_min > 0.0) || sigma_max < sigma_min) {
    throw ValidationError("dataset.sigma", "need 0 < sigma_min <= sigma_max");
  }
  if (!(contrast > 0.0)) throw ValidationError("dataset.contrast", "must be positive");
  if (color_mix < 0.0 || color_mix > 1.0) throw ValidationError("dataset.color_mix", "must lie in [0, 1]");
  if (brightness_jitter < 0.0) throw ValidationError("dataset.brightness_jitter", "must be non-negative");
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + r];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable blur with wrap-around borders, so textures tile seamlessly.
std::vector<double> blur(const std::vector<double>& f, std::size_t n, double sy, double sx) {
  const auto kx = gaussian_kernel(sx), ky = gaussian_kernel(sy);
  const int rx = static_cast<int>(kx.size() / 2), ry = static_cast<int>(ky.size() / 2);
  const int nn = static_cast<int>(n);
  std::vector<double> tmp(n * n), out(n * n);
  for (int y = 0; y < nn; ++y) {
    for (int x = 0; x < nn; ++x) {
      double s = 0.0;
      for (int d = -rx; d <= rx; ++d) s += kx[d + rx] * f[y * nn + ((x + d) % nn + nn) % nn];
      tmp[y * nn + x] = s;
    }
  }
  for (int y = 0; y < nn; ++y) {
    for (int x = 0; x < nn; ++x) {
      double s = 0.0;
      for (int d = -ry; d <= ry; ++d) s += ky[d + ry] * tmp[((y + d) % nn + nn) % nn * nn + x];
      out[y * nn + x] = s;
    }
  }
  return out;
}

void standardize(std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  for (double& x : v) x = sd > 0.0 ? (x - m) / sd : 0.0;
}

}  // namespace

std::vector<Image> synthetic_textures(std::size_t count, const TextureSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.size, c = spec.channels;
  std::vector<Image> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng64 rng(derive_seed(seed, i));
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(spec.sigma_min, spec.sigma_max);
    std::uniform_real_distribution<double> jitter(-spec.brightness_jitter, spec.brightness_jitter);
    const double sy = ud(rng), sx = ud(rng);
    auto field = [&] {
      std::vector<double> f(n * n);
      for (double& v : f) v = nd(rng);
      auto b = blur(f, n, sy, sx);
      standardize(b);
      return b;
    };
    const auto shared = field();
    Image img(n, n, c);
    const double wm = spec.color_mix, wo = std::sqrt(1.0 - wm * wm);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto own = field();
      const double base = 0.5 + jitter(rng);
      for (std::size_t p = 0; p < n * n; ++p) {
        const double v = base + spec.contrast * (wm * shared[p] + wo * own[p]);
        img.pixels[p * c + ch] = std::clamp(v, 0.0, 1.0);
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P6") throw IoError("'" + path + "' is not a binary PPM");
  std::size_t w = 0, h = 0, maxv = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxv = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError("'" + path + "' has a malformed header");
  }
  if (maxv != 255 || w == 0 || h == 0) throw IoError("'" + path + "' must be 8-bit RGB");
  std::vector<unsigned char> raw(w * h * 3);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) throw IoError("'" + path + "' is truncated");
  Image img(h, w, 3);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
  return img;
}

void write_ppm(const Image& img, const std::string& path) {
  if (img.channels != 3) throw ShapeError("write_ppm: RGB images only");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path + "'");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (double v : img.pixels) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(b));
  }
  if (!os) throw IoError("write to '" + path + "' failed");
}

std::vector<Image> load_image_dir(const std::string& dir, std::size_t size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ppm images in '" + dir + "'");
  std::vector<Image> out;
  for (const auto& f : files) {
    Image img = read_ppm(f.string());
    if (img.height != size || img.width != size) {
      throw GeometryError("'" + f.string() + "' is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", expected " + std::to_string(size) + "x" +
                          std::to_string(size));
    }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace semtok::data
