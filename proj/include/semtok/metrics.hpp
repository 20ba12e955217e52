#pragma once
// PSNR and the tabular metrics report shared by the pipeline and the CLI.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "semtok/image.hpp"

namespace semtok {

// 10 log10(255^2 / MSE) over values in the 0..255 domain. Identical inputs
// give +infinity, serialized as "inf".
double compute_psnr(std::span<const double> x, std::span<const double> x_hat);
// Same for [0, 1] images (scaled to 0..255 first).
double image_psnr(const Image& x, const Image& x_hat);

struct MetricsRow {
  std::string stage;
  std::size_t round = 0;
  double snr_db = 0.0;
  double cbr = 0.0;
  double rho = 1.0;
  std::uint64_t seed = 0;
  std::string mode;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  std::size_t n_samples = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::string config_hash;
  double wall_seconds = 0.0;

  void append(const MetricsReport& other);
  // Comma-separated with a header row; metadata goes to "<path>.json".
  void write_csv(const std::string& path) const;
  void write_csv(std::ostream& os) const;
  static MetricsReport read_csv(const std::string& path);
};

// Formats a double for tabular output ("inf", "-inf", "nan" or round-trip digits).
std::string format_number(double v);
double parse_number(const std::string& s);

}  // namespace semtok
