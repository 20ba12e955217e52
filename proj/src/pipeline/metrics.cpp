#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "semtok/error.hpp"
#include "semtok/metrics.hpp"

namespace semtok {

double compute_psnr(std::span<const double> x, std::span<const double> x_hat) {
  if (x.size() != x_hat.size()) {
    throw ShapeError("compute_psnr: " + std::to_string(x.size()) + " vs " + std::to_string(x_hat.size()) +
                     " values");
  }
  if (x.empty()) throw ShapeError("compute_psnr: empty input");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - x_hat[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double image_psnr(const Image& x, const Image& x_hat) {
  if (!x.same_shape(x_hat)) throw ShapeError("image_psnr: image shapes differ");
  std::vector<double> a(x.size()), b(x.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = 255.0 * x.pixels[i];
    b[i] = 255.0 * x_hat.pixels[i];
  }
  return compute_psnr(a, b);
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("not a number: '" + s + "'");
  return v;
}

namespace {

constexpr const char* kHeader = "stage,round,snr_db,cbr,rho,seed,mode,psnr_mean,psnr_std,n_samples";

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void MetricsReport::append(const MetricsReport& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

void MetricsReport::write_csv(std::ostream& os) const {
  os << kHeader << "\n";
  for (const auto& r : rows) {
    os << r.stage << ',' << r.round << ',' << format_number(r.snr_db) << ',' << format_number(r.cbr) << ','
       << format_number(r.rho) << ',' << r.seed << ',' << r.mode << ',' << format_number(r.psnr_mean) << ','
       << format_number(r.psnr_std) << ',' << r.n_samples << "\n";
  }
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  write_csv(os);
  std::ofstream meta(path + ".json");
  meta << nlohmann::json{{"config_hash", config_hash}, {"wall_seconds", wall_seconds}, {"rows", rows.size()}}.dump(2)
       << "\n";
  if (!os || !meta) throw IoError("write to '" + path + "' failed");
}

MetricsReport MetricsReport::read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != kHeader) throw IoError("'" + path + "' lacks the metrics header");
  MetricsReport rep;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split(line);
    if (c.size() != 10) throw IoError("'" + path + "': malformed row '" + line + "'");
    MetricsRow r;
    r.stage = c[0];
    r.round = std::stoull(c[1]);
    r.snr_db = parse_number(c[2]);
    r.cbr = parse_number(c[3]);
    r.rho = parse_number(c[4]);
    r.seed = std::stoull(c[5]);
    r.mode = c[6];
    r.psnr_mean = parse_number(c[7]);
    r.psnr_std = parse_number(c[8]);
    r.n_samples = std::stoull(c[9]);
    rep.rows.push_back(std::move(r));
  }
  std::ifstream meta(path + ".json");
  if (meta) {
    try {
      const auto j = nlohmann::json::parse(meta);
      rep.config_hash = j.value("config_hash", "");
      rep.wall_seconds = j.value("wall_seconds", 0.0);
    } catch (const nlohmann::json::exception&) {
      throw IoError("'" + path + ".json' is not valid metadata");
    }
  }
  return rep;
}

}  // namespace semtok
