#include "semtok/channel.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "semtok/error.hpp"
#include "semtok/seed.hpp"

namespace semtok::channel {

Normalized power_normalize(std::span<const double> elements, double power) {
  if (elements.empty()) throw ShapeError("power_normalize: empty input");
  if (!(power > 0.0)) throw DegeneratePowerError("power_normalize: power must be positive");
  double sum_sq = 0.0;
  for (double v : elements) sum_sq += v * v;
  if (sum_sq == 0.0) throw DegeneratePowerError("power_normalize: all-zero input");
  const double symbols = static_cast<double>((elements.size() + 1) / 2);
  Normalized out;
  out.scale = std::sqrt(power * symbols / sum_sq);
  out.elements.assign(elements.begin(), elements.end());
  for (double& v : out.elements) v *= out.scale;
  return out;
}

std::vector<cplx> pack_complex(std::span<const double> elements) {
  if (elements.empty()) throw ShapeError("pack_complex: empty input");
  std::vector<cplx> out((elements.size() + 1) / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double re = elements[2 * i];
    const double im = 2 * i + 1 < elements.size() ? elements[2 * i + 1] : 0.0;
    out[i] = {re, im};
  }
  return out;
}

std::vector<double> unpack_real(std::span<const cplx> symbols, std::size_t original_length) {
  if (original_length == 0 || (original_length + 1) / 2 != symbols.size()) {
    throw ShapeError("unpack_real: original length inconsistent with symbol count");
  }
  std::vector<double> out(original_length);
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    out[2 * i] = symbols[i].real();
    if (2 * i + 1 < original_length) out[2 * i + 1] = symbols[i].imag();
  }
  return out;
}

SymbolBlock make_symbol_block(std::span<const double> elements, std::size_t n_t, double power) {
  if (n_t == 0) throw ShapeError("make_symbol_block: n_t must be positive");
  if (elements.empty()) throw ShapeError("make_symbol_block: empty input");
  const std::size_t unit = 2 * n_t;
  const std::size_t padded = (elements.size() + unit - 1) / unit * unit;
  std::vector<double> buf(padded, 0.0);
  std::copy(elements.begin(), elements.end(), buf.begin());
  const Normalized norm = power_normalize(buf, power);
  const std::vector<cplx> sym = pack_complex(norm.elements);
  const std::size_t cols = sym.size() / n_t;
  SymbolBlock block;
  block.symbols.resize(static_cast<Eigen::Index>(n_t), static_cast<Eigen::Index>(cols));
  for (std::size_t t = 0; t < sym.size(); ++t) {
    block.symbols(static_cast<Eigen::Index>(t % n_t), static_cast<Eigen::Index>(t / n_t)) = sym[t];
  }
  block.scale = norm.scale;
  block.real_length = elements.size();
  return block;
}

std::vector<double> read_symbol_block(const CMatrix& symbols, double scale, std::size_t real_length) {
  const auto n_t = static_cast<std::size_t>(symbols.rows());
  const std::size_t needed = (real_length + 1) / 2;
  if (real_length == 0 || needed > n_t * static_cast<std::size_t>(symbols.cols())) {
    throw ShapeError("read_symbol_block: block too small for requested length");
  }
  std::vector<cplx> flat(needed);
  for (std::size_t t = 0; t < needed; ++t) {
    flat[t] = symbols(static_cast<Eigen::Index>(t % n_t), static_cast<Eigen::Index>(t / n_t)) / scale;
  }
  return unpack_real(flat, real_length);
}

double noise_var_from_snr(double snr_db, double power) {
  if (std::isinf(snr_db) && snr_db > 0) return 0.0;
  return power * std::pow(10.0, -snr_db / 10.0);
}

double snr_from_noise_var(double noise_var, double power) {
  if (noise_var == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(power / noise_var);
}

namespace {

CMatrix gaussian_matrix(std::size_t rows, std::size_t cols, double variance, std::uint64_t seed) {
  Rng64 rng(seed);
  std::normal_distribution<double> nd(0.0, std::sqrt(variance / 2.0));
  CMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double re = nd(rng);
      const double im = nd(rng);
      m(r, c) = {re, im};
    }
  }
  return m;
}

}  // namespace

ChannelRealization sample_channel(std::size_t n_t, std::size_t n_r, double snr_db, double power,
                                  std::uint64_t seed) {
  if (n_t == 0 || n_r == 0) throw ShapeError("sample_channel: antenna counts must be positive");
  if (!(power > 0.0)) throw DegeneratePowerError("sample_channel: power must be positive");
  ChannelRealization ch;
  ch.h = gaussian_matrix(n_r, n_t, 1.0, seed);
  ch.noise_var = noise_var_from_snr(snr_db, power);
  ch.power = power;
  ch.seed = seed;
  return ch;
}

CMatrix transmit(const CMatrix& symbols, const CMatrix& h, double noise_var, std::uint64_t seed) {
  if (h.cols() != symbols.rows()) throw ShapeError("transmit: H columns do not match antenna rows");
  if (noise_var < 0.0) throw ShapeError("transmit: negative noise variance");
  CMatrix y = h * symbols;
  if (noise_var > 0.0) y += gaussian_matrix(static_cast<std::size_t>(y.rows()),
                                            static_cast<std::size_t>(y.cols()), noise_var, seed);
  return y;
}

CMatrix transmit(const SymbolBlock& block, const ChannelRealization& ch, std::uint64_t seed) {
  return transmit(block.symbols, ch.h, ch.noise_var, seed);
}

CMatrix mmse_matrix(const CMatrix& h_hat, double noise_var, double power) {
  if (noise_var < 0.0) throw ShapeError("mmse: negative noise variance");
  if (!(power > 0.0)) throw DegeneratePowerError("mmse: power must be positive");
  const Eigen::Index n_r = h_hat.rows();
  CMatrix gram = h_hat * h_hat.adjoint();
  gram += CMatrix::Identity(n_r, n_r) * cplx(noise_var / power, 0.0);
  const Eigen::JacobiSVD<CMatrix> svd(gram);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0) || smax / smin > kMaxConditionNumber) {
    throw SingularityError("mmse: H H^H + (sigma^2/P) I is numerically singular");
  }
  // gram is Hermitian, so H^H gram^-1 = (gram^-1 H)^H.
  return gram.partialPivLu().solve(h_hat).adjoint();
}

CMatrix mmse_equalize(const CMatrix& y, const CMatrix& h_hat, double noise_var, double power) {
  if (y.rows() != h_hat.rows()) throw ShapeError("mmse: received rows do not match H rows");
  return mmse_matrix(h_hat, noise_var, power) * y;
}

CMatrix estimate_csi(const CMatrix& h, double error_var, std::uint64_t seed) {
  if (error_var <= 0.0) return h;
  return h + gaussian_matrix(static_cast<std::size_t>(h.rows()), static_cast<std::size_t>(h.cols()),
                             error_var, seed);
}

LinkResult run_link(std::span<const double> elements, const LinkConfig& cfg, std::uint64_t seed) {
  const SymbolBlock block = make_symbol_block(elements, cfg.n_t, cfg.power);
  const double noise_var = noise_var_from_snr(cfg.snr_db, cfg.power);
  const auto cols = static_cast<std::size_t>(block.symbols.cols());
  const std::size_t per = cfg.block_columns == 0 ? cols : cfg.block_columns;

  LinkResult out;
  out.block_columns = per;
  out.n_t = cfg.n_t;
  for (double v : elements) out.sum_sq += v * v;

  CMatrix equalized(block.symbols.rows(), block.symbols.cols());
  CMatrix eq_noise(block.symbols.rows(), block.symbols.cols());
  for (std::size_t c0 = 0, b = 0; c0 < cols; c0 += per, ++b) {
    const auto width = static_cast<Eigen::Index>(std::min(per, cols - c0));
    const auto start = static_cast<Eigen::Index>(c0);
    const ChannelRealization ch =
        sample_channel(cfg.n_t, cfg.n_r, cfg.snr_db, cfg.power, derive_seed(seed, 2 * b));
    const CMatrix h_hat = estimate_csi(ch.h, cfg.csi_error_var, derive_seed(seed, 2 * b + 1));
    const CMatrix g = mmse_matrix(h_hat, noise_var, cfg.power);
    CMatrix noise = CMatrix::Zero(static_cast<Eigen::Index>(cfg.n_r), width);
    if (noise_var > 0.0) {
      noise = gaussian_matrix(cfg.n_r, static_cast<std::size_t>(width), noise_var,
                              derive_seed(seed ^ 0x9e3779b97f4a7c15ULL, b));
    }
    const CMatrix y = ch.h * block.symbols.middleCols(start, width) + noise;
    equalized.middleCols(start, width) = g * y;
    eq_noise.middleCols(start, width) = g * noise;
    out.effective.push_back(g * ch.h);
  }
  out.received = read_symbol_block(equalized, block.scale, block.real_length);
  out.noise = read_symbol_block(eq_noise, block.scale, block.real_length);
  return out;
}

std::vector<double> link_backward(const LinkResult& link, std::span<const double> elements,
                                  std::span<const double> grad_received) {
  const std::size_t len = elements.size();
  if (grad_received.size() != len || link.received.size() != len) {
    throw ShapeError("link_backward: length mismatch");
  }
  const std::size_t n_t = link.n_t;
  const std::size_t unit = 2 * n_t;
  const std::size_t padded = (len + unit - 1) / unit * unit;
  const std::size_t cols = padded / unit;

  CMatrix g(static_cast<Eigen::Index>(n_t), static_cast<Eigen::Index>(cols));
  g.setZero();
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t t = i / 2;
    auto& cell = g(static_cast<Eigen::Index>(t % n_t), static_cast<Eigen::Index>(t / n_t));
    if (i % 2 == 0) {
      cell += cplx(grad_received[i], 0.0);
    } else {
      cell += cplx(0.0, grad_received[i]);
    }
  }
  CMatrix gz(g.rows(), g.cols());
  for (std::size_t c0 = 0, b = 0; c0 < cols; c0 += link.block_columns, ++b) {
    const auto width = static_cast<Eigen::Index>(std::min(link.block_columns, cols - c0));
    const auto start = static_cast<Eigen::Index>(c0);
    gz.middleCols(start, width) = link.effective[b].adjoint() * g.middleCols(start, width);
  }
  std::vector<double> out(len);
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t t = i / 2;
    const cplx v = gz(static_cast<Eigen::Index>(t % n_t), static_cast<Eigen::Index>(t / n_t));
    out[i] = i % 2 == 0 ? v.real() : v.imag();
  }
  // The noise term scales with 1/s(x) = |x| / sqrt(P m), so it contributes <g, noise> x / |x|^2.
  double gn = 0.0;
  for (std::size_t i = 0; i < len; ++i) gn += grad_received[i] * link.noise[i];
  if (gn != 0.0 && link.sum_sq > 0.0) {
    const double f = gn / link.sum_sq;
    for (std::size_t i = 0; i < len; ++i) out[i] += f * elements[i];
  }
  return out;
}

}  // namespace semtok::channel
