#pragma once
// Physical-layer simulation: power normalization, real/complex packing,
// block-fading MIMO Rayleigh channel with AWGN, and MMSE equalization.

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace semtok::channel {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;

struct Normalized {
  std::vector<double> elements;
  double scale = 1.0;  // elements = scale * input
};

// Scales `elements` so that, once packed into complex pairs, the mean squared
// symbol magnitude equals `power`. Throws DegeneratePowerError on all-zero input.
Normalized power_normalize(std::span<const double> elements, double power = 1.0);

// Consecutive pairs become (re, im); odd lengths are padded with one zero.
std::vector<cplx> pack_complex(std::span<const double> elements);
// Inverse of pack_complex. original_length must be 2n or 2n-1 for n symbols.
std::vector<double> unpack_real(std::span<const cplx> symbols, std::size_t original_length);

// Symbols laid out column-wise over n_t antenna rows.
struct SymbolBlock {
  CMatrix symbols;          // n_t x S
  double scale = 1.0;       // normalization applied at the transmitter
  std::size_t real_length = 0;  // real elements before padding
};

// Pads to a multiple of 2*n_t reals, normalizes to `power` over the whole
// block and reshapes column-wise (symbol t -> row t % n_t, column t / n_t).
SymbolBlock make_symbol_block(std::span<const double> elements, std::size_t n_t, double power = 1.0);
// Undoes the column-wise layout, padding and the transmitter scale.
std::vector<double> read_symbol_block(const CMatrix& symbols, double scale, std::size_t real_length);

struct ChannelRealization {
  CMatrix h;  // n_r x n_t, entries CN(0, 1)
  double noise_var = 0.0;
  double power = 1.0;
  std::uint64_t seed = 0;
};

// sigma^2 = P * 10^(-snr_db / 10); +inf dB gives a noiseless channel.
double noise_var_from_snr(double snr_db, double power = 1.0);
double snr_from_noise_var(double noise_var, double power = 1.0);

ChannelRealization sample_channel(std::size_t n_t, std::size_t n_r, double snr_db, double power,
                                  std::uint64_t seed);

// Y = H * symbols + N with N i.i.d. CN(0, noise_var), N drawn from `seed`.
CMatrix transmit(const SymbolBlock& block, const ChannelRealization& ch, std::uint64_t seed);
CMatrix transmit(const CMatrix& symbols, const CMatrix& h, double noise_var, std::uint64_t seed);

// G = H^H (H H^H + (sigma^2 / P) I)^-1, computed through a linear solve.
// Throws SingularityError when the Gram term's condition number exceeds 1e12.
CMatrix mmse_matrix(const CMatrix& h_hat, double noise_var, double power);
CMatrix mmse_equalize(const CMatrix& y, const CMatrix& h_hat, double noise_var, double power);

// h + E with E i.i.d. CN(0, error_var).
CMatrix estimate_csi(const CMatrix& h, double error_var, std::uint64_t seed);

inline constexpr double kMaxConditionNumber = 1e12;

// End-to-end link used by the training pipeline: normalize, pack, send over
// block-fading MIMO, equalize and unpack back to reals at the original scale.
struct LinkConfig {
  std::size_t n_t = 2;
  std::size_t n_r = 2;
  double snr_db = 10.0;
  double power = 1.0;
  double csi_error_var = 0.0;
  std::size_t block_columns = 0;  // columns per H draw; 0 holds H for the whole block
};

struct LinkResult {
  std::vector<double> received;  // same length as the input
  std::vector<double> noise;     // additive part of `received` (equalized noise / scale)
  std::vector<CMatrix> effective;  // G*H per fading block
  std::size_t block_columns = 0;
  std::size_t n_t = 0;
  double sum_sq = 0.0;  // sum of squared input elements
};

LinkResult run_link(std::span<const double> elements, const LinkConfig& cfg, std::uint64_t seed);
// d(loss)/d(elements) given d(loss)/d(received) for a LinkResult computed on `elements`.
std::vector<double> link_backward(const LinkResult& link, std::span<const double> elements,
                                  std::span<const double> grad_received);

}  // namespace semtok::channel
