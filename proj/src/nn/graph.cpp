#include "semtok/nn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "semtok/kernels.hpp"

namespace semtok::nn {

namespace k = semtok::kernels;

Var make_param(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->needs_grad = true;
  return n;
}

Var make_const(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var Graph::make_result(Matrix value, std::initializer_list<const Var*> inputs) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var* in : inputs) {
    if (*in && (*in)->needs_grad) n->needs_grad = true;
  }
  n->needs_grad = n->needs_grad && record_;
  return n;
}

Var Graph::custom(const std::vector<Var>& inputs, Matrix value,
                  std::function<void(const Matrix& grad_out)> backward) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  for (const Var& in : inputs) {
    if (in && in->needs_grad) out->needs_grad = true;
  }
  out->needs_grad = out->needs_grad && record_;
  if (wants(out)) {
    push([out, fn = std::move(backward)] {
      if (!out->grad.empty()) fn(out->grad);
    });
  }
  return out;
}

Var Graph::linear(const Var& x, const Var& w, const Var& bias) {
  const Matrix& xv = x->value;
  const Matrix& wv = w->value;
  if (xv.cols() != wv.rows()) throw ShapeError("linear: input width does not match weight rows");
  const std::size_t n = xv.rows(), in = wv.rows(), outc = wv.cols();
  Matrix y = Matrix::uninit(n, outc);
  k::gemm(k::Trans::kNo, k::Trans::kNo, n, outc, in, 1.0, xv.data(), in, wv.data(), outc, 0.0,
          y.data(), outc);
  if (bias) {
    if (bias->value.size() != outc) throw ShapeError("linear: bias width mismatch");
    const double* b = bias->value.data();
    for (std::size_t r = 0; r < n; ++r) k::axpy(1.0, b, y.row(r), outc);
  }
  Var out = make_result(std::move(y), {&x, &w, &bias});
  if (wants(out)) {
    push([x, w, bias, out, n, in, outc] {
      if (out->grad.empty()) return;
      const Matrix& gy = out->grad;
      if (x->needs_grad) {
        k::gemm(k::Trans::kNo, k::Trans::kYes, n, in, outc, 1.0, gy.data(), outc,
                w->value.data(), outc, 1.0, x->grad_buffer().data(), in);
      }
      if (w->needs_grad) {
        k::gemm(k::Trans::kYes, k::Trans::kNo, in, outc, n, 1.0, x->value.data(), in, gy.data(),
                outc, 1.0, w->grad_buffer().data(), outc);
      }
      if (bias && bias->needs_grad) {
        double* gb = bias->grad_buffer().data();
        for (std::size_t r = 0; r < n; ++r) k::axpy(1.0, gy.row(r), gb, outc);
      }
    });
  }
  return out;
}

Var Graph::add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw ShapeError("add: shape mismatch");
  Matrix y = a->value;
  k::axpy(1.0, b->value.data(), y.data(), y.size());
  Var out = make_result(std::move(y), {&a, &b});
  if (wants(out)) {
    push([a, b, out] {
      if (out->grad.empty()) return;
      for (const Var* v : {&a, &b}) {
        if ((*v)->needs_grad) k::axpy(1.0, out->grad.data(), (*v)->grad_buffer().data(), out->grad.size());
      }
    });
  }
  return out;
}

Var Graph::add_periodic_rows(const Var& x, const Var& table) {
  const std::size_t period = table->value.rows();
  const std::size_t c = x->value.cols();
  if (table->value.cols() != c || period == 0 || x->value.rows() % period != 0) {
    throw ShapeError("add_periodic_rows: shape mismatch");
  }
  Matrix y = x->value;
  for (std::size_t r = 0; r < y.rows(); ++r) k::axpy(1.0, table->value.row(r % period), y.row(r), c);
  Var out = make_result(std::move(y), {&x, &table});
  if (wants(out)) {
    push([x, table, out, period, c] {
      if (out->grad.empty()) return;
      const Matrix& g = out->grad;
      if (x->needs_grad) k::axpy(1.0, g.data(), x->grad_buffer().data(), g.size());
      if (table->needs_grad) {
        Matrix& gt = table->grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r) k::axpy(1.0, g.row(r), gt.row(r % period), c);
      }
    });
  }
  return out;
}

Var Graph::scale(const Var& x, double s) {
  Matrix y = x->value;
  for (double& v : y.vec()) v *= s;
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, s] {
      if (out->grad.empty() || !x->needs_grad) return;
      k::axpy(s, out->grad.data(), x->grad_buffer().data(), out->grad.size());
    });
  }
  return out;
}

Var Graph::layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& xv = x->value;
  const std::size_t n = xv.rows(), c = xv.cols();
  if (gamma->value.size() != c || beta->value.size() != c) throw ShapeError("layer_norm: width mismatch");
  Matrix xhat = Matrix::uninit(n, c);
  std::vector<double> inv_std(n);
  Matrix y = Matrix::uninit(n, c);
  const double* g = gamma->value.data();
  const double* b = beta->value.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.row(r);
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* hr = xhat.row(r);
    double* yr = y.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mean) * is;
      yr[j] = hr[j] * g[j] + b[j];
    }
  }
  Var out = make_result(std::move(y), {&x, &gamma, &beta});
  if (wants(out)) {
    push([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c] {
      if (out->grad.empty()) return;
      const Matrix& gy = out->grad;
      const double* gm = gamma->value.data();
      if (gamma->needs_grad || beta->needs_grad) {
        double* gg = gamma->needs_grad ? gamma->grad_buffer().data() : nullptr;
        double* gb = beta->needs_grad ? beta->grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = gy.row(r);
          const double* hr = xhat.row(r);
          for (std::size_t j = 0; j < c; ++j) {
            if (gg) gg[j] += gr[j] * hr[j];
            if (gb) gb[j] += gr[j];
          }
        }
      }
      if (x->needs_grad) {
        Matrix& gx = x->grad_buffer();
        std::vector<double> dh(c);
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = gy.row(r);
          const double* hr = xhat.row(r);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dh[j] = gr[j] * gm[j];
            m1 += dh[j];
            m2 += dh[j] * hr[j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          double* gxr = gx.row(r);
          for (std::size_t j = 0; j < c; ++j) gxr[j] += inv_std[r] * (dh[j] - m1 - hr[j] * m2);
        }
      }
    });
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var Graph::gelu(const Var& x) {
  const std::size_t m = x->value.size();
  Matrix y = Matrix::uninit(x->value.rows(), x->value.cols());
  std::vector<double> t(m);
  const double* xv = x->value.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double v = xv[i];
    t[i] = 2.0 * kGeluC * (v + kGeluA * v * v * v);
  }
  k::vexp(t.data(), t.data(), m);
  double* yv = y.data();
  for (std::size_t i = 0; i < m; ++i) {
    t[i] = 1.0 - 2.0 / (t[i] + 1.0);  // tanh(u) from exp(2u)
    yv[i] = 0.5 * xv[i] * (1.0 + t[i]);
  }
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, t = std::move(t)] {
      if (out->grad.empty() || !x->needs_grad) return;
      const double* xv = x->value.data();
      const double* gy = out->grad.data();
      double* gx = x->grad_buffer().data();
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = xv[i];
        const double d =
            0.5 * (1.0 + t[i]) + 0.5 * v * (1.0 - t[i] * t[i]) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        gx[i] += gy[i] * d;
      }
    });
  }
  return out;
}

Var Graph::sigmoid(const Var& x) {
  Matrix y = Matrix::uninit(x->value.rows(), x->value.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = -x->value.data()[i];
  k::vexp(y.data(), y.data(), y.size());
  for (double& v : y.vec()) v = 1.0 / (1.0 + v);
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out] {
      if (out->grad.empty() || !x->needs_grad) return;
      const double* yv = out->value.data();
      const double* gy = out->grad.data();
      double* gx = x->grad_buffer().data();
      for (std::size_t i = 0; i < out->grad.size(); ++i) gx[i] += gy[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return out;
}

Var Graph::softmax_rows(const Var& x) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  Matrix y = Matrix::uninit(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x->value.row(r);
    double* yr = y.row(r);
    const double mx = *std::max_element(xr, xr + c);
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] - mx;
    k::vexp(yr, yr, c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += yr[j];
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j) yr[j] *= inv;
  }
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, n, c] {
      if (out->grad.empty() || !x->needs_grad) return;
      Matrix& gx = x->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        const double* p = out->value.row(r);
        const double* g = out->grad.row(r);
        const double dotpg = k::dot(p, g, c);
        double* gr = gx.row(r);
        for (std::size_t j = 0; j < c; ++j) gr[j] += p[j] * (g[j] - dotpg);
      }
    });
  }
  return out;
}

Var Graph::attention(const Var& qkv, const AttentionSpec& spec) {
  const Matrix& in = qkv->value;
  const std::size_t n = in.rows();
  const std::size_t g = spec.group;
  const std::size_t heads = spec.heads;
  if (in.cols() % 3 != 0) throw ShapeError("attention: qkv width not divisible by 3");
  const std::size_t d = in.cols() / 3;
  if (g == 0 || n % g != 0) throw ShapeError("attention: rows not divisible by group");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const bool has_bias = static_cast<bool>(spec.bias_table);
  if (has_bias && (spec.bias_index.size() != g * g || spec.bias_table->value.cols() != heads)) {
    throw ShapeError("attention: bias table shape mismatch");
  }
  if (spec.mask_slots > 0 && spec.mask.size() != spec.mask_slots * g * g) {
    throw ShapeError("attention: mask shape mismatch");
  }
  const std::size_t hd = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t groups = n / g;

  // probs laid out as [group][head][i][j]
  std::vector<double> probs(groups * heads * g * g, 0.0);
  Matrix y(n, d);
  std::vector<double> row_scores(g);
  for (std::size_t q = 0; q < groups; ++q) {
    const std::uint8_t* mask =
        spec.mask_slots > 0 ? spec.mask.data() + (q % spec.mask_slots) * g * g : nullptr;
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (q * heads + h) * g * g;
      for (std::size_t i = 0; i < g; ++i) {
        const double* qi = in.row(q * g + i) + h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < g; ++j) {
          const bool allowed = (!spec.causal || j <= i) && (!mask || mask[i * g + j] != 0);
          if (!allowed) {
            row_scores[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          double s = sc * k::dot(qi, in.row(q * g + j) + d + h * hd, hd);
          if (has_bias) s += spec.bias_table->value(spec.bias_index[i * g + j], h);
          row_scores[j] = s;
          mx = std::max(mx, s);
        }
        for (std::size_t j = 0; j < g; ++j) P[i * g + j] = row_scores[j] - mx;
        k::vexp(P + i * g, P + i * g, g);
        double z = 0.0;
        for (std::size_t j = 0; j < g; ++j) z += P[i * g + j];
        double* yi = y.row(q * g + i) + h * hd;
        for (std::size_t j = 0; j < g; ++j) {
          P[i * g + j] /= z;
          if (P[i * g + j] != 0.0) k::axpy(P[i * g + j], in.row(q * g + j) + 2 * d + h * hd, yi, hd);
        }
      }
    }
  }
  const Var& table = spec.bias_table;
  Var out = make_result(std::move(y), {&qkv, &table});
  if (wants(out)) {
    push([qkv, out, table, bias_index = spec.bias_index, probs = std::move(probs), g, heads, hd, d,
          sc, groups] {
      if (out->grad.empty()) return;
      const Matrix& in = qkv->value;
      const Matrix& gy = out->grad;
      Matrix* gin = qkv->needs_grad ? &qkv->grad_buffer() : nullptr;
      Matrix* gt = table && table->needs_grad ? &table->grad_buffer() : nullptr;
      std::vector<double> dp(g);
      for (std::size_t q = 0; q < groups; ++q) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* P = probs.data() + (q * heads + h) * g * g;
          for (std::size_t i = 0; i < g; ++i) {
            const double* gyi = gy.row(q * g + i) + h * hd;
            double sum = 0.0;
            for (std::size_t j = 0; j < g; ++j) {
              const double p = P[i * g + j];
              if (p == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              dp[j] = k::dot(gyi, in.row(q * g + j) + 2 * d + h * hd, hd);
              sum += p * dp[j];
              if (gin) k::axpy(p, gyi, gin->row(q * g + j) + 2 * d + h * hd, hd);
            }
            for (std::size_t j = 0; j < g; ++j) {
              const double p = P[i * g + j];
              if (p == 0.0) continue;
              const double ds = p * (dp[j] - sum);
              if (gin) {
                k::axpy(sc * ds, in.row(q * g + j) + d + h * hd, gin->row(q * g + i) + h * hd, hd);
                k::axpy(sc * ds, in.row(q * g + i) + h * hd, gin->row(q * g + j) + d + h * hd, hd);
              }
              if (gt) (*gt)(bias_index[i * g + j], h) += ds;
            }
          }
        }
      }
    });
  }
  return out;
}

Var Graph::gather_rows(const Var& x, std::vector<std::uint32_t> index) {
  const std::size_t c = x->value.cols();
  Matrix y = Matrix::uninit(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x->value.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x->value.row(index[i]), c, y.row(i));
  }
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, index = std::move(index), c] {
      if (out->grad.empty() || !x->needs_grad) return;
      Matrix& gx = x->grad_buffer();
      for (std::size_t i = 0; i < index.size(); ++i) k::axpy(1.0, out->grad.row(i), gx.row(index[i]), c);
    });
  }
  return out;
}

Var Graph::reshape(const Var& x, std::size_t rows, std::size_t cols) {
  Matrix y = x->value;
  y.reshape(rows, cols);
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out] {
      if (out->grad.empty() || !x->needs_grad) return;
      k::axpy(1.0, out->grad.data(), x->grad_buffer().data(), out->grad.size());
    });
  }
  return out;
}

Var Graph::group_mean(const Var& x, std::size_t group) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (group == 0 || n % group != 0) throw ShapeError("group_mean: rows not divisible by group");
  const double inv = 1.0 / static_cast<double>(group);
  Matrix y(n / group, c);
  for (std::size_t r = 0; r < n; ++r) k::axpy(inv, x->value.row(r), y.row(r / group), c);
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, group, inv, n, c] {
      if (out->grad.empty() || !x->needs_grad) return;
      Matrix& gx = x->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) k::axpy(inv, out->grad.row(r / group), gx.row(r), c);
    });
  }
  return out;
}

Var Graph::slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (begin > end || end > c) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Matrix y = Matrix::uninit(n, w);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x->value.row(r) + begin, w, y.row(r));
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, begin, w, n] {
      if (out->grad.empty() || !x->needs_grad) return;
      Matrix& gx = x->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) k::axpy(1.0, out->grad.row(r), gx.row(r) + begin, w);
    });
  }
  return out;
}

Var Graph::pad_cols(const Var& x, std::size_t cols) {
  const std::size_t n = x->value.rows(), c = x->value.cols();
  if (cols < c) throw ShapeError("pad_cols: target narrower than input");
  Matrix y(n, cols);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x->value.row(r), c, y.row(r));
  Var out = make_result(std::move(y), {&x});
  if (wants(out)) {
    push([x, out, n, c] {
      if (out->grad.empty() || !x->needs_grad) return;
      Matrix& gx = x->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) k::axpy(1.0, out->grad.row(r), gx.row(r), c);
    });
  }
  return out;
}

Var Graph::splice_cols(const Var& full, const Var& prefix) {
  const std::size_t n = full->value.rows(), c = full->value.cols(), p = prefix->value.cols();
  if (prefix->value.rows() != n || p > c) throw ShapeError("splice_cols: shape mismatch");
  Matrix y = full->value;
  for (std::size_t r = 0; r < n; ++r) std::copy_n(prefix->value.row(r), p, y.row(r));
  Var out = make_result(std::move(y), {&full, &prefix});
  if (wants(out)) {
    push([full, prefix, out, n, c, p] {
      if (out->grad.empty()) return;
      if (full->needs_grad) {
        Matrix& gf = full->grad_buffer();
        for (std::size_t r = 0; r < n; ++r) k::axpy(1.0, out->grad.row(r) + p, gf.row(r) + p, c - p);
      }
      if (prefix->needs_grad) {
        Matrix& gp = prefix->grad_buffer();
        for (std::size_t r = 0; r < n; ++r) k::axpy(1.0, out->grad.row(r), gp.row(r), p);
      }
    });
  }
  return out;
}

Var Graph::mse(const Var& x, const Matrix& target) {
  if (!x->value.same_shape(target)) throw ShapeError("mse: shape mismatch");
  const std::size_t m = target.size();
  if (m == 0) throw ShapeError("mse: empty input");
  const double s = k::sq_dist(x->value.data(), target.data(), m) / static_cast<double>(m);
  Var out = make_result(Matrix(1, 1, s), {&x});
  if (wants(out)) {
    push([x, out, target, m] {
      if (out->grad.empty() || !x->needs_grad) return;
      const double g = out->grad(0, 0) * 2.0 / static_cast<double>(m);
      double* gx = x->grad_buffer().data();
      const double* xv = x->value.data();
      const double* tv = target.data();
      for (std::size_t i = 0; i < m; ++i) gx[i] += g * (xv[i] - tv[i]);
    });
  }
  return out;
}

Var Graph::memory_loss(const Var& logits, const Matrix& teacher,
                       const std::vector<std::uint32_t>& labels, double alpha) {
  const std::size_t n = logits->value.rows(), kk = logits->value.cols();
  if (!teacher.same_shape(logits->value) || labels.size() != n) {
    throw ShapeError("memory_loss: teacher/label shape mismatch");
  }
  const double log_floor = std::log(kLogFloor);
  Matrix logp(n, kk);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= kk) throw ShapeError("memory_loss: label out of range");
    const double* z = logits->value.row(r);
    const double mx = *std::max_element(z, z + kk);
    double s = 0.0;
    for (std::size_t j = 0; j < kk; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    double* lp = logp.row(r);
    for (std::size_t j = 0; j < kk; ++j) lp[j] = z[j] - lse;
    const double* t = teacher.row(r);
    double kl = 0.0;
    for (std::size_t j = 0; j < kk; ++j) {
      if (t[j] <= 0.0) continue;
      kl += t[j] * (std::log(std::max(t[j], kLogFloor)) - std::max(lp[j], log_floor));
    }
    const double ce = -std::max(lp[labels[r]], log_floor);
    total += alpha * kl + (1.0 - alpha) * ce;
  }
  Var out = make_result(Matrix(1, 1, total / static_cast<double>(n)), {&logits});
  if (wants(out)) {
    push([logits, out, teacher, labels, alpha, logp = std::move(logp), n, kk, log_floor] {
      if (out->grad.empty() || !logits->needs_grad) return;
      const double g = out->grad(0, 0) / static_cast<double>(n);
      Matrix& gz = logits->grad_buffer();
      std::vector<double> w(kk);
      for (std::size_t r = 0; r < n; ++r) {
        const double* lp = logp.row(r);
        const double* t = teacher.row(r);
        double wsum = 0.0;
        for (std::size_t j = 0; j < kk; ++j) {
          double wj = alpha * (t[j] > 0.0 ? t[j] : 0.0);
          if (j == labels[r]) wj += 1.0 - alpha;
          if (lp[j] <= log_floor) wj = 0.0;
          w[j] = wj;
          wsum += wj;
        }
        double* gr = gz.row(r);
        for (std::size_t j = 0; j < kk; ++j) gr[j] += g * (wsum * std::exp(lp[j]) - w[j]);
      }
    });
  }
  return out;
}

void Graph::backward(const Var& loss) {
  if (loss->value.size() != 1) throw ShapeError("backward: loss must be a scalar");
  if (!loss->needs_grad) return;
  loss->grad_buffer()(0, 0) += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  tape_.clear();
}

}  // namespace semtok::nn
