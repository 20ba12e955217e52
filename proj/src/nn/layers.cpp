#include "semtok/nn/layers.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace semtok::nn {

void ParamList::append(const ParamList& other, const std::string& prefix) {
  for (const auto& p : other.params_) params_.push_back({prefix + p.name, p.var});
}

std::size_t ParamList::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->value.size();
  return n;
}

void ParamList::zero_grad() const {
  for (const auto& p : params_) p.var->zero_grad();
}

std::vector<double> ParamList::flatten() const {
  std::vector<double> flat;
  flat.reserve(count());
  for (const auto& p : params_) flat.insert(flat.end(), p.var->value.vec().begin(), p.var->value.vec().end());
  return flat;
}

void ParamList::assign(const std::vector<double>& flat) const {
  if (flat.size() != count()) throw ShapeError("parameter vector size mismatch");
  std::size_t off = 0;
  for (const auto& p : params_) {
    auto& v = p.var->value.vec();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), v.size(), v.begin());
    off += v.size();
  }
}

void ParamList::save(std::ostream& os) const {
  const std::uint64_t n = params_.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (const auto& p : params_) {
    const std::uint64_t len = p.name.size();
    const std::uint64_t r = p.var->value.rows(), c = p.var->value.cols();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(p.name.data(), static_cast<std::streamsize>(len));
    os.write(reinterpret_cast<const char*>(&r), sizeof r);
    os.write(reinterpret_cast<const char*>(&c), sizeof c);
    os.write(reinterpret_cast<const char*>(p.var->value.data()),
             static_cast<std::streamsize>(r * c * sizeof(double)));
  }
}

void ParamList::load(std::istream& is) const {
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!is || n != params_.size()) throw IoError("parameter blob: tensor count mismatch");
  for (const auto& p : params_) {
    std::uint64_t len = 0, r = 0, c = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    is.read(reinterpret_cast<char*>(&r), sizeof r);
    is.read(reinterpret_cast<char*>(&c), sizeof c);
    if (!is || name != p.name || r != p.var->value.rows() || c != p.var->value.cols()) {
      throw IoError("parameter blob: tensor '" + p.name + "' missing or reshaped");
    }
    is.read(reinterpret_cast<char*>(p.var->value.data()), static_cast<std::streamsize>(r * c * sizeof(double)));
    if (!is) throw IoError("parameter blob: truncated data for '" + p.name + "'");
  }
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix w(in, out);
  for (double& v : w.vec()) v = u(rng);
  weight = make_param(std::move(w));
  if (with_bias) bias = make_param(Matrix(1, out));
}

void Linear::register_params(ParamList& p, const std::string& prefix) const {
  p.add(prefix + ".weight", weight);
  if (bias) p.add(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(make_param(Matrix(1, dim, 1.0))), beta(make_param(Matrix(1, dim))) {}

void LayerNorm::register_params(ParamList& p, const std::string& prefix) const {
  p.add(prefix + ".gamma", gamma);
  p.add(prefix + ".beta", beta);
}

Mlp::Mlp(std::size_t dim, std::size_t hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

void Mlp::register_params(ParamList& p, const std::string& prefix) const {
  fc1.register_params(p, prefix + ".fc1");
  fc2.register_params(p, prefix + ".fc2");
}

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_.items()) {
    m_.emplace_back(p.var->value.rows(), p.var->value.cols());
    v_.emplace_back(p.var->value.rows(), p.var->value.cols());
  }
}

void Adam::step() {
  ++t_;
  double clip = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_.items()) {
      for (double g : p.var->grad.vec()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto& items = params_.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Node& n = *items[i].var;
    if (n.grad.empty()) continue;
    double* w = n.value.data();
    const double* g = n.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < n.value.size(); ++j) {
      const double gj = g[j] * clip + cfg_.weight_decay * w[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      w[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
    n.zero_grad();
  }
}

Var clone_param(const Var& v) {
  if (!v) return nullptr;
  auto n = std::make_shared<Node>();
  n->value = v->value;
  n->needs_grad = v->needs_grad;
  return n;
}

}  // namespace semtok::nn
