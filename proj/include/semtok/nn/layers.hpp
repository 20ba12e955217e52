#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "semtok/nn/graph.hpp"

namespace semtok::nn {

struct NamedParam {
  std::string name;
  Var var;
};

// Ordered parameter registry. Order is the serialization order.
class ParamList {
 public:
  void add(std::string name, const Var& v) { params_.push_back({std::move(name), v}); }
  void append(const ParamList& other, const std::string& prefix);
  const std::vector<NamedParam>& items() const { return params_; }
  std::size_t count() const;  // total scalar parameters
  void zero_grad() const;

  // Flat copy of all values, and the inverse.
  std::vector<double> flatten() const;
  void assign(const std::vector<double>& flat) const;

  void save(std::ostream& os) const;
  void load(std::istream& is) const;

 private:
  std::vector<NamedParam> params_;
};

using Rng = std::mt19937_64;

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Var operator()(Graph& g, const Var& x) const { return g.linear(x, weight, bias); }
  void register_params(ParamList& p, const std::string& prefix) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Var operator()(Graph& g, const Var& x) const { return g.layer_norm(x, gamma, beta); }
  void register_params(ParamList& p, const std::string& prefix) const;
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(std::size_t dim, std::size_t hidden, Rng& rng);
  Var operator()(Graph& g, const Var& x) const { return fc2(g, g.gelu(fc1(g, x))); }
  void register_params(ParamList& p, const std::string& prefix) const;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg);
  // Applies one update from the accumulated grads, then zeroes them.
  void step();
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
};

// Deep copy of parameter values so that two models never alias.
Var clone_param(const Var& v);

}  // namespace semtok::nn
