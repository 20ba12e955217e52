#pragma once
// Tape-based reverse-mode differentiation over row-major matrices.
//
// A Graph records one forward pass. Every op returns a Var holding the result
// value; when the Graph records and any input needs a gradient, the op also
// pushes a backward closure. backward() replays the closures in reverse order,
// accumulating into Node::grad. Parameters are long-lived Vars created with
// make_param(); their grads persist across graphs until zeroed.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "semtok/nn/matrix.hpp"

namespace semtok::nn {

struct Node {
  Matrix value;
  Matrix grad;  // allocated lazily
  bool needs_grad = false;

  Matrix& grad_buffer() {
    if (grad.size() != value.size() || !grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    return grad;
  }
  void zero_grad() {
    if (!grad.empty()) grad.fill(0.0);
  }
};

using Var = std::shared_ptr<Node>;

Var make_param(Matrix value);
Var make_const(Matrix value);

// Attention over consecutive row groups of a packed [q | k | v] matrix.
struct AttentionSpec {
  std::size_t heads = 1;
  std::size_t group = 1;  // rows per attention group (window area or sequence length)
  bool causal = false;
  // Optional learnable relative-position bias: table is (entries x heads);
  // bias_index has group*group entries mapping (i, j) to a table row.
  Var bias_table;
  std::vector<std::uint32_t> bias_index;
  // Optional visibility masks, one (group x group) block per mask slot; group
  // number q uses slot q % mask_slots. Nonzero means "may attend".
  std::vector<std::uint8_t> mask;
  std::size_t mask_slots = 0;
};

class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  // Generic op: caller supplies the value and a closure mapping the output
  // gradient into input gradients.
  Var custom(const std::vector<Var>& inputs, Matrix value,
             std::function<void(const Matrix& grad_out)> backward);

  // x (n x in) * w (in x out) + bias (1 x out, optional).
  Var linear(const Var& x, const Var& w, const Var& bias = nullptr);
  Var add(const Var& a, const Var& b);
  // x + table[r % table.rows()] for every row r.
  Var add_periodic_rows(const Var& x, const Var& table);
  Var scale(const Var& x, double s);
  Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
  // tanh-approximated GELU.
  Var gelu(const Var& x);
  Var sigmoid(const Var& x);
  Var softmax_rows(const Var& x);
  Var attention(const Var& qkv, const AttentionSpec& spec);
  // out[i] = x[index[i]]; index entries may repeat or skip rows.
  Var gather_rows(const Var& x, std::vector<std::uint32_t> index);
  Var reshape(const Var& x, std::size_t rows, std::size_t cols);
  // Mean over consecutive groups of `group` rows.
  Var group_mean(const Var& x, std::size_t group);
  Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
  // Appends zero columns up to `cols`.
  Var pad_cols(const Var& x, std::size_t cols);
  // Columns [0, prefix.cols()) from prefix, the rest from full.
  Var splice_cols(const Var& full, const Var& prefix);
  // Mean of squared differences against a constant target.
  Var mse(const Var& x, const Matrix& target);
  // Mean over rows of alpha*KL(teacher || softmax(logits)) + (1-alpha)*CE(label).
  Var memory_loss(const Var& logits, const Matrix& teacher, const std::vector<std::uint32_t>& labels,
                  double alpha);

  // Seeds d(loss)/d(loss) = 1 and runs the tape. loss must be 1x1.
  void backward(const Var& loss);

 private:
  Var make_result(Matrix value, std::initializer_list<const Var*> inputs);
  void push(std::function<void()> fn) { tape_.push_back(std::move(fn)); }
  bool wants(const Var& out) const { return record_ && out->needs_grad; }

  bool record_;
  std::vector<std::function<void()>> tape_;
};

// Floor applied inside logarithms of the memory loss.
inline constexpr double kLogFloor = 1e-12;

}  // namespace semtok::nn
