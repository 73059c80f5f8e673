#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "step/tensor.hpp"

namespace step {

using TokenId = std::uint32_t;

// Handle to a node on a Tape.
struct Var {
  std::size_t index = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward() walks
// them in reverse, calling each node's registered backward rule.
//
// A tape built with record_gradients = false stores no backward closures and
// no gradient buffers; use it for inference.
class Tape {
 public:
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  // Trainable leaf: reads p.value, backward accumulates into p.grad.
  Var param(Parameter& p);
  // Read-only leaf that references m without copying. m must outlive the tape.
  Var view(const Matrix& m);
  Var constant(Matrix m);

  const Matrix& value(Var v) const;
  // Gradient buffer of v (allocated on first access). Only valid for nodes that need grad.
  Matrix& grad(Var v);
  bool needs_grad(Var v) const { return nodes_[v.index].needs_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 for a 1x1 node and runs every backward rule.
  void backward(Var loss);

  // Used by primitives: push a computed node. `inputs` decides whether the
  // result needs a gradient; the backward rule is dropped when none do.
  Var push(Matrix value, std::initializer_list<Var> inputs, std::function<void(Tape&, Var)> backward);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    const Matrix* external = nullptr;  // param/view leaves
    Parameter* param = nullptr;
    bool needs_grad = false;
    std::function<void(Tape&, Var)> backward;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

// Differentiable primitives. Each validates shapes and throws step::Error on mismatch.
namespace ops {

// a (n x k) times b (k x m); with transpose_b, b is (m x k) and the product is a * b^T.
Var matmul(Tape& t, Var a, Var b, bool transpose_b = false);
Var add(Tape& t, Var a, Var b);
// Adds a 1 x cols row to every row of a.
Var add_broadcast(Tape& t, Var a, Var row);
Var row_softmax(Tape& t, Var x);
// Per-row normalization over the last dimension, eps = 1e-5, then x_hat * gamma + beta.
Var layer_norm(Tape& t, Var x, Var gamma, Var beta);
// tanh-approximated GELU (GPT-2 form).
Var gelu(Tape& t, Var x);
// Rows of `table` selected by ids.
Var embedding_lookup(Tape& t, Var table, std::span<const TokenId> ids);
// Multi-head causal self-attention over `n_seq` stacked sequences of length
// `seq_len`. qkv holds [Q | K | V] column blocks (rows = n_seq * seq_len,
// cols = 3 * d); the result is (n_seq * seq_len) x d. Position i attends to j <= i
// within its own sequence only.
Var causal_attention(Tape& t, Var qkv, std::size_t n_seq, std::size_t seq_len, std::size_t n_heads);
// Mean over rows with mask[i] of -log softmax(logits[i])[targets[i]]. Result is 1x1.
Var masked_cross_entropy(Tape& t, Var logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);
// sum(x .* weights) as a 1x1 node. Handy for reducing to a scalar in checks.
Var weighted_sum(Tape& t, Var x, const Matrix& weights);

}  // namespace ops

// Forward kernels shared by primitives and inference code.
namespace kernels {
void softmax_inplace(std::span<double> row);
double gelu(double x);
double gelu_grad(double x);
inline constexpr double kLayerNormEps = 1e-5;
}  // namespace kernels

}  // namespace step
