#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tensor is a shared handle to a graph node. Every tensor is two
// dimensional (rows x cols); vectors are 1 x n rows. Operations record their
// inputs and a backward closure when any input requires a gradient, and
// `backward` replays those closures in reverse topological order.
// Gradients of leaves accumulate (+=) until `zero_grad`.

#include "scc/errors.hpp"
#include "scc/rng.hpp"

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace scc {

using Eigen::Index;
using Matrix = Eigen::MatrixXd;

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  /// A value that never receives a gradient.
  static Tensor constant(Matrix value);
  /// A trainable leaf.
  static Tensor parameter(Matrix value, std::string name = {});
  static Tensor scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  bool defined() const { return node_ != nullptr; }
  Index rows() const;
  Index cols() const;
  Index size() const { return rows() * cols(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }

  const Matrix& value() const;
  /// Mutable access to the value; only meaningful for leaves.
  Matrix& value_mut();
  const Matrix& grad() const;
  Matrix& grad_mut();
  double item() const;

  bool requires_grad() const;
  /// Turns gradient tracking on or off for a leaf.
  void set_requires_grad(bool on);
  bool is_leaf() const;
  const std::string& name() const;
  void zero_grad();

  /// Identity comparison (same node).
  bool same(const Tensor& other) const { return node_ == other.node_; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(Matrix value, std::vector<Tensor> inputs,
                        std::function<void(detail::Node&)> backward);
};

namespace detail {
struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // empty for leaves

  Matrix& input_grad(std::size_t i) { return inputs[i]->grad; }
  bool input_wants_grad(std::size_t i) const { return inputs[i]->requires_grad; }
  const Matrix& input_value(std::size_t i) const { return inputs[i]->value; }
};
}  // namespace detail

/// Builds a result node. `backward` is recorded only when some input needs a
/// gradient; it receives the result node, whose `grad` holds dL/d(result),
/// and must add into `input_grad(i)` for inputs that want a gradient.
Tensor make_op(Matrix value, std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> backward);

// Linear algebra and elementwise arithmetic.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor one_minus(const Tensor& a);
/// x [n x m] + b [1 x m], bias broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
/// x [n x m] scaled row-wise by s [n x 1].
Tensor mul_col_broadcast(const Tensor& x, const Tensor& s);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double alpha);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);

enum class Elementwise { add, mul, sigmoid, tanh, leaky_relu, log, exp, square };
/// Dispatch form of the elementwise family; `alpha` is used by leaky_relu.
Tensor elementwise(Elementwise kind, std::span<const Tensor> inputs, double alpha = 0.125);

/// Sum of all entries, as a 1 x 1 tensor.
Tensor sum(const Tensor& a);
/// Row-wise log-softmax.
Tensor log_softmax(const Tensor& a);

// Structural ops.
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, Index begin, Index count);
Tensor reverse_rows(const Tensor& a);
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);
/// Interleaves rows: result row first_rows[i] = first.row(i), likewise second.
/// Together the index lists must cover 0..total_rows-1 exactly once.
Tensor merge_rows(const Tensor& first, std::span<const Index> first_rows,
                  const Tensor& second, std::span<const Index> second_rows,
                  Index total_rows);

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// Identity when not training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

/// Reverse pass from a 1 x 1 output.
void backward(const Tensor& output);

void zero_grad(std::span<const Tensor> params);
/// value -= lr * grad, then zero the gradients. Throws NonFiniteError naming
/// the first parameter whose gradient holds a NaN or infinity; in that case
/// no parameter is modified.
void sgd_step(std::span<const Tensor> params, double lr);

/// Global L2 norm over all gradients.
double grad_norm(std::span<const Tensor> params);
/// Rescales gradients so their global norm is at most `max_norm`.
void clip_grad_norm(std::span<const Tensor> params, double max_norm);

std::string shape_string(const Tensor& t);

}  // namespace scc
