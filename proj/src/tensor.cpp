#include "scc/tensor.hpp"

#include "scc/kernels.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace scc {

using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) +
                         " vs " + shape_string(b));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::string shape_string(const Tensor& t) {
  if (!t.defined()) return "[undefined]";
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

Tensor Tensor::constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->grad = Matrix::Zero(value.rows(), value.cols());
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::parameter(Matrix value, std::string name) {
  Tensor t = constant(std::move(value));
  t.node_->requires_grad = true;
  t.node_->name = std::move(name);
  return t;
}

Index Tensor::rows() const { return node_->value.rows(); }
Index Tensor::cols() const { return node_->value.cols(); }
const Matrix& Tensor::value() const { return node_->value; }
Matrix& Tensor::value_mut() { return node_->value; }
const Matrix& Tensor::grad() const { return node_->grad; }
Matrix& Tensor::grad_mut() { return node_->grad; }
bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_->backward; }
const std::string& Tensor::name() const { return node_->name; }

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor " + shape_string(*this) + " is not a scalar");
  return node_->value(0, 0);
}

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = on;
}

void Tensor::zero_grad() { node_->grad.setZero(); }

Tensor make_op(Matrix value, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->grad = Matrix::Zero(value.rows(), value.cols());
  n->value = std::move(value);
  bool any = false;
  for (const Tensor& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a) + " * " +
                         shape_string(b));
  }
  Matrix out = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.input_wants_grad(0)) n.input_grad(0).noalias() += n.grad * n.input_value(1).transpose();
    if (n.input_wants_grad(1)) n.input_grad(1).noalias() += n.input_value(0).transpose() * n.grad;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.input_wants_grad(0)) n.input_grad(0) += n.grad;
    if (n.input_wants_grad(1)) n.input_grad(1) += n.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.input_wants_grad(0)) n.input_grad(0) += n.grad;
    if (n.input_wants_grad(1)) n.input_grad(1) -= n.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_op(std::move(out), {a, b}, [](Node& n) {
    if (n.input_wants_grad(0)) n.input_grad(0) += n.grad.cwiseProduct(n.input_value(1));
    if (n.input_wants_grad(1)) n.input_grad(1) += n.grad.cwiseProduct(n.input_value(0));
  });
}

Tensor scale(const Tensor& a, double c) {
  Matrix out = a.value() * c;
  return make_op(std::move(out), {a}, [c](Node& n) { n.input_grad(0) += c * n.grad; });
}

Tensor add_scalar(const Tensor& a, double c) {
  Matrix out = a.value().array() + c;
  return make_op(std::move(out), {a}, [](Node& n) { n.input_grad(0) += n.grad; });
}

Tensor one_minus(const Tensor& a) {
  Matrix out = 1.0 - a.value().array();
  return make_op(std::move(out), {a}, [](Node& n) { n.input_grad(0) -= n.grad; });
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_row_bias: bias " + shape_string(b) + " does not fit " +
                         shape_string(x));
  }
  Matrix out = x.value().rowwise() + b.value().row(0);
  return make_op(std::move(out), {x, b}, [](Node& n) {
    if (n.input_wants_grad(0)) n.input_grad(0) += n.grad;
    if (n.input_wants_grad(1)) n.input_grad(1) += n.grad.colwise().sum();
  });
}

Tensor mul_col_broadcast(const Tensor& x, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) {
    throw DimensionError("mul_col_broadcast: scale " + shape_string(s) + " does not fit " +
                         shape_string(x));
  }
  Matrix out = x.value().array().colwise() * s.value().col(0).array();
  return make_op(std::move(out), {x, s}, [](Node& n) {
    const Matrix& xv = n.input_value(0);
    const Matrix& sv = n.input_value(1);
    if (n.input_wants_grad(0)) n.input_grad(0).array() += n.grad.array().colwise() * sv.col(0).array();
    if (n.input_wants_grad(1)) n.input_grad(1).col(0) += n.grad.cwiseProduct(xv).rowwise().sum();
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double v) { return kernels::sigmoid(v); });
  return make_op(std::move(out), {a}, [](Node& n) {
    n.input_grad(0).array() += n.grad.array() * n.value.array() * (1.0 - n.value.array());
  });
}

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double v) { return std::tanh(v); });
  return make_op(std::move(out), {a}, [](Node& n) {
    n.input_grad(0).array() += n.grad.array() * (1.0 - n.value.array().square());
  });
}

Tensor leaky_relu(const Tensor& a, double alpha) {
  Matrix out = a.value().unaryExpr([alpha](double v) { return kernels::leaky_relu(v, alpha); });
  return make_op(std::move(out), {a}, [alpha](Node& n) {
    const Matrix& x = n.input_value(0);
    n.input_grad(0).array() +=
        n.grad.array() * x.array().unaryExpr([alpha](double v) { return v >= 0.0 ? 1.0 : alpha; });
  });
}

Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any()) throw DomainError("log: non-positive input");
  Matrix out = a.value().array().log();
  return make_op(std::move(out), {a}, [](Node& n) {
    n.input_grad(0).array() += n.grad.array() / n.input_value(0).array();
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp();
  return make_op(std::move(out), {a}, [](Node& n) {
    n.input_grad(0).array() += n.grad.array() * n.value.array();
  });
}

Tensor square(const Tensor& a) {
  Matrix out = a.value().array().square();
  return make_op(std::move(out), {a}, [](Node& n) {
    n.input_grad(0).array() += 2.0 * n.grad.array() * n.input_value(0).array();
  });
}

Tensor elementwise(Elementwise kind, std::span<const Tensor> inputs, double alpha) {
  const bool binary = kind == Elementwise::add || kind == Elementwise::mul;
  const std::size_t want = binary ? 2 : 1;
  if (inputs.size() != want) {
    throw ContractError("elementwise: expected " + std::to_string(want) + " operands, got " +
                        std::to_string(inputs.size()));
  }
  switch (kind) {
    case Elementwise::add: return add(inputs[0], inputs[1]);
    case Elementwise::mul: return mul(inputs[0], inputs[1]);
    case Elementwise::sigmoid: return sigmoid(inputs[0]);
    case Elementwise::tanh: return tanh(inputs[0]);
    case Elementwise::leaky_relu: return leaky_relu(inputs[0], alpha);
    case Elementwise::log: return log(inputs[0]);
    case Elementwise::exp: return exp(inputs[0]);
    case Elementwise::square: return square(inputs[0]);
  }
  throw ContractError("elementwise: unknown kind");
}

Tensor sum(const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return make_op(std::move(out), {a}, [](Node& n) { n.input_grad(0).array() += n.grad(0, 0); });
}

Tensor log_softmax(const Tensor& a) {
  if (a.cols() < 1) throw DimensionError("log_softmax: empty rows");
  Matrix out = kernels::log_softmax_rows(a.value());
  return make_op(std::move(out), {a}, [](Node& n) {
    // d/dx_j = g_j - softmax_j * sum(g)
    const Eigen::VectorXd gsum = n.grad.rowwise().sum();
    const Matrix soft = n.value.array().exp();
    n.input_grad(0) += n.grad - (soft.array().colwise() * gsum.array()).matrix();
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts differ " + shape_string(a) + " vs " +
                         shape_string(b));
  }
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Index ac = a.cols();
  return make_op(std::move(out), {a, b}, [ac](Node& n) {
    if (n.input_wants_grad(0)) n.input_grad(0) += n.grad.leftCols(ac);
    if (n.input_wants_grad(1)) n.input_grad(1) += n.grad.rightCols(n.grad.cols() - ac);
  });
}

Tensor slice_cols(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_string(a));
  }
  Matrix out = a.value().middleCols(begin, count);
  return make_op(std::move(out), {a}, [begin, count](Node& n) {
    n.input_grad(0).middleCols(begin, count) += n.grad;
  });
}

Tensor reverse_rows(const Tensor& a) {
  Matrix out = a.value().colwise().reverse();
  return make_op(std::move(out), {a}, [](Node& n) {
    n.input_grad(0) += n.grad.colwise().reverse();
  });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                           shape_string(a));
    }
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {a}, [idx = std::move(idx)](Node& n) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      n.input_grad(0).row(idx[i]) += n.grad.row(static_cast<Index>(i));
    }
  });
}

Tensor merge_rows(const Tensor& first, std::span<const Index> first_rows, const Tensor& second,
                  std::span<const Index> second_rows, Index total_rows) {
  const Index cols = first_rows.empty() ? second.cols() : first.cols();
  if (!first_rows.empty() && !second_rows.empty() && first.cols() != second.cols()) {
    throw DimensionError("merge_rows: column counts differ " + shape_string(first) + " vs " +
                         shape_string(second));
  }
  if (static_cast<Index>(first_rows.size() + second_rows.size()) != total_rows) {
    throw ContractError("merge_rows: index lists do not cover the output");
  }
  Matrix out(total_rows, cols);
  std::vector<char> seen(static_cast<std::size_t>(total_rows), 0);
  auto place = [&](const Tensor& src, std::span<const Index> rows) {
    if (rows.empty()) return;
    if (src.rows() != static_cast<Index>(rows.size())) {
      throw DimensionError("merge_rows: " + std::to_string(rows.size()) + " indices for " +
                           shape_string(src));
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Index r = rows[i];
      if (r < 0 || r >= total_rows || seen[static_cast<std::size_t>(r)]) {
        throw ContractError("merge_rows: row " + std::to_string(r) + " invalid or duplicated");
      }
      seen[static_cast<std::size_t>(r)] = 1;
      out.row(r) = src.value().row(static_cast<Index>(i));
    }
  };
  place(first, first_rows);
  place(second, second_rows);

  std::vector<Tensor> inputs;
  if (!first_rows.empty()) inputs.push_back(first);
  if (!second_rows.empty()) inputs.push_back(second);
  std::vector<std::vector<Index>> maps;
  if (!first_rows.empty()) maps.emplace_back(first_rows.begin(), first_rows.end());
  if (!second_rows.empty()) maps.emplace_back(second_rows.begin(), second_rows.end());
  return make_op(std::move(out), std::move(inputs), [maps = std::move(maps)](Node& n) {
    for (std::size_t k = 0; k < maps.size(); ++k) {
      if (!n.input_wants_grad(k)) continue;
      Matrix& g = n.input_grad(k);
      for (std::size_t i = 0; i < maps[k].size(); ++i) g.row(static_cast<Index>(i)) += n.grad.row(maps[k][i]);
    }
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix mask(x.rows(), x.cols());
  for (Index j = 0; j < mask.cols(); ++j) {
    for (Index i = 0; i < mask.rows(); ++i) mask(i, j) = uniform01(rng) < p ? 0.0 : keep_scale;
  }
  Matrix out = x.value().cwiseProduct(mask);
  return make_op(std::move(out), {x}, [mask = std::move(mask)](Node& n) {
    n.input_grad(0) += n.grad.cwiseProduct(mask);
  });
}

void backward(const Tensor& output) {
  require_defined(output, "backward");
  if (output.rows() != 1 || output.cols() != 1) {
    throw ContractError("backward: output must be a scalar, got " + shape_string(output));
  }
  if (!output.requires_grad()) return;

  // Iterative DFS post-order gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
  visited.insert(output.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.setZero();
  }
  output.node()->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

void zero_grad(std::span<const Tensor> params) {
  for (const Tensor& p : params) p.node()->grad.setZero();
}

void sgd_step(std::span<const Tensor> params, double lr) {
  if (!(lr >= 0.0)) throw ParameterError("sgd_step: learning rate must be non-negative");
  for (const Tensor& p : params) {
    if (!p.grad().allFinite()) {
      throw NonFiniteError("sgd_step: non-finite gradient in parameter '" +
                           (p.name().empty() ? std::string("<unnamed>") : p.name()) + "'");
    }
  }
  for (const Tensor& p : params) {
    Node* n = p.node();
    n->value -= lr * n->grad;
    n->grad.setZero();
  }
}

double grad_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const Tensor& p : params) sq += p.grad().squaredNorm();
  return std::sqrt(sq);
}

void clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (const Tensor& p : params) p.node()->grad *= f;
  }
}

}  // namespace scc
