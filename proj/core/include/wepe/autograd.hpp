#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "wepe/tensor.hpp"

/// Minimal reverse-mode automatic differentiation over dense matrices.
///
/// Only the operations needed by the transformer backbone and the small
/// verification networks are provided. A node records a backward closure only
/// when at least one input requires a gradient, so inference through the same
/// code path allocates no tape.
namespace wepe::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  RowMatrix value;
  const RowMatrix* ref = nullptr;
  RowMatrix grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward;

  const RowMatrix& val() const { return ref ? *ref : value; }
  void accumulate(const RowMatrix& g);
};

/// Constant leaf owning its value.
Var constant(RowMatrix value);
/// Constant leaf borrowing `value`; the referent must outlive the graph.
Var borrow(const RowMatrix& value);
/// Trainable leaf; its gradient is filled by backward().
Var parameter(RowMatrix value);
/// Trainable leaf borrowing `value`.
Var borrow_parameter(const RowMatrix& value);

Var matmul(const Var& a, const Var& b);
/// x * W^T (+ bias row), the usual dense layer with W stored [out, in].
Var linear(const Var& x, const Var& weight, const Var& bias = nullptr);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var gelu(const Var& x);
Var tanh(const Var& x);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var cols(const Var& x, Eigen::Index start, Eigen::Index count);
Var row(const Var& x, Eigen::Index index);
Var hcat(const std::vector<Var>& parts);
Var vcat(const std::vector<Var>& parts);
/// Scales each row to unit L2 norm.
Var l2_normalize_rows(const Var& x);
/// Sum of the elementwise product, as a 1x1 node.
Var dot(const Var& a, const Var& b);
Var sum(const Var& x);
Var mean(const Var& x);
/// Element (i, j) as a 1x1 node.
Var pick(const Var& x, Eigen::Index i, Eigen::Index j);

/// Back-propagates from a 1x1 root, accumulating into every reachable node
/// that requires a gradient.
void backward(const Var& root);

}  // namespace wepe::ag
