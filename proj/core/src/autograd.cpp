#include "wepe/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace wepe::ag {

void Node::accumulate(const RowMatrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

namespace {

Var make(RowMatrix value, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || (p && p->requires_grad);
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(back);
  }
  return n;
}

bool needs(const Var& v) { return v && v->requires_grad; }

}  // namespace

Var constant(RowMatrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var borrow(const RowMatrix& value) {
  auto n = std::make_shared<Node>();
  n->ref = &value;
  return n;
}

Var parameter(RowMatrix value) {
  auto n = constant(std::move(value));
  n->requires_grad = true;
  return n;
}

Var borrow_parameter(const RowMatrix& value) {
  auto n = borrow(value);
  n->requires_grad = true;
  return n;
}

Var matmul(const Var& a, const Var& b) {
  return make(a->val() * b->val(), {a, b}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (needs(A)) A->accumulate(self.grad * B->val().transpose());
    if (needs(B)) B->accumulate(A->val().transpose() * self.grad);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  RowMatrix out = x->val() * weight->val().transpose();
  if (bias) out.rowwise() += bias->val().row(0);
  return make(std::move(out), {x, weight, bias}, [](Node& self) {
    const auto& X = self.parents[0];
    const auto& W = self.parents[1];
    const auto& b = self.parents[2];
    if (needs(X)) X->accumulate(self.grad * W->val());
    if (needs(W)) W->accumulate(self.grad.transpose() * X->val());
    if (needs(b)) b->accumulate(self.grad.colwise().sum());
  });
}

Var transpose(const Var& a) {
  return make(a->val().transpose(), {a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.transpose());
  });
}

Var add(const Var& a, const Var& b) {
  return make(a->val() + b->val(), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (needs(p)) p->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  return make(a->val() - b->val(), {a, b}, [](Node& self) {
    if (needs(self.parents[0])) self.parents[0]->accumulate(self.grad);
    if (needs(self.parents[1])) self.parents[1]->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  return make(a->val().cwiseProduct(b->val()), {a, b}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (needs(A)) A->accumulate(self.grad.cwiseProduct(B->val()));
    if (needs(B)) B->accumulate(self.grad.cwiseProduct(A->val()));
  });
}

Var scale(const Var& a, double s) {
  return make(a->val() * s, {a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var add_row(const Var& a, const Var& r) {
  RowMatrix out = a->val();
  out.rowwise() += r->val().row(0);
  return make(std::move(out), {a, r}, [](Node& self) {
    if (needs(self.parents[0])) self.parents[0]->accumulate(self.grad);
    if (needs(self.parents[1])) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& r) {
  RowMatrix out = a->val().array().rowwise() * r->val().row(0).array();
  return make(std::move(out), {a, r}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& R = self.parents[1];
    if (needs(A)) A->accumulate(self.grad.array().rowwise() * R->val().row(0).array());
    if (needs(R)) R->accumulate(self.grad.cwiseProduct(A->val()).colwise().sum());
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const RowMatrix& X = x->val();
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  RowMatrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = X.row(i).mean();
    const double var = (X.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mu) * inv_std(i);
  }
  RowMatrix out = xhat.array().rowwise() * gamma->val().row(0).array();
  out.rowwise() += beta->val().row(0);
  return make(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& self) {
    const auto& X = self.parents[0];
    const auto& G = self.parents[1];
    const auto& B = self.parents[2];
    if (needs(G)) G->accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
    if (needs(B)) B->accumulate(self.grad.colwise().sum());
    if (needs(X)) {
      RowMatrix dxhat = self.grad.array().rowwise() * G->val().row(0).array();
      const double d = static_cast<double>(xhat.cols());
      RowMatrix dx(xhat.rows(), xhat.cols());
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const double s1 = dxhat.row(i).sum();
        const double s2 = dxhat.row(i).dot(xhat.row(i));
        dx.row(i) = (inv_std(i) / d) * (d * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
      }
      X->accumulate(dx);
    }
  });
}

Var gelu(const Var& x) {
  const RowMatrix& X = x->val();
  RowMatrix out = X.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
  return make(std::move(out), {x}, [](Node& self) {
    const auto& X = self.parents[0];
    RowMatrix d = X->val().unaryExpr([](double v) {
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + v * pdf;
    });
    X->accumulate(self.grad.cwiseProduct(d));
  });
}

Var tanh(const Var& x) {
  RowMatrix out = x->val().array().tanh().matrix();
  return make(std::move(out), {x}, [](Node& self) {
    RowMatrix d = (1.0 - self.value.array().square()).matrix();
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

Var softmax_rows(const Var& x) {
  const RowMatrix& X = x->val();
  RowMatrix out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double m = X.row(i).maxCoeff();
    out.row(i) = (X.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return make(std::move(out), {x}, [](Node& self) {
    const RowMatrix& Y = self.value;
    RowMatrix dx(Y.rows(), Y.cols());
    for (Eigen::Index i = 0; i < Y.rows(); ++i) {
      const double s = self.grad.row(i).dot(Y.row(i));
      dx.row(i) = Y.row(i).array() * (self.grad.row(i).array() - s);
    }
    self.parents[0]->accumulate(dx);
  });
}

Var log_softmax_rows(const Var& x) {
  const RowMatrix& X = x->val();
  RowMatrix out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double m = X.row(i).maxCoeff();
    const double lse = m + std::log((X.row(i).array() - m).exp().sum());
    out.row(i) = X.row(i).array() - lse;
  }
  return make(std::move(out), {x}, [](Node& self) {
    const RowMatrix& Y = self.value;
    RowMatrix dx(Y.rows(), Y.cols());
    for (Eigen::Index i = 0; i < Y.rows(); ++i) {
      const double s = self.grad.row(i).sum();
      dx.row(i) = self.grad.row(i).array() - Y.row(i).array().exp() * s;
    }
    self.parents[0]->accumulate(dx);
  });
}

Var cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  RowMatrix out = x->val().middleCols(start, count);
  return make(std::move(out), {x}, [start, count](Node& self) {
    const auto& X = self.parents[0];
    RowMatrix g = RowMatrix::Zero(X->val().rows(), X->val().cols());
    g.middleCols(start, count) = self.grad;
    X->accumulate(g);
  });
}

Var row(const Var& x, Eigen::Index index) {
  RowMatrix out = x->val().row(index);
  return make(std::move(out), {x}, [index](Node& self) {
    const auto& X = self.parents[0];
    RowMatrix g = RowMatrix::Zero(X->val().rows(), X->val().cols());
    g.row(index) = self.grad.row(0);
    X->accumulate(g);
  });
}

Var hcat(const std::vector<Var>& parts) {
  Eigen::Index rows = parts.front()->val().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p->val().cols();
  RowMatrix out(rows, total);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p->val().cols()) = p->val();
    at += p->val().cols();
  }
  return make(std::move(out), parts, [](Node& self) {
    Eigen::Index at = 0;
    for (auto& p : self.parents) {
      const Eigen::Index c = p->val().cols();
      if (needs(p)) p->accumulate(self.grad.middleCols(at, c));
      at += c;
    }
  });
}

Var vcat(const std::vector<Var>& parts) {
  Eigen::Index cols_ = parts.front()->val().cols();
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p->val().rows();
  RowMatrix out(total, cols_);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p->val().rows()) = p->val();
    at += p->val().rows();
  }
  return make(std::move(out), parts, [](Node& self) {
    Eigen::Index at = 0;
    for (auto& p : self.parents) {
      const Eigen::Index r = p->val().rows();
      if (needs(p)) p->accumulate(self.grad.middleRows(at, r));
      at += r;
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const RowMatrix& X = x->val();
  Eigen::VectorXd norms = X.rowwise().norm();
  RowMatrix out = X;
  for (Eigen::Index i = 0; i < X.rows(); ++i) out.row(i) /= norms(i);
  return make(std::move(out), {x}, [norms](Node& self) {
    const RowMatrix& Y = self.value;
    RowMatrix dx(Y.rows(), Y.cols());
    for (Eigen::Index i = 0; i < Y.rows(); ++i) {
      const double s = self.grad.row(i).dot(Y.row(i));
      dx.row(i) = (self.grad.row(i) - s * Y.row(i)) / norms(i);
    }
    self.parents[0]->accumulate(dx);
  });
}

Var dot(const Var& a, const Var& b) {
  RowMatrix out(1, 1);
  out(0, 0) = a->val().cwiseProduct(b->val()).sum();
  return make(std::move(out), {a, b}, [](Node& self) {
    const double g = self.grad(0, 0);
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (needs(A)) A->accumulate(B->val() * g);
    if (needs(B)) B->accumulate(A->val() * g);
  });
}

Var sum(const Var& x) {
  RowMatrix out(1, 1);
  out(0, 0) = x->val().sum();
  return make(std::move(out), {x}, [](Node& self) {
    const auto& X = self.parents[0];
    X->accumulate(RowMatrix::Constant(X->val().rows(), X->val().cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x->val().size())); }

Var pick(const Var& x, Eigen::Index i, Eigen::Index j) {
  RowMatrix out(1, 1);
  out(0, 0) = x->val()(i, j);
  return make(std::move(out), {x}, [i, j](Node& self) {
    const auto& X = self.parents[0];
    RowMatrix g = RowMatrix::Zero(X->val().rows(), X->val().cols());
    g(i, j) = self.grad(0, 0);
    X->accumulate(g);
  });
}

void backward(const Var& root) {
  if (root->val().size() != 1) throw std::invalid_argument("backward() needs a scalar root");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; the reverse is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = RowMatrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

}  // namespace wepe::ag
