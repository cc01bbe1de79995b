#pragma once

// Dense float64 tensors with define-by-run reverse-mode automatic
// differentiation. The graph is recorded implicitly through parent links;
// backward(loss) materializes the topological order, seeds d(loss)/d(loss)=1
// and accumulates gradients additively into every requires_grad leaf.
// A graph is confined to one thread; parameter values may be shared across
// threads for forward-only inference (see NoGradGuard).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sentigraph/common.hpp"

namespace sg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a) + " and " + shape_str(b));
}

namespace detail {
inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::nograd_depth() == 0; }

// Disables graph recording in scope. Used for inference and for the
// value-only re-evaluations of the finite-difference checker.
struct NoGradGuard {
  NoGradGuard() { ++detail::nograd_depth(); }
  ~NoGradGuard() { --detail::nograd_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff needs_grad
  bool requires_grad = false;  // trainable leaf
  bool needs_grad = false;     // requires_grad, or some ancestor leaf does
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(Node&)> backprop;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad = false) {
    if (shape_size(shape) != value.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(value.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad && grad_enabled();
    n->needs_grad = n->requires_grad;
    if (n->needs_grad) n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), fill);
    return leaf(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double v) { return leaf({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->value.size(); }
  std::size_t rows() const { return n_->shape.at(0); }
  std::size_t cols() const { return n_->shape.at(1); }

  const std::vector<double>& value() const { return n_->value; }
  std::vector<double>& mutable_value() { return n_->value; }
  const std::vector<double>& grad() const { return n_->grad; }

  double item() const {
    if (size() != 1)
      throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not scalar");
    return n_->value[0];
  }
  double at(std::size_t i) const { return n_->value.at(i); }
  double at(std::size_t i, std::size_t j) const { return n_->value.at(i * cols() + j); }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) {
    n_->requires_grad = b;
    n_->needs_grad = b;
    if (b && n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
  }
  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), 0.0); }

  NodePtr node() const { return n_; }

 private:
  NodePtr n_;
};

namespace detail {

inline NodePtr make_node(const char* op, Shape shape, std::vector<double> value,
                         std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p->needs_grad) {
        n->needs_grad = true;
        break;
      }
    if (n->needs_grad) {
      n->grad.assign(n->value.size(), 0.0);
      n->parents = std::move(parents);
      n->backprop = std::move(backprop);
    }
  }
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. A second call on the same graph is rejected; rebuild the graph for
// the next step instead.
inline void backward(const Tensor& loss) {
  Node* root = loss.node().get();
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) + " is not scalar");
  if (root->backward_done)
    throw std::logic_error("backward: already called on this graph; build a fresh graph per step");
  if (!root->needs_grad) {
    root->backward_done = true;
    return;  // no trainable leaf feeds the loss
  }

  // Iterative post-order DFS; the resulting list is a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
  root->backward_done = true;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const double aik = av[i * k + t];
      if (aik == 0.0) continue;
      const double* brow = &bv[t * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  auto bp = [m, k, n](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (g == 0.0) continue;
        if (A.needs_grad)
          for (std::size_t t = 0; t < k; ++t) A.grad[i * k + t] += g * B.value[t * n + j];
        if (B.needs_grad)
          for (std::size_t t = 0; t < k; ++t) B.grad[t * n + j] += g * A.value[i * k + t];
      }
  };
  return Tensor(detail::make_node("matmul", {m, n}, std::move(out), {a.node(), b.node()}, bp));
}

// a[m,k] x b[n,k]^T -> [m,n]; entry (i,j) is dot(a_i, b_j).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
    shape_error("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      const double* ar = &av[i * k];
      const double* br = &bv[j * k];
      for (std::size_t t = 0; t < k; ++t) s += ar[t] * br[t];
      out[i * n + j] = s;
    }
  auto bp = [m, k, n](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (g == 0.0) continue;
        if (A.needs_grad)
          for (std::size_t t = 0; t < k; ++t) A.grad[i * k + t] += g * B.value[j * k + t];
        if (B.needs_grad)
          for (std::size_t t = 0; t < k; ++t) B.grad[j * k + t] += g * A.value[i * k + t];
      }
  };
  return Tensor(detail::make_node("matmul_nt", {m, n}, std::move(out), {a.node(), b.node()}, bp));
}

// x W + b. x is [m,k] or [k]; W is [k,n]; b is [n].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const bool vec = x.rank() == 1;
  if (w.rank() != 2 || (vec ? x.shape()[0] : x.cols()) != w.rows())
    shape_error("linear", x.shape(), w.shape());
  if (b.rank() != 1 || b.shape()[0] != w.cols()) shape_error("linear", w.shape(), b.shape());
  const std::size_t m = vec ? 1 : x.rows(), k = w.rows(), n = w.cols();
  std::vector<double> out(m * n);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t j = 0; j < n; ++j) orow[j] = bv[j];
    for (std::size_t t = 0; t < k; ++t) {
      const double xv_ = xv[i * k + t];
      if (xv_ == 0.0) continue;
      const double* wrow = &wv[t * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv_ * wrow[j];
    }
  }
  Shape oshape = vec ? Shape{n} : Shape{m, n};
  auto bp = [m, k, n](Node& self) {
    Node& X = *self.parents[0];
    Node& W = *self.parents[1];
    Node& B = *self.parents[2];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (g == 0.0) continue;
        if (B.needs_grad) B.grad[j] += g;
        if (X.needs_grad)
          for (std::size_t t = 0; t < k; ++t) X.grad[i * k + t] += g * W.value[t * n + j];
        if (W.needs_grad)
          for (std::size_t t = 0; t < k; ++t) W.grad[t * n + j] += g * X.value[i * k + t];
      }
  };
  return Tensor(detail::make_node("linear", std::move(oshape), std::move(out),
                                  {x.node(), w.node(), b.node()}, bp));
}

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd f, Bwd bgrad) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i], b.value()[i]);
  auto bp = [bgrad](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad[i];
      if (g == 0.0) continue;
      auto [da, db] = bgrad(A.value[i], B.value[i]);
      if (A.needs_grad) A.grad[i] += g * da;
      if (B.needs_grad) B.grad[i] += g * db;
    }
  };
  return Tensor(detail::make_node(op, a.shape(), std::move(out), {a.node(), b.node()}, bp));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.value()[i];
  auto bp = [c](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += c * self.grad[i];
  };
  return Tensor(detail::make_node("scale", a.shape(), std::move(out), {a.node()}, bp));
}
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// Concatenation along the last axis. Rank-1 tensors concatenate end to end;
// rank-2 tensors must agree on the row count and concatenate column blocks.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const std::size_t rank = parts[0].rank();
  const std::size_t rows = rank == 2 ? parts[0].rows() : 1;
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    if (p.rank() != rank || (rank == 2 && p.rows() != rows))
      shape_error("concat_last", parts[0].shape(), p.shape());
    widths.push_back(rank == 2 ? p.cols() : p.shape()[0]);
    total += widths.back();
    nodes.push_back(p.node());
  }
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(&v[r * widths[pi]], &v[r * widths[pi]] + widths[pi], &out[r * total + off]);
    off += widths[pi];
  }
  Shape oshape = rank == 2 ? Shape{rows, total} : Shape{total};
  auto bp = [rows, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node& P = *self.parents[pi];
      if (P.needs_grad)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[pi]; ++c)
            P.grad[r * widths[pi] + c] += self.grad[r * total + off + c];
      off += widths[pi];
    }
  };
  return Tensor(detail::make_node("concat_last", std::move(oshape), std::move(out),
                                  std::move(nodes), bp));
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  auto bp = [](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (A.value[i] > 0.0) A.grad[i] += self.grad[i];
  };
  return Tensor(detail::make_node("relu", a.shape(), std::move(out), {a.node()}, bp));
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.value()[i]));
  auto bp = [](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      A.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  };
  return Tensor(detail::make_node("sigmoid", a.shape(), std::move(out), {a.node()}, bp));
}

inline Tensor tanh_op(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
  auto bp = [](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double t = self.value[i];
      A.grad[i] += self.grad[i] * (1.0 - t * t);
    }
  };
  return Tensor(detail::make_node("tanh", a.shape(), std::move(out), {a.node()}, bp));
}

// Softmax over `axis`. Rank-1 tensors use axis 0; rank-2 support axis 1
// (rows, the attention case) and axis 0 (columns).
inline Tensor softmax(const Tensor& a, int axis = -1) {
  const std::size_t rank = a.rank();
  if (axis < 0) axis = static_cast<int>(rank) - 1;
  if (rank == 0 || rank > 2 || axis < 0 || axis >= static_cast<int>(rank))
    throw std::invalid_argument("softmax: unsupported axis " + std::to_string(axis) +
                                " for shape " + shape_str(a.shape()));
  const std::size_t groups = rank == 1 ? 1 : (axis == 1 ? a.rows() : a.cols());
  const std::size_t len = rank == 1 ? a.size() : (axis == 1 ? a.cols() : a.rows());
  const std::size_t stride = rank == 1 ? 1 : (axis == 1 ? 1 : a.cols());
  const std::size_t gstride = rank == 1 ? 0 : (axis == 1 ? a.cols() : 1);

  std::vector<double> out(a.size());
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * gstride;
    double mx = a.value()[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, a.value()[base + i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(a.value()[base + i * stride] - mx);
      out[base + i * stride] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= sum;
  }
  auto bp = [groups, len, stride, gstride](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = g * gstride;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i)
        dot += self.grad[base + i * stride] * self.value[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t ix = base + i * stride;
        A.grad[ix] += self.value[ix] * (self.grad[ix] - dot);
      }
    }
  };
  return Tensor(detail::make_node("softmax", a.shape(), std::move(out), {a.node()}, bp));
}

// log(sum(exp(x))) over all entries, computed stably. Scalar output.
inline Tensor logsumexp(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("logsumexp: empty input");
  double mx = a.value()[0];
  for (double v : a.value()) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : a.value()) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  auto bp = [lse](Node& self) {
    Node& A = *self.parents[0];
    const double g = self.grad[0];
    if (g == 0.0) return;
    for (std::size_t i = 0; i < A.value.size(); ++i) A.grad[i] += g * std::exp(A.value[i] - lse);
  };
  return Tensor(detail::make_node("logsumexp", {1}, {lse}, {a.node()}, bp));
}

inline Tensor sum_all(const Tensor& a) {
  double s = std::accumulate(a.value().begin(), a.value().end(), 0.0);
  auto bp = [](Node& self) {
    Node& A = *self.parents[0];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < A.grad.size(); ++i) A.grad[i] += g;
  };
  return Tensor(detail::make_node("sum_all", {1}, {s}, {a.node()}, bp));
}

// Elementwise sum of same-shaped tensors.
inline Tensor add_many(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("add_many: no inputs");
  std::vector<double> out(parts[0].size(), 0.0);
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) shape_error("add_many", parts[0].shape(), p.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.value()[i];
    nodes.push_back(p.node());
  }
  auto bp = [](Node& self) {
    for (auto& pn : self.parents) {
      Node& P = *pn;
      if (!P.needs_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) P.grad[i] += self.grad[i];
    }
  };
  return Tensor(detail::make_node("add_many", parts[0].shape(), std::move(out),
                                  std::move(nodes), bp));
}

// Packs scalar tensors into a rank-1 tensor (the "set of entries" fed to
// logsumexp in the adaptive-threshold loss).
inline Tensor stack_scalars(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_scalars: no inputs");
  std::vector<double> out;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    if (p.size() != 1) shape_error("stack_scalars", {1}, p.shape());
    out.push_back(p.value()[0]);
    nodes.push_back(p.node());
  }
  auto bp = [](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& P = *self.parents[i];
      if (P.needs_grad) P.grad[0] += self.grad[i];
    }
  };
  return Tensor(detail::make_node("stack_scalars", {out.size()}, std::move(out),
                                  std::move(nodes), bp));
}

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no inputs");
  const std::size_t d = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  std::vector<NodePtr> nodes;
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.size() != d) shape_error("stack_rows", rows[0].shape(), r.shape());
    out.insert(out.end(), r.value().begin(), r.value().end());
    nodes.push_back(r.node());
  }
  auto bp = [d](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& P = *self.parents[i];
      if (!P.needs_grad) continue;
      for (std::size_t c = 0; c < d; ++c) P.grad[c] += self.grad[i * d + c];
    }
  };
  return Tensor(detail::make_node("stack_rows", {rows.size(), d}, std::move(out),
                                  std::move(nodes), bp));
}

// Row extraction; doubles as the embedding-row lookup (table[row]).
inline Tensor row(const Tensor& a, std::size_t i) {
  if (a.rank() != 2 || i >= a.rows())
    throw std::invalid_argument("row: index " + std::to_string(i) + " out of range for " +
                                shape_str(a.shape()));
  const std::size_t d = a.cols();
  std::vector<double> out(a.value().begin() + i * d, a.value().begin() + (i + 1) * d);
  auto bp = [i, d](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t c = 0; c < d; ++c) A.grad[i * d + c] += self.grad[c];
  };
  return Tensor(detail::make_node("row", {d}, std::move(out), {a.node()}, bp));
}

inline Tensor pick(const Tensor& a, std::size_t i) {
  if (a.rank() != 1 || i >= a.size())
    throw std::invalid_argument("pick: index " + std::to_string(i) + " out of range for " +
                                shape_str(a.shape()));
  auto bp = [i](Node& self) { self.parents[0]->grad[i] += self.grad[0]; };
  return Tensor(detail::make_node("pick", {1}, {a.value()[i]}, {a.node()}, bp));
}

inline Tensor pick(const Tensor& a, std::size_t i, std::size_t j) {
  if (a.rank() != 2 || i >= a.rows() || j >= a.cols())
    throw std::invalid_argument("pick: index (" + std::to_string(i) + "," + std::to_string(j) +
                                ") out of range for " + shape_str(a.shape()));
  const std::size_t flat = i * a.cols() + j;
  auto bp = [flat](Node& self) { self.parents[0]->grad[flat] += self.grad[0]; };
  return Tensor(detail::make_node("pick", {1}, {a.value()[flat]}, {a.node()}, bp));
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  const std::size_t width = a.rank() == 1 ? a.size() : a.cols();
  if (a.rank() > 2 || start + len > width)
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of range for " +
                                shape_str(a.shape()));
  const std::size_t rows_ = a.rank() == 1 ? 1 : a.rows();
  std::vector<double> out(rows_ * len);
  for (std::size_t r = 0; r < rows_; ++r)
    std::copy(&a.value()[r * width + start], &a.value()[r * width + start] + len, &out[r * len]);
  Shape oshape = a.rank() == 1 ? Shape{len} : Shape{rows_, len};
  auto bp = [rows_, width, start, len](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < len; ++c) A.grad[r * width + start + c] += self.grad[r * len + c];
  };
  return Tensor(detail::make_node("slice_cols", std::move(oshape), std::move(out), {a.node()}, bp));
}

// Inverted dropout: keeps entries with probability 1-p, scaling by 1/(1-p).
// Identity when not training or p == 0.
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0)
    throw std::invalid_argument("dropout: rate " + std::to_string(p) + " outside [0,1)");
  if (!train || p == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(a.size());
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * mask[i];
  auto bp = [mask](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * mask[i];
  };
  return Tensor(detail::make_node("dropout", a.shape(), std::move(out), {a.node()}, bp));
}

// 1-D convolution over a [len, in_dim] sequence with window `w` filters
// packed as [w*in_dim, filters]. Positions past the end read zeros, so the
// output always has max(len-w+1, 1) rows.
inline Tensor conv1d(const Tensor& seq, const Tensor& w, const Tensor& b, std::size_t window) {
  if (seq.rank() != 2 || w.rank() != 2 || w.rows() != window * seq.cols())
    shape_error("conv1d", seq.shape(), w.shape());
  if (b.rank() != 1 || b.shape()[0] != w.cols()) shape_error("conv1d", w.shape(), b.shape());
  const std::size_t len = seq.rows(), dc = seq.cols(), f = w.cols();
  const std::size_t positions = len >= window ? len - window + 1 : 1;
  std::vector<double> out(positions * f);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t j = 0; j < f; ++j) {
      double s = b.value()[j];
      for (std::size_t t = 0; t < window; ++t) {
        if (p + t >= len) break;
        for (std::size_t c = 0; c < dc; ++c)
          s += seq.value()[(p + t) * dc + c] * w.value()[(t * dc + c) * f + j];
      }
      out[p * f + j] = s;
    }
  auto bp = [positions, len, dc, f, window](Node& self) {
    Node& S = *self.parents[0];
    Node& W = *self.parents[1];
    Node& B = *self.parents[2];
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t j = 0; j < f; ++j) {
        const double g = self.grad[p * f + j];
        if (g == 0.0) continue;
        if (B.needs_grad) B.grad[j] += g;
        for (std::size_t t = 0; t < window; ++t) {
          if (p + t >= len) break;
          for (std::size_t c = 0; c < dc; ++c) {
            if (S.needs_grad) S.grad[(p + t) * dc + c] += g * W.value[(t * dc + c) * f + j];
            if (W.needs_grad) W.grad[(t * dc + c) * f + j] += g * S.value[(p + t) * dc + c];
          }
        }
      }
  };
  return Tensor(detail::make_node("conv1d", {positions, f}, std::move(out),
                                  {seq.node(), w.node(), b.node()}, bp));
}

// Column-wise max over rows; gradient flows to the first maximal entry.
inline Tensor maxpool_cols(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("maxpool_cols: need rank 2, got " +
                                                 shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double best = a.value()[j];
    for (std::size_t i = 1; i < m; ++i)
      if (a.value()[i * n + j] > best) {
        best = a.value()[i * n + j];
        arg[j] = i;
      }
    out[j] = best;
  }
  auto bp = [arg, n](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t j = 0; j < n; ++j) A.grad[arg[j] * n + j] += self.grad[j];
  };
  return Tensor(detail::make_node("maxpool_cols", {n}, std::move(out), {a.node()}, bp));
}

// ---------------------------------------------------------------------------
// Rotary position rotation
// ---------------------------------------------------------------------------

namespace detail {
inline void rope_angles(std::size_t d, double offset, std::vector<double>& c,
                        std::vector<double>& s) {
  const std::size_t half = d / 2;
  c.resize(half);
  s.resize(half);
  for (std::size_t k = 0; k < half; ++k) {
    const double theta = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
    c[k] = std::cos(offset * theta);
    s[k] = std::sin(offset * theta);
  }
}
}  // namespace detail

// Rotates consecutive pairs (x[2k], x[2k+1]) of every row i by the angle
// (position_base + i) * theta_k with theta_k = 10000^(-2k/d). Because the
// rotations compose, dot(rotate(q, i), rotate(k, j)) equals q^T R_{j-i} k,
// which is the relative-position score this layer exists to produce.
inline Tensor rope_rows(const Tensor& a, double position_base = 0.0) {
  if (a.rank() != 2 || a.cols() % 2 != 0)
    throw std::invalid_argument("rope_rows: need rank 2 with even columns, got " +
                                shape_str(a.shape()));
  const std::size_t m = a.rows(), d = a.cols(), half = d / 2;
  std::vector<double> out(m * d);
  std::vector<double> c, s;
  for (std::size_t i = 0; i < m; ++i) {
    detail::rope_angles(d, position_base + static_cast<double>(i), c, s);
    for (std::size_t k = 0; k < half; ++k) {
      const double x0 = a.value()[i * d + 2 * k];
      const double x1 = a.value()[i * d + 2 * k + 1];
      out[i * d + 2 * k] = x0 * c[k] - x1 * s[k];
      out[i * d + 2 * k + 1] = x0 * s[k] + x1 * c[k];
    }
  }
  auto bp = [m, d, half, position_base](Node& self) {
    Node& A = *self.parents[0];
    std::vector<double> c, s;
    for (std::size_t i = 0; i < m; ++i) {
      detail::rope_angles(d, position_base + static_cast<double>(i), c, s);
      for (std::size_t k = 0; k < half; ++k) {
        const double g0 = self.grad[i * d + 2 * k];
        const double g1 = self.grad[i * d + 2 * k + 1];
        A.grad[i * d + 2 * k] += g0 * c[k] + g1 * s[k];
        A.grad[i * d + 2 * k + 1] += -g0 * s[k] + g1 * c[k];
      }
    }
  };
  return Tensor(detail::make_node("rope_rows", a.shape(), std::move(out), {a.node()}, bp));
}

// Single-vector rotation by a signed offset (the closed-form view of the
// same transform; convenient for tests and the threshold scorers).
inline Tensor rope_rotate(const Tensor& x, double offset) {
  if (x.rank() != 1 || x.size() % 2 != 0)
    throw std::invalid_argument("rope_rotate: need rank 1 with even length, got " +
                                shape_str(x.shape()));
  const std::size_t d = x.size(), half = d / 2;
  std::vector<double> c, s;
  detail::rope_angles(d, offset, c, s);
  std::vector<double> out(d);
  for (std::size_t k = 0; k < half; ++k) {
    out[2 * k] = x.value()[2 * k] * c[k] - x.value()[2 * k + 1] * s[k];
    out[2 * k + 1] = x.value()[2 * k] * s[k] + x.value()[2 * k + 1] * c[k];
  }
  auto bp = [c, s, half](Node& self) {
    Node& A = *self.parents[0];
    for (std::size_t k = 0; k < half; ++k) {
      const double g0 = self.grad[2 * k];
      const double g1 = self.grad[2 * k + 1];
      A.grad[2 * k] += g0 * c[k] + g1 * s[k];
      A.grad[2 * k + 1] += -g0 * s[k] + g1 * c[k];
    }
  };
  return Tensor(detail::make_node("rope_rotate", x.shape(), std::move(out), {x.node()}, bp));
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

// Uniform init in +-sqrt(6/(fan_in+fan_out)); biases are created as zeros.
inline Tensor glorot_uniform(Shape shape, Rng& rng, bool requires_grad = true) {
  std::size_t fan_in = shape.size() == 2 ? shape[0] : 1;
  std::size_t fan_out = shape.size() == 2 ? shape[1] : shape.at(0);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

using ParamSnapshot = std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>>;

// Named registry of trainable leaves, in registration order. The order is
// part of the training determinism contract (the optimizer walks it).
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::logic_error("ParamStore: duplicate name " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: unknown name " + name);
    return items_[it->second].second;
  }
  std::size_t size() const { return items_.size(); }
  std::size_t entry_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  ParamSnapshot snapshot() const {
    ParamSnapshot s;
    for (const auto& [name, t] : items_) s.emplace_back(name, std::pair{t.shape(), t.value()});
    return s;
  }
  void restore(const ParamSnapshot& s) {
    for (const auto& [name, sv] : s) {
      Tensor t = get(name);
      if (t.shape() != sv.first) shape_error("ParamStore::restore", t.shape(), sv.first);
      t.mutable_value() = sv.second;
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace sg
