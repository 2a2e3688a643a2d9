#include "nbrew/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>
#include <fmt/format.h>

#include "nbrew/error.hpp"

namespace nbrew {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Node& n) { return ConstMap(n.value.data(), n.rows, n.cols); }

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

std::string shape_str(const Node& n) { return fmt::format("({}x{})", n.rows, n.cols); }

// New result node; records inputs only when some input needs a gradient.
NodePtr make_node(std::size_t rows, std::size_t cols, std::initializer_list<NodePtr> inputs) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(rows * cols, 0.0);
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) n->inputs.assign(inputs.begin(), inputs.end());
  }
  return n;
}

NodePtr make_node_from(std::size_t rows, std::size_t cols, const std::vector<NodePtr>& inputs) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(rows * cols, 0.0);
  if (g_grad_enabled) {
    n->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (n->requires_grad) n->inputs = inputs;
  }
  return n;
}

const NodePtr& N(const Tensor& t) {
  require(t.defined(), "operation on an undefined tensor");
  return TensorAccess::node(t);
}

Tensor wrap(NodePtr n) { return TensorAccess::wrap(std::move(n)); }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return full(rows, cols, 0.0, requires_grad);
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(rows * cols, value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_values(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
  if (values.size() != rows * cols)
    throw UsageError(fmt::format("from_values: {} values for shape ({}x{})", values.size(), rows, cols));
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full(1, 1, value, requires_grad); }

double Tensor::item() const {
  require(size() == 1, "item() on a tensor with " + std::to_string(size()) + " elements");
  return node_->value[0];
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
  require(defined(), "backward on an undefined tensor");
  require(size() == 1, fmt::format("backward needs a scalar loss, got {}", shape_str(*node_)));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->rows = rows();
  n->cols = cols();
  n->value = node_->value;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Ops

namespace ops {

namespace {

// Adds `delta` into the gradient of input k if it requires one.
double* grad_of(Node& self, std::size_t k) {
  Node& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

struct Broadcast {
  std::size_t rows, cols;
  bool a_row1, a_col1, b_row1, b_col1;
  std::size_t a_cols, b_cols;

  std::size_t ia(std::size_t i, std::size_t j) const { return (a_row1 ? 0 : i) * a_cols + (a_col1 ? 0 : j); }
  std::size_t ib(std::size_t i, std::size_t j) const { return (b_row1 ? 0 : i) * b_cols + (b_col1 ? 0 : j); }
};

Broadcast broadcast(const Node& a, const Node& b, const char* op) {
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw UsageError(fmt::format("{}: shapes {} and {} do not broadcast", op, shape_str(a), shape_str(b)));
  };
  Broadcast bc{};
  bc.rows = dim(a.rows, b.rows);
  bc.cols = dim(a.cols, b.cols);
  bc.a_row1 = a.rows == 1 && bc.rows != 1;
  bc.a_col1 = a.cols == 1 && bc.cols != 1;
  bc.b_row1 = b.rows == 1 && bc.rows != 1;
  bc.b_col1 = b.cols == 1 && bc.cols != 1;
  bc.a_cols = a.cols;
  bc.b_cols = b.cols;
  return bc;
}

// Generic broadcasting binary op. `f` computes the value; `da`, `db` the
// partial derivatives given (x, y, out).
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& ta, const Tensor& tb, const char* name, F f, DA da, DB db) {
  const NodePtr& a = N(ta);
  const NodePtr& b = N(tb);
  const Broadcast bc = broadcast(*a, *b, name);
  NodePtr out = make_node(bc.rows, bc.cols, {a, b});
  for (std::size_t i = 0; i < bc.rows; ++i)
    for (std::size_t j = 0; j < bc.cols; ++j)
      out->value[i * bc.cols + j] = f(a->value[bc.ia(i, j)], b->value[bc.ib(i, j)]);
  if (out->requires_grad) {
    out->backward = [bc, da, db](Node& self) {
      const Node& A = *self.inputs[0];
      const Node& B = *self.inputs[1];
      double* ga = grad_of(self, 0);
      double* gb = grad_of(self, 1);
      for (std::size_t i = 0; i < bc.rows; ++i) {
        for (std::size_t j = 0; j < bc.cols; ++j) {
          const std::size_t k = i * bc.cols + j;
          const double x = A.value[bc.ia(i, j)];
          const double y = B.value[bc.ib(i, j)];
          const double g = self.grad[k];
          if (ga) ga[bc.ia(i, j)] += g * da(x, y, self.value[k]);
          if (gb) gb[bc.ib(i, j)] += g * db(x, y, self.value[k]);
        }
      }
    };
  }
  return wrap(out);
}

// Elementwise unary op; `d` gives dy/dx from (x, y).
template <typename F, typename D>
Tensor unary(const Tensor& ta, F f, D d) {
  const NodePtr& a = N(ta);
  NodePtr out = make_node(a->rows, a->cols, {a});
  for (std::size_t k = 0; k < a->value.size(); ++k) out->value[k] = f(a->value[k]);
  if (out->requires_grad) {
    out->backward = [d](Node& self) {
      const Node& A = *self.inputs[0];
      double* ga = grad_of(self, 0);
      for (std::size_t k = 0; k < self.value.size(); ++k) ga[k] += self.grad[k] * d(A.value[k], self.value[k]);
    };
  }
  return wrap(out);
}

void check_axis(int axis, const char* op) {
  if (axis != 0 && axis != 1) throw UsageError(fmt::format("{}: axis must be 0 or 1, got {}", op, axis));
}

}  // namespace

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = N(ta);
  const NodePtr& b = N(tb);
  if (a->cols != b->rows)
    throw UsageError(fmt::format("matmul: inner dimensions differ, {} x {}", shape_str(*a), shape_str(*b)));
  NodePtr out = make_node(a->rows, b->cols, {a, b});
  MutMap(out->value.data(), a->rows, b->cols).noalias() = as_matrix(*a) * as_matrix(*b);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      const Node& A = *self.inputs[0];
      const Node& B = *self.inputs[1];
      ConstMap g(self.grad.data(), self.rows, self.cols);
      if (double* ga = grad_of(self, 0)) MutMap(ga, A.rows, A.cols).noalias() += g * as_matrix(B).transpose();
      if (double* gb = grad_of(self, 1)) MutMap(gb, B.rows, B.cols).noalias() += as_matrix(A).transpose() * g;
    };
  }
  return wrap(out);
}

Tensor transpose(const Tensor& ta) {
  const NodePtr& a = N(ta);
  NodePtr out = make_node(a->cols, a->rows, {a});
  MutMap(out->value.data(), a->cols, a->rows) = as_matrix(*a).transpose();
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      const Node& A = *self.inputs[0];
      MutMap(grad_of(self, 0), A.rows, A.cols) += ConstMap(self.grad.data(), self.rows, self.cols).transpose();
    };
  }
  return wrap(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double, double y, double) { return 1.0 / y; },
                [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  check_axis(axis, "concat");
  if (parts.empty()) throw UsageError("concat: no inputs");
  std::vector<NodePtr> inputs;
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    const NodePtr& n = N(p);
    if (axis == 0) {
      if (!inputs.empty() && n->cols != cols)
        throw UsageError(fmt::format("concat(axis=0): column counts differ ({} vs {})", n->cols, cols));
      cols = n->cols;
      rows += n->rows;
    } else {
      if (!inputs.empty() && n->rows != rows)
        throw UsageError(fmt::format("concat(axis=1): row counts differ ({} vs {})", n->rows, rows));
      rows = n->rows;
      cols += n->cols;
    }
    inputs.push_back(n);
  }
  NodePtr out = make_node_from(rows, cols, inputs);
  std::size_t offset = 0;
  for (const auto& in : inputs) {
    if (axis == 0) {
      std::copy(in->value.begin(), in->value.end(), out->value.begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += in->rows;
    } else {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < in->cols; ++j) out->value[i * cols + offset + j] = in->value[i * in->cols + j];
      offset += in->cols;
    }
  }
  if (out->requires_grad) {
    out->backward = [axis](Node& self) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        const Node& in = *self.inputs[k];
        double* g = grad_of(self, k);
        if (g) {
          if (axis == 0) {
            for (std::size_t e = 0; e < in.value.size(); ++e) g[e] += self.grad[offset * self.cols + e];
          } else {
            for (std::size_t i = 0; i < in.rows; ++i)
              for (std::size_t j = 0; j < in.cols; ++j) g[i * in.cols + j] += self.grad[i * self.cols + offset + j];
          }
        }
        offset += axis == 0 ? in.rows : in.cols;
      }
    };
  }
  return wrap(out);
}

Tensor slice(const Tensor& ta, int axis, std::size_t begin, std::size_t end) {
  check_axis(axis, "slice");
  const NodePtr& a = N(ta);
  const std::size_t extent = axis == 0 ? a->rows : a->cols;
  if (begin > end || end > extent)
    throw UsageError(fmt::format("slice: range [{}, {}) outside axis {} of {}", begin, end, axis, shape_str(*a)));
  const std::size_t rows = axis == 0 ? end - begin : a->rows;
  const std::size_t cols = axis == 0 ? a->cols : end - begin;
  NodePtr out = make_node(rows, cols, {a});
  const std::size_t r0 = axis == 0 ? begin : 0;
  const std::size_t c0 = axis == 0 ? 0 : begin;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out->value[i * cols + j] = a->value[(i + r0) * a->cols + j + c0];
  if (out->requires_grad) {
    out->backward = [r0, c0](Node& self) {
      const std::size_t in_cols = self.inputs[0]->cols;
      double* g = grad_of(self, 0);
      for (std::size_t i = 0; i < self.rows; ++i)
        for (std::size_t j = 0; j < self.cols; ++j) g[(i + r0) * in_cols + j + c0] += self.grad[i * self.cols + j];
    };
  }
  return wrap(out);
}

namespace {

// Iterates the lanes of a matrix along `axis`: calls fn(base, stride, len).
template <typename Fn>
void for_each_lane(std::size_t rows, std::size_t cols, int axis, Fn fn) {
  if (axis == 1) {
    for (std::size_t i = 0; i < rows; ++i) fn(i * cols, std::size_t{1}, cols);
  } else {
    for (std::size_t j = 0; j < cols; ++j) fn(j, cols, rows);
  }
}

}  // namespace

Tensor softmax(const Tensor& ta, int axis) {
  check_axis(axis, "softmax");
  const NodePtr& a = N(ta);
  NodePtr out = make_node(a->rows, a->cols, {a});
  for_each_lane(a->rows, a->cols, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, a->value[base + k * stride]);
    double total = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(a->value[base + k * stride] - mx);
      out->value[base + k * stride] = e;
      total += e;
    }
    for (std::size_t k = 0; k < len; ++k) out->value[base + k * stride] /= total;
  });
  if (out->requires_grad) {
    out->backward = [axis](Node& self) {
      double* g = grad_of(self, 0);
      for_each_lane(self.rows, self.cols, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * stride] * self.value[base + k * stride];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t e = base + k * stride;
          g[e] += self.value[e] * (self.grad[e] - dot);
        }
      });
    };
  }
  return wrap(out);
}

Tensor log_softmax(const Tensor& ta, int axis) {
  check_axis(axis, "log_softmax");
  const NodePtr& a = N(ta);
  NodePtr out = make_node(a->rows, a->cols, {a});
  for_each_lane(a->rows, a->cols, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, a->value[base + k * stride]);
    double total = 0.0;
    for (std::size_t k = 0; k < len; ++k) total += std::exp(a->value[base + k * stride] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t k = 0; k < len; ++k) out->value[base + k * stride] = a->value[base + k * stride] - lse;
  });
  if (out->requires_grad) {
    out->backward = [axis](Node& self) {
      double* g = grad_of(self, 0);
      for_each_lane(self.rows, self.cols, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        double gsum = 0.0;
        for (std::size_t k = 0; k < len; ++k) gsum += self.grad[base + k * stride];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t e = base + k * stride;
          g[e] += self.grad[e] - std::exp(self.value[e]) * gsum;
        }
      });
    };
  }
  return wrap(out);
}

Tensor layer_norm(const Tensor& tx, const Tensor& tgamma, const Tensor& tbeta, double eps) {
  const NodePtr& x = N(tx);
  const NodePtr& gamma = N(tgamma);
  const NodePtr& beta = N(tbeta);
  if (gamma->rows != 1 || gamma->cols != x->cols || beta->rows != 1 || beta->cols != x->cols)
    throw UsageError(fmt::format("layer_norm: gain {} / bias {} do not match input {}", shape_str(*gamma),
                                 shape_str(*beta), shape_str(*x)));
  const std::size_t rows = x->rows, cols = x->cols;
  NodePtr out = make_node(rows, cols, {x, gamma, beta});
  auto xhat = std::make_shared<std::vector<double>>(rows * cols);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = &x->value[i * cols];
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += row[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[i * cols + j] = h;
      out->value[i * cols + j] = h * gamma->value[j] + beta->value[j];
    }
  }
  if (out->requires_grad) {
    out->backward = [xhat, inv_std](Node& self) {
      const Node& G = *self.inputs[1];
      const std::size_t rows = self.rows, cols = self.cols;
      double* gx = grad_of(self, 0);
      double* gg = grad_of(self, 1);
      double* gb = grad_of(self, 2);
      std::vector<double> dxhat(cols);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* g = &self.grad[i * cols];
        const double* h = &(*xhat)[i * cols];
        double mean_d = 0.0, mean_dh = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          if (gg) gg[j] += g[j] * h[j];
          if (gb) gb[j] += g[j];
          dxhat[j] = g[j] * G.value[j];
          mean_d += dxhat[j];
          mean_dh += dxhat[j] * h[j];
        }
        if (!gx) continue;
        mean_d /= static_cast<double>(cols);
        mean_dh /= static_cast<double>(cols);
        for (std::size_t j = 0; j < cols; ++j)
          gx[i * cols + j] += (*inv_std)[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
      }
    };
  }
  return wrap(out);
}

Tensor dropout(const Tensor& ta, double p, bool training, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw UsageError(fmt::format("dropout: p must lie in [0, 1), got {}", p));
  if (!training || p == 0.0) return ta;
  const NodePtr& a = N(ta);
  NodePtr out = make_node(a->rows, a->cols, {a});
  auto mask = std::make_shared<std::vector<double>>(a->value.size());
  std::bernoulli_distribution keep(1.0 - p);
  const double factor = 1.0 / (1.0 - p);
  for (std::size_t k = 0; k < a->value.size(); ++k) {
    (*mask)[k] = keep(rng) ? factor : 0.0;
    out->value[k] = a->value[k] * (*mask)[k];
  }
  if (out->requires_grad) {
    out->backward = [mask](Node& self) {
      double* g = grad_of(self, 0);
      for (std::size_t k = 0; k < self.value.size(); ++k) g[k] += self.grad[k] * (*mask)[k];
    };
  }
  return wrap(out);
}

Tensor dropout(const Tensor& a, double p, bool training, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return dropout(a, p, training, rng);
}

Tensor embedding_lookup(const Tensor& ttable, std::span<const int> ids) {
  const NodePtr& table = N(ttable);
  const std::size_t d = table->cols;
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= table->rows)
      throw UsageError(fmt::format("embedding_lookup: id {} outside table of {} rows", id, table->rows));
  NodePtr out = make_node(ids.size(), d, {table});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(&table->value[static_cast<std::size_t>(ids[i]) * d], d, &out->value[i * d]);
  if (out->requires_grad) {
    std::vector<int> idx(ids.begin(), ids.end());
    out->backward = [idx = std::move(idx), d](Node& self) {
      double* g = grad_of(self, 0);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
    };
  }
  return wrap(out);
}

Tensor reduce_sum(const Tensor& ta, int axis) {
  check_axis(axis, "reduce_sum");
  const NodePtr& a = N(ta);
  const std::size_t rows = a->rows, cols = a->cols;
  NodePtr out = axis == 0 ? make_node(1, cols, {a}) : make_node(rows, 1, {a});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out->value[axis == 0 ? j : i] += a->value[i * cols + j];
  if (out->requires_grad) {
    out->backward = [axis, rows, cols](Node& self) {
      double* g = grad_of(self, 0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += self.grad[axis == 0 ? j : i];
    };
  }
  return wrap(out);
}

Tensor sum(const Tensor& ta) {
  const NodePtr& a = N(ta);
  NodePtr out = make_node(1, 1, {a});
  double total = 0.0;
  for (double v : a->value) total += v;
  out->value[0] = total;
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      double* g = grad_of(self, 0);
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t k = 0; k < n; ++k) g[k] += self.grad[0];
    };
  }
  return wrap(out);
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw UsageError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor masked_fill(const Tensor& ta, std::span<const std::uint8_t> mask, double value) {
  const NodePtr& a = N(ta);
  if (mask.size() != a->value.size())
    throw UsageError(fmt::format("masked_fill: mask of {} entries for {}", mask.size(), shape_str(*a)));
  NodePtr out = make_node(a->rows, a->cols, {a});
  for (std::size_t k = 0; k < mask.size(); ++k) out->value[k] = mask[k] ? value : a->value[k];
  if (out->requires_grad) {
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    out->backward = [m = std::move(m)](Node& self) {
      double* g = grad_of(self, 0);
      for (std::size_t k = 0; k < m.size(); ++k)
        if (!m[k]) g[k] += self.grad[k];
    };
  }
  return wrap(out);
}

Tensor pick(const Tensor& ta, std::span<const int> index) {
  const NodePtr& a = N(ta);
  if (index.size() != a->rows)
    throw UsageError(fmt::format("pick: {} indices for {}", index.size(), shape_str(*a)));
  for (int c : index)
    if (c < 0 || static_cast<std::size_t>(c) >= a->cols)
      throw UsageError(fmt::format("pick: column {} outside {}", c, shape_str(*a)));
  NodePtr out = make_node(a->rows, 1, {a});
  for (std::size_t i = 0; i < a->rows; ++i) out->value[i] = a->value[i * a->cols + static_cast<std::size_t>(index[i])];
  if (out->requires_grad) {
    std::vector<int> idx(index.begin(), index.end());
    out->backward = [idx = std::move(idx)](Node& self) {
      const std::size_t cols = self.inputs[0]->cols;
      double* g = grad_of(self, 0);
      for (std::size_t i = 0; i < idx.size(); ++i) g[i * cols + static_cast<std::size_t>(idx[i])] += self.grad[i];
    };
  }
  return wrap(out);
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Initialization, optimizer, schedule

Tensor xavier_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = dist(rng);
  return Tensor::from_values(rows, cols, std::move(v), true);
}

Tensor normal_init(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = dist(rng);
  return Tensor::from_values(rows, cols, std::move(v), true);
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) throw UsageError(fmt::format("adam_step: parameter {} has no gradient", k));
    if (state.m[k].size() != params[k].size()) throw UsageError("adam_step: moment shape mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    auto g = params[k].mutable_grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t e = 0; e < w.size(); ++e) {
      m[e] = state.beta1 * m[e] + (1.0 - state.beta1) * g[e];
      v[e] = state.beta2 * v[e] + (1.0 - state.beta2) * g[e] * g[e];
      const double mhat = m[e] / bc1;
      const double vhat = v[e] / bc2;
      w[e] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    params[k].zero_grad();
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

double lr_schedule(std::int64_t step, std::size_t d_model, std::int64_t warmup) {
  if (step < 1) throw UsageError("lr_schedule: step must be >= 1");
  if (warmup < 1) throw UsageError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string serialize_tensors(std::span<const NamedTensor> tensors) {
  std::string out = "nbrew-checkpoint 1\n";
  out += fmt::format("tensors {}\n", tensors.size());
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
      throw UsageError("checkpoint tensor names must be non-empty and whitespace-free: '" + name + "'");
    out += fmt::format("{} {} {}\n", name, t.rows(), t.cols());
    const auto v = t.values();
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (k) out += ' ';
      out += fmt::format("{:a}", v[k]);
    }
    out += '\n';
  }
  return out;
}

std::vector<NamedTensor> deserialize_tensors(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> const std::string& {
    if (!std::getline(in, line)) throw ParseError("checkpoint truncated", lineno + 1);
    ++lineno;
    return line;
  };
  if (next() != "nbrew-checkpoint 1") throw ParseError("not an nbrew checkpoint", lineno);
  std::size_t count = 0;
  {
    std::istringstream hdr(next());
    std::string kw;
    if (!(hdr >> kw >> count) || kw != "tensors") throw ParseError("expected 'tensors <count>'", lineno);
  }
  std::vector<NamedTensor> out;
  for (std::size_t t = 0; t < count; ++t) {
    std::istringstream hdr(next());
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(hdr >> name >> rows >> cols)) throw ParseError("expected '<name> <rows> <cols>'", lineno);
    const std::string& body = next();
    std::vector<double> values;
    values.reserve(rows * cols);
    const char* p = body.c_str();
    char* end = nullptr;
    for (std::size_t k = 0; k < rows * cols; ++k) {
      const double v = std::strtod(p, &end);
      if (end == p) throw ParseError(fmt::format("tensor {} has fewer than {} values", name, rows * cols), lineno);
      values.push_back(v);
      p = end;
    }
    while (*p == ' ') ++p;
    if (*p != '\0') throw ParseError("tensor " + name + " has trailing values", lineno);
    out.push_back({name, Tensor::from_values(rows, cols, std::move(values))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << serialize_tensors(tensors);
  if (!out) throw InputError("write failed: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize_tensors(buf.str());
}

}  // namespace nbrew
