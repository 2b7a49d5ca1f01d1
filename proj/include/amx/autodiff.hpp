#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Var is a cheap handle to a node in a dynamically built graph;
// the graph is freed when the last handle to its output goes away, so there
// is no global tape and independent graphs can be built on different threads.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace amx::ad {

template <typename T>
struct Node {
  std::vector<T> value;
  std::vector<T> grad;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(Node &)> backward;

  std::vector<T> &ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> value() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  T item() const {
    if (size() != 1) throw std::logic_error("item() on non-scalar Var");
    return node_->value[0];
  }

  // Gradient after backward(); zeros if the node never received one.
  std::vector<T> grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<T>(node_->value.size(), T(0));
  }

  const std::shared_ptr<Node<T>> &node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(std::vector<T> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw std::logic_error("constant: shape/value size mismatch");
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(values);
  n->rows = rows;
  n->cols = cols;
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> parameter(std::vector<T> values, std::size_t rows, std::size_t cols) {
  auto v = constant(std::move(values), rows, cols);
  v.node()->requires_grad = true;
  return v;
}

template <typename T>
Var<T> scalar(T v) {
  return constant<T>({v}, 1, 1);
}

namespace detail {

template <typename T>
Var<T> make(std::vector<T> value, std::size_t rows, std::size_t cols,
            std::initializer_list<Var<T>> parents, std::function<void(Node<T> &)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->rows = rows;
  n->cols = cols;
  for (const auto &p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto &p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void require_same_shape(const Var<T> &a, const Var<T> &b, const char *op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::logic_error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()));
  }
}

}  // namespace detail

// Runs reverse accumulation from a scalar output. Gradients accumulate, so a
// fresh graph should be built for every evaluation.
template <typename T>
void backward(const Var<T> &out) {
  if (out.size() != 1) throw std::logic_error("backward() requires a scalar output");
  if (!out.requires_grad()) return;
  std::vector<Node<T> *> order;
  std::unordered_set<Node<T> *> seen;
  // Iterative post-order DFS; graphs for long optimizations can be deep.
  std::vector<std::pair<Node<T> *, std::size_t>> stack{{out.node().get(), 0}};
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T> *p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  out.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) {
      (*it)->ensure_grad();
      (*it)->backward(**it);
    }
  }
}

template <typename T>
Var<T> matmul(const Var<T> &a, const Var<T> &b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw std::logic_error("matmul: inner dimension mismatch");
  std::vector<T> out(m * n, T(0));
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      if (aip == T(0)) continue;
      const T *brow = &bv[p * n];
      T *orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make<T>(std::move(out), m, n, {a, b}, [a, b, m, k, n](Node<T> &self) {
    const auto &g = self.grad;
    if (a.requires_grad()) {
      auto &ga = a.node()->ensure_grad();
      auto bv = b.value();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (b.requires_grad()) {
      auto &gb = b.node()->ensure_grad();
      auto av = a.value();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = av[i * k + p];
          if (aip == T(0)) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

// a (m×k) times the transpose of b (n×k).
template <typename T>
Var<T> matmul_transposed(const Var<T> &a, const Var<T> &b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw std::logic_error("matmul_transposed: inner dimension mismatch");
  std::vector<T> out(m * n, T(0));
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = acc;
    }
  return detail::make<T>(std::move(out), m, n, {a, b}, [a, b, m, k, n](Node<T> &self) {
    const auto &g = self.grad;
    if (a.requires_grad()) {
      auto &ga = a.node()->ensure_grad();
      auto bv = b.value();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T gij = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * bv[j * k + p];
        }
    }
    if (b.requires_grad()) {
      auto &gb = b.node()->ensure_grad();
      auto av = a.value();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T gij = g[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gij * av[i * k + p];
        }
    }
  });
}

template <typename T>
Var<T> add(const Var<T> &a, const Var<T> &b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make<T>(std::move(out), a.rows(), a.cols(), {a, b}, [a, b](Node<T> &self) {
    for (const auto *p : {&a, &b}) {
      if (!p->requires_grad()) continue;
      auto &gp = p->node()->ensure_grad();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T> &a, const Var<T> &b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make<T>(std::move(out), a.rows(), a.cols(), {a, b}, [a, b](Node<T> &self) {
    if (a.requires_grad()) {
      auto &ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto &gb = b.node()->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T> &a, const Var<T> &b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make<T>(std::move(out), a.rows(), a.cols(), {a, b}, [a, b](Node<T> &self) {
    if (a.requires_grad()) {
      auto &ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * b[i];
    }
    if (b.requires_grad()) {
      auto &gb = b.node()->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * a[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T> &a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make<T>(std::move(out), a.rows(), a.cols(), {a}, [a, s](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
  });
}

// Adds a 1×n row to every row of an m×n matrix.
template <typename T>
Var<T> add_row(const Var<T> &a, const Var<T> &row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::logic_error("add_row: shape mismatch");
  const std::size_t n = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + row[i % n];
  return detail::make<T>(std::move(out), a.rows(), n, {a, row}, [a, row, n](Node<T> &self) {
    if (a.requires_grad()) {
      auto &ga = a.node()->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (row.requires_grad()) {
      auto &gr = row.node()->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gr[i % n] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> tanh(const Var<T> &a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  return detail::make<T>(out, a.rows(), a.cols(), {a}, [a, out](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * (T(1) - out[i] * out[i]);
  });
}

template <typename T>
Var<T> relu(const Var<T> &a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return detail::make<T>(std::move(out), a.rows(), a.cols(), {a}, [a](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (a[i] > T(0)) ga[i] += self.grad[i];
  });
}

// softplus(beta * x) / beta, evaluated without overflow.
template <typename T>
Var<T> softplus(const Var<T> &a, T beta) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T bx = beta * a[i];
    out[i] = (bx > T(0) ? bx + std::log1p(std::exp(-bx)) : std::log1p(std::exp(bx))) / beta;
  }
  return detail::make<T>(std::move(out), a.rows(), a.cols(), {a}, [a, beta](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T bx = beta * a[i];
      const T sig = bx >= T(0) ? T(1) / (T(1) + std::exp(-bx)) : std::exp(bx) / (T(1) + std::exp(bx));
      ga[i] += self.grad[i] * sig;
    }
  });
}

template <typename T>
Var<T> sum(const Var<T> &a) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return detail::make<T>({acc}, 1, 1, {a}, [a](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (auto &g : ga) g += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T> &a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Column-wise mean over rows: m×n -> 1×n.
template <typename T>
Var<T> mean_rows(const Var<T> &a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
  for (auto &v : out) v /= static_cast<T>(m);
  return detail::make<T>(std::move(out), 1, n, {a}, [a, m, n](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    const T inv = T(1) / static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j] * inv;
  });
}

// Row-wise softmax.
template <typename T>
Var<T> softmax(const Var<T> &a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    T mx = a[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[i * n + j]);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(a[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return detail::make<T>(out, m, n, {a}, [a, out, m, n](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * out[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += out[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

// Cross-entropy of softmax(logits) against a target index, for a 1×C row.
template <typename T>
Var<T> cross_entropy(const Var<T> &logits, std::size_t target) {
  if (logits.rows() != 1) throw std::logic_error("cross_entropy expects a single row of logits");
  if (target >= logits.cols()) throw std::logic_error("cross_entropy: target out of range");
  const std::size_t n = logits.cols();
  T mx = logits[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits[j]);
  T z = T(0);
  for (std::size_t j = 0; j < n; ++j) z += std::exp(logits[j] - mx);
  const T lse = mx + std::log(z);
  return detail::make<T>({lse - logits[target]}, 1, 1, {logits}, [logits, target, lse, n](Node<T> &self) {
    auto &g = logits.node()->ensure_grad();
    for (std::size_t j = 0; j < n; ++j) {
      const T p = std::exp(logits[j] - lse);
      g[j] += self.grad[0] * (p - (j == target ? T(1) : T(0)));
    }
  });
}

template <typename T>
Var<T> element(const Var<T> &a, std::size_t index) {
  if (index >= a.size()) throw std::logic_error("element: index out of range");
  return detail::make<T>({a[index]}, 1, 1, {a}, [a, index](Node<T> &self) {
    a.node()->ensure_grad()[index] += self.grad[0];
  });
}

// Columns [start, start + count) of every row.
template <typename T>
Var<T> slice_cols(const Var<T> &a, std::size_t start, std::size_t count) {
  const std::size_t m = a.rows(), n = a.cols();
  if (start + count > n) throw std::logic_error("slice_cols: out of range");
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * n + start + j];
  return detail::make<T>(std::move(out), m, count, {a}, [a, m, n, start, count](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += self.grad[i * count + j];
  });
}

template <typename T>
Var<T> row(const Var<T> &a, std::size_t r) {
  const std::size_t n = a.cols();
  if (r >= a.rows()) throw std::logic_error("row: index out of range");
  std::vector<T> out(a.value().begin() + r * n, a.value().begin() + (r + 1) * n);
  return detail::make<T>(std::move(out), 1, n, {a}, [a, r, n](Node<T> &self) {
    auto &ga = a.node()->ensure_grad();
    for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += self.grad[j];
  });
}

// Concatenates row vectors side by side: (1×n1, 1×n2, ...) -> 1×(n1+n2+...).
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>> &parts) {
  std::vector<T> out;
  bool any_grad = false;
  for (const auto &p : parts) {
    if (p.rows() != 1) throw std::logic_error("concat_cols expects row vectors");
    out.insert(out.end(), p.value().begin(), p.value().end());
    any_grad = any_grad || p.requires_grad();
  }
  const std::size_t n = out.size();
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  node->rows = 1;
  node->cols = n;
  if (any_grad) {
    node->requires_grad = true;
    for (const auto &p : parts) node->parents.push_back(p.node());
    node->backward = [parts](Node<T> &self) {
      std::size_t off = 0;
      for (const auto &p : parts) {
        if (p.requires_grad()) {
          auto &gp = p.node()->ensure_grad();
          for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += self.grad[off + j];
        }
        off += p.size();
      }
    };
  }
  return Var<T>(std::move(node));
}

// Stacks 1×n rows into an m×n matrix.
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>> &rows) {
  if (rows.empty()) throw std::logic_error("stack_rows: no rows");
  const std::size_t n = rows.front().cols();
  for (const auto &r : rows)
    if (r.rows() != 1 || r.cols() != n) throw std::logic_error("stack_rows: ragged rows");
  auto flat = concat_cols(rows);
  flat.node()->rows = rows.size();
  flat.node()->cols = n;
  return flat;
}

template <typename T>
bool all_finite(const Var<T> &a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i])) return false;
  return true;
}

}  // namespace amx::ad
