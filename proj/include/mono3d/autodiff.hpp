#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include "mono3d/tensor.hpp"

// Reverse-mode autodiff over Tensor<T>. Graphs are built per forward pass and
// freed when the last Var handle goes out of scope. Single-threaded.

namespace mono3d {

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> val;
  Tensor<T> grad;  // allocated lazily in backward()
  bool needs_grad = false;
  std::vector<Var<T>> parents;
  std::function<void(Node<T>&)> back;  // accumulates into parents' grads

  explicit Node(Tensor<T> value) : val(std::move(value)) {}

  void ensure_grad() {
    if (grad.v.empty()) grad = Tensor<T>::zeros(val.shape);
  }
};

template <class T>
Var<T> constant(Tensor<T> t) {
  return std::make_shared<Node<T>>(std::move(t));
}

template <class T>
Var<T> constant_scalar(T x) {
  return constant(Tensor<T>::scalar(x));
}

// Leaf with requires_grad set; used for parameters and grad-checked inputs.
template <class T>
Var<T> leaf(Tensor<T> t) {
  auto n = std::make_shared<Node<T>>(std::move(t));
  n->needs_grad = true;
  return n;
}

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> back) {
  auto n = std::make_shared<Node<T>>(std::move(value));
  for (auto& p : parents)
    if (p->needs_grad) n->needs_grad = true;
  if (n->needs_grad) {
    n->parents = std::move(parents);
    n->back = std::move(back);
  }
  return n;
}

// Runs backward from a scalar root. Seeds d(root)/d(root) = 1.
template <class T>
void backward(const Var<T>& root) {
  if (root->val.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) n->ensure_grad();
  root->grad.v[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->back) {
      for (auto& p : n->parents) p->ensure_grad();
      n->back(*n);
    }
  }
}

// ---- elementwise binary ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->val, b->val, "add");
  Tensor<T> out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] += b->val.v[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->needs_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.v[i] += n.grad.v[i];
    if (b->needs_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i) b->grad.v[i] += n.grad.v[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->val, b->val, "sub");
  Tensor<T> out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] -= b->val.v[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->needs_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.v[i] += n.grad.v[i];
    if (b->needs_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i) b->grad.v[i] -= n.grad.v[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->val, b->val, "mul");
  Tensor<T> out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] *= b->val.v[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->needs_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        a->grad.v[i] += n.grad.v[i] * b->val.v[i];
    if (b->needs_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        b->grad.v[i] += n.grad.v[i] * a->val.v[i];
  });
}

template <class T>
Var<T> divv(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->val, b->val, "div");
  Tensor<T> out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] /= b->val.v[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      const T inv = T(1) / b->val.v[i];
      if (a->needs_grad) a->grad.v[i] += n.grad.v[i] * inv;
      if (b->needs_grad) b->grad.v[i] -= n.grad.v[i] * a->val.v[i] * inv * inv;
    }
  });
}

// elementwise min with gradient routed to the smaller operand (a on ties)
template <class T>
Var<T> vmin(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a->val, b->val, "vmin");
  Tensor<T> out = a->val;
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] = std::min(a->val.v[i], b->val.v[i]);
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      if (a->val.v[i] <= b->val.v[i]) {
        if (a->needs_grad) a->grad.v[i] += n.grad.v[i];
      } else if (b->needs_grad) {
        b->grad.v[i] += n.grad.v[i];
      }
    }
  });
}

// ---- elementwise unary ----

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Tensor<T> out = a->val;
  for (auto& x : out.v) x = f(x);
  return make_op<T>(std::move(out), {a}, [a, df](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      a->grad.v[i] += n.grad.v[i] * df(a->val.v[i], n.val.v[i]);
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  return unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_const(const Var<T>& a, T c) {
  return unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> neg(const Var<T>& a) { return scale(a, T(-1)); }

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); },
               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.1)) {
  return unary(a, [slope](T x) { return x > T(0) ? x : slope * x; },
               [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
               [](T, T y) { return y * (T(1) - y); });
}

template <class T>
T softplus_scalar(T x) {
  // log(1 + e^x), overflow-safe
  return x > T(30) ? x : std::log1p(std::exp(x));
}

template <class T>
T softplus_inv_scalar(T y) {
  if (y <= T(0)) throw std::invalid_argument("softplus_inv: y must be > 0");
  return y > T(30) ? y : std::log(std::expm1(y));
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  return unary(a, [](T x) { return softplus_scalar(x); },
               [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <class T>
Var<T> exp_(const Var<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log_(const Var<T>& a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> sqrt_(const Var<T>& a) {
  return unary(a, [](T x) { return std::sqrt(x); },
               [](T, T y) { return T(0.5) / y; });
}

template <class T>
Var<T> sin_(const Var<T>& a) {
  return unary(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <class T>
Var<T> cos_(const Var<T>& a) {
  return unary(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <class T>
Var<T> abs_(const Var<T>& a) {
  return unary(a, [](T x) { return std::abs(x); },
               [](T x, T) { return x >= T(0) ? T(1) : T(-1); });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Huber: e^2/(2*beta) for |e|<beta else |e|-beta/2
template <class T>
Var<T> huber(const Var<T>& a, T beta) {
  return unary(
      a,
      [beta](T x) {
        const T e = std::abs(x);
        return e < beta ? x * x / (T(2) * beta) : e - beta / T(2);
      },
      [beta](T x, T) {
        return std::abs(x) < beta ? x / beta : (x >= T(0) ? T(1) : T(-1));
      });
}

// ---- reductions ----

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T x : a->val.v) s += x;
  return make_op<T>(Tensor<T>::scalar(s), {a}, [a](Node<T>& n) {
    const T g = n.grad.v[0];
    for (auto& x : a->grad.v) x += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / T(a->val.numel()));
}

// sum(a * w) for a constant weight tensor (masks, normalizers)
template <class T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& w) {
  check_same_shape(a->val, w, "weighted_sum");
  T s = T(0);
  for (std::size_t i = 0; i < w.numel(); ++i) s += a->val.v[i] * w.v[i];
  return make_op<T>(Tensor<T>::scalar(s), {a}, [a, w](Node<T>& n) {
    const T g = n.grad.v[0];
    for (std::size_t i = 0; i < w.numel(); ++i) a->grad.v[i] += g * w.v[i];
  });
}

// ---- structure ----

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  if (Tensor<T>::numel_of(shape) != a->val.numel())
    throw std::invalid_argument("reshape: numel mismatch");
  Tensor<T> out = a->val;
  out.shape = shape;
  return make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad.v[i] += n.grad.v[i];
  });
}

// concat along channel axis of CHW tensors
template <class T>
Var<T> concat_ch(const Var<T>& a, const Var<T>& b) {
  if (a->val.rank() != 3 || b->val.rank() != 3 || a->val.dim(1) != b->val.dim(1) ||
      a->val.dim(2) != b->val.dim(2))
    throw std::invalid_argument("concat_ch: incompatible shapes");
  const int ca = a->val.dim(0), cb = b->val.dim(0);
  const int h = a->val.dim(1), w = a->val.dim(2);
  Tensor<T> out({ca + cb, h, w});
  std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
  std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + a->val.numel());
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    const std::size_t na = a->val.numel();
    if (a->needs_grad)
      for (std::size_t i = 0; i < na; ++i) a->grad.v[i] += n.grad.v[i];
    if (b->needs_grad)
      for (std::size_t i = 0; i < b->val.numel(); ++i) b->grad.v[i] += n.grad.v[na + i];
  });
}

// channel slice [c0, c1) of a CHW tensor
template <class T>
Var<T> slice_ch(const Var<T>& a, int c0, int c1) {
  const int h = a->val.dim(1), w = a->val.dim(2);
  Tensor<T> out({c1 - c0, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::copy(a->val.v.begin() + c0 * plane, a->val.v.begin() + c1 * plane, out.v.begin());
  return make_op<T>(std::move(out), {a}, [a, c0, plane](Node<T>& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      a->grad.v[c0 * plane + i] += n.grad.v[i];
  });
}

// Gather per-location channel vectors of a CHW map at flat spatial indices.
// Output shape [C, N]; backward scatters.
template <class T>
Var<T> gather_spatial(const Var<T>& a, std::vector<int> idx) {
  const int c = a->val.dim(0);
  const std::size_t plane = static_cast<std::size_t>(a->val.dim(1)) * a->val.dim(2);
  const int n_idx = static_cast<int>(idx.size());
  Tensor<T> out({c, n_idx});
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < n_idx; ++j)
      out.v[ci * n_idx + j] = a->val.v[ci * plane + idx[j]];
  return make_op<T>(std::move(out), {a}, [a, idx = std::move(idx), c, plane](Node<T>& n) {
    const int n_idx = static_cast<int>(idx.size());
    for (int ci = 0; ci < c; ++ci)
      for (int j = 0; j < n_idx; ++j)
        a->grad.v[ci * plane + idx[j]] += n.grad.v[ci * n_idx + j];
  });
}

// row r of a [C, N] tensor as a [N] vector
template <class T>
Var<T> row(const Var<T>& a, int r) {
  const int n_col = a->val.dim(1);
  Tensor<T> out({n_col});
  std::copy(a->val.v.begin() + static_cast<std::size_t>(r) * n_col,
            a->val.v.begin() + static_cast<std::size_t>(r + 1) * n_col, out.v.begin());
  return make_op<T>(std::move(out), {a}, [a, r, n_col](Node<T>& n) {
    for (int j = 0; j < n_col; ++j)
      a->grad.v[static_cast<std::size_t>(r) * n_col + j] += n.grad.v[j];
  });
}

}  // namespace mono3d
