#pragma once

// Reverse-mode autodiff on dense n-d tensors.
//
// Every op computes eagerly and, when any input requires grad, records its
// parents plus a backward closure on the result node; the recorded graph is
// the tape. backward() on a scalar walks the tape once in reverse topological
// order and *accumulates* into grads, so callers zero grads explicitly
// between steps. Values are immutable between forward and backward; only
// leaves are mutated in place (optimizer, finite-difference probes).
//
// Broadcasting is scalar-tensor only. Anything else goes through explicit
// expand_axis / sum_axis.

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "ssmim/core.hpp"

namespace ssmim {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static Tensor from_vector(Shape shape, std::vector<T> data,
                            bool requires_grad = false) {
    require(int64_t(data.size()) == ssmim::numel(shape),
            "Tensor: data size " + std::to_string(data.size()) +
                " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    return from_vector(std::move(shape),
                       std::vector<T>(size_t(ssmim::numel(shape)), v), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_vector(Shape{}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t dim(size_t i) const { return n_->shape[i]; }
  int64_t numel() const { return int64_t(n_->value.size()); }
  const char* op() const { return n_->op; }

  const std::vector<T>& data() const { return n_->value; }
  // Leaf mutation only (optimizer step, finite-difference probing).
  std::vector<T>& mutable_data() { return n_->value; }
  T operator[](int64_t i) const { return n_->value[size_t(i)]; }

  T item() const {
    require(numel() == 1, "Tensor::item: tensor has " +
                              std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    require(n_->parents.empty(), "set_requires_grad: only valid on leaves");
    n_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    require(has_grad(), "Tensor::grad: no gradient present (run backward, or "
                        "zero_grad to allocate)");
    return n_->grad;
  }
  std::vector<T>& mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

  // Reverse pass from a scalar. Repeated calls keep accumulating.
  void backward() const {
    require(numel() == 1,
            "backward: loss must be scalar, got shape " + shape_str(shape()));
    if (!n_->requires_grad) return;
    std::vector<TensorNode<T>*> order;
    topo_postorder(order);
    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* node = *it;
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
      }
    }
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return n_; }

 private:
  // Iterative DFS; leaves come first, the root last.
  void topo_postorder(std::vector<TensorNode<T>*>& out) const {
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) {
          stack.emplace_back(p, 0);
        }
      } else {
        out.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> alloc_result(const char* op, Shape shape,
                                            bool requires_grad) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value.assign(size_t(numel(n->shape)), T(0));
  n->requires_grad = requires_grad;
  n->op = op;
  return n;
}

template <typename T>
void acc(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Shape strides_of(const Shape& s) {
  Shape st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// outer/inner extents around one axis: view shape as [outer, axis, inner].
inline void split_axis(const Shape& s, size_t axis, int64_t& outer,
                       int64_t& mid, int64_t& inner) {
  outer = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  mid = s[axis];
  inner = 1;
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape, or one scalar operand)

namespace detail {

template <typename T>
void check_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() == 1 || b.numel() == 1) return;
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
              " vs " + shape_str(b.shape()));
}

// Reduce a full-size grad onto a scalar operand.
template <typename T>
void acc_scalar(std::vector<T>& dst, const std::vector<T>& g) {
  T s = 0;
  for (T v : g) s += v;
  dst[0] += s;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary("add", a, b);
  const bool as = a.numel() == 1, bs = b.numel() == 1;
  const Shape& shape = as && !bs ? b.shape() : a.shape();
  auto out = detail::alloc_result<T>("add", shape,
                                     a.requires_grad() || b.requires_grad());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = av[as ? 0 : i] + bv[bs ? 0 : i];
  if (out->requires_grad) {
    out->parents = {a.node(), b.node()};
    out->backward_fn = [an = a.node(), bn = b.node(), as,
                        bs](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        if (as && self.grad.size() > 1) detail::acc_scalar(an->grad, self.grad);
        else detail::acc(an->grad, self.grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (bs && self.grad.size() > 1) detail::acc_scalar(bn->grad, self.grad);
        else detail::acc(bn->grad, self.grad);
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary("sub", a, b);
  const bool as = a.numel() == 1, bs = b.numel() == 1;
  const Shape& shape = as && !bs ? b.shape() : a.shape();
  auto out = detail::alloc_result<T>("sub", shape,
                                     a.requires_grad() || b.requires_grad());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = av[as ? 0 : i] - bv[bs ? 0 : i];
  if (out->requires_grad) {
    out->parents = {a.node(), b.node()};
    out->backward_fn = [an = a.node(), bn = b.node(), as,
                        bs](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        if (as && self.grad.size() > 1) detail::acc_scalar(an->grad, self.grad);
        else detail::acc(an->grad, self.grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (bs && self.grad.size() > 1) {
          T s = 0;
          for (T v : self.grad) s += v;
          bn->grad[0] -= s;
        } else {
          for (size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] -= self.grad[i];
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary("mul", a, b);
  const bool as = a.numel() == 1, bs = b.numel() == 1;
  const Shape& shape = as && !bs ? b.shape() : a.shape();
  auto out = detail::alloc_result<T>("mul", shape,
                                     a.requires_grad() || b.requires_grad());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = av[as ? 0 : i] * bv[bs ? 0 : i];
  if (out->requires_grad) {
    out->parents = {a.node(), b.node()};
    out->backward_fn = [an = a.node(), bn = b.node(), as,
                        bs](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        if (as && self.grad.size() > 1) {
          T s = 0;
          for (size_t i = 0; i < self.grad.size(); ++i)
            s += self.grad[i] * bn->value[bs ? 0 : i];
          an->grad[0] += s;
        } else {
          for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * bn->value[bs ? 0 : i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (bs && self.grad.size() > 1) {
          T s = 0;
          for (size_t i = 0; i < self.grad.size(); ++i)
            s += self.grad[i] * an->value[as ? 0 : i];
          bn->grad[0] += s;
        } else {
          for (size_t i = 0; i < self.grad.size(); ++i)
            bn->grad[i] += self.grad[i] * an->value[as ? 0 : i];
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary("div", a, b);
  const bool as = a.numel() == 1, bs = b.numel() == 1;
  const Shape& shape = as && !bs ? b.shape() : a.shape();
  auto out = detail::alloc_result<T>("div", shape,
                                     a.requires_grad() || b.requires_grad());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = av[as ? 0 : i] / bv[bs ? 0 : i];
  if (out->requires_grad) {
    out->parents = {a.node(), b.node()};
    out->backward_fn = [an = a.node(), bn = b.node(), as,
                        bs](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        if (as && self.grad.size() > 1) {
          T s = 0;
          for (size_t i = 0; i < self.grad.size(); ++i)
            s += self.grad[i] / bn->value[bs ? 0 : i];
          an->grad[0] += s;
        } else {
          for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] / bn->value[bs ? 0 : i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
          T bi = bn->value[bs ? 0 : i];
          T contrib = -self.grad[i] * an->value[as ? 0 : i] / (bi * bi);
          bn->grad[bs ? 0 : i] += contrib;
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T c) {
  return add(a, Tensor<T>::scalar(c));
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T c) {
  return mul(a, Tensor<T>::scalar(c));
}
template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul(a, T(-1));
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  // max(x,0) + log1p(exp(-|x|)) is exact in both tails.
  T m = x > T(0) ? x : T(0);
  return m + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  auto out = detail::alloc_result<T>("exp", a.shape(), a.requires_grad());
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = std::exp(a.data()[i]);
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node()](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * self.value[i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = detail::alloc_result<T>("sigmoid", a.shape(), a.requires_grad());
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = detail::stable_sigmoid(a.data()[i]);
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node()](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        T s = self.value[i];
        an->grad[i] += self.grad[i] * s * (T(1) - s);
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  auto out = detail::alloc_result<T>("softplus", a.shape(), a.requires_grad());
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = detail::stable_softplus(a.data()[i]);
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node()](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * detail::stable_sigmoid(an->value[i]);
    };
  }
  return Tensor<T>(out);
}

// x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  auto out = detail::alloc_result<T>("silu", a.shape(), a.requires_grad());
  for (size_t i = 0; i < out->value.size(); ++i) {
    T x = a.data()[i];
    out->value[i] = x * detail::stable_sigmoid(x);
  }
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node()](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        T x = an->value[i];
        T s = detail::stable_sigmoid(x);
        an->grad[i] += self.grad[i] * (s + x * s * (T(1) - s));
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// matmul, shape ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul: needs 2-d operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  require(a.shape()[1] == b.shape()[0],
          "matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = detail::alloc_result<T>("matmul", {m, n},
                                     a.requires_grad() || b.requires_grad());
  const T* av = a.data().data();
  const T* bv = b.data().data();
  T* ov = out->value.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      T s = av[i * k + p];
      const T* brow = bv + p * n;
      T* orow = ov + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  if (out->requires_grad) {
    out->parents = {a.node(), b.node()};
    out->backward_fn = [an = a.node(), bn = b.node(), m, k,
                        n](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            T s = 0;
            const T* brow = bn->value.data() + p * n;
            const T* grow = g + i * n;
            for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            an->grad[size_t(i * k + p)] += s;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t p = 0; p < k; ++p)
          for (int64_t i = 0; i < m; ++i) {
            T s = an->value[size_t(i * k + p)];
            const T* grow = g + i * n;
            T* brow = bn->grad.data() + p * n;
            for (int64_t j = 0; j < n; ++j) brow[j] += s * grow[j];
          }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " +
              shape_str(shape));
  auto out = detail::alloc_result<T>("reshape", shape, a.requires_grad());
  out->value = a.data();
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node()](TensorNode<T>& self) {
      an->ensure_grad();
      detail::acc(an->grad, self.grad);
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<size_t>& axes) {
  const Shape& s = a.shape();
  require(axes.size() == s.size(),
          "permute: axes rank " + std::to_string(axes.size()) +
              " does not match tensor " + shape_str(s));
  std::vector<bool> used(axes.size(), false);
  Shape os(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    require(axes[i] < s.size() && !used[axes[i]], "permute: invalid axes");
    used[axes[i]] = true;
    os[i] = s[axes[i]];
  }
  auto out = detail::alloc_result<T>("permute", os, a.requires_grad());
  Shape in_st = detail::strides_of<T>(s);
  Shape out_st = detail::strides_of<T>(os);
  const int64_t n = a.numel();
  const size_t rank = s.size();
  // out[idx] = in[perm(idx)], enumerate output linearly
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, ii = 0;
    for (size_t d = 0; d < rank; ++d) {
      int64_t c = rem / out_st[d];
      rem -= c * out_st[d];
      ii += c * in_st[axes[d]];
    }
    out->value[size_t(o)] = a.data()[size_t(ii)];
  }
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node(), axes, in_st, out_st, n,
                        rank](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o, ii = 0;
        for (size_t d = 0; d < rank; ++d) {
          int64_t c = rem / out_st[d];
          rem -= c * out_st[d];
          ii += c * in_st[axes[d]];
        }
        an->grad[size_t(ii)] += self.grad[size_t(o)];
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& items, size_t axis) {
  require(!items.empty(), "concat: no inputs");
  const Shape& s0 = items[0].shape();
  require(axis < s0.size(), "concat: axis out of range for " + shape_str(s0));
  Shape os = s0;
  bool rg = false;
  for (const auto& t : items) {
    require(t.shape().size() == s0.size(), "concat: rank mismatch");
    for (size_t d = 0; d < s0.size(); ++d)
      require(d == axis || t.shape()[d] == s0[d],
              "concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                  shape_str(s0));
    rg = rg || t.requires_grad();
  }
  os[axis] = 0;
  for (const auto& t : items) os[axis] += t.shape()[axis];
  auto out = detail::alloc_result<T>("concat", os, rg);
  int64_t outer, mid_total, inner;
  detail::split_axis(os, axis, outer, mid_total, inner);
  std::vector<int64_t> offsets;  // start of each input along axis
  int64_t off = 0;
  for (const auto& t : items) {
    offsets.push_back(off);
    int64_t mid = t.shape()[axis];
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(out->value.data() + (o * mid_total + off) * inner,
                  t.data().data() + o * mid * inner,
                  size_t(mid * inner) * sizeof(T));
    }
    off += mid;
  }
  if (rg) {
    std::vector<std::shared_ptr<TensorNode<T>>> ps;
    for (const auto& t : items) ps.push_back(t.node());
    out->parents = ps;
    out->backward_fn = [ps, offsets, outer, mid_total, inner,
                        axis](TensorNode<T>& self) {
      for (size_t q = 0; q < ps.size(); ++q) {
        if (!ps[q]->requires_grad) continue;
        ps[q]->ensure_grad();
        int64_t mid = ps[q]->shape[axis];
        for (int64_t o = 0; o < outer; ++o) {
          const T* src =
              self.grad.data() + (o * mid_total + offsets[q]) * inner;
          T* dst = ps[q]->grad.data() + o * mid * inner;
          for (int64_t i = 0; i < mid * inner; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, size_t axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  require(axis < s.size(), "slice: axis out of range for " + shape_str(s));
  require(start >= 0 && len >= 0 && start + len <= s[axis],
          "slice: range [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of bounds for axis size " +
              std::to_string(s[axis]));
  Shape os = s;
  os[axis] = len;
  auto out = detail::alloc_result<T>("slice", os, a.requires_grad());
  int64_t outer, mid, inner;
  detail::split_axis(s, axis, outer, mid, inner);
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out->value.data() + o * len * inner,
                a.data().data() + (o * mid + start) * inner,
                size_t(len * inner) * sizeof(T));
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node(), outer, mid, inner, start,
                        len](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * len * inner;
        T* dst = an->grad.data() + (o * mid + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Index ops over axis 0 (rows of a 1-d tensor are scalars)

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int64_t>& idx) {
  require(!a.shape().empty(), "gather_rows: scalar input");
  const int64_t rows = a.shape()[0];
  const int64_t inner = a.numel() / std::max<int64_t>(rows, 1);
  for (int64_t i : idx)
    require(i >= 0 && i < rows, "gather_rows: index " + std::to_string(i) +
                                    " out of range [0," +
                                    std::to_string(rows) + ")");
  Shape os = a.shape();
  os[0] = int64_t(idx.size());
  auto out = detail::alloc_result<T>("gather_rows", os, a.requires_grad());
  for (size_t j = 0; j < idx.size(); ++j)
    std::memcpy(out->value.data() + int64_t(j) * inner,
                a.data().data() + idx[j] * inner, size_t(inner) * sizeof(T));
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node(), idx, inner](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t j = 0; j < idx.size(); ++j) {
        const T* src = self.grad.data() + int64_t(j) * inner;
        T* dst = an->grad.data() + idx[j] * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor<T>(out);
}

// Rows of `a` land at `idx` in a fresh [rows, ...] tensor; all other rows take
// `fill` (or zero when fill is undefined). Duplicate targets are an error.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& a, const std::vector<int64_t>& idx,
                       int64_t rows, const Tensor<T>& fill = Tensor<T>()) {
  require(!a.shape().empty(), "scatter_rows: scalar input");
  require(int64_t(idx.size()) == a.shape()[0],
          "scatter_rows: " + std::to_string(idx.size()) + " indices for " +
              std::to_string(a.shape()[0]) + " rows");
  const int64_t inner = a.shape().size() == 1 ? 1 : a.numel() / a.shape()[0];
  std::vector<uint8_t> taken(size_t(rows), 0);
  for (int64_t i : idx) {
    require(i >= 0 && i < rows, "scatter_rows: index " + std::to_string(i) +
                                    " out of range [0," +
                                    std::to_string(rows) + ")");
    require(!taken[size_t(i)],
            "scatter_rows: duplicate position " + std::to_string(i));
    taken[size_t(i)] = 1;
  }
  if (fill.defined())
    require(fill.numel() == inner,
            "scatter_rows: fill shape " + shape_str(fill.shape()) +
                " does not match row size " + std::to_string(inner));
  Shape os = a.shape();
  os[0] = rows;
  bool rg = a.requires_grad() || (fill.defined() && fill.requires_grad());
  auto out = detail::alloc_result<T>("scatter_rows", os, rg);
  for (int64_t r = 0; r < rows; ++r) {
    if (!taken[size_t(r)] && fill.defined())
      std::memcpy(out->value.data() + r * inner, fill.data().data(),
                  size_t(inner) * sizeof(T));
  }
  for (size_t j = 0; j < idx.size(); ++j)
    std::memcpy(out->value.data() + idx[j] * inner,
                a.data().data() + int64_t(j) * inner,
                size_t(inner) * sizeof(T));
  if (rg) {
    out->parents = {a.node()};
    std::shared_ptr<TensorNode<T>> fn = fill.defined() ? fill.node() : nullptr;
    if (fn) out->parents.push_back(fn);
    out->backward_fn = [an = a.node(), fn, idx, taken, rows,
                        inner](TensorNode<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t j = 0; j < idx.size(); ++j) {
          const T* src = self.grad.data() + idx[j] * inner;
          T* dst = an->grad.data() + int64_t(j) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      }
      if (fn && fn->requires_grad) {
        fn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          if (taken[size_t(r)]) continue;
          const T* src = self.grad.data() + r * inner;
          for (int64_t i = 0; i < inner; ++i) fn->grad[size_t(i)] += src[i];
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Reductions / expansion

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = detail::alloc_result<T>("sum", Shape{}, a.requires_grad());
  T s = 0;
  for (T v : a.data()) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node()](TensorNode<T>& self) {
      an->ensure_grad();
      T g = self.grad[0];
      for (auto& v : an->grad) v += g;
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return mul(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, size_t axis) {
  const Shape& s = a.shape();
  require(axis < s.size(), "sum_axis: axis out of range for " + shape_str(s));
  Shape os;
  for (size_t d = 0; d < s.size(); ++d)
    if (d != axis) os.push_back(s[d]);
  auto out = detail::alloc_result<T>("sum_axis", os, a.requires_grad());
  int64_t outer, mid, inner;
  detail::split_axis(s, axis, outer, mid, inner);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m) {
      const T* src = a.data().data() + (o * mid + m) * inner;
      T* dst = out->value.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node(), outer, mid, inner](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m) {
          const T* src = self.grad.data() + o * inner;
          T* dst = an->grad.data() + (o * mid + m) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return Tensor<T>(out);
}

// Insert an axis of size n at `axis`, repeating values along it. The explicit
// stand-in for broadcasting; adjoint of sum_axis.
template <typename T>
Tensor<T> expand_axis(const Tensor<T>& a, size_t axis, int64_t n) {
  const Shape& s = a.shape();
  require(axis <= s.size(),
          "expand_axis: axis out of range for " + shape_str(s));
  require(n > 0, "expand_axis: size must be positive");
  Shape os;
  for (size_t d = 0; d < axis; ++d) os.push_back(s[d]);
  os.push_back(n);
  for (size_t d = axis; d < s.size(); ++d) os.push_back(s[d]);
  auto out = detail::alloc_result<T>("expand_axis", os, a.requires_grad());
  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis; d < s.size(); ++d) inner *= s[d];
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < n; ++m)
      std::memcpy(out->value.data() + (o * n + m) * inner,
                  a.data().data() + o * inner, size_t(inner) * sizeof(T));
  if (out->requires_grad) {
    out->parents = {a.node()};
    out->backward_fn = [an = a.node(), outer, n, inner](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < n; ++m) {
          const T* src = self.grad.data() + (o * n + m) * inner;
          T* dst = an->grad.data() + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// 3-d spatial ops; layout is [C, z, y, x] with x fastest

namespace detail {

inline void check_spatial(const char* op, const Shape& s) {
  require(s.size() == 4, std::string(op) + ": expected [C,z,y,x], got " +
                             shape_str(s));
  for (int64_t d : s)
    require(d > 0, std::string(op) + ": non-positive extent in " +
                       shape_str(s));
}

}  // namespace detail

// Direct (non-im2col) 3-d convolution, stride 1, symmetric zero padding.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int64_t pad) {
  detail::check_spatial("conv3d", x.shape());
  require(w.shape().size() == 5,
          "conv3d: kernel must be [Co,Ci,k,k,k], got " + shape_str(w.shape()));
  const int64_t ci = x.shape()[0], D = x.shape()[1], H = x.shape()[2],
                W = x.shape()[3];
  const int64_t co = w.shape()[0], k = w.shape()[2];
  require(w.shape()[1] == ci && w.shape()[3] == k && w.shape()[4] == k &&
              w.shape()[2] == k,
          "conv3d: kernel " + shape_str(w.shape()) + " does not match input " +
              shape_str(x.shape()));
  require(pad >= 0, "conv3d: negative padding");
  const int64_t oD = D + 2 * pad - k + 1, oH = H + 2 * pad - k + 1,
                oW = W + 2 * pad - k + 1;
  require(oD > 0 && oH > 0 && oW > 0,
          "conv3d: kernel larger than padded input " + shape_str(x.shape()));
  if (b.defined())
    require(b.shape() == Shape{co}, "conv3d: bias shape " +
                                        shape_str(b.shape()) + " vs Co=" +
                                        std::to_string(co));
  bool rg = x.requires_grad() || w.requires_grad() ||
            (b.defined() && b.requires_grad());
  auto out = detail::alloc_result<T>("conv3d", {co, oD, oH, oW}, rg);

  const T* xv = x.data().data();
  const T* wv = w.data().data();
  T* ov = out->value.data();
  const int64_t xcs = D * H * W, ocs = oD * oH * oW;
  if (b.defined()) {
    for (int64_t c = 0; c < co; ++c) {
      T bv = b.data()[size_t(c)];
      for (int64_t i = 0; i < ocs; ++i) ov[c * ocs + i] = bv;
    }
  }
  // One shifted accumulation pass per (co, ci, kz, ky, kx); inner x loop is
  // contiguous on both sides so it vectorizes.
  for (int64_t c = 0; c < co; ++c)
    for (int64_t q = 0; q < ci; ++q)
      for (int64_t kz = 0; kz < k; ++kz)
        for (int64_t ky = 0; ky < k; ++ky)
          for (int64_t kx = 0; kx < k; ++kx) {
            T ws = wv[(((c * ci + q) * k + kz) * k + ky) * k + kx];
            int64_t z0 = std::max<int64_t>(0, pad - kz);
            int64_t z1 = std::min(oD, D + pad - kz);
            int64_t y0 = std::max<int64_t>(0, pad - ky);
            int64_t y1 = std::min(oH, H + pad - ky);
            int64_t x0 = std::max<int64_t>(0, pad - kx);
            int64_t x1 = std::min(oW, W + pad - kx);
            for (int64_t z = z0; z < z1; ++z)
              for (int64_t y = y0; y < y1; ++y) {
                const T* src = xv + q * xcs + ((z + kz - pad) * H +
                                               (y + ky - pad)) * W +
                               (x0 + kx - pad);
                T* dst = ov + c * ocs + (z * oH + y) * oW + x0;
                for (int64_t xx = 0; xx < x1 - x0; ++xx)
                  dst[xx] += ws * src[xx];
              }
          }

  if (rg) {
    out->parents = {x.node(), w.node()};
    std::shared_ptr<TensorNode<T>> bn = b.defined() ? b.node() : nullptr;
    if (bn) out->parents.push_back(bn);
    out->backward_fn = [xn = x.node(), wn = w.node(), bn, ci, co, D, H, W, k,
                        pad, oD, oH, oW, xcs, ocs](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t c = 0; c < co; ++c) {
          T s = 0;
          for (int64_t i = 0; i < ocs; ++i) s += g[c * ocs + i];
          bn->grad[size_t(c)] += s;
        }
      }
      for (int64_t c = 0; c < co; ++c)
        for (int64_t q = 0; q < ci; ++q)
          for (int64_t kz = 0; kz < k; ++kz)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                int64_t widx = (((c * ci + q) * k + kz) * k + ky) * k + kx;
                int64_t z0 = std::max<int64_t>(0, pad - kz);
                int64_t z1 = std::min(oD, D + pad - kz);
                int64_t y0 = std::max<int64_t>(0, pad - ky);
                int64_t y1 = std::min(oH, H + pad - ky);
                int64_t x0 = std::max<int64_t>(0, pad - kx);
                int64_t x1 = std::min(oW, W + pad - kx);
                if (wn->requires_grad) {
                  wn->ensure_grad();
                  T s = 0;
                  for (int64_t z = z0; z < z1; ++z)
                    for (int64_t y = y0; y < y1; ++y) {
                      const T* xs = xn->value.data() + q * xcs +
                                    ((z + kz - pad) * H + (y + ky - pad)) * W +
                                    (x0 + kx - pad);
                      const T* gs = g + c * ocs + (z * oH + y) * oW + x0;
                      for (int64_t xx = 0; xx < x1 - x0; ++xx)
                        s += xs[xx] * gs[xx];
                    }
                  wn->grad[size_t(widx)] += s;
                }
                if (xn->requires_grad) {
                  xn->ensure_grad();
                  T ws = wn->value[size_t(widx)];
                  for (int64_t z = z0; z < z1; ++z)
                    for (int64_t y = y0; y < y1; ++y) {
                      T* xd = xn->grad.data() + q * xcs +
                              ((z + kz - pad) * H + (y + ky - pad)) * W +
                              (x0 + kx - pad);
                      const T* gs = g + c * ocs + (z * oH + y) * oW + x0;
                      for (int64_t xx = 0; xx < x1 - x0; ++xx)
                        xd[xx] += ws * gs[xx];
                    }
                }
              }
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> maxpool3d_2x(const Tensor<T>& x) {
  detail::check_spatial("maxpool3d_2x", x.shape());
  const int64_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2],
                W = x.shape()[3];
  require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0,
          "maxpool3d_2x: extents must be even, got " + shape_str(x.shape()));
  const int64_t oD = D / 2, oH = H / 2, oW = W / 2;
  auto out =
      detail::alloc_result<T>("maxpool3d_2x", {C, oD, oH, oW},
                              x.requires_grad());
  auto argmax = std::make_shared<std::vector<int64_t>>(
      size_t(C * oD * oH * oW));
  const T* xv = x.data().data();
  for (int64_t c = 0; c < C; ++c)
    for (int64_t z = 0; z < oD; ++z)
      for (int64_t y = 0; y < oH; ++y)
        for (int64_t xx = 0; xx < oW; ++xx) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t bi = 0;
          for (int64_t dz = 0; dz < 2; ++dz)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx) {
                int64_t ii = ((c * D + 2 * z + dz) * H + 2 * y + dy) * W +
                             2 * xx + dx;
                if (xv[ii] > best) {
                  best = xv[ii];
                  bi = ii;
                }
              }
          int64_t oi = ((c * oD + z) * oH + y) * oW + xx;
          out->value[size_t(oi)] = best;
          (*argmax)[size_t(oi)] = bi;
        }
  if (out->requires_grad) {
    out->parents = {x.node()};
    out->backward_fn = [an = x.node(), argmax](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[size_t((*argmax)[i])] += self.grad[i];
    };
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> upsample3d_2x(const Tensor<T>& x) {
  detail::check_spatial("upsample3d_2x", x.shape());
  const int64_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2],
                W = x.shape()[3];
  auto out = detail::alloc_result<T>("upsample3d_2x", {C, 2 * D, 2 * H, 2 * W},
                                     x.requires_grad());
  const T* xv = x.data().data();
  for (int64_t c = 0; c < C; ++c)
    for (int64_t z = 0; z < 2 * D; ++z)
      for (int64_t y = 0; y < 2 * H; ++y) {
        const T* src = xv + ((c * D + z / 2) * H + y / 2) * W;
        T* dst = out->value.data() + ((c * 2 * D + z) * 2 * H + y) * 2 * W;
        for (int64_t xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
      }
  if (out->requires_grad) {
    out->parents = {x.node()};
    out->backward_fn = [an = x.node(), C, D, H, W](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < 2 * D; ++z)
          for (int64_t y = 0; y < 2 * H; ++y) {
            const T* src =
                self.grad.data() + ((c * 2 * D + z) * 2 * H + y) * 2 * W;
            T* dst = an->grad.data() + ((c * D + z / 2) * H + y / 2) * W;
            for (int64_t xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
          }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Sequence ops

// Depthwise causal conv along axis 0 of [L, C]; tap t of w applies at lag
// (width-1-t), so w[width-1] multiplies the current token. Left zero padding.
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& w,
                        const Tensor<T>& b) {
  require(x.shape().size() == 2, "causal_conv1d: expected [L,C], got " +
                                     shape_str(x.shape()));
  require(w.shape().size() == 2 && w.shape()[1] == x.shape()[1],
          "causal_conv1d: weights " + shape_str(w.shape()) +
              " do not match input " + shape_str(x.shape()));
  const int64_t L = x.shape()[0], C = x.shape()[1], width = w.shape()[0];
  if (b.defined())
    require(b.shape() == Shape{C}, "causal_conv1d: bias shape " +
                                       shape_str(b.shape()) + " vs C=" +
                                       std::to_string(C));
  bool rg = x.requires_grad() || w.requires_grad() ||
            (b.defined() && b.requires_grad());
  auto out = detail::alloc_result<T>("causal_conv1d", {L, C}, rg);
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  for (int64_t l = 0; l < L; ++l)
    for (int64_t c = 0; c < C; ++c) {
      T s = b.defined() ? b.data()[size_t(c)] : T(0);
      for (int64_t t = 0; t < width; ++t) {
        int64_t src = l - (width - 1 - t);
        if (src >= 0) s += wv[t * C + c] * xv[src * C + c];
      }
      out->value[size_t(l * C + c)] = s;
    }
  if (rg) {
    out->parents = {x.node(), w.node()};
    std::shared_ptr<TensorNode<T>> bn = b.defined() ? b.node() : nullptr;
    if (bn) out->parents.push_back(bn);
    out->backward_fn = [xn = x.node(), wn = w.node(), bn, L, C,
                        width](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t l = 0; l < L; ++l)
          for (int64_t c = 0; c < C; ++c) bn->grad[size_t(c)] += g[l * C + c];
      }
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (int64_t l = 0; l < L; ++l)
        for (int64_t t = 0; t < width; ++t) {
          int64_t src = l - (width - 1 - t);
          if (src < 0) continue;
          for (int64_t c = 0; c < C; ++c) {
            if (wn->requires_grad)
              wn->grad[size_t(t * C + c)] +=
                  xn->value[size_t(src * C + c)] * g[l * C + c];
            if (xn->requires_grad)
              xn->grad[size_t(src * C + c)] +=
                  wn->value[size_t(t * C + c)] * g[l * C + c];
          }
        }
    };
  }
  return Tensor<T>(out);
}

// y[j] = sum_{l<=j} k[l] x[j-l]; the causal convolution of two length-L
// sequences, truncated to length L.
template <typename T>
Tensor<T> causal_conv_full(const Tensor<T>& x, const Tensor<T>& k) {
  require(x.shape().size() == 1 && k.shape().size() == 1 &&
              x.shape() == k.shape(),
          "causal_conv_full: expected equal 1-d shapes, got " +
              shape_str(x.shape()) + " vs " + shape_str(k.shape()));
  const int64_t L = x.shape()[0];
  auto out = detail::alloc_result<T>("causal_conv_full", {L},
                                     x.requires_grad() || k.requires_grad());
  for (int64_t j = 0; j < L; ++j) {
    T s = 0;
    for (int64_t l = 0; l <= j; ++l) s += k.data()[size_t(l)] * x.data()[size_t(j - l)];
    out->value[size_t(j)] = s;
  }
  if (out->requires_grad) {
    out->parents = {x.node(), k.node()};
    out->backward_fn = [xn = x.node(), kn = k.node(), L](TensorNode<T>& self) {
      const T* g = self.grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int64_t j = 0; j < L; ++j)
          for (int64_t l = 0; l <= j; ++l)
            xn->grad[size_t(j - l)] += kn->value[size_t(l)] * g[j];
      }
      if (kn->requires_grad) {
        kn->ensure_grad();
        for (int64_t j = 0; j < L; ++j)
          for (int64_t l = 0; l <= j; ++l)
            kn->grad[size_t(l)] += xn->value[size_t(j - l)] * g[j];
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Masking / normalization

// Zero out masked entries. mask is 1 = keep, 0 = zero; it may cover either
// every element, or the trailing spatial dims shared across channel axis 0.
template <typename T>
Tensor<T> mask_values(const Tensor<T>& x, const std::vector<uint8_t>& mask) {
  const int64_t n = x.numel();
  int64_t span;
  if (int64_t(mask.size()) == n) {
    span = n;  // elementwise
  } else {
    require(!x.shape().empty() && x.shape()[0] > 0 &&
                int64_t(mask.size()) * x.shape()[0] == n,
            "mask_values: mask size " + std::to_string(mask.size()) +
                " does not match tensor " + shape_str(x.shape()));
    span = int64_t(mask.size());
  }
  auto out = detail::alloc_result<T>("mask_values", x.shape(),
                                     x.requires_grad());
  for (int64_t i = 0; i < n; ++i)
    out->value[size_t(i)] = mask[size_t(i % span)] ? x.data()[size_t(i)] : T(0);
  if (out->requires_grad) {
    out->parents = {x.node()};
    out->backward_fn = [an = x.node(), mask, span, n](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        if (mask[size_t(i % span)]) an->grad[size_t(i)] += self.grad[size_t(i)];
    };
  }
  return Tensor<T>(out);
}

// Layer-style normalization over the channel axis (axis 0), independently at
// each trailing position; no cross-position statistics, no affine params.
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, T eps = T(1e-5)) {
  require(x.shape().size() >= 2,
          "layer_norm_channels: expected [C,...], got " + shape_str(x.shape()));
  const int64_t C = x.shape()[0];
  const int64_t S = x.numel() / C;
  auto out = detail::alloc_result<T>("layer_norm_channels", x.shape(),
                                     x.requires_grad());
  auto inv_std = std::make_shared<std::vector<T>>(size_t(S));
  const T* xv = x.data().data();
  for (int64_t s = 0; s < S; ++s) {
    T m = 0;
    for (int64_t c = 0; c < C; ++c) m += xv[c * S + s];
    m /= T(C);
    T v = 0;
    for (int64_t c = 0; c < C; ++c) {
      T d = xv[c * S + s] - m;
      v += d * d;
    }
    v /= T(C);
    T inv = T(1) / std::sqrt(v + eps);
    (*inv_std)[size_t(s)] = inv;
    for (int64_t c = 0; c < C; ++c)
      out->value[size_t(c * S + s)] = (xv[c * S + s] - m) * inv;
  }
  if (out->requires_grad) {
    out->parents = {x.node()};
    out->backward_fn = [an = x.node(), inv_std, C, S](TensorNode<T>& self) {
      an->ensure_grad();
      for (int64_t s = 0; s < S; ++s) {
        T gm = 0, gxm = 0;
        for (int64_t c = 0; c < C; ++c) {
          gm += self.grad[size_t(c * S + s)];
          gxm += self.grad[size_t(c * S + s)] * self.value[size_t(c * S + s)];
        }
        gm /= T(C);
        gxm /= T(C);
        T inv = (*inv_std)[size_t(s)];
        for (int64_t c = 0; c < C; ++c) {
          T xh = self.value[size_t(c * S + s)];
          an->grad[size_t(c * S + s)] +=
              inv * (self.grad[size_t(c * S + s)] - gm - xh * gxm);
        }
      }
    };
  }
  return Tensor<T>(out);
}

}  // namespace ssmim
