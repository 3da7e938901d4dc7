#pragma once

// Named parameter registry, decoupled-weight-decay Adam, cosine schedule.

#include <string>
#include <utility>
#include <vector>

#include "ssmim/tensor.hpp"

namespace ssmim {

// Ordered name -> leaf registry. Order is fixed at construction and shared by
// the optimizer, the checkpoint writer and the gradient checker, so runs are
// reproducible and reports are comparable to checkpoint tables.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> leaf) {
    require(find(name) == nullptr, "ParamStore: duplicate parameter " + name);
    leaf.set_requires_grad(true);
    items_.emplace_back(name, leaf);
    return leaf;
  }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& [n, t] : items_) t.zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
};

// AdamW: decoupled weight decay, bias-corrected moments. Moment state lives
// here and advances once per step().
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& params, T beta1 = T(0.9), T beta2 = T(0.999),
        T eps = T(1e-8), T weight_decay = T(0))
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps),
        weight_decay_(weight_decay) {
    for (auto& [name, t] : params_) {
      m_.emplace_back(t.numel(), T(0));
      v_.emplace_back(t.numel(), T(0));
    }
  }

  void step(T lr) {
    ++t_;
    T bc1 = T(1) - std::pow(beta1_, T(t_));
    T bc2 = T(1) - std::pow(beta2_, T(t_));
    size_t pi = 0;
    for (auto& [name, p] : params_) {
      require(p.has_grad(),
              "AdamW: parameter " + name + " has no gradient buffer");
      const std::vector<T>& g = p.grad();
      std::vector<T>& w = p.mutable_data();
      std::vector<T>& m = m_[pi];
      std::vector<T>& v = v_[pi];
      for (size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
        T mh = m[i] / bc1;
        T vh = v[i] / bc2;
        w[i] -= lr * (mh / (std::sqrt(vh) + eps_) + weight_decay_ * w[i]);
      }
      ++pi;
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  ParamStore<T>& params_;
  T beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Anneals from base_lr at t=0 to 0 at t=total.
template <typename T>
T cosine_lr(T base_lr, int64_t t, int64_t total) {
  require(total > 0 && t >= 0 && t <= total, "cosine_lr: bad step index");
  double phase = 3.14159265358979323846 * double(t) / double(total);
  return base_lr * T(0.5) * (T(1) + T(std::cos(phase)));
}

}  // namespace ssmim
