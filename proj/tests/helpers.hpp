#pragma once

// Shared test utilities. The finite-difference oracle here is deliberately
// independent of the tape: it only re-runs forward closures on perturbed
// leaves.

#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "ssmim/core.hpp"
#include "ssmim/tensor.hpp"

namespace testutil {

using ssmim::Rng;
using ssmim::Shape;
using ssmim::Tensor;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(size_t(ssmim::numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_vector(std::move(shape), std::move(v),
                                     requires_grad);
}

// Fixed random projection to a scalar so gradient errors cannot cancel the
// way they could under plain sum().
inline Tensor<double> weighted_sum(const Tensor<double>& t, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(size_t(t.numel()));
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  auto wt = Tensor<double>::from_vector(t.shape(), std::move(w));
  return ssmim::sum(ssmim::mul(t, wt));
}

// Central differences (h = 1e-5) against one backward pass. Error is the
// infinity-norm difference over each leaf, relative to the gradient scale.
template <typename F>
double fd_max_rel_err(F&& loss_fn, std::vector<Tensor<double>> leaves,
                      double h = 1e-5) {
  auto loss = loss_fn();
  for (auto& l : leaves) l.zero_grad();
  loss.backward();
  double worst = 0.0;
  for (auto& leaf : leaves) {
    std::vector<double> ad = leaf.grad();
    double scale = 1e-12;
    std::vector<double> fd(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) {
      double orig = leaf.mutable_data()[i];
      leaf.mutable_data()[i] = orig + h;
      double lp = loss_fn().item();
      leaf.mutable_data()[i] = orig - h;
      double lm = loss_fn().item();
      leaf.mutable_data()[i] = orig;
      fd[i] = (lp - lm) / (2.0 * h);
      scale = std::max({scale, std::abs(ad[i]), std::abs(fd[i])});
    }
    for (size_t i = 0; i < ad.size(); ++i)
      worst = std::max(worst, std::abs(ad[i] - fd[i]) / scale);
  }
  return worst;
}

inline bool near(double a, double b, double tol = 1e-12) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
