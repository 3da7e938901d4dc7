#pragma once

// Diagonal selective state-space machinery: zero-order-hold discretization,
// the sequential scan, the equivalent kernel (convolution) form for the
// time-invariant case, and the gated block that wraps the scan.

#include "ssmim/core.hpp"
#include "ssmim/tensor.hpp"

namespace ssmim {

// Continuous-time diagonal system: state matrix A = diag(a) with a < 0 for
// stability, input map b, output map c, all length N.
template <typename T>
struct SsmParams {
  Tensor<T> a, b, c;
};

template <typename T>
SsmParams<T> make_ssm_params(Tensor<T> a, Tensor<T> b, Tensor<T> c) {
  require(a.shape().size() == 1 && a.shape() == b.shape() &&
              a.shape() == c.shape(),
          "make_ssm_params: expected equal 1-d shapes, got " +
              shape_str(a.shape()) + ", " + shape_str(b.shape()) + ", " +
              shape_str(c.shape()));
  for (int64_t i = 0; i < a.numel(); ++i)
    require(a[i] < T(0), "make_ssm_params: A entry " + std::to_string(i) +
                             " = " + std::to_string(double(a[i])) +
                             " is not negative");
  return SsmParams<T>{a, b, c};
}

// Per-token discrete system. Row i holds the zero-order-hold matrices for
// step i; for a time-invariant system all rows coincide.
template <typename T>
struct DiscretizedSsm {
  Tensor<T> a_bar;  // [L, N]
  Tensor<T> b_bar;  // [L, N]
};

// Zero-order hold over step sizes delta (> 0):
//   A_bar = exp(delta a),  B_bar = ((exp(delta a) - 1) / a) b
// (the delta in B_bar's leading factor cancels one inside delta*b).
template <typename T>
DiscretizedSsm<T> discretize(const SsmParams<T>& p, const Tensor<T>& delta) {
  require(delta.shape().size() == 1,
          "discretize: delta must be 1-d, got " + shape_str(delta.shape()));
  for (int64_t i = 0; i < delta.numel(); ++i)
    require(delta[i] > T(0), "discretize: delta[" + std::to_string(i) + "] = " +
                                 std::to_string(double(delta[i])) +
                                 " is not positive");
  const int64_t L = delta.shape()[0];
  const int64_t N = p.a.shape()[0];
  auto a_rows = expand_axis(p.a, 0, L);      // [L,N]
  auto b_rows = expand_axis(p.b, 0, L);      // [L,N]
  auto d_cols = expand_axis(delta, 1, N);    // [L,N]
  auto a_bar = exp(mul(d_cols, a_rows));
  auto b_bar = mul(div(sub(a_bar, Tensor<T>::scalar(T(1))), a_rows), b_rows);
  return DiscretizedSsm<T>{a_bar, b_bar};
}

namespace detail {

template <typename T>
Tensor<T> row(const Tensor<T>& m, int64_t i) {
  return reshape(gather_rows(m, {i}), {m.shape()[1]});
}

template <typename T>
void check_scan_args(const char* op, const DiscretizedSsm<T>& d,
                     const Tensor<T>& c, const Tensor<T>& x) {
  require(d.a_bar.shape().size() == 2 && d.a_bar.shape() == d.b_bar.shape(),
          std::string(op) + ": A_bar/B_bar must be matching [L,N], got " +
              shape_str(d.a_bar.shape()) + " vs " + shape_str(d.b_bar.shape()));
  require(x.shape().size() == 1 && x.shape()[0] == d.a_bar.shape()[0],
          std::string(op) + ": x " + shape_str(x.shape()) +
              " does not match sequence length " +
              std::to_string(d.a_bar.shape()[0]));
  const int64_t N = d.a_bar.shape()[1];
  bool c_ok = (c.shape() == Shape{N}) ||
              (c.shape().size() == 2 && c.shape()[0] == d.a_bar.shape()[0] &&
               c.shape()[1] == N);
  require(c_ok, std::string(op) + ": C " + shape_str(c.shape()) +
                    " must be [N] or [L,N] with N=" + std::to_string(N));
}

}  // namespace detail

// h_i = A_bar_i . h_{i-1} + B_bar_i x_i, emitted as y_i = <c_i, h_i>; the
// state updates before the readout, so the lag-0 tap is c.B_bar. C may be a
// single vector or per-token rows (the selective case).
template <typename T>
Tensor<T> scan_recurrent(const DiscretizedSsm<T>& d, const Tensor<T>& c,
                         const Tensor<T>& x) {
  detail::check_scan_args("scan_recurrent", d, c, x);
  const int64_t L = x.shape()[0];
  const int64_t N = d.a_bar.shape()[1];
  const bool c_per_token = c.shape().size() == 2;
  Tensor<T> h = Tensor<T>::zeros({N});
  std::vector<Tensor<T>> ys;
  ys.reserve(size_t(L));
  for (int64_t i = 0; i < L; ++i) {
    auto xi = gather_rows(x, {i});  // [1], broadcasts as scalar
    h = add(mul(detail::row(d.a_bar, i), h),
            mul(detail::row(d.b_bar, i), xi));
    auto ci = c_per_token ? detail::row(c, i) : c;
    ys.push_back(reshape(sum(mul(ci, h)), {1}));
  }
  return concat(ys, 0);
}

// Time-invariant only: builds the kernel (c.B_bar, c.A_bar B_bar, ...,
// c.A_bar^{L-1} B_bar) and convolves. Rejects selective (per-token) systems.
template <typename T>
Tensor<T> scan_kernel(const DiscretizedSsm<T>& d, const Tensor<T>& c,
                      const Tensor<T>& x) {
  detail::check_scan_args("scan_kernel", d, c, x);
  require(c.shape().size() == 1,
          "scan_kernel: time-invariant form needs a fixed C, got " +
              shape_str(c.shape()));
  const int64_t L = x.shape()[0];
  const int64_t N = d.a_bar.shape()[1];
  for (int64_t i = 1; i < L; ++i)
    for (int64_t n = 0; n < N; ++n)
      require(d.a_bar[i * N + n] == d.a_bar[n] &&
                  d.b_bar[i * N + n] == d.b_bar[n],
              "scan_kernel: discretization varies over the sequence "
              "(selective); use scan_recurrent");
  auto a0 = detail::row(d.a_bar, 0);
  auto p = detail::row(d.b_bar, 0);
  std::vector<Tensor<T>> taps;
  taps.reserve(size_t(L));
  for (int64_t t = 0; t < L; ++t) {
    taps.push_back(reshape(sum(mul(c, p)), {1}));
    if (t + 1 < L) p = mul(a0, p);
  }
  return causal_conv_full(x, concat(taps, 0));
}

// Multi-channel selective scan: per-channel diagonal A, shared per-token
// B, C, and a per-token scalar step delta broadcast across channels.
//   A [I,N] (entries < 0), delta [K] or [K,1], B,C [K,N], x [K,I] -> [K,I]
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& a, const Tensor<T>& delta,
                         const Tensor<T>& b, const Tensor<T>& c,
                         const Tensor<T>& x) {
  require(a.shape().size() == 2, "selective_scan: A must be [I,N], got " +
                                     shape_str(a.shape()));
  require(x.shape().size() == 2 && x.shape()[1] == a.shape()[0],
          "selective_scan: x " + shape_str(x.shape()) +
              " does not match A " + shape_str(a.shape()));
  const int64_t K = x.shape()[0], I = a.shape()[0], N = a.shape()[1];
  require(b.shape() == Shape{K, N} && c.shape() == Shape{K, N},
          "selective_scan: B " + shape_str(b.shape()) + " / C " +
              shape_str(c.shape()) + " must be [K,N]");
  bool d_ok = delta.shape() == Shape{K} || delta.shape() == Shape{K, 1};
  require(d_ok, "selective_scan: delta " + shape_str(delta.shape()) +
                    " must be [K] or [K,1]");
  auto one = Tensor<T>::scalar(T(1));
  Tensor<T> h = Tensor<T>::zeros({I, N});
  std::vector<Tensor<T>> ys;
  ys.reserve(size_t(K));
  for (int64_t k = 0; k < K; ++k) {
    auto dk = reshape(gather_rows(delta, {k}), Shape{});
    auto a_bar = exp(mul(a, dk));                            // [I,N]
    auto b_tok = expand_axis(detail::row(b, k), 0, I);       // [I,N]
    auto b_bar = mul(div(sub(a_bar, one), a), b_tok);
    auto x_tok = expand_axis(detail::row(x, k), 1, N);       // [I,N]
    h = add(mul(a_bar, h), mul(b_bar, x_tok));
    auto c_tok = expand_axis(detail::row(c, k), 0, I);
    ys.push_back(reshape(sum_axis(mul(h, c_tok), 1), {1, I}));
  }
  return concat(ys, 0);
}

// ---------------------------------------------------------------------------
// Gated block around the scan

template <typename T>
struct MambaBlockParams {
  int64_t model_dim = 0, inner_dim = 0, state_dim = 0;
  bool use_conv = true;
  Tensor<T> in_w, in_b;        // [D,I], [I]
  Tensor<T> conv_w, conv_b;    // [3,I], [I] (only when use_conv)
  Tensor<T> a_log;             // [I,N]; A = -exp(a_log)
  Tensor<T> b_w, c_w;          // [I,N]
  Tensor<T> delta_w, delta_b;  // [I,1], [1]
  Tensor<T> gate_w, gate_b;    // [D,I], [I]
  Tensor<T> out_w, out_b;      // [I,D], [D]
};

namespace detail {

template <typename T>
Tensor<T> uniform_leaf(Shape shape, Rng& rng, double bound) {
  std::vector<T> v(size_t(numel(shape)));
  for (auto& x : v) x = T(rng.uniform(-bound, bound));
  return Tensor<T>::from_vector(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), expand_axis(b, 0, x.shape()[0]));
}

}  // namespace detail

// A_log rows start at log(1..N) so A = -(1..N); delta bias puts the initial
// softplus step size at 0.05.
template <typename T>
MambaBlockParams<T> make_mamba_block(int64_t model_dim, int64_t inner_dim,
                                     int64_t state_dim, bool use_conv,
                                     Rng& rng) {
  require(model_dim > 0 && inner_dim > 0 && state_dim > 0,
          "make_mamba_block: dims must be positive");
  MambaBlockParams<T> p;
  p.model_dim = model_dim;
  p.inner_dim = inner_dim;
  p.state_dim = state_dim;
  p.use_conv = use_conv;
  double din = 1.0 / std::sqrt(double(model_dim));
  double dinner = 1.0 / std::sqrt(double(inner_dim));
  p.in_w = detail::uniform_leaf<T>({model_dim, inner_dim}, rng, din);
  p.in_b = Tensor<T>::zeros({inner_dim});
  if (use_conv) {
    p.conv_w = detail::uniform_leaf<T>({3, inner_dim}, rng,
                                       1.0 / std::sqrt(3.0));
    p.conv_b = Tensor<T>::zeros({inner_dim});
  }
  std::vector<T> alog(size_t(inner_dim * state_dim));
  for (int64_t i = 0; i < inner_dim; ++i)
    for (int64_t n = 0; n < state_dim; ++n)
      alog[size_t(i * state_dim + n)] = T(std::log(double(n + 1)));
  p.a_log = Tensor<T>::from_vector({inner_dim, state_dim}, std::move(alog));
  p.b_w = detail::uniform_leaf<T>({inner_dim, state_dim}, rng, dinner);
  p.c_w = detail::uniform_leaf<T>({inner_dim, state_dim}, rng, dinner);
  p.delta_w = detail::uniform_leaf<T>({inner_dim, 1}, rng, dinner);
  p.delta_b =
      Tensor<T>::from_vector({1}, {T(std::log(std::expm1(0.05)))});
  p.gate_w = detail::uniform_leaf<T>({model_dim, inner_dim}, rng, din);
  p.gate_b = Tensor<T>::zeros({inner_dim});
  p.out_w = detail::uniform_leaf<T>({inner_dim, model_dim}, rng, dinner);
  p.out_b = Tensor<T>::zeros({model_dim});
  return p;
}

// tokens [K, model_dim] -> [K, model_dim], residual included. The scan input
// u is projected up, optionally causally convolved + SiLU, and drives the
// input-dependent (selective) delta, B and C.
template <typename T>
Tensor<T> mamba_block(const MambaBlockParams<T>& p, const Tensor<T>& tokens) {
  require(tokens.shape().size() == 2 && tokens.shape()[1] == p.model_dim,
          "mamba_block: tokens " + shape_str(tokens.shape()) +
              " do not match model_dim " + std::to_string(p.model_dim));
  require(tokens.shape()[0] > 0, "mamba_block: empty sequence");
  auto u = detail::linear(tokens, p.in_w, p.in_b);
  if (p.use_conv) u = silu(causal_conv1d(u, p.conv_w, p.conv_b));
  auto delta = softplus(detail::linear(u, p.delta_w, p.delta_b));  // [K,1]
  auto b = matmul(u, p.b_w);
  auto c = matmul(u, p.c_w);
  auto a = neg(exp(p.a_log));
  auto y = selective_scan(a, delta, b, c, u);
  auto gate = silu(detail::linear(tokens, p.gate_w, p.gate_b));
  auto out = detail::linear(mul(y, gate), p.out_w, p.out_b);
  return add(tokens, out);
}

}  // namespace ssmim
