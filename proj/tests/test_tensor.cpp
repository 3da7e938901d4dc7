// Autodiff substrate: forward fixtures, gradient oracle sweeps, round-trips,
// accumulation semantics, and the structured error paths.

#include "helpers.hpp"

#include "ssmim/tensor.hpp"

using namespace ssmim;
using testutil::fd_max_rel_err;
using testutil::random_tensor;
using testutil::weighted_sum;

namespace {
constexpr double kOpTol = 1e-6;
}

TEST_CASE("elementwise forward values") {
  auto a = Tensor<double>::from_vector({3}, {1, 2, 3});
  auto b = Tensor<double>::from_vector({3}, {10, 20, 30});
  CHECK(add(a, b).data() == std::vector<double>{11, 22, 33});
  CHECK(sub(b, a).data() == std::vector<double>{9, 18, 27});
  CHECK(mul(a, b).data() == std::vector<double>{10, 40, 90});
  CHECK(div(b, a).data() == std::vector<double>{10, 10, 10});
  CHECK(mul(a, 2.0).data() == std::vector<double>{2, 4, 6});
  CHECK(add(a, -1.0).data() == std::vector<double>{0, 1, 2});
}

TEST_CASE("scalar broadcast is the only implicit broadcast") {
  auto a = Tensor<double>::from_vector({2, 2}, {1, 2, 3, 4});
  auto s = Tensor<double>::scalar(10.0);
  CHECK(add(a, s).data() == std::vector<double>{11, 12, 13, 14});
  CHECK(add(s, a).data() == std::vector<double>{11, 12, 13, 14});
  auto bad = Tensor<double>::from_vector({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_WITH(add(a, bad),
                    Catch::Matchers::ContainsSubstring("add") &&
                        Catch::Matchers::ContainsSubstring("[2,2]") &&
                        Catch::Matchers::ContainsSubstring("[3,2]"));
  auto c = Tensor<double>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_WITH(mul(c, permute(c, {1, 0})),
                    Catch::Matchers::ContainsSubstring("mul") &&
                        Catch::Matchers::ContainsSubstring("[2,3]") &&
                        Catch::Matchers::ContainsSubstring("[3,2]"));
}

TEST_CASE("hand-checked gradient: d/dx sum(x*x) = 2x") {
  auto x = Tensor<double>::from_vector({3}, {1, 2, 3}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward accumulates until zero_grad") {
  auto x = Tensor<double>::from_vector({2}, {1, 4}, true);
  auto run = [&] { sum(mul(x, x)).backward(); };
  run();
  CHECK(x.grad() == std::vector<double>{2, 8});
  run();  // second call adds on top
  CHECK(x.grad() == std::vector<double>{4, 16});
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0, 0});
  run();
  CHECK(x.grad() == std::vector<double>{2, 8});
}

TEST_CASE("shared subexpressions follow the sum rule") {
  Rng rng(7);
  auto x = random_tensor({4}, rng);
  // y appears twice; its grad contributions must add.
  double err = fd_max_rel_err(
      [&] {
        auto y = silu(x);
        return sum(add(mul(y, y), y));
      },
      {x});
  CHECK(err < kOpTol);
}

TEST_CASE("requires_grad infects results and tape stays empty otherwise") {
  auto a = Tensor<double>::from_vector({2}, {1, 2});
  auto b = Tensor<double>::from_vector({2}, {3, 4});
  auto c = mul(a, b);
  CHECK_FALSE(c.requires_grad());
  auto d = Tensor<double>::from_vector({2}, {3, 4}, true);
  CHECK(mul(a, d).requires_grad());
}

TEST_CASE("backward demands a scalar") {
  auto x = Tensor<double>::from_vector({2}, {1, 2}, true);
  CHECK_THROWS_WITH(mul(x, x).backward(),
                    Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("grad access before any backward is an error") {
  auto x = Tensor<double>::from_vector({2}, {1, 2}, true);
  CHECK_FALSE(x.has_grad());
  CHECK_THROWS_AS(x.grad(), Error);
}

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({2, 3}, rng, 0.5, 2.0);  // away from 0 for div
  auto s = random_tensor({}, rng, 0.5, 1.5);

  CHECK(fd_max_rel_err([&] { return weighted_sum(add(a, b), 1); }, {a, b}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(sub(a, b), 2); }, {a, b}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(mul(a, b), 3); }, {a, b}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(div(a, b), 4); }, {a, b}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(mul(a, s), 5); }, {a, s}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(add(s, b), 6); }, {s, b}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(div(a, s), 7); }, {a, s}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(div(s, b), 8); }, {s, b}) < kOpTol);
}

TEST_CASE("unary ops match finite differences") {
  Rng rng(13);
  auto a = random_tensor({3, 3}, rng, -2.0, 2.0);
  CHECK(fd_max_rel_err([&] { return weighted_sum(exp(a), 1); }, {a}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(sigmoid(a), 2); }, {a}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(softplus(a), 3); }, {a}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(silu(a), 4); }, {a}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(neg(a), 5); }, {a}) < kOpTol);
}

TEST_CASE("softplus and sigmoid are stable in the tails") {
  auto big = Tensor<double>::from_vector({2}, {800.0, -800.0});
  auto sp = softplus(big);
  CHECK(sp[0] == 800.0);
  CHECK(sp[1] == 0.0);  // underflow, not NaN
  auto sg = sigmoid(big);
  CHECK(sg[0] == 1.0);
  CHECK(sg[1] >= 0.0);
  CHECK(std::isfinite(sg[1]));
}

TEST_CASE("matmul forward fixture and gradients") {
  auto a = Tensor<double>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto b = Tensor<double>::from_vector({3, 2}, {7, 8, 9, 10, 11, 12}, true);
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.data() == std::vector<double>{58, 64, 139, 154});
  CHECK(fd_max_rel_err([&] { return weighted_sum(matmul(a, b), 9); }, {a, b}) <
        kOpTol);
  CHECK_THROWS_WITH(matmul(a, a), Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("shape ops round-trip exactly and differentiate") {
  Rng rng(17);
  auto a = random_tensor({2, 3, 4}, rng);

  auto r = reshape(a, {4, 6});
  CHECK(reshape(r, {2, 3, 4}).data() == a.data());

  std::vector<size_t> axes{2, 0, 1};
  auto p = permute(a, axes);
  CHECK(p.shape() == Shape{4, 2, 3});
  // inverse permutation restores the layout bit-exactly
  CHECK(permute(p, {1, 2, 0}).data() == a.data());

  CHECK(fd_max_rel_err([&] { return weighted_sum(reshape(a, {6, 4}), 1); }, {a}) <
        kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(permute(a, axes), 2); }, {a}) <
        kOpTol);

  auto lo = slice(a, 2, 1, 2);
  CHECK(lo.shape() == Shape{2, 3, 2});
  CHECK(fd_max_rel_err([&] { return weighted_sum(slice(a, 2, 1, 2), 3); }, {a}) <
        kOpTol);
  CHECK_THROWS_WITH(slice(a, 2, 3, 4),
                    Catch::Matchers::ContainsSubstring("slice"));

  auto b = random_tensor({2, 1, 4}, rng);
  auto cat = concat<double>({a, b}, 1);
  CHECK(cat.shape() == Shape{2, 4, 4});
  CHECK(slice(cat, 1, 0, 3).data() == a.data());
  CHECK(slice(cat, 1, 3, 1).data() == b.data());
  CHECK(fd_max_rel_err([&] { return weighted_sum(concat<double>({a, b}, 1), 4); },
                       {a, b}) < kOpTol);
  auto bad = random_tensor({2, 1, 5}, rng);
  CHECK_THROWS_WITH(concat<double>({a, bad}, 1),
                    Catch::Matchers::ContainsSubstring("concat"));
}

TEST_CASE("gather fixture: rows [2,0] of a flat vector") {
  auto v = Tensor<double>::from_vector({3}, {10, 20, 30});
  auto g = gather_rows(v, {2, 0});
  CHECK(g.data() == std::vector<double>{30, 10});
}

TEST_CASE("gather / scatter gradients and errors") {
  Rng rng(19);
  auto a = random_tensor({5, 3}, rng);
  std::vector<int64_t> idx{4, 0, 2, 0};  // duplicate reads are fine
  CHECK(fd_max_rel_err([&] { return weighted_sum(gather_rows(a, idx), 1); },
                       {a}) < kOpTol);
  CHECK_THROWS_WITH(gather_rows(a, {5}),
                    Catch::Matchers::ContainsSubstring("out of range"));

  auto rowsrc = random_tensor({3, 2}, rng);
  auto fill = random_tensor({2}, rng);
  std::vector<int64_t> pos{1, 4, 2};
  auto sc = scatter_rows(rowsrc, pos, 6, fill);
  CHECK(sc.shape() == Shape{6, 2});
  // unfilled rows carry the fill vector
  CHECK(sc[0] == fill[0]);
  CHECK(sc[1] == fill[1]);
  CHECK(sc[2 * 1 + 0] == rowsrc[0]);
  CHECK(fd_max_rel_err(
            [&] { return weighted_sum(scatter_rows(rowsrc, pos, 6, fill), 2); },
            {rowsrc, fill}) < kOpTol);
  CHECK(fd_max_rel_err(
            [&] { return weighted_sum(scatter_rows(rowsrc, pos, 6), 3); },
            {rowsrc}) < kOpTol);
  CHECK_THROWS_WITH(scatter_rows(rowsrc, {1, 1, 2}, 6),
                    Catch::Matchers::ContainsSubstring("duplicate"));
  CHECK_THROWS_WITH(scatter_rows(rowsrc, {1, 2, 6}, 6),
                    Catch::Matchers::ContainsSubstring("out of range"));

  // gather(scatter) round-trip
  auto back = gather_rows(sc, pos);
  CHECK(back.data() == rowsrc.data());
}

TEST_CASE("reductions and expansion match finite differences") {
  Rng rng(23);
  auto a = random_tensor({3, 4, 2}, rng);
  CHECK(fd_max_rel_err([&] { return sum(a); }, {a}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return mean(a); }, {a}) < kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(sum_axis(a, 1), 1); }, {a}) <
        kOpTol);
  CHECK(fd_max_rel_err([&] { return weighted_sum(expand_axis(a, 1, 5), 2); },
                       {a}) < kOpTol);
  auto m = mean(a);
  double s = 0;
  for (double v : a.data()) s += v;
  CHECK(testutil::near(m.item(), s / a.numel()));
  // expand then sum over the same axis is identity * n
  auto e = expand_axis(a, 0, 3);
  CHECK(e.shape() == Shape{3, 3, 4, 2});
  auto back = sum_axis(e, 0);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(testutil::near(back[i], 3.0 * a[i]));
}

TEST_CASE("conv3d fixtures and gradients") {
  // 1x1x1 kernel is a per-voxel linear map
  auto x = Tensor<double>::from_vector({1, 1, 1, 2}, {3, 5}, true);
  auto w = Tensor<double>::from_vector({1, 1, 1, 1, 1}, {2}, true);
  auto b = Tensor<double>::from_vector({1}, {1}, true);
  auto y = conv3d(x, w, b, 0);
  CHECK(y.data() == std::vector<double>{7, 11});

  Rng rng(29);
  auto xi = random_tensor({2, 4, 4, 4}, rng);
  auto wk = random_tensor({3, 2, 3, 3, 3}, rng, -0.5, 0.5);
  auto bk = random_tensor({3}, rng);
  SECTION("same padding") {
    auto out = conv3d(xi, wk, bk, 1);
    CHECK(out.shape() == Shape{3, 4, 4, 4});
    CHECK(fd_max_rel_err([&] { return weighted_sum(conv3d(xi, wk, bk, 1), 1); },
                         {xi, wk, bk}) < kOpTol);
  }
  SECTION("valid padding") {
    auto out = conv3d(xi, wk, bk, 0);
    CHECK(out.shape() == Shape{3, 2, 2, 2});
    CHECK(fd_max_rel_err([&] { return weighted_sum(conv3d(xi, wk, bk, 0), 2); },
                         {xi, wk, bk}) < kOpTol);
  }
  SECTION("no bias") {
    CHECK(fd_max_rel_err(
              [&] { return weighted_sum(conv3d(xi, wk, Tensor<double>(), 1), 3); },
              {xi, wk}) < kOpTol);
  }
  SECTION("shape errors name the op") {
    auto wbad = random_tensor({3, 1, 3, 3, 3}, rng);
    CHECK_THROWS_WITH(conv3d(xi, wbad, bk, 1),
                      Catch::Matchers::ContainsSubstring("conv3d"));
    auto bbad = random_tensor({2}, rng);
    CHECK_THROWS_WITH(conv3d(xi, wk, bbad, 1),
                      Catch::Matchers::ContainsSubstring("conv3d"));
  }
}

TEST_CASE("conv3d zero padding contributes zeros at the border") {
  // all-ones input, all-ones 3^3 kernel: corner sees 8 cells, center 27
  auto x = Tensor<double>::full({1, 3, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3, 3}, 1.0);
  auto y = conv3d(x, w, Tensor<double>(), 1);
  CHECK(y[0] == 8.0);
  CHECK(y[13] == 27.0);
}

TEST_CASE("maxpool and upsample") {
  Rng rng(31);
  auto x = random_tensor({2, 4, 4, 4}, rng);
  auto p = maxpool3d_2x(x);
  CHECK(p.shape() == Shape{2, 2, 2, 2});
  // forward: each output is the max of its 2^3 block
  for (int64_t c = 0; c < 2; ++c) {
    double best = -1e30;
    for (int64_t z = 0; z < 2; ++z)
      for (int64_t y = 0; y < 2; ++y)
        for (int64_t xx = 0; xx < 2; ++xx)
          best = std::max(best, x[((c * 4 + z) * 4 + y) * 4 + xx]);
    CHECK(p[c * 8] == best);
  }
  CHECK(fd_max_rel_err([&] { return weighted_sum(maxpool3d_2x(x), 1); }, {x}) <
        kOpTol);
  auto odd = random_tensor({1, 3, 4, 4}, rng);
  CHECK_THROWS_WITH(maxpool3d_2x(odd),
                    Catch::Matchers::ContainsSubstring("even"));

  auto u = upsample3d_2x(p);
  CHECK(u.shape() == Shape{2, 4, 4, 4});
  CHECK(u[0] == p[0]);
  CHECK(u[1] == p[0]);
  CHECK(fd_max_rel_err([&] { return weighted_sum(upsample3d_2x(p), 2); }, {p}) <
        kOpTol);
  // nearest upsample then pool is the identity (max over equal values)
  auto rt = maxpool3d_2x(upsample3d_2x(p));
  CHECK(rt.data() == p.data());
}

TEST_CASE("causal_conv1d is causal and differentiable") {
  Rng rng(37);
  auto x = random_tensor({6, 3}, rng);
  auto w = random_tensor({3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto y = causal_conv1d(x, w, b);
  CHECK(y.shape() == Shape{6, 3});
  // token 0 sees only itself: y[0,c] = w[2,c] x[0,c] + b[c]
  for (int64_t c = 0; c < 3; ++c)
    CHECK(testutil::near(y[c], w[2 * 3 + c] * x[c] + b[c]));
  CHECK(fd_max_rel_err([&] { return weighted_sum(causal_conv1d(x, w, b), 1); },
                       {x, w, b}) < kOpTol);
  // perturbing a later token never changes earlier outputs
  auto x2v = x.data();
  x2v[5 * 3 + 1] += 100.0;
  auto x2 = Tensor<double>::from_vector({6, 3}, x2v);
  auto y2 = causal_conv1d(x2, w, b);
  for (int64_t i = 0; i < 5 * 3; ++i) CHECK(y2[i] == y[i]);
}

TEST_CASE("causal_conv_full fixture and gradients") {
  auto x = Tensor<double>::from_vector({3}, {1, 2, 3}, true);
  auto k = Tensor<double>::from_vector({3}, {4, 5, 6}, true);
  auto y = causal_conv_full(x, k);
  // y0 = 4*1; y1 = 4*2+5*1; y2 = 4*3+5*2+6*1
  CHECK(y.data() == std::vector<double>{4, 13, 28});
  CHECK(fd_max_rel_err([&] { return weighted_sum(causal_conv_full(x, k), 1); },
                       {x, k}) < kOpTol);
}

TEST_CASE("mask_values zeroes masked slots in forward and backward") {
  Rng rng(41);
  auto x = random_tensor({2, 2, 2, 2}, rng);
  std::vector<uint8_t> mask(8, 0);
  mask[0] = mask[3] = mask[5] = 1;
  auto y = mask_values(x, mask);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t s = 0; s < 8; ++s)
      CHECK(y[c * 8 + s] == (mask[size_t(s)] ? x[c * 8 + s] : 0.0));
  CHECK(fd_max_rel_err([&] { return weighted_sum(mask_values(x, mask), 1); },
                       {x}) < kOpTol);
  // gradient at masked inputs is exactly zero
  x.zero_grad();
  sum(mask_values(x, mask)).backward();
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t s = 0; s < 8; ++s)
      CHECK(x.grad()[size_t(c * 8 + s)] == (mask[size_t(s)] ? 1.0 : 0.0));
  std::vector<uint8_t> bad(5, 1);
  CHECK_THROWS_WITH(mask_values(x, bad),
                    Catch::Matchers::ContainsSubstring("mask_values"));
}

TEST_CASE("layer_norm_channels normalizes each position independently") {
  Rng rng(43);
  auto x = random_tensor({4, 3, 2, 2}, rng, -2.0, 2.0);
  auto y = layer_norm_channels(x);
  const int64_t C = 4, S = 12;
  for (int64_t s = 0; s < S; ++s) {
    double m = 0, v = 0;
    for (int64_t c = 0; c < C; ++c) m += y[c * S + s];
    for (int64_t c = 0; c < C; ++c) v += y[c * S + s] * y[c * S + s];
    CHECK(std::abs(m / C) < 1e-12);
    // output variance is var/(var+eps), so allow the eps-sized shift
    CHECK(std::abs(v / C - 1.0) < 1e-2);
  }
  CHECK(fd_max_rel_err([&] { return weighted_sum(layer_norm_channels(x), 1); },
                       {x}) < 1e-5);
  // all-zero columns stay zero (meaning masked voxels stay masked)
  auto z = Tensor<double>::zeros({4, 1, 1, 1});
  auto zn = layer_norm_channels(z);
  for (int64_t c = 0; c < 4; ++c) CHECK(zn[c] == 0.0);
}

TEST_CASE("float instantiation works end to end") {
  auto x = Tensor<float>::from_vector({2, 2}, {1, 2, 3, 4}, true);
  auto y = sum(mul(silu(x), x));
  y.backward();
  CHECK(x.grad().size() == 4);
  CHECK(std::isfinite(y.item()));
}

TEST_CASE("item on non-scalar is an error") {
  auto x = Tensor<double>::from_vector({2}, {1, 2});
  CHECK_THROWS_AS(x.item(), Error);
}
