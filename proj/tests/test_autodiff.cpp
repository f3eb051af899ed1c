#include <cmath>
#include <random>

#include "doctest.h"
#include "preedit/autodiff.hpp"

using namespace preedit;

namespace {

Tensor rnd(std::vector<int64_t> shape, std::mt19937_64& rng, double lo = -1,
           double hi = 1) {
  return random_uniform(std::move(shape), lo, hi, rng);
}

}  // namespace

TEST_CASE("elementwise forward basics") {
  Graph g;
  Var a = g.leaf(Tensor({2}, {1, 2}));
  Var b = g.leaf(Tensor({2}, {3, 4}));
  Var c = add(a, b);
  CHECK(c.value()[0] == 4);
  CHECK(c.value()[1] == 6);
  CHECK(tanh_(g.leaf(Tensor::scalar(0.0))).scalar() == 0.0);
}

TEST_CASE("conv2d against a direct double-loop oracle") {
  Graph g;
  Var x = g.leaf(Tensor::full({1, 1, 5, 5}, 1.0));
  Var w = g.leaf(Tensor::full({1, 1, 3, 3}, 1.0));
  kernels::Conv2dSpec spec{1, 1, kernels::PadMode::kSymmetric};
  Var y = conv2d(x, w, {}, spec);
  // direct double-loop on the mirrored plane
  auto mirror = [](int64_t i, int64_t n) {
    if (i < 0) return -1 - i;
    if (i >= n) return 2 * n - 1 - i;
    return i;
  };
  for (int64_t oy = 0; oy < 5; ++oy)
    for (int64_t ox = 0; ox < 5; ++ox) {
      double acc = 0;
      for (int ky = -1; ky <= 1; ++ky)
        for (int kx = -1; kx <= 1; ++kx) {
          (void)mirror(oy + ky, 5);
          acc += 1.0;  // all-ones input, mirrored values are still 1
        }
      CHECK(y.value().at(0, 0, oy, ox) == acc);
    }
  CHECK(y.value().at(0, 0, 2, 2) == 9.0);
}

TEST_CASE("backward on simple analytic cases") {
  {
    Graph g;
    Var x = g.leaf(Tensor({3}, {1, 2, 3}));
    Var loss = sum(square(x));
    g.backward(loss);
    CHECK(x.grad()[0] == 2);
    CHECK(x.grad()[1] == 4);
    CHECK(x.grad()[2] == 6);
  }
  {
    // constant loss: gradients stay zero
    Graph g;
    Var x = g.leaf(Tensor({3}, {1, 2, 3}));
    Var c = g.leaf(Tensor::scalar(5.0));
    g.backward(c);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 0.0);
  }
  {
    // mean(tanh(Wx)) vs central differences
    std::mt19937_64 rng(42);
    Tensor w0 = rnd({3, 3}, rng);
    auto f = [&](Graph& g, Var x) { return mean(tanh_(matmul(g.leaf(w0), x))); };
    CHECK(finite_diff_check(f, rnd({3, 1}, rng), 1e-4) < 1e-4);
  }
}

TEST_CASE("non-scalar loss is rejected") {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("finite_diff_check on named cases") {
  std::mt19937_64 rng(1);
  auto cube_sum = [](Graph& g, Var x) { return sum(cube(x)); };
  CHECK(finite_diff_check(cube_sum, Tensor({2}, {1, 1}), 1e-4) < 1e-5);
  auto lin = [](Graph& g, Var x) { return sum(x); };
  CHECK(finite_diff_check(lin, rnd({4}, rng), 1e-4) < 1e-10);
  // soft-round composite at points away from half-integers
  auto soft = [](Graph& g, Var x) {
    Var r = floor_round(x);
    return sum(add(r, cube(sub(x, r))));
  };
  CHECK(finite_diff_check(soft, Tensor({3}, {0.4, -1.3, 2.2}), 1e-4) < 1e-4);
}

// one scalar probe per primitive, random generic points
TEST_CASE("every primitive passes a finite-difference check") {
  std::mt19937_64 rng(2024);
  auto weighted = [](Graph& g, Var y, const Tensor& w) {
    return sum(mul(y, g.leaf(w)));
  };

  for (int rep = 0; rep < 4; ++rep) {
    {  // add/sub/mul with broadcasting
      Tensor b = rnd({1, 4}, rng), w = rnd({3, 4}, rng);
      auto f = [&](Graph& g, Var x) {
        Var t = add(x, g.leaf(b));
        t = mul(t, g.leaf(b));
        t = sub(t, g.leaf(b));
        return weighted(g, t, w);
      };
      CHECK(finite_diff_check(f, rnd({3, 4}, rng), 1e-5) < 1e-4);
    }
    {  // matmul batched both ways + transpose
      Tensor a = rnd({2, 3, 4}, rng), w = rnd({2, 3, 3}, rng);
      auto f = [&](Graph& g, Var x) {
        Var m = matmul(g.leaf(a), transpose(x));  // (2,3,4)x(4,3)
        return weighted(g, m, w);
      };
      CHECK(finite_diff_check(f, rnd({3, 4}, rng), 1e-5) < 1e-4);
    }
    {  // conv2d, symmetric pad, with bias
      Tensor w0 = rnd({2, 2, 3, 3}, rng), b0 = rnd({2}, rng);
      Tensor ww = rnd({1, 2, 6, 5}, rng);
      kernels::Conv2dSpec spec{1, 1, kernels::PadMode::kSymmetric};
      auto f = [&](Graph& g, Var x) {
        return weighted(g, conv2d(x, g.leaf(w0), g.leaf(b0), spec), ww);
      };
      CHECK(finite_diff_check(f, rnd({1, 2, 6, 5}, rng), 1e-5) < 1e-4);
      // and gradients w.r.t. the kernel, strided zero-pad variant
      kernels::Conv2dSpec spec2{2, 1, kernels::PadMode::kZero};
      Tensor x0 = rnd({1, 2, 6, 6}, rng);
      Tensor ww2 = rnd({1, 2, 3, 3}, rng);
      auto fw = [&](Graph& g, Var w) {
        return weighted(g, conv2d(g.leaf(x0), w, {}, spec2), ww2);
      };
      CHECK(finite_diff_check(fw, rnd({2, 2, 3, 3}, rng), 1e-5) < 1e-4);
    }
    {  // reshape / slice / concat
      Tensor w = rnd({2, 6}, rng);
      auto f = [&](Graph& g, Var x) {
        Var r = reshape(x, {3, 4});
        Var s1 = slice(r, 0, 0, 2);
        Var s2 = slice(r, 0, 1, 3);
        Var c = concat(std::vector<Var>{s1, s2}, 1);  // (2,8)
        return weighted(g, slice(c, 1, 1, 7), w);
      };
      CHECK(finite_diff_check(f, rnd({12}, rng), 1e-5) < 1e-4);
    }
    {  // avg-pool
      Tensor w = rnd({2, 2, 3}, rng);
      auto f = [&](Graph& g, Var x) { return weighted(g, avg_pool2(x), w); };
      CHECK(finite_diff_check(f, rnd({2, 4, 6}, rng), 1e-5) < 1e-4);
    }
    {  // bilinear sampling: image and coordinate gradients
      // fractional interior coordinates: central differences only match the
      // one-sided derivative away from integer sample positions
      Tensor coords({2, 3, 3});
      for (int64_t i = 0; i < 9; ++i) {
        coords[i] = 0.27 + 0.43 * double(i % 7);       // y in (0,2.9)
        coords[9 + i] = 0.31 + 0.37 * double(i % 6);   // x in (0,2.2)
      }
      Tensor img0 = rnd({2, 5, 4}, rng);
      Tensor w = rnd({2, 3, 3}, rng);
      auto fi = [&](Graph& g, Var x) {
        return weighted(g, bilinear_sample(x, g.leaf(coords)), w);
      };
      CHECK(finite_diff_check(fi, img0, 1e-5) < 1e-4);
      auto fc = [&](Graph& g, Var c) {
        return weighted(g, bilinear_sample(g.leaf(img0), c), w);
      };
      CHECK(finite_diff_check(fc, coords, 1e-5) < 1e-4);
    }
    {  // pointwise nonlinearities
      Tensor w = rnd({6}, rng);
      auto f = [&](Graph& g, Var x) {
        Var t = tanh_(x);
        t = add(t, sigmoid(x));
        t = add(t, leaky_relu(x, 0.2));
        t = add(t, square(x));
        t = add(t, cube(x));
        return weighted(g, t, w);
      };
      // keep clear of the leaky-relu kink at 0
      Tensor x0({6}, {0.7, -0.9, 1.3, -1.7, 0.4, -0.6});
      CHECK(finite_diff_check(f, x0, 1e-5) < 1e-4);
      auto fa = [&](Graph& g, Var x) { return weighted(g, abs_(x), w); };
      CHECK(finite_diff_check(fa, x0, 1e-5) < 1e-4);
      auto fl = [&](Graph& g, Var x) { return weighted(g, log2_(x), w); };
      CHECK(finite_diff_check(fl, rnd({6}, rng, 0.5, 3.0), 1e-5) < 1e-4);
    }
    {  // floor-round: piecewise constant, zero analytic gradient
      Graph g;
      Var x = g.leaf(Tensor({3}, {0.4, 1.6, -2.2}));
      Var y = sum(floor_round(x));
      g.backward(y);
      for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 0.0);
      CHECK(floor_round(g.leaf(Tensor({4}, {0.5, -0.5, 1.5, -2.5}))).value()[0] == 1.0);
    }
    {  // reductions with axes
      Tensor w = rnd({3}, rng);
      auto f = [&](Graph& g, Var x) {
        return sum(mul(mean(x, {1, 2}), g.leaf(w)));
      };
      CHECK(finite_diff_check(f, rnd({3, 4, 5}, rng), 1e-5) < 1e-4);
    }
    {  // batch-norm, both modes
      Tensor gamma = rnd({3}, rng, 0.5, 1.5), beta = rnd({3}, rng);
      Tensor w = rnd({2, 3, 4, 4}, rng);
      auto ft = [&](Graph& g, Var x) {
        return weighted(g, batch_norm(x, g.leaf(gamma), g.leaf(beta), true), w);
      };
      CHECK(finite_diff_check(ft, rnd({2, 3, 4, 4}, rng), 1e-5) < 1e-4);
      Tensor fm = rnd({3}, rng), fv = rnd({3}, rng, 0.5, 2.0);
      auto fe = [&](Graph& g, Var x) {
        return weighted(g, batch_norm(x, g.leaf(gamma), g.leaf(beta), false,
                                      1e-5, g.leaf(fm), g.leaf(fv)), w);
      };
      CHECK(finite_diff_check(fe, rnd({2, 3, 4, 4}, rng), 1e-5) < 1e-4);
    }
    {  // structured movement ops
      Tensor w = rnd({6, 8, 8}, rng);
      auto f = [&](Graph& g, Var x) {
        return weighted(g, block_split(x), w);
      };
      CHECK(finite_diff_check(f, rnd({16, 24}, rng), 1e-5) < 1e-4);
      Tensor wb = rnd({16, 24}, rng);
      auto fm2 = [&](Graph& g, Var x) {
        return weighted(g, block_merge(x, 16, 24), wb);
      };
      CHECK(finite_diff_check(fm2, rnd({6, 8, 8}, rng), 1e-5) < 1e-4);
      Tensor wg = rnd({6, 1, 16, 16}, rng);
      auto fg = [&](Graph& g, Var x) {
        return weighted(g, window_gather(x, 16, 8, 4), wg);
      };
      CHECK(finite_diff_check(fg, rnd({1, 16, 24}, rng), 1e-5) < 1e-4);
      Tensor ws = rnd({6, 1, 16, 16}, rng);
      Tensor wo = rnd({1, 16, 24}, rng);
      auto fs = [&](Graph& g, Var x) {
        return weighted(g, window_scatter_mean(x, 16, 24, 16, 8, 4), wo);
      };
      CHECK(finite_diff_check(fs, ws, 1e-5) < 1e-4);
    }
    {  // clamp-min composite used before log2; wider step because the
       // clamped side has an exactly-zero gradient and the 1e-8 floor in
       // the relative-error formula amplifies cancellation noise
      Tensor w = rnd({5}, rng);
      auto f = [&](Graph& g, Var x) { return weighted(g, clamp_min(x, 0.3), w); };
      Tensor x0({5}, {0.5, 0.1, 0.9, 0.2, 1.4});  // both sides of the floor
      CHECK(finite_diff_check(f, x0, 1e-4) < 1e-4);
    }
  }
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(9);
  Tensor x0 = rnd({5}, rng);
  const double a = 1.7, b = -0.3;

  auto grad_of = [&](double ca, double cb) {
    Graph g;
    Var x = g.leaf(x0);
    Var l1 = sum(square(x));
    Var l2 = sum(mul(tanh_(x), x));
    Var loss = add(mul_scalar(l1, ca), mul_scalar(l2, cb));
    g.backward(loss);
    return x.grad();
  };
  Tensor g_ab = grad_of(a, b);
  Tensor g_a = grad_of(a, 0.0);
  Tensor g_b = grad_of(0.0, b);
  for (int64_t i = 0; i < 5; ++i)
    CHECK(std::abs(g_ab[i] - (g_a[i] + g_b[i])) < 1e-12);
}

TEST_CASE("replaying a record yields bit-identical gradients") {
  std::mt19937_64 rng(21);
  Graph g;
  Var x = g.leaf(rnd({4, 4}, rng));
  Var w = g.leaf(rnd({4, 4}, rng));
  Var loss = mean(tanh_(matmul(x, w)));
  g.backward(loss);
  Tensor first = x.grad();
  g.zero_grads();
  g.backward(loss);
  for (int64_t i = 0; i < first.numel(); ++i) CHECK(x.grad()[i] == first[i]);
}

TEST_CASE("gradients are zero before backward; unreachable stay zero") {
  Graph g;
  Var x = g.leaf(Tensor({2}, {1, 2}));
  Var y = g.leaf(Tensor({2}, {5, 5}));
  Var loss = sum(square(x));
  CHECK(x.grad()[0] == 0.0);
  g.backward(loss);
  CHECK(x.grad()[0] != 0.0);
  CHECK(y.grad()[0] == 0.0);
  CHECK(y.grad()[1] == 0.0);
}

TEST_CASE("primitive_forward dispatch and diagnostics") {
  Graph g;
  Var a = g.leaf(Tensor({2}, {1, 2}));
  Var b = g.leaf(Tensor({2}, {3, 4}));
  Var c = primitive_forward(Op::kAdd, std::vector<Var>{a, b}, {});
  CHECK(c.value()[1] == 6);

  Var bad = g.leaf(Tensor({3}, {1, 2, 3}));
  try {
    primitive_forward(Op::kAdd, std::vector<Var>{a, bad}, {});
    FAIL("expected a shape diagnostic");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
    CHECK(msg.find("[3]") != std::string::npos);
  }
  // structured ops are not part of the primitive vocabulary
  CHECK_THROWS_AS(primitive_forward(Op::kWindowGather, std::vector<Var>{a}, {}),
                  std::invalid_argument);
}
