#include <random>

#include "doctest.h"
#include "preedit/kernels.hpp"

using namespace preedit;
using kernels::Conv2dSpec;
using kernels::PadMode;

namespace {

Tensor rnd(std::vector<int64_t> shape, std::mt19937_64& rng) {
  return random_uniform(std::move(shape), -1.0, 1.0, rng);
}

double max_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d matches the naive reference") {
  std::mt19937_64 rng(7);
  struct Case {
    int stride, pad;
    PadMode mode;
  };
  for (const auto& [stride, pad, mode] :
       {Case{1, 1, PadMode::kSymmetric}, Case{1, 1, PadMode::kZero},
        Case{2, 1, PadMode::kSymmetric}, Case{1, 0, PadMode::kZero}}) {
    Conv2dSpec spec{stride, pad, mode};
    Tensor x = rnd({2, 3, 12, 10}, rng);
    Tensor w = rnd({4, 3, 3, 3}, rng);
    Tensor b = rnd({4}, rng);
    Tensor fast, ref;
    kernels::conv2d_forward(x, w, b, fast, spec);
    kernels::serial::conv2d_forward(x, w, b, ref, spec);
    CHECK(max_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("conv2d backward matches finite differences of the reference") {
  std::mt19937_64 rng(11);
  Conv2dSpec spec{1, 1, PadMode::kSymmetric};
  Tensor x = rnd({1, 2, 6, 5}, rng);
  Tensor w = rnd({3, 2, 3, 3}, rng);
  Tensor b = rnd({3}, rng);
  Tensor out;
  kernels::conv2d_forward(x, w, b, out, spec);
  // loss = sum(out * c)
  Tensor c = rnd(out.shape(), rng);
  Tensor gout = c;
  Tensor gx, gw, gb;
  kernels::conv2d_backward(x, w, gout, &gx, &gw, &gb, spec);

  auto loss = [&](const Tensor& xt, const Tensor& wt, const Tensor& bt) {
    Tensor o;
    kernels::serial::conv2d_forward(xt, wt, bt, o, spec);
    double s = 0;
    for (int64_t i = 0; i < o.numel(); ++i) s += o[i] * c[i];
    return s;
  };
  const double h = 1e-6;
  auto check_grad = [&](Tensor& t, const Tensor& g, int64_t i) {
    const double v = t[i];
    t[i] = v + h;
    const double fp = loss(x, w, b);
    t[i] = v - h;
    const double fm = loss(x, w, b);
    t[i] = v;
    CHECK(g[i] == doctest::Approx((fp - fm) / (2 * h)).epsilon(1e-5));
  };
  for (int64_t i = 0; i < x.numel(); i += 7) check_grad(x, gx, i);
  for (int64_t i = 0; i < w.numel(); i += 5) check_grad(w, gw, i);
  for (int64_t i = 0; i < b.numel(); ++i) check_grad(b, gb, i);
}

TEST_CASE("matmul variants match the naive reference") {
  std::mt19937_64 rng(3);
  const auto cases = {
      std::pair{std::vector<int64_t>{5, 4}, std::vector<int64_t>{4, 6}},
      std::pair{std::vector<int64_t>{3, 5, 4}, std::vector<int64_t>{4, 6}},
      std::pair{std::vector<int64_t>{5, 4}, std::vector<int64_t>{3, 4, 6}},
      std::pair{std::vector<int64_t>{3, 5, 4}, std::vector<int64_t>{3, 4, 6}},
  };
  for (const auto& [sa, sb] : cases) {
    Tensor a = rnd(sa, rng), b = rnd(sb, rng);
    Tensor fast, ref;
    kernels::matmul_forward(a, b, fast);
    kernels::serial::matmul_forward(a, b, ref);
    CHECK(max_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("avgpool / bilinear / window ops match references") {
  std::mt19937_64 rng(5);
  {
    Tensor x = rnd({3, 8, 6}, rng);
    Tensor fast, ref;
    kernels::avgpool2_forward(x, fast);
    kernels::serial::avgpool2_forward(x, ref);
    CHECK(max_diff(fast, ref) < 1e-13);
  }
  {
    Tensor img = rnd({2, 9, 7}, rng);
    Tensor coords({2, 5, 4});
    std::uniform_real_distribution<double> dy(-1.0, 9.5), dx(-1.0, 7.5);
    for (int64_t i = 0; i < 20; ++i) {
      coords[i] = dy(rng);
      coords[20 + i] = dx(rng);
    }
    Tensor fast, ref;
    kernels::bilinear_forward(img, coords, fast);
    kernels::serial::bilinear_forward(img, coords, ref);
    CHECK(max_diff(fast, ref) < 1e-13);
  }
  {
    Tensor x = rnd({2, 24, 16}, rng);
    Tensor fast, ref;
    kernels::window_gather_forward(x, 32, 8, 12, fast);
    kernels::serial::window_gather_forward(x, 32, 8, 12, ref);
    CHECK(max_diff(fast, ref) < 1e-13);

    Tensor blocks = rnd({(24 / 8) * (16 / 8), 2, 32, 32}, rng);
    kernels::window_scatter_mean_forward(blocks, 24, 16, 32, 8, 12, fast);
    kernels::serial::window_scatter_mean_forward(blocks, 24, 16, 32, 8, 12, ref);
    CHECK(max_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("block split/merge round-trips") {
  std::mt19937_64 rng(13);
  Tensor plane = rnd({16, 24}, rng);
  Tensor blocks, back;
  kernels::block_split(plane, blocks);
  CHECK(blocks.shape() == std::vector<int64_t>{6, 8, 8});
  kernels::block_merge(blocks, 16, 24, back);
  CHECK(max_diff(plane, back) == 0.0);
  // raster order: block 1 starts at column 8
  CHECK(blocks.at(1, 0, 0) == plane.at(0, 8));
}

TEST_CASE("window scatter-mean of identical proposals is a no-op") {
  // every window proposes the same field -> averaging must return it
  std::mt19937_64 rng(17);
  const int64_t h = 24, w = 24;
  Tensor field = rnd({1, h, w}, rng);
  Tensor blocks;
  kernels::window_gather_forward(field, 32, 8, 12, blocks);
  Tensor out;
  kernels::window_scatter_mean_forward(blocks, h, w, 32, 8, 12, out);
  CHECK(max_diff(out, field) < 1e-12);
}
