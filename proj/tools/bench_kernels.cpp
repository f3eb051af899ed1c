// Compares the OpenMP kernels against the naive serial references on
// training-shaped workloads.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "preedit/kernels.hpp"

using namespace preedit;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
  fn();  // warm up
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void row(const char* name, double fast_ms, double ref_ms) {
  std::printf("%-28s %10.3f ms %12.3f ms %8.1fx\n", name, fast_ms, ref_ms,
              ref_ms / fast_ms);
}

}  // namespace

int main() {
  std::mt19937_64 rng(1);
  std::printf("%-28s %13s %15s %9s\n", "kernel", "parallel", "serial ref", "speedup");

  {
    Tensor x = random_uniform({1, 64, 96, 96}, -1, 1, rng);
    Tensor w = random_uniform({64, 64, 3, 3}, -0.1, 0.1, rng);
    Tensor b = random_uniform({64}, -0.1, 0.1, rng);
    kernels::Conv2dSpec spec{1, 1, kernels::PadMode::kSymmetric};
    Tensor out;
    row("conv2d 64x64x3x3 @96x96",
        time_ms(5, [&] { kernels::conv2d_forward(x, w, b, out, spec); }),
        time_ms(1, [&] { kernels::serial::conv2d_forward(x, w, b, out, spec); }));
  }
  {
    Tensor a = random_uniform({1536, 8, 8}, -1, 1, rng);
    Tensor b = random_uniform({8, 8}, -1, 1, rng);
    Tensor out;
    row("matmul (1536,8,8)x(8,8)",
        time_ms(50, [&] { kernels::matmul_forward(a, b, out); }),
        time_ms(50, [&] { kernels::serial::matmul_forward(a, b, out); }));
  }
  {
    Tensor img = random_uniform({3, 384, 256}, 0, 1, rng);
    Tensor coords({2, 384, 256});
    for (int64_t i = 0; i < 384 * 256; ++i) {
      coords[i] = double(i / 256) + 0.25;
      coords[384 * 256 + i] = double(i % 256) + 0.5;
    }
    Tensor out;
    row("bilinear 3x384x256",
        time_ms(20, [&] { kernels::bilinear_forward(img, coords, out); }),
        time_ms(20, [&] { kernels::serial::bilinear_forward(img, coords, out); }));
  }
  {
    Tensor x = random_uniform({5, 96, 96}, 0, 1, rng);
    Tensor blocks, out;
    kernels::window_gather_forward(x, 32, 8, 12, blocks);
    row("window gather 5x96x96",
        time_ms(20, [&] { kernels::window_gather_forward(x, 32, 8, 12, out); }),
        time_ms(20, [&] { kernels::serial::window_gather_forward(x, 32, 8, 12, out); }));
    Tensor grids = random_uniform({144, 2, 32, 32}, 0, 96, rng);
    row("window scatter-mean",
        time_ms(20, [&] {
          kernels::window_scatter_mean_forward(grids, 96, 96, 32, 8, 12, out);
        }),
        time_ms(20, [&] {
          kernels::serial::window_scatter_mean_forward(grids, 96, 96, 32, 8, 12, out);
        }));
  }
  return 0;
}
