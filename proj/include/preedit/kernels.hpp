#pragma once

#include "preedit/tensor.hpp"

// Numeric cores shared by the autodiff ops and the baseline codec. The
// default entry points are OpenMP-parallel; kernels::serial holds naive
// direct-definition references used as test oracles and in the benchmark.
//
// Every parallel kernel computes each output element in a fixed serial
// order inside one thread, so results do not depend on the thread count.

namespace preedit::kernels {

enum class PadMode { kZero, kSymmetric };

struct Conv2dSpec {
  int stride = 1;
  int pad = 0;  // per side
  PadMode pad_mode = PadMode::kSymmetric;
};

inline int64_t conv_out_extent(int64_t in, int k, const Conv2dSpec& s) {
  return (in + 2 * s.pad - k) / s.stride + 1;
}

// in (N,Ci,H,W), w (Co,Ci,kh,kw), bias (Co) or empty, out (N,Co,Ho,Wo)
void conv2d_forward(const Tensor& in, const Tensor& w, const Tensor& bias,
                    Tensor& out, const Conv2dSpec& spec);
void conv2d_backward(const Tensor& in, const Tensor& w, const Tensor& gout,
                     Tensor* gin, Tensor* gw, Tensor* gbias,
                     const Conv2dSpec& spec);

// matmul of rank-2/rank-3 operands; a rank-2 side broadcasts over the
// other side's batch dimension. (B,n,k)x(k,m) -> (B,n,m) etc.
void matmul_forward(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& gout,
                     Tensor* ga, Tensor* gb);

// non-overlapping 2x2 mean over the last two axes
void avgpool2_forward(const Tensor& in, Tensor& out);
void avgpool2_backward(const Tensor& gout, Tensor& gin);

// img (C,H,W), coords (2,Ho,Wo) with channel 0 = y and 1 = x in absolute
// pixel units; samples are clamped to the image border.
void bilinear_forward(const Tensor& img, const Tensor& coords, Tensor& out);
void bilinear_backward(const Tensor& img, const Tensor& coords,
                       const Tensor& gout, Tensor* gimg, Tensor* gcoords);

// overlapping SxS windows on a stride grid with an edge-replicated margin:
// window (ty,tx) has origin (ty*stride - margin, tx*stride - margin).
// gather: in (C,H,W) -> out (NB,C,S,S), NB = (H/stride)*(W/stride)
void window_gather_forward(const Tensor& in, int size, int stride, int margin,
                           Tensor& out);
void window_gather_backward(const Tensor& gout, int64_t h, int64_t w, int size,
                            int stride, int margin, Tensor& gin);
// scatter-mean: blocks (NB,K,S,S) -> out (K,H,W); positions outside the
// image are dropped, shared positions are averaged uniformly.
void window_scatter_mean_forward(const Tensor& blocks, int64_t h, int64_t w,
                                 int size, int stride, int margin, Tensor& out);
void window_scatter_mean_backward(const Tensor& gout, int64_t nb, int size,
                                  int stride, int margin, Tensor& gblocks);

// plane (H,W) <-> raster-ordered 8x8 blocks (HW/64, 8, 8)
void block_split(const Tensor& plane, Tensor& blocks);
void block_merge(const Tensor& blocks, int64_t h, int64_t w, Tensor& plane);

namespace serial {
void conv2d_forward(const Tensor& in, const Tensor& w, const Tensor& bias,
                    Tensor& out, const Conv2dSpec& spec);
void matmul_forward(const Tensor& a, const Tensor& b, Tensor& out);
void avgpool2_forward(const Tensor& in, Tensor& out);
void bilinear_forward(const Tensor& img, const Tensor& coords, Tensor& out);
void window_gather_forward(const Tensor& in, int size, int stride, int margin,
                           Tensor& out);
void window_scatter_mean_forward(const Tensor& blocks, int64_t h, int64_t w,
                                 int size, int stride, int margin, Tensor& out);
}  // namespace serial

}  // namespace preedit::kernels
