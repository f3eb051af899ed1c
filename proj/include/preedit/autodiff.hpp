#pragma once

#include <functional>
#include <span>
#include <vector>

#include "preedit/kernels.hpp"
#include "preedit/tensor.hpp"

// Tape-based reverse-mode engine over dense double tensors. A Graph owns an
// append-only record of nodes (parents always precede children); backward()
// walks it once in reverse. Graphs are cheap, single-threaded objects - build
// one per training step, or one per image for forward-only evaluation.

namespace preedit {

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kConv2d,
  kTranspose,
  kReshape,
  kSlice,
  kConcat,
  kAvgPool2x2,
  kBilinearSample,
  kTanh,
  kSigmoid,
  kLeakyRelu,
  kAbs,
  kSquare,
  kCube,
  kFloorRound,
  kSum,
  kMean,
  kLog2,
  kBatchNorm,
  // structured data-movement/sampling nodes used by the codec proxy and the
  // editors; differentiable like everything else but not part of the
  // primitive_forward() vocabulary
  kBlockSplit,
  kBlockMerge,
  kWindowGather,
  kWindowScatterMean,
};

const char* op_name(Op op);

struct OpAttrs {
  kernels::Conv2dSpec conv;
  int axis = 0;
  int64_t start = 0, stop = 0;
  std::vector<int> axes;      // sum/mean reduction axes; empty = all
  std::vector<int64_t> dims;  // reshape target
  double alpha = 0.2;         // leaky-relu negative slope
  int size = 0, stride = 0, margin = 0;  // window ops
  int64_t h = 0, w = 0;                  // block-merge / scatter target plane
  bool training = true;                  // batch-norm mode
  double eps = 1e-5;                     // batch-norm epsilon
};

class Graph;

struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const std::vector<int64_t>& shape() const;
  double scalar() const;
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;  // allocated zero alongside value
  OpAttrs attrs;
  std::vector<Tensor> aux;  // saved forward state (batch-norm statistics)
};

class Graph {
 public:
  Var leaf(Tensor v);
  Var emit(Op op, std::vector<int> inputs, OpAttrs attrs);

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // accumulates d(loss)/d(node) into every node's grad
  void backward(Var loss);
  void zero_grads();

 private:
  void forward_node(Node& n);
  void backward_node(int id);
  std::vector<Node> nodes_;
};

// elementwise with numpy-style broadcasting
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

Var matmul(Var a, Var b);
// x (N,Ci,H,W), w (Co,Ci,kh,kw), optional bias (Co)
Var conv2d(Var x, Var w, Var bias, const kernels::Conv2dSpec& spec);
Var transpose(Var a);  // rank 2
Var reshape(Var a, std::vector<int64_t> dims);
Var slice(Var a, int axis, int64_t start, int64_t stop);
Var concat(std::span<const Var> parts, int axis);
Var avg_pool2(Var a);
// img (C,H,W), coords (2,Ho,Wo): [0]=y, [1]=x in pixels, border-clamped
Var bilinear_sample(Var img, Var coords);

Var tanh_(Var a);
Var sigmoid(Var a);
Var leaky_relu(Var a, double slope = 0.2);
Var abs_(Var a);
Var square(Var a);
Var cube(Var a);
Var floor_round(Var a);  // round-half-away-from-zero, zero gradient
Var sum(Var a, std::vector<int> axes = {});
Var mean(Var a, std::vector<int> axes = {});
Var log2_(Var a);

// x (N,C,H,W), gamma/beta (C). Training mode normalizes with per-batch
// statistics and exposes them via node aux {mean, var}; eval mode takes
// frozen statistics as extra inputs.
Var batch_norm(Var x, Var gamma, Var beta, bool training, double eps = 1e-5,
               Var frozen_mean = {}, Var frozen_var = {});

Var block_split(Var plane);                     // (H,W) -> (HW/64,8,8)
Var block_merge(Var blocks, int64_t h, int64_t w);
Var window_gather(Var img, int size, int stride, int margin);
Var window_scatter_mean(Var blocks, int64_t h, int64_t w, int size, int stride,
                        int margin);

// convenience
Var scalar_leaf(Graph& g, double v);
Var constant(Graph& g, Tensor t);
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);
Var clamp_min(Var a, double floor);  // (x + c + |x - c|)/2

// generic dispatch over the primitive vocabulary; rejects anything else
Var primitive_forward(Op op, std::span<const Var> inputs, const OpAttrs& attrs);

// max over coordinates of |analytic - numeric| / max(|analytic|,|numeric|,1e-8)
// with central differences of width `step`
double finite_diff_check(const std::function<Var(Graph&, Var)>& f,
                         const Tensor& x, double step);

}  // namespace preedit
