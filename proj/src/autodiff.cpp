#include "preedit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace preedit {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatmul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kSlice: return "slice";
    case Op::kConcat: return "concat";
    case Op::kAvgPool2x2: return "avg-pool-2x2";
    case Op::kBilinearSample: return "bilinear-sample";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLeakyRelu: return "leaky-relu";
    case Op::kAbs: return "abs";
    case Op::kSquare: return "square";
    case Op::kCube: return "cube";
    case Op::kFloorRound: return "floor-round";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kLog2: return "log2";
    case Op::kBatchNorm: return "batch-norm";
    case Op::kBlockSplit: return "block-split";
    case Op::kBlockMerge: return "block-merge";
    case Op::kWindowGather: return "window-gather";
    case Op::kWindowScatterMean: return "window-scatter-mean";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("op ") + op_name(op) +
                              ": incompatible shapes " +
                              Tensor::shape_str(a.shape()) + " and " +
                              Tensor::shape_str(b.shape()));
}

struct BcastPlan {
  std::vector<int64_t> oshape;
  std::vector<int64_t> astr, bstr;  // per output dim; 0 where broadcast
  int64_t numel = 1;
};

BcastPlan bcast_plan(Op op, const Tensor& a, const Tensor& b) {
  const int r = std::max(a.rank(), b.rank());
  BcastPlan p;
  p.oshape.assign(r, 1);
  std::vector<int64_t> as(r, 1), bs(r, 1);
  for (int i = 0; i < a.rank(); ++i) as[r - a.rank() + i] = a.shape()[i];
  for (int i = 0; i < b.rank(); ++i) bs[r - b.rank() + i] = b.shape()[i];
  for (int i = 0; i < r; ++i) {
    if (as[i] != bs[i] && as[i] != 1 && bs[i] != 1) shape_error(op, a, b);
    p.oshape[i] = std::max(as[i], bs[i]);
    p.numel *= p.oshape[i];
  }
  p.astr.assign(r, 0);
  p.bstr.assign(r, 0);
  int64_t sa = 1, sb = 1;
  for (int i = r - 1; i >= 0; --i) {
    p.astr[i] = (as[i] == 1) ? 0 : sa;
    p.bstr[i] = (bs[i] == 1) ? 0 : sb;
    sa *= as[i];
    sb *= bs[i];
  }
  return p;
}

// runs fn(out_index, a_index, b_index) over every output element
template <typename F>
void bcast_walk(const BcastPlan& p, F&& fn) {
  const int r = static_cast<int>(p.oshape.size());
  std::vector<int64_t> coord(r, 0);
  int64_t ai = 0, bi = 0;
  for (int64_t i = 0; i < p.numel; ++i) {
    fn(i, ai, bi);
    for (int d = r - 1; d >= 0; --d) {
      ++coord[d];
      ai += p.astr[d];
      bi += p.bstr[d];
      if (coord[d] < p.oshape[d]) break;
      ai -= p.astr[d] * p.oshape[d];
      bi -= p.bstr[d] * p.oshape[d];
      coord[d] = 0;
    }
  }
}

// reduction layout: out strides per input dim (0 on reduced axes)
struct ReducePlan {
  std::vector<int64_t> oshape;
  std::vector<int64_t> ostr;  // per input dim
  int64_t count = 1;          // elements folded into each output cell
};

ReducePlan reduce_plan(const Tensor& in, const std::vector<int>& axes) {
  const int r = in.rank();
  std::vector<bool> red(r, axes.empty());
  for (int a : axes) {
    if (a < 0 || a >= r)
      throw std::invalid_argument("reduce: axis out of range for " +
                                  Tensor::shape_str(in.shape()));
    red[a] = true;
  }
  ReducePlan p;
  for (int i = 0; i < r; ++i) {
    if (red[i]) p.count *= in.shape()[i];
    else p.oshape.push_back(in.shape()[i]);
  }
  p.ostr.assign(r, 0);
  int64_t s = 1;
  for (int i = r - 1; i >= 0; --i) {
    if (!red[i]) {
      p.ostr[i] = s;
      s *= in.shape()[i];
    }
  }
  return p;
}

template <typename F>
void reduce_walk(const Tensor& in, const ReducePlan& p, F&& fn) {
  const int r = in.rank();
  std::vector<int64_t> coord(r, 0);
  int64_t oi = 0;
  for (int64_t i = 0; i < in.numel(); ++i) {
    fn(i, oi);
    for (int d = r - 1; d >= 0; --d) {
      ++coord[d];
      oi += p.ostr[d];
      if (coord[d] < in.shape()[d]) break;
      oi -= p.ostr[d] * in.shape()[d];
      coord[d] = 0;
    }
  }
}

struct SlicePlan {
  int64_t outer, inner, ext, len, start;
};

SlicePlan slice_plan(const Tensor& in, int axis, int64_t start, int64_t stop) {
  if (axis < 0 || axis >= in.rank() || start < 0 || stop > in.extent(axis) ||
      start >= stop)
    throw std::invalid_argument("op slice: bad range [" + std::to_string(start) +
                                "," + std::to_string(stop) + ") on axis " +
                                std::to_string(axis) + " of " +
                                Tensor::shape_str(in.shape()));
  SlicePlan p;
  p.outer = 1;
  for (int i = 0; i < axis; ++i) p.outer *= in.shape()[i];
  p.inner = 1;
  for (int i = axis + 1; i < in.rank(); ++i) p.inner *= in.shape()[i];
  p.ext = in.extent(axis);
  p.len = stop - start;
  p.start = start;
  return p;
}

double round_half_away(double x) { return std::round(x); }

}  // namespace

const Tensor& Var::value() const { return g->node(id).value; }
const Tensor& Var::grad() const { return g->node(id).grad; }
const std::vector<int64_t>& Var::shape() const { return g->node(id).value.shape(); }
double Var::scalar() const {
  const Tensor& t = g->node(id).value;
  if (t.numel() != 1)
    throw std::logic_error("scalar() on tensor " + Tensor::shape_str(t.shape()));
  return t[0];
}

Var Graph::leaf(Tensor v) {
  Node n;
  n.op = Op::kLeaf;
  n.grad = Tensor(v.shape());
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::emit(Op op, std::vector<int> inputs, OpAttrs attrs) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  for (int i : n.inputs)
    if (i < 0 || i >= size())
      throw std::logic_error("graph: dangling input reference");
  forward_node(n);
  n.grad = Tensor(n.value.shape());
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::zero_grads() {
  for (Node& n : nodes_) n.grad.fill(0.0);
}

void Graph::backward(Var loss) {
  if (loss.g != this || loss.id < 0 || loss.id >= size())
    throw std::invalid_argument("backward: loss is not a node of this graph");
  if (node(loss.id).value.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                Tensor::shape_str(node(loss.id).value.shape()));
  node(loss.id).grad[0] += 1.0;
  for (int id = loss.id; id >= 0; --id) backward_node(id);
}

void Graph::forward_node(Node& n) {
  auto in = [&](int i) -> const Tensor& { return node(n.inputs[i]).value; };
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Tensor &a = in(0), &b = in(1);
      const BcastPlan p = bcast_plan(n.op, a, b);
      n.value = Tensor(p.oshape);
      double* o = n.value.data();
      const double *pa = a.data(), *pb = b.data();
      if (n.op == Op::kAdd)
        bcast_walk(p, [&](int64_t i, int64_t ai, int64_t bi) { o[i] = pa[ai] + pb[bi]; });
      else if (n.op == Op::kSub)
        bcast_walk(p, [&](int64_t i, int64_t ai, int64_t bi) { o[i] = pa[ai] - pb[bi]; });
      else
        bcast_walk(p, [&](int64_t i, int64_t ai, int64_t bi) { o[i] = pa[ai] * pb[bi]; });
      break;
    }
    case Op::kMatmul:
      kernels::matmul_forward(in(0), in(1), n.value);
      break;
    case Op::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      if (x.rank() != 4 || w.rank() != 4 || x.extent(1) != w.extent(1))
        shape_error(n.op, x, w);
      static const Tensor kNoBias;
      kernels::conv2d_forward(x, w, n.inputs.size() > 2 ? in(2) : kNoBias,
                              n.value, n.attrs.conv);
      break;
    }
    case Op::kTranspose: {
      const Tensor& a = in(0);
      if (a.rank() != 2)
        throw std::invalid_argument("op transpose: expects rank 2, got " +
                                    Tensor::shape_str(a.shape()));
      n.value = Tensor({a.extent(1), a.extent(0)});
      for (int64_t i = 0; i < a.extent(0); ++i)
        for (int64_t j = 0; j < a.extent(1); ++j) n.value.at(j, i) = a.at(i, j);
      break;
    }
    case Op::kReshape:
      n.value = in(0).reshaped(n.attrs.dims);
      break;
    case Op::kSlice: {
      const Tensor& a = in(0);
      const SlicePlan p = slice_plan(a, n.attrs.axis, n.attrs.start, n.attrs.stop);
      std::vector<int64_t> os = a.shape();
      os[static_cast<size_t>(n.attrs.axis)] = p.len;
      n.value = Tensor(os);
      for (int64_t o = 0; o < p.outer; ++o)
        std::memcpy(n.value.data() + o * p.len * p.inner,
                    a.data() + (o * p.ext + p.start) * p.inner,
                    static_cast<size_t>(p.len * p.inner) * sizeof(double));
      break;
    }
    case Op::kConcat: {
      const int axis = n.attrs.axis;
      const Tensor& first = in(0);
      std::vector<int64_t> os = first.shape();
      int64_t total = 0;
      for (size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& t = in(static_cast<int>(k));
        if (t.rank() != first.rank()) shape_error(n.op, first, t);
        for (int d = 0; d < t.rank(); ++d)
          if (d != axis && t.shape()[d] != os[static_cast<size_t>(d)])
            shape_error(n.op, first, t);
        total += t.extent(axis);
      }
      os[static_cast<size_t>(axis)] = total;
      n.value = Tensor(os);
      int64_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
      for (size_t i = static_cast<size_t>(axis) + 1; i < os.size(); ++i) inner *= os[i];
      int64_t off = 0;
      for (size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& t = in(static_cast<int>(k));
        const int64_t ext = t.extent(axis);
        for (int64_t o = 0; o < outer; ++o)
          std::memcpy(n.value.data() + (o * total + off) * inner,
                      t.data() + o * ext * inner,
                      static_cast<size_t>(ext * inner) * sizeof(double));
        off += ext;
      }
      break;
    }
    case Op::kAvgPool2x2:
      kernels::avgpool2_forward(in(0), n.value);
      break;
    case Op::kBilinearSample:
      kernels::bilinear_forward(in(0), in(1), n.value);
      break;
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kLeakyRelu:
    case Op::kAbs:
    case Op::kSquare:
    case Op::kCube:
    case Op::kFloorRound:
    case Op::kLog2: {
      const Tensor& a = in(0);
      n.value = Tensor(a.shape());
      const double* x = a.data();
      double* o = n.value.data();
      const int64_t m = a.numel();
      switch (n.op) {
        case Op::kTanh:
          for (int64_t i = 0; i < m; ++i) o[i] = std::tanh(x[i]);
          break;
        case Op::kSigmoid:
          for (int64_t i = 0; i < m; ++i) o[i] = 1.0 / (1.0 + std::exp(-x[i]));
          break;
        case Op::kLeakyRelu:
          for (int64_t i = 0; i < m; ++i)
            o[i] = x[i] >= 0 ? x[i] : n.attrs.alpha * x[i];
          break;
        case Op::kAbs:
          for (int64_t i = 0; i < m; ++i) o[i] = std::abs(x[i]);
          break;
        case Op::kSquare:
          for (int64_t i = 0; i < m; ++i) o[i] = x[i] * x[i];
          break;
        case Op::kCube:
          for (int64_t i = 0; i < m; ++i) o[i] = x[i] * x[i] * x[i];
          break;
        case Op::kFloorRound:
          for (int64_t i = 0; i < m; ++i) o[i] = round_half_away(x[i]);
          break;
        case Op::kLog2:
          for (int64_t i = 0; i < m; ++i) o[i] = std::log2(x[i]);
          break;
        default:
          break;
      }
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      const Tensor& a = in(0);
      const ReducePlan p = reduce_plan(a, n.attrs.axes);
      n.value = Tensor(p.oshape);
      double* o = n.value.data();
      const double* x = a.data();
      reduce_walk(a, p, [&](int64_t i, int64_t oi) { o[oi] += x[i]; });
      if (n.op == Op::kMean)
        for (int64_t i = 0; i < n.value.numel(); ++i) o[i] /= double(p.count);
      break;
    }
    case Op::kBatchNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      if (x.rank() != 4 || gamma.extent(0) != x.extent(1)) shape_error(n.op, x, gamma);
      const int64_t nn = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
      const int64_t m = nn * hw;
      Tensor meanv({c}), varv({c}), invstd({c});
      if (n.attrs.training) {
        for (int64_t ci = 0; ci < c; ++ci) {
          double s = 0;
          for (int64_t ni = 0; ni < nn; ++ni) {
            const double* p = x.data() + (ni * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) s += p[i];
          }
          const double mu = s / double(m);
          double v = 0;
          for (int64_t ni = 0; ni < nn; ++ni) {
            const double* p = x.data() + (ni * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) v += (p[i] - mu) * (p[i] - mu);
          }
          meanv[ci] = mu;
          varv[ci] = v / double(m);
          invstd[ci] = 1.0 / std::sqrt(varv[ci] + n.attrs.eps);
        }
      } else {
        const Tensor& fm = in(3);
        const Tensor& fv = in(4);
        for (int64_t ci = 0; ci < c; ++ci) {
          meanv[ci] = fm[ci];
          varv[ci] = fv[ci];
          invstd[ci] = 1.0 / std::sqrt(fv[ci] + n.attrs.eps);
        }
      }
      n.value = Tensor(x.shape());
      Tensor xhat(x.shape());
      for (int64_t ni = 0; ni < nn; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
          const double* p = x.data() + (ni * c + ci) * hw;
          double* xh = xhat.data() + (ni * c + ci) * hw;
          double* o = n.value.data() + (ni * c + ci) * hw;
          const double mu = meanv[ci], is = invstd[ci], ga = gamma[ci], be = beta[ci];
          for (int64_t i = 0; i < hw; ++i) {
            xh[i] = (p[i] - mu) * is;
            o[i] = ga * xh[i] + be;
          }
        }
      n.aux = {std::move(xhat), std::move(invstd), std::move(meanv), std::move(varv)};
      break;
    }
    case Op::kBlockSplit:
      kernels::block_split(in(0), n.value);
      break;
    case Op::kBlockMerge:
      kernels::block_merge(in(0), n.attrs.h, n.attrs.w, n.value);
      break;
    case Op::kWindowGather:
      kernels::window_gather_forward(in(0), n.attrs.size, n.attrs.stride,
                                     n.attrs.margin, n.value);
      break;
    case Op::kWindowScatterMean:
      kernels::window_scatter_mean_forward(in(0), n.attrs.h, n.attrs.w,
                                           n.attrs.size, n.attrs.stride,
                                           n.attrs.margin, n.value);
      break;
  }
}

void Graph::backward_node(int id) {
  Node& n = node(id);
  if (n.op == Op::kLeaf) return;
  const Tensor& g = n.grad;
  auto inv = [&](int i) -> const Tensor& { return node(n.inputs[i]).value; };
  auto ing = [&](int i) -> Tensor& { return node(n.inputs[i]).grad; };
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
    case Op::kSub: {
      const BcastPlan p = bcast_plan(n.op, inv(0), inv(1));
      double* ga = ing(0).data();
      double* gb = ing(1).data();
      const double sgn = n.op == Op::kSub ? -1.0 : 1.0;
      const double* gg = g.data();
      bcast_walk(p, [&](int64_t i, int64_t ai, int64_t bi) {
        ga[ai] += gg[i];
        gb[bi] += sgn * gg[i];
      });
      break;
    }
    case Op::kMul: {
      const BcastPlan p = bcast_plan(n.op, inv(0), inv(1));
      double* ga = ing(0).data();
      double* gb = ing(1).data();
      const double *pa = inv(0).data(), *pb = inv(1).data();
      const double* gg = g.data();
      bcast_walk(p, [&](int64_t i, int64_t ai, int64_t bi) {
        ga[ai] += gg[i] * pb[bi];
        gb[bi] += gg[i] * pa[ai];
      });
      break;
    }
    case Op::kMatmul: {
      Tensor ga, gb;
      kernels::matmul_backward(inv(0), inv(1), g, &ga, &gb);
      for (int64_t i = 0; i < ga.numel(); ++i) ing(0)[i] += ga[i];
      for (int64_t i = 0; i < gb.numel(); ++i) ing(1)[i] += gb[i];
      break;
    }
    case Op::kConv2d: {
      Tensor gx, gw, gb;
      kernels::conv2d_backward(inv(0), inv(1), g, &gx, &gw,
                               n.inputs.size() > 2 ? &gb : nullptr, n.attrs.conv);
      for (int64_t i = 0; i < gx.numel(); ++i) ing(0)[i] += gx[i];
      for (int64_t i = 0; i < gw.numel(); ++i) ing(1)[i] += gw[i];
      if (n.inputs.size() > 2)
        for (int64_t i = 0; i < gb.numel(); ++i) ing(2)[i] += gb[i];
      break;
    }
    case Op::kTranspose: {
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.extent(0); ++i)
        for (int64_t j = 0; j < ga.extent(1); ++j) ga.at(i, j) += g.at(j, i);
      break;
    }
    case Op::kReshape: {
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i];
      break;
    }
    case Op::kSlice: {
      const SlicePlan p = slice_plan(inv(0), n.attrs.axis, n.attrs.start, n.attrs.stop);
      Tensor& ga = ing(0);
      for (int64_t o = 0; o < p.outer; ++o) {
        double* dst = ga.data() + (o * p.ext + p.start) * p.inner;
        const double* src = g.data() + o * p.len * p.inner;
        for (int64_t i = 0; i < p.len * p.inner; ++i) dst[i] += src[i];
      }
      break;
    }
    case Op::kConcat: {
      const int axis = n.attrs.axis;
      const int64_t total = n.value.extent(axis);
      int64_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= n.value.shape()[static_cast<size_t>(i)];
      for (size_t i = static_cast<size_t>(axis) + 1; i < n.value.shape().size(); ++i)
        inner *= n.value.shape()[i];
      int64_t off = 0;
      for (size_t k = 0; k < n.inputs.size(); ++k) {
        Tensor& ga = ing(static_cast<int>(k));
        const int64_t ext = inv(static_cast<int>(k)).extent(axis);
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = g.data() + (o * total + off) * inner;
          double* dst = ga.data() + o * ext * inner;
          for (int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
        }
        off += ext;
      }
      break;
    }
    case Op::kAvgPool2x2: {
      Tensor gi(inv(0).shape());
      kernels::avgpool2_backward(g, gi);
      for (int64_t i = 0; i < gi.numel(); ++i) ing(0)[i] += gi[i];
      break;
    }
    case Op::kBilinearSample: {
      Tensor gi, gc;
      kernels::bilinear_backward(inv(0), inv(1), g, &gi, &gc);
      for (int64_t i = 0; i < gi.numel(); ++i) ing(0)[i] += gi[i];
      for (int64_t i = 0; i < gc.numel(); ++i) ing(1)[i] += gc[i];
      break;
    }
    case Op::kTanh: {
      const double* y = n.value.data();
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::kSigmoid: {
      const double* y = n.value.data();
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::kLeakyRelu: {
      const double* x = inv(0).data();
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i)
        ga[i] += g[i] * (x[i] >= 0 ? 1.0 : n.attrs.alpha);
      break;
    }
    case Op::kAbs: {
      const double* x = inv(0).data();
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i)
        ga[i] += g[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
      break;
    }
    case Op::kSquare: {
      const double* x = inv(0).data();
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * 2.0 * x[i];
      break;
    }
    case Op::kCube: {
      const double* x = inv(0).data();
      Tensor& ga = ing(0);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * 3.0 * x[i] * x[i];
      break;
    }
    case Op::kFloorRound:
      break;  // piecewise constant
    case Op::kSum:
    case Op::kMean: {
      const ReducePlan p = reduce_plan(inv(0), n.attrs.axes);
      const double scale = n.op == Op::kMean ? 1.0 / double(p.count) : 1.0;
      Tensor& ga = ing(0);
      const double* gg = g.data();
      reduce_walk(inv(0), p, [&](int64_t i, int64_t oi) { ga[i] += gg[oi] * scale; });
      break;
    }
    case Op::kLog2: {
      const double* x = inv(0).data();
      Tensor& ga = ing(0);
      const double inv_ln2 = 1.4426950408889634;
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * inv_ln2 / x[i];
      break;
    }
    case Op::kBatchNorm: {
      const Tensor& x = inv(0);
      const Tensor& gamma = inv(1);
      const Tensor& xhat = n.aux[0];
      const Tensor& invstd = n.aux[1];
      const int64_t nn = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
      const int64_t m = nn * hw;
      for (int64_t ci = 0; ci < c; ++ci) {
        double s_g = 0, s_gx = 0;
        for (int64_t ni = 0; ni < nn; ++ni) {
          const double* gp = g.data() + (ni * c + ci) * hw;
          const double* xh = xhat.data() + (ni * c + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            s_g += gp[i];
            s_gx += gp[i] * xh[i];
          }
        }
        ing(1)[ci] += s_gx;  // gamma
        ing(2)[ci] += s_g;   // beta
        const double ga = gamma[ci], is = invstd[ci];
        if (n.attrs.training) {
          for (int64_t ni = 0; ni < nn; ++ni) {
            const double* gp = g.data() + (ni * c + ci) * hw;
            const double* xh = xhat.data() + (ni * c + ci) * hw;
            double* gi = ing(0).data() + (ni * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i)
              gi[i] += ga * is * (gp[i] - s_g / double(m) - xh[i] * s_gx / double(m));
          }
        } else {
          for (int64_t ni = 0; ni < nn; ++ni) {
            const double* gp = g.data() + (ni * c + ci) * hw;
            const double* xh = xhat.data() + (ni * c + ci) * hw;
            double* gi = ing(0).data() + (ni * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) gi[i] += ga * is * gp[i];
            // frozen statistics are themselves inputs; keep their gradients honest
            double s_loc = 0, sx_loc = 0;
            for (int64_t i = 0; i < hw; ++i) {
              s_loc += gp[i];
              sx_loc += gp[i] * xh[i];
            }
            ing(3)[ci] += -ga * is * s_loc;
            ing(4)[ci] += -0.5 * ga * is * is * sx_loc;
          }
        }
      }
      break;
    }
    case Op::kBlockSplit: {
      Tensor gi;
      kernels::block_merge(g, inv(0).extent(0), inv(0).extent(1), gi);
      for (int64_t i = 0; i < gi.numel(); ++i) ing(0)[i] += gi[i];
      break;
    }
    case Op::kBlockMerge: {
      Tensor gi;
      kernels::block_split(g, gi);
      for (int64_t i = 0; i < gi.numel(); ++i) ing(0)[i] += gi[i];
      break;
    }
    case Op::kWindowGather: {
      Tensor gi;
      kernels::window_gather_backward(g, inv(0).extent(1), inv(0).extent(2),
                                      n.attrs.size, n.attrs.stride,
                                      n.attrs.margin, gi);
      for (int64_t i = 0; i < gi.numel(); ++i) ing(0)[i] += gi[i];
      break;
    }
    case Op::kWindowScatterMean: {
      Tensor gi;
      kernels::window_scatter_mean_backward(g, inv(0).extent(0), n.attrs.size,
                                            n.attrs.stride, n.attrs.margin, gi);
      for (int64_t i = 0; i < gi.numel(); ++i) ing(0)[i] += gi[i];
      break;
    }
  }
}

namespace {
Graph* common_graph(std::initializer_list<Var> vs, const char* what) {
  Graph* g = nullptr;
  for (const Var& v : vs) {
    if (!v.valid()) continue;
    if (g == nullptr) g = v.g;
    if (v.g != g) throw std::logic_error(std::string(what) + ": vars from different graphs");
  }
  if (g == nullptr) throw std::logic_error(std::string(what) + ": no valid inputs");
  return g;
}
}  // namespace

Var add(Var a, Var b) { return common_graph({a, b}, "add")->emit(Op::kAdd, {a.id, b.id}, {}); }
Var sub(Var a, Var b) { return common_graph({a, b}, "sub")->emit(Op::kSub, {a.id, b.id}, {}); }
Var mul(Var a, Var b) { return common_graph({a, b}, "mul")->emit(Op::kMul, {a.id, b.id}, {}); }
Var matmul(Var a, Var b) {
  return common_graph({a, b}, "matmul")->emit(Op::kMatmul, {a.id, b.id}, {});
}

Var conv2d(Var x, Var w, Var bias, const kernels::Conv2dSpec& spec) {
  OpAttrs at;
  at.conv = spec;
  std::vector<int> in{x.id, w.id};
  if (bias.valid()) in.push_back(bias.id);
  return common_graph({x, w}, "conv2d")->emit(Op::kConv2d, std::move(in), std::move(at));
}

Var transpose(Var a) { return a.g->emit(Op::kTranspose, {a.id}, {}); }

Var reshape(Var a, std::vector<int64_t> dims) {
  OpAttrs at;
  at.dims = std::move(dims);
  return a.g->emit(Op::kReshape, {a.id}, std::move(at));
}

Var slice(Var a, int axis, int64_t start, int64_t stop) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.stop = stop;
  return a.g->emit(Op::kSlice, {a.id}, std::move(at));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  OpAttrs at;
  at.axis = axis;
  std::vector<int> in;
  for (const Var& v : parts) {
    if (v.g != parts[0].g) throw std::logic_error("concat: vars from different graphs");
    in.push_back(v.id);
  }
  return parts[0].g->emit(Op::kConcat, std::move(in), std::move(at));
}

Var avg_pool2(Var a) { return a.g->emit(Op::kAvgPool2x2, {a.id}, {}); }

Var bilinear_sample(Var img, Var coords) {
  return common_graph({img, coords}, "bilinear-sample")
      ->emit(Op::kBilinearSample, {img.id, coords.id}, {});
}

Var tanh_(Var a) { return a.g->emit(Op::kTanh, {a.id}, {}); }
Var sigmoid(Var a) { return a.g->emit(Op::kSigmoid, {a.id}, {}); }
Var leaky_relu(Var a, double slope) {
  OpAttrs at;
  at.alpha = slope;
  return a.g->emit(Op::kLeakyRelu, {a.id}, std::move(at));
}
Var abs_(Var a) { return a.g->emit(Op::kAbs, {a.id}, {}); }
Var square(Var a) { return a.g->emit(Op::kSquare, {a.id}, {}); }
Var cube(Var a) { return a.g->emit(Op::kCube, {a.id}, {}); }
Var floor_round(Var a) { return a.g->emit(Op::kFloorRound, {a.id}, {}); }
Var sum(Var a, std::vector<int> axes) {
  OpAttrs at;
  at.axes = std::move(axes);
  return a.g->emit(Op::kSum, {a.id}, std::move(at));
}
Var mean(Var a, std::vector<int> axes) {
  OpAttrs at;
  at.axes = std::move(axes);
  return a.g->emit(Op::kMean, {a.id}, std::move(at));
}
Var log2_(Var a) { return a.g->emit(Op::kLog2, {a.id}, {}); }

Var batch_norm(Var x, Var gamma, Var beta, bool training, double eps,
               Var frozen_mean, Var frozen_var) {
  OpAttrs at;
  at.training = training;
  at.eps = eps;
  std::vector<int> in{x.id, gamma.id, beta.id};
  if (!training) {
    if (!frozen_mean.valid() || !frozen_var.valid())
      throw std::invalid_argument("batch-norm: eval mode needs frozen statistics");
    in.push_back(frozen_mean.id);
    in.push_back(frozen_var.id);
  }
  return common_graph({x, gamma, beta}, "batch-norm")
      ->emit(Op::kBatchNorm, std::move(in), std::move(at));
}

Var block_split(Var plane) { return plane.g->emit(Op::kBlockSplit, {plane.id}, {}); }

Var block_merge(Var blocks, int64_t h, int64_t w) {
  OpAttrs at;
  at.h = h;
  at.w = w;
  return blocks.g->emit(Op::kBlockMerge, {blocks.id}, std::move(at));
}

Var window_gather(Var img, int size, int stride, int margin) {
  OpAttrs at;
  at.size = size;
  at.stride = stride;
  at.margin = margin;
  return img.g->emit(Op::kWindowGather, {img.id}, std::move(at));
}

Var window_scatter_mean(Var blocks, int64_t h, int64_t w, int size, int stride,
                        int margin) {
  OpAttrs at;
  at.h = h;
  at.w = w;
  at.size = size;
  at.stride = stride;
  at.margin = margin;
  return blocks.g->emit(Op::kWindowScatterMean, {blocks.id}, std::move(at));
}

Var scalar_leaf(Graph& g, double v) { return g.leaf(Tensor::scalar(v)); }
Var constant(Graph& g, Tensor t) { return g.leaf(std::move(t)); }
Var add_scalar(Var a, double c) { return add(a, scalar_leaf(*a.g, c)); }
Var mul_scalar(Var a, double c) { return mul(a, scalar_leaf(*a.g, c)); }

Var clamp_min(Var a, double floor) {
  Var c = scalar_leaf(*a.g, floor);
  return mul_scalar(add(add(a, c), abs_(sub(a, c))), 0.5);
}

Var primitive_forward(Op op, std::span<const Var> in, const OpAttrs& attrs) {
  switch (op) {
    case Op::kAdd: return add(in[0], in[1]);
    case Op::kSub: return sub(in[0], in[1]);
    case Op::kMul: return mul(in[0], in[1]);
    case Op::kMatmul: return matmul(in[0], in[1]);
    case Op::kConv2d:
      return conv2d(in[0], in[1], in.size() > 2 ? in[2] : Var{}, attrs.conv);
    case Op::kTranspose: return transpose(in[0]);
    case Op::kReshape: return reshape(in[0], attrs.dims);
    case Op::kSlice: return slice(in[0], attrs.axis, attrs.start, attrs.stop);
    case Op::kConcat: return concat(in, attrs.axis);
    case Op::kAvgPool2x2: return avg_pool2(in[0]);
    case Op::kBilinearSample: return bilinear_sample(in[0], in[1]);
    case Op::kTanh: return tanh_(in[0]);
    case Op::kSigmoid: return sigmoid(in[0]);
    case Op::kLeakyRelu: return leaky_relu(in[0], attrs.alpha);
    case Op::kAbs: return abs_(in[0]);
    case Op::kSquare: return square(in[0]);
    case Op::kCube: return cube(in[0]);
    case Op::kFloorRound: return floor_round(in[0]);
    case Op::kSum: return sum(in[0], attrs.axes);
    case Op::kMean: return mean(in[0], attrs.axes);
    case Op::kLog2: return log2_(in[0]);
    case Op::kBatchNorm:
      return batch_norm(in[0], in[1], in[2], attrs.training, attrs.eps,
                        in.size() > 3 ? in[3] : Var{}, in.size() > 4 ? in[4] : Var{});
    default:
      throw std::invalid_argument(std::string("primitive_forward: '") +
                                  op_name(op) + "' is not a primitive op");
  }
}

double finite_diff_check(const std::function<Var(Graph&, Var)>& f,
                         const Tensor& x, double step) {
  Graph g;
  Var xv = g.leaf(x);
  Var y = f(g, xv);
  g.backward(y);
  const Tensor analytic = xv.grad();

  auto eval = [&](const Tensor& xt) {
    Graph ge;
    return f(ge, ge.leaf(xt)).scalar();
  };

  double worst = 0;
  Tensor xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double x0 = xp[i];
    xp[i] = x0 + step;
    const double fp = eval(xp);
    xp[i] = x0 - step;
    const double fm = eval(xp);
    xp[i] = x0;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace preedit
