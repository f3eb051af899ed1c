#include "preedit/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#define PREEDIT_PAR_FOR _Pragma("omp parallel for schedule(static) if(!omp_in_parallel())")
#define PREEDIT_PAR_FOR2 _Pragma("omp parallel for collapse(2) schedule(static) if(!omp_in_parallel())")
#else
#define PREEDIT_PAR_FOR
#define PREEDIT_PAR_FOR2
#endif

namespace preedit::kernels {

namespace {

inline int64_t clamp_idx(int64_t i, int64_t n) {
  return std::min(std::max<int64_t>(i, 0), n - 1);
}

// mirror an index into [0,n) for edge-inclusive symmetric padding
inline int64_t mirror_idx(int64_t i, int64_t n) {
  if (i < 0) return -1 - i;
  if (i >= n) return 2 * n - 1 - i;
  return i;
}

// (N,Ci,H,W) -> (N,Ci,H+2p,W+2p)
Tensor pad_input(const Tensor& in, int pad, PadMode mode) {
  const int64_t n = in.extent(0), c = in.extent(1), h = in.extent(2), w = in.extent(3);
  Tensor out({n, c, h + 2 * pad, w + 2 * pad});
  const int64_t hp = h + 2 * pad, wp = w + 2 * pad;
  PREEDIT_PAR_FOR2
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t y = 0; y < hp; ++y) {
        const int64_t sy = mode == PadMode::kSymmetric ? mirror_idx(y - pad, h) : y - pad;
        double* dst = out.data() + ((ni * c + ci) * hp + y) * wp;
        if (mode == PadMode::kZero && (sy < 0 || sy >= h)) {
          std::fill(dst, dst + wp, 0.0);
          continue;
        }
        const double* src = in.data() + ((ni * c + ci) * h + sy) * w;
        for (int64_t x = 0; x < wp; ++x) {
          int64_t sx = x - pad;
          if (mode == PadMode::kSymmetric) {
            dst[x] = src[mirror_idx(sx, w)];
          } else {
            dst[x] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
          }
        }
      }
  return out;
}

}  // namespace

void conv2d_forward(const Tensor& in, const Tensor& w, const Tensor& bias,
                    Tensor& out, const Conv2dSpec& spec) {
  const int64_t n = in.extent(0), ci = in.extent(1), h = in.extent(2), iw = in.extent(3);
  const int64_t co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const int64_t ho = conv_out_extent(h, static_cast<int>(kh), spec);
  const int64_t wo = conv_out_extent(iw, static_cast<int>(kw), spec);
  out = Tensor({n, co, ho, wo});
  const Tensor padded = pad_input(in, spec.pad, spec.pad_mode);
  const int64_t hp = h + 2 * spec.pad, wp = iw + 2 * spec.pad;
  const int s = spec.stride;

  PREEDIT_PAR_FOR2
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oc = 0; oc < co; ++oc) {
      const double b = bias.numel() ? bias[oc] : 0.0;
      for (int64_t oy = 0; oy < ho; ++oy) {
        double* orow = out.data() + ((ni * co + oc) * ho + oy) * wo;
        std::fill(orow, orow + wo, b);
        for (int64_t ic = 0; ic < ci; ++ic)
          for (int64_t ky = 0; ky < kh; ++ky) {
            const double* irow =
                padded.data() + ((ni * ci + ic) * hp + oy * s + ky) * wp;
            const double* wrow = w.data() + ((oc * ci + ic) * kh + ky) * kw;
            if (s == 1) {
              for (int64_t kx = 0; kx < kw; ++kx) {
                const double wv = wrow[kx];
                const double* ir = irow + kx;
                for (int64_t ox = 0; ox < wo; ++ox) orow[ox] += wv * ir[ox];
              }
            } else {
              for (int64_t kx = 0; kx < kw; ++kx) {
                const double wv = wrow[kx];
                for (int64_t ox = 0; ox < wo; ++ox) orow[ox] += wv * irow[ox * s + kx];
              }
            }
          }
      }
    }
}

void conv2d_backward(const Tensor& in, const Tensor& w, const Tensor& gout,
                     Tensor* gin, Tensor* gw, Tensor* gbias,
                     const Conv2dSpec& spec) {
  const int64_t n = in.extent(0), ci = in.extent(1), h = in.extent(2), iw = in.extent(3);
  const int64_t co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const int64_t ho = gout.extent(2), wo = gout.extent(3);
  const int s = spec.stride;
  const int64_t hp = h + 2 * spec.pad, wp = iw + 2 * spec.pad;
  const Tensor padded = (gw != nullptr) ? pad_input(in, spec.pad, spec.pad_mode) : Tensor();

  if (gbias != nullptr) {
    *gbias = Tensor({co});
    PREEDIT_PAR_FOR
    for (int64_t oc = 0; oc < co; ++oc) {
      double acc = 0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const double* g = gout.data() + ((ni * co + oc) * ho) * wo;
        for (int64_t i = 0; i < ho * wo; ++i) acc += g[i];
      }
      (*gbias)[oc] = acc;
    }
  }

  if (gw != nullptr) {
    *gw = Tensor({co, ci, kh, kw});
    PREEDIT_PAR_FOR2
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t ic = 0; ic < ci; ++ic)
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx) {
            double acc = 0;
            for (int64_t ni = 0; ni < n; ++ni)
              for (int64_t oy = 0; oy < ho; ++oy) {
                const double* g = gout.data() + ((ni * co + oc) * ho + oy) * wo;
                const double* p =
                    padded.data() + ((ni * ci + ic) * hp + oy * s + ky) * wp + kx;
                if (s == 1) {
                  for (int64_t ox = 0; ox < wo; ++ox) acc += g[ox] * p[ox];
                } else {
                  for (int64_t ox = 0; ox < wo; ++ox) acc += g[ox] * p[ox * s];
                }
              }
            gw->at(oc, ic, ky, kx) = acc;
          }
  }

  if (gin != nullptr) {
    // gradient w.r.t. the padded input, then fold the pad adjoint back
    Tensor gpad({n, ci, hp, wp});
    PREEDIT_PAR_FOR2
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t ic = 0; ic < ci; ++ic)
        for (int64_t py = 0; py < hp; ++py) {
          double* grow = gpad.data() + ((ni * ci + ic) * hp + py) * wp;
          for (int64_t px = 0; px < wp; ++px) {
            double acc = 0;
            for (int64_t oc = 0; oc < co; ++oc)
              for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t t = py - ky;
                if (t < 0 || t % s) continue;
                const int64_t oy = t / s;
                if (oy >= ho) continue;
                const double* g = gout.data() + ((ni * co + oc) * ho + oy) * wo;
                const double* wr = w.data() + ((oc * ci + ic) * kh + ky) * kw;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const int64_t u = px - kx;
                  if (u < 0 || u % s) continue;
                  const int64_t ox = u / s;
                  if (ox >= wo) continue;
                  acc += wr[kx] * g[ox];
                }
              }
            grow[px] = acc;
          }
        }

    *gin = Tensor({n, ci, h, iw});
    const int pad = spec.pad;
    PREEDIT_PAR_FOR2
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t ic = 0; ic < ci; ++ic) {
        double* dst = gin->data() + (ni * ci + ic) * h * iw;
        const double* src = gpad.data() + (ni * ci + ic) * hp * wp;
        for (int64_t py = 0; py < hp; ++py) {
          const int64_t sy = spec.pad_mode == PadMode::kSymmetric
                                 ? mirror_idx(py - pad, h)
                                 : py - pad;
          if (sy < 0 || sy >= h) continue;
          for (int64_t px = 0; px < wp; ++px) {
            const int64_t sx = spec.pad_mode == PadMode::kSymmetric
                                   ? mirror_idx(px - pad, iw)
                                   : px - pad;
            if (sx < 0 || sx >= iw) continue;
            dst[sy * iw + sx] += src[py * wp + px];
          }
        }
      }
  }
}

namespace {
// normalize matmul operands to (B,n,k)x(B,k,m); rank-2 sides broadcast
struct MatShape {
  int64_t batch, n, k, m;
  bool a_batched, b_batched;
};
MatShape matmul_shape(const Tensor& a, const Tensor& b) {
  MatShape s{};
  s.a_batched = a.rank() == 3;
  s.b_batched = b.rank() == 3;
  s.n = a.extent(a.rank() - 2);
  s.k = a.extent(a.rank() - 1);
  const int64_t bk = b.extent(b.rank() - 2);
  s.m = b.extent(b.rank() - 1);
  if (bk != s.k)
    throw std::invalid_argument("matmul: inner extents differ " +
                                Tensor::shape_str(a.shape()) + " x " +
                                Tensor::shape_str(b.shape()));
  s.batch = s.a_batched ? a.extent(0) : (s.b_batched ? b.extent(0) : 1);
  if (s.a_batched && s.b_batched && a.extent(0) != b.extent(0))
    throw std::invalid_argument("matmul: batch extents differ");
  return s;
}
}  // namespace

void matmul_forward(const Tensor& a, const Tensor& b, Tensor& out) {
  const MatShape s = matmul_shape(a, b);
  out = (s.a_batched || s.b_batched) ? Tensor({s.batch, s.n, s.m})
                                     : Tensor({s.n, s.m});
  PREEDIT_PAR_FOR
  for (int64_t bi = 0; bi < s.batch; ++bi) {
    const double* ap = a.data() + (s.a_batched ? bi * s.n * s.k : 0);
    const double* bp = b.data() + (s.b_batched ? bi * s.k * s.m : 0);
    double* op = out.data() + bi * s.n * s.m;
    for (int64_t i = 0; i < s.n; ++i) {
      double* orow = op + i * s.m;
      std::fill(orow, orow + s.m, 0.0);
      for (int64_t kk = 0; kk < s.k; ++kk) {
        const double av = ap[i * s.k + kk];
        const double* brow = bp + kk * s.m;
        for (int64_t j = 0; j < s.m; ++j) orow[j] += av * brow[j];
      }
    }
  }
}

void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& gout,
                     Tensor* ga, Tensor* gb) {
  const MatShape s = matmul_shape(a, b);
  if (ga != nullptr) {
    *ga = Tensor(a.shape());
    // ga = gout . b^T, reduced over batch when a is unbatched
    PREEDIT_PAR_FOR
    for (int64_t i = 0; i < s.n; ++i) {
      for (int64_t bi = 0; bi < s.batch; ++bi) {
        const double* gp = gout.data() + bi * s.n * s.m + i * s.m;
        const double* bp = b.data() + (s.b_batched ? bi * s.k * s.m : 0);
        double* arow = ga->data() + (s.a_batched ? bi * s.n * s.k : 0) + i * s.k;
        for (int64_t kk = 0; kk < s.k; ++kk) {
          double acc = 0;
          const double* brow = bp + kk * s.m;
          for (int64_t j = 0; j < s.m; ++j) acc += gp[j] * brow[j];
          arow[kk] += acc;
        }
      }
    }
  }
  if (gb != nullptr) {
    *gb = Tensor(b.shape());
    // gb = a^T . gout, reduced over batch when b is unbatched
    PREEDIT_PAR_FOR
    for (int64_t kk = 0; kk < s.k; ++kk) {
      for (int64_t bi = 0; bi < s.batch; ++bi) {
        const double* ap = a.data() + (s.a_batched ? bi * s.n * s.k : 0);
        const double* gp = gout.data() + bi * s.n * s.m;
        double* brow = gb->data() + (s.b_batched ? bi * s.k * s.m : 0) + kk * s.m;
        for (int64_t i = 0; i < s.n; ++i) {
          const double av = ap[i * s.k + kk];
          const double* grow = gp + i * s.m;
          for (int64_t j = 0; j < s.m; ++j) brow[j] += av * grow[j];
        }
      }
    }
  }
}

void avgpool2_forward(const Tensor& in, Tensor& out) {
  const int r = in.rank();
  const int64_t h = in.extent(r - 2), w = in.extent(r - 1);
  if (h % 2 || w % 2)
    throw std::invalid_argument("avgpool2: odd extents " + Tensor::shape_str(in.shape()));
  std::vector<int64_t> os = in.shape();
  os[r - 2] = h / 2;
  os[r - 1] = w / 2;
  const int64_t batch = in.numel() / (h * w);
  out = Tensor(os);
  PREEDIT_PAR_FOR
  for (int64_t bi = 0; bi < batch; ++bi) {
    const double* src = in.data() + bi * h * w;
    double* dst = out.data() + bi * (h / 2) * (w / 2);
    for (int64_t y = 0; y < h / 2; ++y)
      for (int64_t x = 0; x < w / 2; ++x) {
        const double* p = src + 2 * y * w + 2 * x;
        dst[y * (w / 2) + x] = ((p[0] + p[1]) + (p[w] + p[w + 1])) * 0.25;
      }
  }
}

void avgpool2_backward(const Tensor& gout, Tensor& gin) {
  const int r = gin.rank();
  const int64_t h = gin.extent(r - 2), w = gin.extent(r - 1);
  const int64_t batch = gin.numel() / (h * w);
  PREEDIT_PAR_FOR
  for (int64_t bi = 0; bi < batch; ++bi) {
    const double* g = gout.data() + bi * (h / 2) * (w / 2);
    double* dst = gin.data() + bi * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        dst[y * w + x] = 0.25 * g[(y / 2) * (w / 2) + (x / 2)];
  }
}

void bilinear_forward(const Tensor& img, const Tensor& coords, Tensor& out) {
  const int64_t c = img.extent(0), h = img.extent(1), w = img.extent(2);
  const int64_t ho = coords.extent(1), wo = coords.extent(2);
  out = Tensor({c, ho, wo});
  PREEDIT_PAR_FOR
  for (int64_t i = 0; i < ho * wo; ++i) {
    const double y = std::clamp(coords[i], 0.0, double(h - 1));
    const double x = std::clamp(coords[ho * wo + i], 0.0, double(w - 1));
    const int64_t y0 = static_cast<int64_t>(std::floor(y));
    const int64_t x0 = static_cast<int64_t>(std::floor(x));
    const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - double(y0), fx = x - double(x0);
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = img.data() + ci * h * w;
      const double v = (1 - fy) * ((1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                       fy * ((1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
      out.data()[ci * ho * wo + i] = v;
    }
  }
}

void bilinear_backward(const Tensor& img, const Tensor& coords,
                       const Tensor& gout, Tensor* gimg, Tensor* gcoords) {
  const int64_t c = img.extent(0), h = img.extent(1), w = img.extent(2);
  const int64_t ho = gout.extent(1), wo = gout.extent(2);
  if (gimg != nullptr) *gimg = Tensor(img.shape());
  if (gcoords != nullptr) *gcoords = Tensor(coords.shape());

  // image scatter kept serial so results never depend on thread count
  if (gimg != nullptr) {
    for (int64_t i = 0; i < ho * wo; ++i) {
      const double y = std::clamp(coords[i], 0.0, double(h - 1));
      const double x = std::clamp(coords[ho * wo + i], 0.0, double(w - 1));
      const int64_t y0 = static_cast<int64_t>(std::floor(y));
      const int64_t x0 = static_cast<int64_t>(std::floor(x));
      const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = y - double(y0), fx = x - double(x0);
      for (int64_t ci = 0; ci < c; ++ci) {
        const double g = gout.data()[ci * ho * wo + i];
        double* p = gimg->data() + ci * h * w;
        p[y0 * w + x0] += g * (1 - fy) * (1 - fx);
        p[y0 * w + x1] += g * (1 - fy) * fx;
        p[y1 * w + x0] += g * fy * (1 - fx);
        p[y1 * w + x1] += g * fy * fx;
      }
    }
  }

  if (gcoords != nullptr) {
    PREEDIT_PAR_FOR
    for (int64_t i = 0; i < ho * wo; ++i) {
      const double yr = coords[i], xr = coords[ho * wo + i];
      const bool y_in = yr > 0.0 && yr < double(h - 1);
      const bool x_in = xr > 0.0 && xr < double(w - 1);
      const double y = std::clamp(yr, 0.0, double(h - 1));
      const double x = std::clamp(xr, 0.0, double(w - 1));
      const int64_t y0 = static_cast<int64_t>(std::floor(y));
      const int64_t x0 = static_cast<int64_t>(std::floor(x));
      const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = y - double(y0), fx = x - double(x0);
      double gy = 0, gx = 0;
      for (int64_t ci = 0; ci < c; ++ci) {
        const double g = gout.data()[ci * ho * wo + i];
        const double* p = img.data() + ci * h * w;
        const double p00 = p[y0 * w + x0], p01 = p[y0 * w + x1];
        const double p10 = p[y1 * w + x0], p11 = p[y1 * w + x1];
        gy += g * ((1 - fx) * (p10 - p00) + fx * (p11 - p01));
        gx += g * ((1 - fy) * (p01 - p00) + fy * (p11 - p10));
      }
      (*gcoords)[i] = y_in ? gy : 0.0;
      (*gcoords)[ho * wo + i] = x_in ? gx : 0.0;
    }
  }
}

void window_gather_forward(const Tensor& in, int size, int stride, int margin,
                           Tensor& out) {
  const int64_t c = in.extent(0), h = in.extent(1), w = in.extent(2);
  const int64_t ny = h / stride, nx = w / stride;
  out = Tensor({ny * nx, c, size, size});
  PREEDIT_PAR_FOR
  for (int64_t b = 0; b < ny * nx; ++b) {
    const int64_t oy = (b / nx) * stride - margin;
    const int64_t ox = (b % nx) * stride - margin;
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* src = in.data() + ci * h * w;
      double* dst = out.data() + (b * c + ci) * size * size;
      for (int64_t sy = 0; sy < size; ++sy) {
        const int64_t y = clamp_idx(oy + sy, h);
        for (int64_t sx = 0; sx < size; ++sx)
          dst[sy * size + sx] = src[y * w + clamp_idx(ox + sx, w)];
      }
    }
  }
}

void window_gather_backward(const Tensor& gout, int64_t h, int64_t w, int size,
                            int stride, int margin, Tensor& gin) {
  const int64_t nb = gout.extent(0), c = gout.extent(1);
  const int64_t nx = w / stride;
  gin = Tensor({c, h, w});
  // gather form: for each input pixel, sum the window cells that read it
  // (border clamping makes edge pixels read by several cells per window)
  PREEDIT_PAR_FOR
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x)
      for (int64_t b = 0; b < nb; ++b) {
        const int64_t oy = (b / nx) * stride - margin;
        const int64_t ox = (b % nx) * stride - margin;
        // window cells reading row y: {y-oy}, widened at the clamped borders
        const int64_t sy_lo = std::max<int64_t>(y == 0 ? 0 : y - oy, 0);
        const int64_t sy_hi = std::min<int64_t>(y == h - 1 ? size - 1 : y - oy, size - 1);
        if (sy_lo > sy_hi) continue;
        const int64_t sx_lo = std::max<int64_t>(x == 0 ? 0 : x - ox, 0);
        const int64_t sx_hi = std::min<int64_t>(x == w - 1 ? size - 1 : x - ox, size - 1);
        if (sx_lo > sx_hi) continue;
        for (int64_t ci = 0; ci < c; ++ci) {
          const double* g = gout.data() + (b * c + ci) * size * size;
          double acc = 0;
          for (int64_t sy = sy_lo; sy <= sy_hi; ++sy)
            for (int64_t sx = sx_lo; sx <= sx_hi; ++sx) acc += g[sy * size + sx];
          gin.data()[ci * h * w + y * w + x] += acc;
        }
      }
  }
}

namespace {
inline int64_t floor_div(int64_t a, int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

// windows covering image row/col p: t in [lo,hi]
inline void covering_range(int64_t p, int size, int stride, int margin,
                           int64_t ntiles, int64_t& lo, int64_t& hi) {
  // t*stride - margin <= p < t*stride - margin + size
  lo = std::max<int64_t>(floor_div(p + margin - size, stride) + 1, 0);
  hi = std::min<int64_t>(floor_div(p + margin, stride), ntiles - 1);
}
}  // namespace

void window_scatter_mean_forward(const Tensor& blocks, int64_t h, int64_t w,
                                 int size, int stride, int margin, Tensor& out) {
  const int64_t k = blocks.extent(1);
  const int64_t ny = h / stride, nx = w / stride;
  out = Tensor({k, h, w});
  PREEDIT_PAR_FOR
  for (int64_t y = 0; y < h; ++y) {
    int64_t ty_lo, ty_hi;
    covering_range(y, size, stride, margin, ny, ty_lo, ty_hi);
    for (int64_t x = 0; x < w; ++x) {
      int64_t tx_lo, tx_hi;
      covering_range(x, size, stride, margin, nx, tx_lo, tx_hi);
      const double inv = 1.0 / double((ty_hi - ty_lo + 1) * (tx_hi - tx_lo + 1));
      for (int64_t ki = 0; ki < k; ++ki) {
        double acc = 0;
        for (int64_t ty = ty_lo; ty <= ty_hi; ++ty)
          for (int64_t tx = tx_lo; tx <= tx_hi; ++tx) {
            const int64_t b = ty * nx + tx;
            const int64_t sy = y - (ty * stride - margin);
            const int64_t sx = x - (tx * stride - margin);
            acc += blocks.data()[(b * k + ki) * size * size + sy * size + sx];
          }
        out.data()[ki * h * w + y * w + x] = acc * inv;
      }
    }
  }
}

void window_scatter_mean_backward(const Tensor& gout, int64_t nb, int size,
                                  int stride, int margin, Tensor& gblocks) {
  const int64_t k = gout.extent(0), h = gout.extent(1), w = gout.extent(2);
  const int64_t ny = h / stride, nx = w / stride;
  gblocks = Tensor({nb, k, size, size});
  PREEDIT_PAR_FOR
  for (int64_t b = 0; b < nb; ++b) {
    const int64_t oy = (b / nx) * stride - margin;
    const int64_t ox = (b % nx) * stride - margin;
    for (int64_t ki = 0; ki < k; ++ki) {
      double* dst = gblocks.data() + (b * k + ki) * size * size;
      for (int64_t sy = 0; sy < size; ++sy) {
        const int64_t y = oy + sy;
        if (y < 0 || y >= h) continue;
        int64_t ty_lo, ty_hi;
        covering_range(y, size, stride, margin, ny, ty_lo, ty_hi);
        for (int64_t sx = 0; sx < size; ++sx) {
          const int64_t x = ox + sx;
          if (x < 0 || x >= w) continue;
          int64_t tx_lo, tx_hi;
          covering_range(x, size, stride, margin, nx, tx_lo, tx_hi);
          const double inv =
              1.0 / double((ty_hi - ty_lo + 1) * (tx_hi - tx_lo + 1));
          dst[sy * size + sx] = gout.data()[ki * h * w + y * w + x] * inv;
        }
      }
    }
  }
}

void block_split(const Tensor& plane, Tensor& blocks) {
  const int64_t h = plane.extent(0), w = plane.extent(1);
  if (h % 8 || w % 8)
    throw std::invalid_argument("block_split: extents not multiples of 8: " +
                                Tensor::shape_str(plane.shape()));
  const int64_t nx = w / 8;
  blocks = Tensor({(h / 8) * nx, 8, 8});
  PREEDIT_PAR_FOR
  for (int64_t b = 0; b < blocks.extent(0); ++b) {
    const int64_t by = (b / nx) * 8, bx = (b % nx) * 8;
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x)
        blocks.data()[b * 64 + y * 8 + x] = plane.data()[(by + y) * w + bx + x];
  }
}

void block_merge(const Tensor& blocks, int64_t h, int64_t w, Tensor& plane) {
  const int64_t nx = w / 8;
  plane = Tensor({h, w});
  PREEDIT_PAR_FOR
  for (int64_t b = 0; b < blocks.extent(0); ++b) {
    const int64_t by = (b / nx) * 8, bx = (b % nx) * 8;
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x)
        plane.data()[(by + y) * w + bx + x] = blocks.data()[b * 64 + y * 8 + x];
  }
}

namespace serial {

void conv2d_forward(const Tensor& in, const Tensor& w, const Tensor& bias,
                    Tensor& out, const Conv2dSpec& spec) {
  const int64_t n = in.extent(0), ci = in.extent(1), h = in.extent(2), iw = in.extent(3);
  const int64_t co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  const int64_t ho = conv_out_extent(h, static_cast<int>(kh), spec);
  const int64_t wo = conv_out_extent(iw, static_cast<int>(kw), spec);
  out = Tensor({n, co, ho, wo});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = bias.numel() ? bias[oc] : 0.0;
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t y = oy * spec.stride + ky - spec.pad;
                int64_t x = ox * spec.stride + kx - spec.pad;
                double v;
                if (spec.pad_mode == PadMode::kSymmetric) {
                  v = in.at(ni, ic, mirror_idx(y, h), mirror_idx(x, iw));
                } else {
                  v = (y < 0 || y >= h || x < 0 || x >= iw) ? 0.0 : in.at(ni, ic, y, x);
                }
                acc += w.at(oc, ic, ky, kx) * v;
              }
          out.at(ni, oc, oy, ox) = acc;
        }
}

void matmul_forward(const Tensor& a, const Tensor& b, Tensor& out) {
  const MatShape s = matmul_shape(a, b);
  out = (s.a_batched || s.b_batched) ? Tensor({s.batch, s.n, s.m})
                                     : Tensor({s.n, s.m});
  for (int64_t bi = 0; bi < s.batch; ++bi)
    for (int64_t i = 0; i < s.n; ++i)
      for (int64_t j = 0; j < s.m; ++j) {
        double acc = 0;
        for (int64_t kk = 0; kk < s.k; ++kk)
          acc += a.data()[(s.a_batched ? bi * s.n * s.k : 0) + i * s.k + kk] *
                 b.data()[(s.b_batched ? bi * s.k * s.m : 0) + kk * s.m + j];
        out.data()[bi * s.n * s.m + i * s.m + j] = acc;
      }
}

void avgpool2_forward(const Tensor& in, Tensor& out) {
  const int r = in.rank();
  const int64_t h = in.extent(r - 2), w = in.extent(r - 1);
  std::vector<int64_t> os = in.shape();
  os[r - 2] = h / 2;
  os[r - 1] = w / 2;
  const int64_t batch = in.numel() / (h * w);
  out = Tensor(os);
  for (int64_t bi = 0; bi < batch; ++bi)
    for (int64_t y = 0; y < h / 2; ++y)
      for (int64_t x = 0; x < w / 2; ++x) {
        double acc = 0;
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx)
            acc += in.data()[bi * h * w + (2 * y + dy) * w + 2 * x + dx];
        out.data()[bi * (h / 2) * (w / 2) + y * (w / 2) + x] = acc / 4.0;
      }
}

void bilinear_forward(const Tensor& img, const Tensor& coords, Tensor& out) {
  const int64_t c = img.extent(0), h = img.extent(1), w = img.extent(2);
  const int64_t ho = coords.extent(1), wo = coords.extent(2);
  out = Tensor({c, ho, wo});
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < ho * wo; ++i) {
      const double y = std::clamp(coords[i], 0.0, double(h - 1));
      const double x = std::clamp(coords[ho * wo + i], 0.0, double(w - 1));
      const int64_t y0 = static_cast<int64_t>(std::floor(y));
      const int64_t x0 = static_cast<int64_t>(std::floor(x));
      const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = y - double(y0), fx = x - double(x0);
      double acc = 0;
      acc += (1 - fy) * (1 - fx) * img.data()[ci * h * w + y0 * w + x0];
      acc += (1 - fy) * fx * img.data()[ci * h * w + y0 * w + x1];
      acc += fy * (1 - fx) * img.data()[ci * h * w + y1 * w + x0];
      acc += fy * fx * img.data()[ci * h * w + y1 * w + x1];
      out.data()[ci * ho * wo + i] = acc;
    }
}

void window_gather_forward(const Tensor& in, int size, int stride, int margin,
                           Tensor& out) {
  const int64_t c = in.extent(0), h = in.extent(1), w = in.extent(2);
  const int64_t ny = h / stride, nx = w / stride;
  out = Tensor({ny * nx, c, size, size});
  for (int64_t b = 0; b < ny * nx; ++b)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t sy = 0; sy < size; ++sy)
        for (int64_t sx = 0; sx < size; ++sx) {
          const int64_t y = clamp_idx((b / nx) * stride - margin + sy, h);
          const int64_t x = clamp_idx((b % nx) * stride - margin + sx, w);
          out.data()[(b * c + ci) * size * size + sy * size + sx] =
              in.data()[ci * h * w + y * w + x];
        }
}

void window_scatter_mean_forward(const Tensor& blocks, int64_t h, int64_t w,
                                 int size, int stride, int margin, Tensor& out) {
  const int64_t k = blocks.extent(1);
  const int64_t nb = blocks.extent(0);
  const int64_t nx = w / stride;
  Tensor sum({k, h, w}), count({h, w});
  for (int64_t b = 0; b < nb; ++b) {
    const int64_t oy = (b / nx) * stride - margin;
    const int64_t ox = (b % nx) * stride - margin;
    for (int64_t sy = 0; sy < size; ++sy)
      for (int64_t sx = 0; sx < size; ++sx) {
        const int64_t y = oy + sy, x = ox + sx;
        if (y < 0 || y >= h || x < 0 || x >= w) continue;
        count.data()[y * w + x] += 1.0;
        for (int64_t ki = 0; ki < k; ++ki)
          sum.data()[ki * h * w + y * w + x] +=
              blocks.data()[(b * k + ki) * size * size + sy * size + sx];
      }
  }
  out = Tensor({k, h, w});
  for (int64_t ki = 0; ki < k; ++ki)
    for (int64_t i = 0; i < h * w; ++i)
      out.data()[ki * h * w + i] = sum.data()[ki * h * w + i] / count.data()[i];
}

}  // namespace serial

}  // namespace preedit::kernels
