#include "preedit/jpeg_proxy.hpp"

#include <cmath>
#include <stdexcept>

namespace preedit {

namespace {

// Annex K base tables, row-major
constexpr int kBaseLuma[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kBaseChroma[64] = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

constexpr double kYR = 0.299, kYG = 0.587, kYB = 0.114;

Tensor table_tensor(const std::array<int, 64>& t, bool reciprocal) {
  Tensor out({1, 8, 8});
  for (int i = 0; i < 64; ++i) out[i] = reciprocal ? 1.0 / t[i] : double(t[i]);
  return out;
}

}  // namespace

QuantTableSet quant_tables(int q) {
  if (q < 1 || q > 100)
    throw std::invalid_argument("quality factor " + std::to_string(q) +
                                " outside [1,100]");
  const int scale = q < 50 ? 5000 / q : 200 - 2 * q;
  QuantTableSet t;
  t.q = q;
  for (int i = 0; i < 64; ++i) {
    t.luma[i] = std::clamp((kBaseLuma[i] * scale + 50) / 100, 1, 255);
    t.chroma[i] = std::clamp((kBaseChroma[i] * scale + 50) / 100, 1, 255);
  }
  return t;
}

const Tensor& dct_basis() {
  static const Tensor basis = [] {
    Tensor a({8, 8});
    const double pi = std::acos(-1.0);
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int n = 0; n < 8; ++n)
        a.at(u, n) = cu * std::cos((2 * n + 1) * u * pi / 16.0);
    }
    return a;
  }();
  return basis;
}

YuvVars rgb_to_yuv(Var r, Var g, Var b) {
  Var r255 = mul_scalar(r, 255.0);
  Var g255 = mul_scalar(g, 255.0);
  Var b255 = mul_scalar(b, 255.0);
  Var y = add(add(mul_scalar(r255, kYR), mul_scalar(g255, kYG)),
              mul_scalar(b255, kYB));
  Var u = add_scalar(mul_scalar(sub(b255, y), 0.5 / (1.0 - kYB)), 128.0);
  Var v = add_scalar(mul_scalar(sub(r255, y), 0.5 / (1.0 - kYR)), 128.0);
  return {y, u, v};
}

RgbVars yuv_to_rgb(Var y, Var u, Var v) {
  Var r255 = add(y, mul_scalar(add_scalar(v, -128.0), 2.0 * (1.0 - kYR)));
  Var b255 = add(y, mul_scalar(add_scalar(u, -128.0), 2.0 * (1.0 - kYB)));
  Var g255 = mul_scalar(
      sub(sub(y, mul_scalar(r255, kYR)), mul_scalar(b255, kYB)), 1.0 / kYG);
  return {mul_scalar(r255, 1.0 / 255.0), mul_scalar(g255, 1.0 / 255.0),
          mul_scalar(b255, 1.0 / 255.0)};
}

Var dct8x8(Var plane) {
  if (plane.shape().size() != 2 || plane.shape()[0] % 8 || plane.shape()[1] % 8)
    throw std::invalid_argument("dct8x8: plane extents must be multiples of 8, got " +
                                Tensor::shape_str(plane.shape()));
  Graph& g = *plane.g;
  Var shifted = add_scalar(plane, -128.0);
  Var blocks = block_split(shifted);
  Var a = constant(g, dct_basis());
  return matmul(matmul(a, blocks), transpose(a));
}

Var idct8x8(Var blocks, int64_t h, int64_t w) {
  Graph& g = *blocks.g;
  Var a = constant(g, dct_basis());
  Var x = matmul(matmul(transpose(a), blocks), a);
  return add_scalar(block_merge(x, h, w), 128.0);
}

Var soft_round(Var x) {
  Var r = floor_round(x);
  return add(r, cube(sub(x, r)));
}

Var upsample2x_bilinear(Var plane) {
  Graph& g = *plane.g;
  const int64_t h = plane.shape()[0], w = plane.shape()[1];
  Tensor coords({2, 2 * h, 2 * w});
  for (int64_t y = 0; y < 2 * h; ++y)
    for (int64_t x = 0; x < 2 * w; ++x) {
      coords[y * 2 * w + x] = 0.5 * double(y) - 0.25;
      coords[2 * h * 2 * w + y * 2 * w + x] = 0.5 * double(x) - 0.25;
    }
  Var img = reshape(plane, {1, h, w});
  Var up = bilinear_sample(img, constant(g, std::move(coords)));
  return reshape(up, {2 * h, 2 * w});
}

Var pad_replicate(Var plane, int64_t pad_bottom, int64_t pad_right) {
  Graph& g = *plane.g;
  Var out = plane;
  if (pad_bottom > 0) {
    const int64_t h = out.shape()[0], w = out.shape()[1];
    Var last = slice(out, 0, h - 1, h);                       // (1,W)
    Var rep = mul(last, constant(g, Tensor::full({pad_bottom, 1}, 1.0)));
    out = concat(std::vector<Var>{out, rep}, 0);
  }
  if (pad_right > 0) {
    const int64_t h = out.shape()[0], w = out.shape()[1];
    Var last = slice(out, 1, w - 1, w);                       // (H,1)
    Var rep = mul(last, constant(g, Tensor::full({1, pad_right}, 1.0)));
    out = concat(std::vector<Var>{out, rep}, 1);
  }
  return out;
}

namespace {

Var quantize_channel(Var plane, const std::array<int, 64>& table,
                     Rounding rounding) {
  Graph& g = *plane.g;
  Var coeffs = dct8x8(plane);
  Var q = mul(coeffs, constant(g, table_tensor(table, true)));
  switch (rounding) {
    case Rounding::kSoft: return soft_round(q);
    case Rounding::kHard: return floor_round(q);
    case Rounding::kNone: return q;
  }
  return q;
}

Var dequantize_channel(Var quantized, const std::array<int, 64>& table,
                       int64_t h, int64_t w) {
  Graph& g = *quantized.g;
  return idct8x8(mul(quantized, constant(g, table_tensor(table, false))), h, w);
}

}  // namespace

ProxyCoeffs proxy_forward_transform(RgbVars rgb, const QuantTableSet& tables,
                                    bool subsample_420, Rounding rounding,
                                    int pad_to) {
  const int64_t h = rgb.r.shape()[0], w = rgb.r.shape()[1];
  const int64_t m = pad_to;
  const int64_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  Var r = pad_replicate(rgb.r, ph - h, pw - w);
  Var g = pad_replicate(rgb.g, ph - h, pw - w);
  Var b = pad_replicate(rgb.b, ph - h, pw - w);
  YuvVars yuv = rgb_to_yuv(r, g, b);
  Var u = yuv.u, v = yuv.v;
  if (subsample_420) {
    u = avg_pool2(u);
    v = avg_pool2(v);
  }
  ProxyCoeffs out;
  out.luma_h = ph;
  out.luma_w = pw;
  out.chroma_h = subsample_420 ? ph / 2 : ph;
  out.chroma_w = subsample_420 ? pw / 2 : pw;
  out.y = quantize_channel(yuv.y, tables.luma, rounding);
  out.u = quantize_channel(u, tables.chroma, rounding);
  out.v = quantize_channel(v, tables.chroma, rounding);
  return out;
}

RgbVars proxy_inverse_transform(const ProxyCoeffs& coeffs,
                                const QuantTableSet& tables,
                                bool subsample_420) {
  Var y = dequantize_channel(coeffs.y, tables.luma, coeffs.luma_h, coeffs.luma_w);
  Var u = dequantize_channel(coeffs.u, tables.chroma, coeffs.chroma_h, coeffs.chroma_w);
  Var v = dequantize_channel(coeffs.v, tables.chroma, coeffs.chroma_h, coeffs.chroma_w);
  if (subsample_420) {
    u = upsample2x_bilinear(u);
    v = upsample2x_bilinear(v);
  }
  return yuv_to_rgb(y, u, v);
}

ProxyResult proxy_codec(RgbVars rgb, const QuantTableSet& tables,
                        bool subsample_420, Rounding rounding) {
  const int64_t h = rgb.r.shape()[0], w = rgb.r.shape()[1];
  ProxyResult out;
  out.coeffs = proxy_forward_transform(rgb, tables, subsample_420, rounding);
  out.pad_h = out.coeffs.luma_h;
  out.pad_w = out.coeffs.luma_w;
  RgbVars dec = proxy_inverse_transform(out.coeffs, tables, subsample_420);
  if (out.pad_h != h || out.pad_w != w) {
    dec.r = slice(slice(dec.r, 0, 0, h), 1, 0, w);
    dec.g = slice(slice(dec.g, 0, 0, h), 1, 0, w);
    dec.b = slice(slice(dec.b, 0, 0, h), 1, 0, w);
  }
  out.decoded = dec;
  return out;
}

RgbVars image_leaves(Graph& g, const PlanarImage& img) {
  if (img.cs != Colorspace::kRgb)
    throw std::invalid_argument("image_leaves: expected an RGB image");
  return {g.leaf(img.p0), g.leaf(img.p1), g.leaf(img.p2)};
}

PlanarImage clamp01_image(const Tensor& r, const Tensor& g, const Tensor& b) {
  PlanarImage out;
  out.cs = Colorspace::kRgb;
  out.p0 = r;
  out.p1 = g;
  out.p2 = b;
  for (Tensor* p : {&out.p0, &out.p1, &out.p2})
    for (int64_t i = 0; i < p->numel(); ++i)
      (*p)[i] = std::clamp((*p)[i], 0.0, 1.0);
  return out;
}

PlanarImage proxy_decode_image(const PlanarImage& rgb,
                               const QuantTableSet& tables, bool subsample_420,
                               Rounding rounding) {
  Graph g;
  ProxyResult res =
      proxy_codec(image_leaves(g, rgb), tables, subsample_420, rounding);
  return clamp01_image(res.decoded.r.value(), res.decoded.g.value(),
                       res.decoded.b.value());
}

}  // namespace preedit
