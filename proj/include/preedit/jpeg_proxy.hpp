#pragma once

#include <array>

#include "preedit/autodiff.hpp"

// Differentiable JPEG compression-decompression: BT.601 full-range color
// conversion, optional 4:2:0 resampling (2x2 mean down, half-pel bilinear
// up), orthonormal 8x8 DCT as matrix products, and table quantization with
// a cubic soft-rounding surrogate. The baseline codec reuses the same graph
// code for its transform, so the hard-rounding proxy and the real codec
// agree bit for bit.

namespace preedit {

enum class Colorspace { kRgb, kYuv444, kYuv420 };

// three planes; RGB in [0,1], YUV in [0,255]; 4:2:0 stores half-size chroma
struct PlanarImage {
  Colorspace cs = Colorspace::kRgb;
  Tensor p0, p1, p2;
  int64_t height() const { return p0.extent(0); }
  int64_t width() const { return p0.extent(1); }
};

struct QuantTableSet {
  int q = 50;
  std::array<int, 64> luma{}, chroma{};  // row-major, entries in [1,255]
};

// IJG scaling of the Annex-K base tables
QuantTableSet quant_tables(int q);

// orthonormal DCT-II basis, row u, column n
const Tensor& dct_basis();

enum class Rounding { kSoft, kHard, kNone };

struct YuvVars {
  Var y, u, v;
};
struct RgbVars {
  Var r, g, b;
};

// RGB in [0,1] -> YUV in codec range (Y in [0,255], chroma offset 128)
YuvVars rgb_to_yuv(Var r, Var g, Var b);
RgbVars yuv_to_rgb(Var y, Var u, Var v);

// plane (H,W), level-shifts by -128 internally -> (HW/64,8,8)
Var dct8x8(Var plane);
// inverse, re-adds the 128 level shift
Var idct8x8(Var blocks, int64_t h, int64_t w);

Var soft_round(Var x);
// half-pel-centered bilinear 2x upsample of a (H,W) plane
Var upsample2x_bilinear(Var plane);
// edge replication on the bottom/right
Var pad_replicate(Var plane, int64_t pad_bottom, int64_t pad_right);

struct ProxyCoeffs {
  Var y, u, v;  // quantized-domain coefficients, (NB,8,8) each
  int64_t luma_h = 0, luma_w = 0;    // padded plane extents
  int64_t chroma_h = 0, chroma_w = 0;
};

struct ProxyResult {
  RgbVars decoded;  // cropped to the input extent, not clamped
  ProxyCoeffs coeffs;
  int64_t pad_h = 0, pad_w = 0;
};

// encode half: pad to multiples of `pad_to` (the codec passes its MCU
// extent; the differentiable pipeline always uses 16), color convert,
// optional 4:2:0, DCT, divide by tables, round per `rounding`
ProxyCoeffs proxy_forward_transform(RgbVars rgb, const QuantTableSet& tables,
                                    bool subsample_420, Rounding rounding,
                                    int pad_to = 16);
// decode half: dequantize, inverse DCT, chroma upsample, color convert
RgbVars proxy_inverse_transform(const ProxyCoeffs& coeffs,
                                const QuantTableSet& tables,
                                bool subsample_420);

ProxyResult proxy_codec(RgbVars rgb, const QuantTableSet& tables,
                        bool subsample_420, Rounding rounding);

// forward-only convenience: decode through the proxy and clamp to [0,1]
PlanarImage proxy_decode_image(const PlanarImage& rgb,
                               const QuantTableSet& tables, bool subsample_420,
                               Rounding rounding);

RgbVars image_leaves(Graph& g, const PlanarImage& rgb);
PlanarImage clamp01_image(const Tensor& r, const Tensor& g, const Tensor& b);

}  // namespace preedit
