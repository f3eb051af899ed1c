#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "preedit/jpeg_proxy.hpp"

// Baseline sequential JFIF with the fixed Annex-K Huffman tables. The
// transform half is the hard-rounding proxy, so encode/decode and the
// differentiable path share every arithmetic step.

namespace preedit {

struct JpegBitstream {
  std::vector<uint8_t> bytes;
  int64_t entropy_bytes = 0;  // coded segment, stuffing included
  int64_t total_bits() const { return 8 * static_cast<int64_t>(bytes.size()); }
  int64_t entropy_bits() const { return 8 * entropy_bytes; }
};

struct RateRecord {
  int64_t total_bits = 0;
  int64_t entropy_bits = 0;
  double bpp = 0;          // full file
  double entropy_bpp = 0;  // coded segment only
  int q = 0;
  std::string image_id;
};

class JpegError : public std::runtime_error {
 public:
  JpegError(std::string segment, const std::string& what)
      : std::runtime_error("jpeg " + segment + ": " + what),
        segment_(std::move(segment)) {}
  const std::string& segment() const { return segment_; }

 private:
  std::string segment_;
};

struct QuantizedChannels {
  Tensor y, u, v;  // (NB,8,8), integer-valued
  int64_t luma_h = 0, luma_w = 0, chroma_h = 0, chroma_w = 0;
  bool subsample_420 = true;
};

// the encoder's quantized coefficients without entropy coding; feeds the
// entropy model's actual-vs-estimated comparisons
QuantizedChannels jpeg_forward_coefficients(const PlanarImage& rgb,
                                            const QuantTableSet& tables,
                                            bool subsample_420);

JpegBitstream jpeg_encode(const PlanarImage& rgb, int q, bool subsample_420);
PlanarImage jpeg_decode(std::span<const uint8_t> bytes);
inline PlanarImage jpeg_decode(const JpegBitstream& bs) {
  return jpeg_decode(std::span<const uint8_t>(bs.bytes));
}

RateRecord measure_bpp(const PlanarImage& rgb, int q, bool subsample_420,
                       std::string image_id = {});

double image_mse(const PlanarImage& a, const PlanarImage& b);
double image_psnr(const PlanarImage& a, const PlanarImage& b);

}  // namespace preedit
