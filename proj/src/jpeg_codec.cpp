#include "preedit/jpeg_codec.hpp"

#include <cmath>
#include <cstring>

namespace preedit {

namespace {

// natural index -> zigzag position
constexpr uint8_t kZigZag[64] = {
    0,  1,  5,  6,  14, 15, 27, 28,  //
    2,  4,  7,  13, 16, 26, 29, 42,  //
    3,  8,  12, 17, 25, 30, 41, 43,  //
    9,  11, 18, 24, 31, 40, 44, 53,  //
    10, 19, 23, 32, 39, 45, 52, 54,  //
    20, 22, 33, 38, 46, 51, 55, 60,  //
    21, 34, 37, 47, 50, 56, 59, 61,  //
    35, 36, 48, 49, 57, 58, 62, 63};

struct ZigZagScan {
  uint8_t natural[64];  // zigzag position -> natural index
  constexpr ZigZagScan() : natural{} {
    for (int i = 0; i < 64; ++i) natural[kZigZag[i]] = static_cast<uint8_t>(i);
  }
};
constexpr ZigZagScan kScan;

constexpr uint8_t kDcLumaBits[16] = {0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
constexpr uint8_t kDcVals[12] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
constexpr uint8_t kDcChromaBits[16] = {0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
constexpr uint8_t kAcLumaBits[16] = {0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 125};
constexpr uint8_t kAcLumaVals[162] = {
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06,
    0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08,
    0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0, 0x24, 0x33, 0x62, 0x72,
    0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45,
    0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59,
    0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75,
    0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3,
    0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6,
    0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9,
    0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4,
    0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA};
constexpr uint8_t kAcChromaBits[16] = {0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 119};
constexpr uint8_t kAcChromaVals[162] = {
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41,
    0x51, 0x07, 0x61, 0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91,
    0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0, 0x15, 0x62, 0x72, 0xD1,
    0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44,
    0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58,
    0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74,
    0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A,
    0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4,
    0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7,
    0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4,
    0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA};

struct HuffCode {
  uint16_t code = 0;
  uint8_t len = 0;
};

// canonical codes per Annex C
void build_encode_table(const uint8_t bits[16], const uint8_t* vals,
                        HuffCode table[256]) {
  uint16_t code = 0;
  int k = 0;
  for (int len = 1; len <= 16; ++len) {
    for (int i = 0; i < bits[len - 1]; ++i) {
      table[vals[k]] = {code, static_cast<uint8_t>(len)};
      ++code;
      ++k;
    }
    code <<= 1;
  }
}

struct HuffDecoder {
  int32_t mincode[17] = {0};
  int32_t maxcode[17] = {0};  // -1 when no codes of that length
  int32_t valptr[17] = {0};
  uint8_t vals[256] = {0};

  void build(const uint8_t bits[16], const uint8_t* v, int nvals) {
    std::memcpy(vals, v, static_cast<size_t>(nvals));
    int32_t code = 0;
    int k = 0;
    for (int len = 1; len <= 16; ++len) {
      if (bits[len - 1] == 0) {
        maxcode[len] = -1;
      } else {
        valptr[len] = k;
        mincode[len] = code;
        k += bits[len - 1];
        code += bits[len - 1];
        maxcode[len] = code - 1;
      }
      code <<= 1;
    }
  }
};

class BitWriter {
 public:
  explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}

  void put(uint32_t code, int len) {
    acc_ = (acc_ << len) | (code & ((1u << len) - 1));
    nbits_ += len;
    while (nbits_ >= 8) {
      nbits_ -= 8;
      const uint8_t byte = static_cast<uint8_t>((acc_ >> nbits_) & 0xFF);
      out_.push_back(byte);
      if (byte == 0xFF) out_.push_back(0x00);  // stuffing
    }
  }

  void flush() {
    if (nbits_ > 0) put(0x7F, 7 - nbits_ + 1);  // pad with 1s to a byte edge
  }

 private:
  std::vector<uint8_t>& out_;
  uint64_t acc_ = 0;
  int nbits_ = 0;
};

int bit_category(int v) {
  int a = v < 0 ? -v : v, n = 0;
  while (a) {
    a >>= 1;
    ++n;
  }
  return n;
}

void encode_block(BitWriter& bw, const double* block, int& dc_pred,
                  const HuffCode* dc_tab, const HuffCode* ac_tab) {
  int zz[64];
  for (int i = 0; i < 64; ++i) zz[i] = static_cast<int>(block[kScan.natural[i]]);

  const int diff = zz[0] - dc_pred;
  dc_pred = zz[0];
  const int dcat = bit_category(diff);
  bw.put(dc_tab[dcat].code, dc_tab[dcat].len);
  if (dcat > 0) {
    int v = diff;
    if (v < 0) --v;
    bw.put(static_cast<uint32_t>(v) & ((1u << dcat) - 1), dcat);
  }

  int run = 0;
  for (int i = 1; i < 64; ++i) {
    if (zz[i] == 0) {
      ++run;
      continue;
    }
    while (run > 15) {
      bw.put(ac_tab[0xF0].code, ac_tab[0xF0].len);  // ZRL
      run -= 16;
    }
    const int acat = bit_category(zz[i]);
    const int symbol = (run << 4) | acat;
    bw.put(ac_tab[symbol].code, ac_tab[symbol].len);
    int v = zz[i];
    if (v < 0) --v;
    bw.put(static_cast<uint32_t>(v) & ((1u << acat) - 1), acat);
    run = 0;
  }
  if (run > 0) bw.put(ac_tab[0x00].code, ac_tab[0x00].len);  // EOB
}

void put_marker(std::vector<uint8_t>& out, uint8_t id, int payload_len) {
  out.push_back(0xFF);
  out.push_back(id);
  const int len = payload_len + 2;
  out.push_back(static_cast<uint8_t>(len >> 8));
  out.push_back(static_cast<uint8_t>(len & 0xFF));
}

}  // namespace

QuantizedChannels jpeg_forward_coefficients(const PlanarImage& rgb,
                                            const QuantTableSet& tables,
                                            bool subsample_420) {
  Graph g;
  ProxyCoeffs c = proxy_forward_transform(image_leaves(g, rgb), tables,
                                          subsample_420, Rounding::kHard,
                                          subsample_420 ? 16 : 8);
  QuantizedChannels out;
  out.y = c.y.value();
  out.u = c.u.value();
  out.v = c.v.value();
  out.luma_h = c.luma_h;
  out.luma_w = c.luma_w;
  out.chroma_h = c.chroma_h;
  out.chroma_w = c.chroma_w;
  out.subsample_420 = subsample_420;
  return out;
}

JpegBitstream jpeg_encode(const PlanarImage& rgb, int q, bool subsample_420) {
  if (rgb.cs != Colorspace::kRgb)
    throw std::invalid_argument("jpeg_encode: expected an RGB image");
  const QuantTableSet tables = quant_tables(q);
  const QuantizedChannels qc = jpeg_forward_coefficients(rgb, tables, subsample_420);
  const int64_t h = rgb.height(), w = rgb.width();

  JpegBitstream bs;
  std::vector<uint8_t>& out = bs.bytes;
  out.reserve(4096);

  out.push_back(0xFF);
  out.push_back(0xD8);  // SOI

  // APP0 / JFIF 1.1, no density, no thumbnail
  put_marker(out, 0xE0, 14);
  const uint8_t jfif[14] = {'J', 'F', 'I', 'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0};
  out.insert(out.end(), jfif, jfif + 14);

  // DQT, zigzag order
  for (int id = 0; id < 2; ++id) {
    put_marker(out, 0xDB, 65);
    out.push_back(static_cast<uint8_t>(id));
    const auto& t = id == 0 ? tables.luma : tables.chroma;
    for (int i = 0; i < 64; ++i)
      out.push_back(static_cast<uint8_t>(t[kScan.natural[i]]));
  }

  // SOF0
  put_marker(out, 0xC0, 15);
  out.push_back(8);  // precision
  out.push_back(static_cast<uint8_t>(h >> 8));
  out.push_back(static_cast<uint8_t>(h & 0xFF));
  out.push_back(static_cast<uint8_t>(w >> 8));
  out.push_back(static_cast<uint8_t>(w & 0xFF));
  out.push_back(3);
  const uint8_t ysamp = subsample_420 ? 0x22 : 0x11;
  const uint8_t comp[3][3] = {{1, ysamp, 0}, {2, 0x11, 1}, {3, 0x11, 1}};
  for (const auto& c : comp) {
    out.push_back(c[0]);
    out.push_back(c[1]);
    out.push_back(c[2]);
  }

  // DHT, all four Annex-K tables
  const struct {
    uint8_t cls_id;
    const uint8_t* bits;
    const uint8_t* vals;
    int nvals;
  } dht[4] = {{0x00, kDcLumaBits, kDcVals, 12},
              {0x10, kAcLumaBits, kAcLumaVals, 162},
              {0x01, kDcChromaBits, kDcVals, 12},
              {0x11, kAcChromaBits, kAcChromaVals, 162}};
  for (const auto& t : dht) {
    put_marker(out, 0xC4, 1 + 16 + t.nvals);
    out.push_back(t.cls_id);
    out.insert(out.end(), t.bits, t.bits + 16);
    out.insert(out.end(), t.vals, t.vals + t.nvals);
  }

  // SOS
  put_marker(out, 0xDA, 1 + 6 + 3);
  out.push_back(3);
  out.push_back(1);
  out.push_back(0x00);
  out.push_back(2);
  out.push_back(0x11);
  out.push_back(3);
  out.push_back(0x11);
  out.push_back(0);   // Ss
  out.push_back(63);  // Se
  out.push_back(0);   // Ah/Al

  HuffCode dc_luma[256] = {}, ac_luma[256] = {}, dc_chroma[256] = {}, ac_chroma[256] = {};
  build_encode_table(kDcLumaBits, kDcVals, dc_luma);
  build_encode_table(kAcLumaBits, kAcLumaVals, ac_luma);
  build_encode_table(kDcChromaBits, kDcVals, dc_chroma);
  build_encode_table(kAcChromaBits, kAcChromaVals, ac_chroma);

  const size_t scan_start = out.size();
  BitWriter bw(out);
  int pred[3] = {0, 0, 0};
  const int64_t ybx = qc.luma_w / 8;
  const int64_t cbx = qc.chroma_w / 8;
  if (subsample_420) {
    const int64_t my = qc.luma_h / 16, mx = qc.luma_w / 16;
    for (int64_t i = 0; i < my; ++i)
      for (int64_t j = 0; j < mx; ++j) {
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx)
            encode_block(bw, qc.y.data() + ((2 * i + dy) * ybx + 2 * j + dx) * 64,
                         pred[0], dc_luma, ac_luma);
        encode_block(bw, qc.u.data() + (i * cbx + j) * 64, pred[1], dc_chroma, ac_chroma);
        encode_block(bw, qc.v.data() + (i * cbx + j) * 64, pred[2], dc_chroma, ac_chroma);
      }
  } else {
    const int64_t my = qc.luma_h / 8, mx = qc.luma_w / 8;
    for (int64_t i = 0; i < my; ++i)
      for (int64_t j = 0; j < mx; ++j) {
        encode_block(bw, qc.y.data() + (i * ybx + j) * 64, pred[0], dc_luma, ac_luma);
        encode_block(bw, qc.u.data() + (i * cbx + j) * 64, pred[1], dc_chroma, ac_chroma);
        encode_block(bw, qc.v.data() + (i * cbx + j) * 64, pred[2], dc_chroma, ac_chroma);
      }
  }
  bw.flush();
  bs.entropy_bytes = static_cast<int64_t>(out.size() - scan_start);

  out.push_back(0xFF);
  out.push_back(0xD9);  // EOI
  return bs;
}

namespace {

struct StreamReader {
  std::span<const uint8_t> buf;
  size_t pos = 0;

  uint8_t u8(const char* seg) {
    if (pos >= buf.size()) throw JpegError(seg, "unexpected end of stream");
    return buf[pos++];
  }
  int u16(const char* seg) {
    const int hi = u8(seg), lo = u8(seg);
    return (hi << 8) | lo;
  }
};

struct ScanBitReader {
  StreamReader& in;
  uint32_t acc = 0;
  int nbits = 0;

  int bit() {
    if (nbits == 0) {
      uint8_t b = in.u8("SOS");
      if (b == 0xFF) {
        const uint8_t next = in.u8("SOS");
        if (next != 0x00) throw JpegError("SOS", "marker inside entropy data");
      }
      acc = b;
      nbits = 8;
    }
    --nbits;
    return (acc >> nbits) & 1;
  }

  int bits(int n) {
    int v = 0;
    for (int i = 0; i < n; ++i) v = (v << 1) | bit();
    return v;
  }

  int decode(const HuffDecoder& t) {
    int code = 0;
    for (int len = 1; len <= 16; ++len) {
      code = (code << 1) | bit();
      if (t.maxcode[len] >= 0 && code <= t.maxcode[len])
        return t.vals[t.valptr[len] + code - t.mincode[len]];
    }
    throw JpegError("SOS", "invalid Huffman code");
  }
};

int extend(int v, int n) { return v < (1 << (n - 1)) ? v - (1 << n) + 1 : v; }

void decode_block(ScanBitReader& br, double* block, int& pred,
                  const HuffDecoder& dc, const HuffDecoder& ac) {
  std::memset(block, 0, 64 * sizeof(double));
  const int dcat = br.decode(dc);
  int diff = 0;
  if (dcat > 0) diff = extend(br.bits(dcat), dcat);
  pred += diff;
  block[0] = pred;
  int k = 1;
  while (k < 64) {
    const int rs = br.decode(ac);
    const int run = rs >> 4, size = rs & 0xF;
    if (size == 0) {
      if (run == 15) {
        k += 16;  // ZRL
        continue;
      }
      break;  // EOB
    }
    k += run;
    if (k > 63) throw JpegError("SOS", "coefficient index overflow");
    block[kScan.natural[k]] = extend(br.bits(size), size);
    ++k;
  }
}

}  // namespace

PlanarImage jpeg_decode(std::span<const uint8_t> bytes) {
  StreamReader in{bytes};
  if (in.u8("SOI") != 0xFF || in.u8("SOI") != 0xD8)
    throw JpegError("SOI", "missing start marker");

  int qt[4][64];
  bool qt_seen[4] = {false, false, false, false};
  HuffDecoder huff[2][4];
  bool huff_seen[2][4] = {};
  int height = 0, width = 0;
  int ncomp = 0;
  struct Comp {
    int id = 0, hs = 1, vs = 1, tq = 0, td = 0, ta = 0;
  } comps[3];
  bool sof_seen = false;

  for (;;) {
    uint8_t m = in.u8("marker");
    if (m != 0xFF) throw JpegError("marker", "expected 0xFF");
    uint8_t id = in.u8("marker");
    while (id == 0xFF) id = in.u8("marker");
    if (id == 0xD9) throw JpegError("EOI", "no scan data before end of image");

    if (id == 0xDA) {  // SOS
      const int len = in.u16("SOS");
      (void)len;
      const int ns = in.u8("SOS");
      if (!sof_seen) throw JpegError("SOS", "scan before frame header");
      if (ns != ncomp) throw JpegError("SOS", "component count mismatch");
      for (int i = 0; i < ns; ++i) {
        const int cid = in.u8("SOS");
        const int tables = in.u8("SOS");
        for (auto& c : comps)
          if (c.id == cid) {
            c.td = tables >> 4;
            c.ta = tables & 0xF;
          }
      }
      in.u8("SOS");
      in.u8("SOS");
      in.u8("SOS");  // Ss/Se/AhAl
      break;
    }

    const int len = in.u16("segment");
    if (len < 2) throw JpegError("segment", "bad length");
    const size_t seg_end = in.pos + static_cast<size_t>(len - 2);
    switch (id) {
      case 0xDB:  // DQT
        while (in.pos < seg_end) {
          const int pq_tq = in.u8("DQT");
          const int tq = pq_tq & 0xF;
          if ((pq_tq >> 4) != 0) throw JpegError("DQT", "16-bit tables unsupported");
          if (tq > 3) throw JpegError("DQT", "bad table id");
          for (int i = 0; i < 64; ++i) qt[tq][kScan.natural[i]] = in.u8("DQT");
          qt_seen[tq] = true;
        }
        break;
      case 0xC4:  // DHT
        while (in.pos < seg_end) {
          const int tc_th = in.u8("DHT");
          const int tc = tc_th >> 4, th = tc_th & 0xF;
          if (tc > 1 || th > 3) throw JpegError("DHT", "bad table class/id");
          uint8_t bits[16];
          int total = 0;
          for (int i = 0; i < 16; ++i) {
            bits[i] = in.u8("DHT");
            total += bits[i];
          }
          if (total > 256) throw JpegError("DHT", "too many codes");
          uint8_t vals[256];
          for (int i = 0; i < total; ++i) vals[i] = in.u8("DHT");
          huff[tc][th].build(bits, vals, total);
          huff_seen[tc][th] = true;
        }
        break;
      case 0xC0: {  // SOF0
        if (in.u8("SOF0") != 8) throw JpegError("SOF0", "only 8-bit precision");
        height = in.u16("SOF0");
        width = in.u16("SOF0");
        ncomp = in.u8("SOF0");
        if (ncomp != 3) throw JpegError("SOF0", "expected 3 components");
        for (int i = 0; i < 3; ++i) {
          comps[i].id = in.u8("SOF0");
          const int s = in.u8("SOF0");
          comps[i].hs = s >> 4;
          comps[i].vs = s & 0xF;
          comps[i].tq = in.u8("SOF0");
        }
        const bool s420 = comps[0].hs == 2 && comps[0].vs == 2;
        const bool s444 = comps[0].hs == 1 && comps[0].vs == 1;
        if ((!s420 && !s444) || comps[1].hs != 1 || comps[1].vs != 1 ||
            comps[2].hs != 1 || comps[2].vs != 1)
          throw JpegError("SOF0", "unsupported sampling layout");
        sof_seen = true;
        break;
      }
      case 0xC2:
        throw JpegError("SOF2", "progressive mode unsupported");
      default:  // APPn/COM and friends
        in.pos = seg_end;
        break;
    }
    if (in.pos != seg_end && id == 0xDB) throw JpegError("DQT", "trailing bytes");
  }

  const bool subsample_420 = comps[0].hs == 2;
  for (int i = 0; i < 3; ++i)
    if (!qt_seen[comps[i].tq]) throw JpegError("DQT", "missing quantization table");
  for (int i = 0; i < 3; ++i)
    if (!huff_seen[0][comps[i].td] || !huff_seen[1][comps[i].ta])
      throw JpegError("DHT", "missing Huffman table");

  const int mcu = subsample_420 ? 16 : 8;
  const int64_t ph = (height + mcu - 1) / mcu * mcu;
  const int64_t pw = (width + mcu - 1) / mcu * mcu;
  const int64_t ch = subsample_420 ? ph / 2 : ph;
  const int64_t cw = subsample_420 ? pw / 2 : pw;

  Tensor yq({(ph / 8) * (pw / 8), 8, 8});
  Tensor uq({(ch / 8) * (cw / 8), 8, 8});
  Tensor vq({(ch / 8) * (cw / 8), 8, 8});

  ScanBitReader br{in};
  int pred[3] = {0, 0, 0};
  const int64_t ybx = pw / 8, cbx = cw / 8;
  if (subsample_420) {
    for (int64_t i = 0; i < ph / 16; ++i)
      for (int64_t j = 0; j < pw / 16; ++j) {
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx)
            decode_block(br, yq.data() + ((2 * i + dy) * ybx + 2 * j + dx) * 64,
                         pred[0], huff[0][comps[0].td], huff[1][comps[0].ta]);
        decode_block(br, uq.data() + (i * cbx + j) * 64, pred[1],
                     huff[0][comps[1].td], huff[1][comps[1].ta]);
        decode_block(br, vq.data() + (i * cbx + j) * 64, pred[2],
                     huff[0][comps[2].td], huff[1][comps[2].ta]);
      }
  } else {
    for (int64_t i = 0; i < ph / 8; ++i)
      for (int64_t j = 0; j < pw / 8; ++j) {
        decode_block(br, yq.data() + (i * ybx + j) * 64, pred[0],
                     huff[0][comps[0].td], huff[1][comps[0].ta]);
        decode_block(br, uq.data() + (i * cbx + j) * 64, pred[1],
                     huff[0][comps[1].td], huff[1][comps[1].ta]);
        decode_block(br, vq.data() + (i * cbx + j) * 64, pred[2],
                     huff[0][comps[2].td], huff[1][comps[2].ta]);
      }
  }

  QuantTableSet tables;
  for (int i = 0; i < 64; ++i) {
    tables.luma[i] = qt[comps[0].tq][i];
    tables.chroma[i] = qt[comps[1].tq][i];
  }

  Graph g;
  ProxyCoeffs coeffs;
  coeffs.y = g.leaf(std::move(yq));
  coeffs.u = g.leaf(std::move(uq));
  coeffs.v = g.leaf(std::move(vq));
  coeffs.luma_h = ph;
  coeffs.luma_w = pw;
  coeffs.chroma_h = ch;
  coeffs.chroma_w = cw;
  RgbVars rgb = proxy_inverse_transform(coeffs, tables, subsample_420);
  Var r = rgb.r, gg = rgb.g, b = rgb.b;
  if (ph != height || pw != width) {
    r = slice(slice(r, 0, 0, height), 1, 0, width);
    gg = slice(slice(gg, 0, 0, height), 1, 0, width);
    b = slice(slice(b, 0, 0, height), 1, 0, width);
  }
  return clamp01_image(r.value(), gg.value(), b.value());
}

RateRecord measure_bpp(const PlanarImage& rgb, int q, bool subsample_420,
                       std::string image_id) {
  const JpegBitstream bs = jpeg_encode(rgb, q, subsample_420);
  RateRecord rec;
  rec.total_bits = bs.total_bits();
  rec.entropy_bits = bs.entropy_bits();
  const double pixels = double(rgb.height() * rgb.width());
  rec.bpp = double(rec.total_bits) / pixels;
  rec.entropy_bpp = double(rec.entropy_bits) / pixels;
  rec.q = q;
  rec.image_id = std::move(image_id);
  return rec;
}

double image_mse(const PlanarImage& a, const PlanarImage& b) {
  double acc = 0;
  int64_t n = 0;
  const Tensor* pa[3] = {&a.p0, &a.p1, &a.p2};
  const Tensor* pb[3] = {&b.p0, &b.p1, &b.p2};
  for (int c = 0; c < 3; ++c) {
    if (!pa[c]->same_shape(*pb[c]))
      throw std::invalid_argument("image_mse: shape mismatch");
    for (int64_t i = 0; i < pa[c]->numel(); ++i) {
      const double d = (*pa[c])[i] - (*pb[c])[i];
      acc += d * d;
    }
    n += pa[c]->numel();
  }
  return acc / double(n);
}

double image_psnr(const PlanarImage& a, const PlanarImage& b) {
  const double mse = image_mse(a, b);
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace preedit
