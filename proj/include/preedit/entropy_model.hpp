#pragma once

#include <functional>
#include <random>
#include <string>

#include "preedit/autodiff.hpp"
#include "preedit/jpeg_codec.hpp"
#include "preedit/params.hpp"

// Learned bit-rate predictor: four univariate monotone-CDF density models
// over the quantized DCT coefficient groups {Y-DC-diff, UV-DC-diff, Y-AC,
// UV-AC}; estimated bits are summed negative log2 bin masses.

namespace preedit {

// binds a ParamStore's tensors to graph leaves once, index-aligned, so the
// optimizer can read gradients back after backward()
struct BoundParams {
  Graph* g = nullptr;
  const ParamStore* store = nullptr;
  std::vector<Var> vars;
  Var operator[](const std::string& name) const {
    const int i = store->index(name);
    if (i < 0) throw std::out_of_range("bound params: no tensor named " + name);
    return vars[static_cast<size_t>(i)];
  }
};
BoundParams bind_params(Graph& g, const ParamStore& store);

constexpr const char* kGroupNames[4] = {"ydc", "uvdc", "yac", "uvac"};

struct CoefficientGroups {
  Var ydc, uvdc, yac, uvac;  // flat; DC groups hold raster DPCM differences
};
struct CoefficientGroupsT {
  Tensor ydc, uvdc, yac, uvac;
  int64_t total() const {
    return ydc.numel() + uvdc.numel() + yac.numel() + uvac.numel();
  }
};

// DC replaced by raster-order DPCM differences (initial predictor 0, per
// channel); AC taken as-is. Inputs are (NB,8,8) quantized-domain blocks.
CoefficientGroups group_coefficients(Var y, Var u, Var v);
CoefficientGroupsT group_coefficients(const QuantizedChannels& qc);

// 0 = Y-DC-diff, 1 = UV-DC-diff, 2 = Y-AC, 3 = UV-AC
void add_cdf_model(ParamStore& ps, const std::string& prefix, std::mt19937_64& rng);
void init_entropy_params(ParamStore& ps, uint64_t seed);

// monotone CDF c(x) for x (N,1); nonnegative weights by squaring, gate
// layers y + tanh(a) * tanh(y), final sigmoid
Var cdf_eval(const BoundParams& bp, const std::string& prefix, Var x);
// c(v+1/2) - c(v-1/2), floor-clamped at 1e-9
Var bin_probability(const BoundParams& bp, const std::string& prefix, Var v);

// total estimated bits over every coefficient; uniform (-1/2,1/2) noise on
// the values when `noise` is set (training relaxation)
Var estimate_bits(const BoundParams& bp, const CoefficientGroups& groups,
                  bool noise, std::mt19937_64* rng);

// forward-only conveniences
double estimate_bits_value(const ParamStore& entropy, const CoefficientGroupsT& groups);
double estimated_bpp(const ParamStore& entropy, const PlanarImage& rgb, int q,
                     bool subsample_420);

struct FitMetrics {
  std::vector<double> loss;  // per-step mean bits/symbol
};

// stochastic fit by Adam over a caller-supplied sample stream
FitMetrics fit_entropy_model(
    ParamStore& entropy, int steps, double lr, uint64_t seed,
    const std::function<CoefficientGroupsT(std::mt19937_64&)>& sample);

}  // namespace preedit
