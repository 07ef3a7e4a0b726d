#pragma once

// Symmetric linear weight quantization with histogram-equidistributed step
// calibration, plus the binary sign / Heaviside quantizers and their STE rules.

#include "nqe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace nqe {

/// Odd level count n, step Δ and the equivalent mean-absolute norm factor τ (Δ = τ·mean|W|).
struct QuantizerSpec {
  int n_levels = 3;
  double delta = 1.0;
  double tau = 0.7;

  int half_range() const { return (n_levels - 1) / 2; }
  void validate() const;
  bool operator==(const QuantizerSpec&) const = default;
};

/// n_levels + 1 points q_0 = min ... q_n = max splitting the weights into equal-mass bins.
struct QuantileSet {
  std::vector<double> points;
  int n_levels() const { return static_cast<int>(points.size()) - 1; }
};

/// Integer level k in [-(n-1)/2, (n-1)/2] of a single value; round half away from zero.
inline int quantize_code(double x, const QuantizerSpec& spec) {
  const double scaled = (spec.n_levels - 2) * x / (2.0 * spec.delta);
  const double k = std::round(scaled);
  const double h = spec.half_range();
  return static_cast<int>(std::clamp(k, -h, h));
}

/// q(x; Δ) = 2/(n-1) · Clip(round((n-2)x / 2Δ), (1-n)/2, (n-1)/2).
inline double quantize_value(double x, const QuantizerSpec& spec) {
  return 2.0 * quantize_code(x, spec) / (spec.n_levels - 1);
}

/// Expression form for Eigen arrays; no finiteness check.
template <typename Derived>
auto quantize_expr(const Eigen::ArrayBase<Derived>& x, const QuantizerSpec& spec) {
  return x.unaryExpr([spec](double v) { return quantize_value(v, spec); });
}

/// Elementwise quantization; rejects non-finite entries naming the offending index.
RealTensor linear_symmetric_quantize(const RealTensor& x, const QuantizerSpec& spec);

/// Nearest-rank quantile of a sorted sample at probability num/den (rank ceil(N·num/den)).
double nearest_rank(std::span<const double> sorted, long long num, long long den);

QuantileSet compute_quantiles(std::span<const double> weights, int n_levels);

/// Δ from the symmetric quantile approximation (n = 3 or 5). A non-positive estimate
/// falls back to max(|q_1|, |q_{n-1}|), then to `previous`, with a warning.
double estimate_delta(const QuantileSet& quantiles, std::optional<double> previous = std::nullopt);

/// τ = Δ / mean|W| (sample-count normalisation).
double mean_abs_norm_factor(std::span<const double> weights, double delta);

/// compute_quantiles -> estimate_delta -> mean_abs_norm_factor.
QuantizerSpec calibrate(std::span<const double> weights, int n_levels,
                        std::optional<double> previous_delta = std::nullopt);

inline double sign_value(double x) { return x >= 0.0 ? 1.0 : -1.0; }
inline double heaviside_value(double x) { return x > 0.0 ? 1.0 : 0.0; }

RealTensor sign_binarize(const RealTensor& x);
RealTensor heaviside(const RealTensor& x);

/// Clipped-identity straight-through gradient: upstream where |x| <= 1, else 0.
RealTensor ste_backward(const RealTensor& x, const RealTensor& upstream);

}  // namespace nqe
