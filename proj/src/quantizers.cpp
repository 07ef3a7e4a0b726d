#include "nqe/quantizers.hpp"

#include "nqe/logging.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace nqe {

void QuantizerSpec::validate() const {
  if (n_levels < 3 || n_levels % 2 == 0)
    throw ValidationError("quantizer level count must be odd and >= 3, got " + std::to_string(n_levels));
  if (!(delta > 0.0) || !std::isfinite(delta))
    throw ValidationError("quantizer step must be positive, got " + std::to_string(delta));
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw ValidationError("quantizer norm factor must be positive, got " + std::to_string(tau));
}

RealTensor linear_symmetric_quantize(const RealTensor& x, const QuantizerSpec& spec) {
  spec.validate();
  for (Index i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]))
      throw ValidationError("non-finite value " + std::to_string(x[i]) + " at index " + std::to_string(i));
  return RealTensor(x.shape(), quantize_expr(x.array(), spec).eval());
}

double nearest_rank(std::span<const double> sorted, long long num, long long den) {
  if (sorted.empty()) throw ValidationError("quantile of an empty sample");
  const auto n = static_cast<long long>(sorted.size());
  long long rank = (num * n + den - 1) / den;
  rank = std::clamp<long long>(rank, 1, n);
  return sorted[static_cast<size_t>(rank - 1)];
}

QuantileSet compute_quantiles(std::span<const double> weights, int n_levels) {
  if (weights.empty()) throw ValidationError("compute_quantiles: empty weight tensor");
  if (n_levels < 3 || n_levels % 2 == 0)
    throw ValidationError("compute_quantiles: level count must be odd and >= 3");
  std::vector<double> sorted(weights.begin(), weights.end());
  std::sort(sorted.begin(), sorted.end());
  QuantileSet q;
  q.points.reserve(static_cast<size_t>(n_levels) + 1);
  q.points.push_back(sorted.front());
  for (int k = 1; k <= n_levels; ++k) q.points.push_back(nearest_rank(sorted, k, n_levels));
  return q;
}

double estimate_delta(const QuantileSet& quantiles, std::optional<double> previous) {
  const auto& q = quantiles.points;
  const int n = quantiles.n_levels();
  double delta = 0.0;
  if (n == 3) {
    delta = (std::abs(q[1]) + q[2]) / 2.0;
  } else if (n == 5) {
    delta = 3.0 * (std::abs(q[1]) + std::abs(q[2]) + q[3] + q[4]) / 8.0;
  } else {
    throw ValidationError("estimate_delta supports 3 or 5 levels, got " + std::to_string(n));
  }
  if (delta > 0.0 && std::isfinite(delta)) return delta;

  const double fallback = std::max(std::abs(q[1]), std::abs(q[static_cast<size_t>(n - 1)]));
  std::ostringstream msg;
  msg << "degenerate quantile step " << delta;
  if (fallback > 0.0 && std::isfinite(fallback)) {
    msg << "; falling back to max(|q1|, |q" << n - 1 << "|) = " << fallback;
    warn(msg.str());
    return fallback;
  }
  if (previous && *previous > 0.0) {
    msg << "; keeping previous step " << *previous;
    warn(msg.str());
    return *previous;
  }
  throw ValidationError(msg.str() + " and no previous step to keep");
}

double mean_abs_norm_factor(std::span<const double> weights, double delta) {
  double sum = 0.0;
  for (double w : weights) sum += std::abs(w);
  if (!(sum > 0.0)) throw ValidationError("mean_abs_norm_factor: all-zero weights");
  return static_cast<double>(weights.size()) * delta / sum;
}

QuantizerSpec calibrate(std::span<const double> weights, int n_levels, std::optional<double> previous_delta) {
  QuantizerSpec spec;
  spec.n_levels = n_levels;
  spec.delta = estimate_delta(compute_quantiles(weights, n_levels), previous_delta);
  double sum = 0.0;
  for (double w : weights) sum += std::abs(w);
  // An all-zero layer keeps Δ; τ is then undefined, report the previous convention value.
  spec.tau = sum > 0.0 ? mean_abs_norm_factor(weights, spec.delta) : 0.7;
  return spec;
}

RealTensor sign_binarize(const RealTensor& x) {
  return RealTensor(x.shape(), x.array().unaryExpr([](double v) { return sign_value(v); }).eval());
}

RealTensor heaviside(const RealTensor& x) {
  return RealTensor(x.shape(), x.array().unaryExpr([](double v) { return heaviside_value(v); }).eval());
}

RealTensor ste_backward(const RealTensor& x, const RealTensor& upstream) {
  if (x.shape() != upstream.shape())
    throw ValidationError("ste_backward shape mismatch: " + shape_string(x.shape()) + " vs " +
                          shape_string(upstream.shape()));
  return RealTensor(x.shape(), (x.array().abs() <= 1.0).select(upstream.array(), 0.0).eval());
}

}  // namespace nqe
