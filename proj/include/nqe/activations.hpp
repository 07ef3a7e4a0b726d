#pragma once

// MSB dynamic-range-compressing quantization, its half-wave 2-bit variant (HWMSB),
// their STE gradients, and the integer form with a movable reference position.

#include "nqe/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace nqe {

/// 2-bit HWMSB output; the represented value is exactly code/3.
struct HwmsbCode {
  std::uint8_t code = 0;

  static constexpr int kDivisor = 3;
  double value() const { return code / 3.0; }
  bool operator==(const HwmsbCode&) const = default;
};

/// Exponent offset locating the first significant bit. Pre-multiplying the input by
/// 2^s is the same as moving the bias to bias + s.
struct ReferencePosition {
  int bias = 4;

  ReferencePosition shifted(int s) const { return {bias + s}; }
  bool operator==(const ReferencePosition&) const = default;
};

inline constexpr double kMsbLowEdge = 0.125;

/// f(x) = sign(x)·min((4 + log2|x|)/3, 1) for |x| >= 1/8, else 8x/3.
inline double msb_real(double x) {
  const double a = std::abs(x);
  if (a < kMsbLowEdge) return 8.0 * x / 3.0;
  return std::copysign(std::min((4.0 + std::log2(a)) / 3.0, 1.0), x);
}

/// Integer level min(floor(4 + log2|x|), 3) for |x| >= 1/8, else 0. Uses the exact
/// binary exponent so bin edges at powers of two never misround.
inline int msb_level(double x) {
  const double a = std::abs(x);
  if (!(a >= kMsbLowEdge)) return 0;
  return std::min(4 + std::ilogb(a), 3);
}

inline double msb_quantize_value(double x) {
  const int level = msb_level(x);
  return level == 0 ? 0.0 : std::copysign(level / 3.0, x);
}

RealTensor msb_quantize(const RealTensor& x);

/// Straight-through gradient of msb_quantize, 0 beyond |x| > 1.
inline double msb_gradient(double x) {
  const double a = std::abs(x);
  if (a < kMsbLowEdge) return 8.0 / 3.0;
  if (a <= 1.0) return 1.0 / (3.0 * a * std::numbers::ln2);
  return 0.0;
}

RealTensor msb_backward(const RealTensor& x, const RealTensor& upstream);

inline HwmsbCode hwmsb_code(double x) { return {static_cast<std::uint8_t>(x > 0.0 ? msb_level(x) : 0)}; }

/// HWMSB over a tensor. The result holds the codes 0..3 with divisor() == 3, so the
/// represented values {0, 1/3, 2/3, 1} stay exact; use resolve_divisor for reals.
RealTensor hwmsb(const RealTensor& x);

/// Gradient gate of HWMSB: 8/3 for |x| < 1/8, the MSB slope on [1/8, 1], else 0.
inline double hwmsb_gradient(double x) {
  if (std::abs(x) < kMsbLowEdge) return 8.0 / 3.0;
  if (x > 0.0 && x <= 1.0) return 1.0 / (3.0 * x * std::numbers::ln2);
  return 0.0;
}

RealTensor hwmsb_backward(const RealTensor& x, const RealTensor& upstream);

/// Smooth function whose derivative is hwmsb_gradient almost everywhere; stands in for
/// HWMSB when checking the backward pass against finite differences.
inline double hwmsb_surrogate(double x) {
  if (x <= -kMsbLowEdge) return -1.0 / 3.0;
  if (x < kMsbLowEdge) return 8.0 * x / 3.0;
  if (x <= 1.0) return (4.0 + std::log2(x)) / 3.0;
  return 1.0;
}

/// HWMSB of the real value (acc / divisor) · 2^(scale_exp + ref.bias - 4), computed from
/// leading-one positions and one integer comparison. divisor is 1, or 3 for a
/// tensor that still carries HWMSB codes.
inline HwmsbCode hwmsb_integer(std::int64_t acc, int scale_exp, ReferencePosition ref, std::int64_t divisor = 1) {
  if (acc <= 0) return {0};
  const auto ua = static_cast<std::uint64_t>(acc), ud = static_cast<std::uint64_t>(divisor);
  // floor(log2(acc / divisor)) is the difference of bit widths, or one less.
  int m = static_cast<int>(std::bit_width(ua)) - static_cast<int>(std::bit_width(ud));
  if ((m >= 0 ? (ua >> m) : (ua << -m)) < ud) --m;
  return {static_cast<std::uint8_t>(std::clamp(m + scale_exp + ref.bias, 0, 3))};
}

/// Four 2-bit codes per byte, first code in the low bits.
std::vector<std::uint8_t> pack_hwmsb_codes(std::span<const std::uint8_t> codes);
std::vector<std::uint8_t> unpack_hwmsb_codes(std::span<const std::uint8_t> bytes, std::size_t count);

}  // namespace nqe
