#include "doctest.h"

#include "nqe/activations.hpp"

#include <cmath>
#include <random>

using namespace nqe;

namespace {

// Table rows of the 2-bit HWMSB mapping, written as plain comparisons.
int table_code(double x) {
  if (x < 0.125) return 0;
  if (x < 0.25) return 1;
  if (x < 0.5) return 2;
  return 3;
}

// 16-bit sign+magnitude fixed point: bit 15 is the sign, bits 14..0 the fraction.
double sign_magnitude(std::uint32_t word, int frac_bits) {
  const double mag = std::ldexp(static_cast<double>(word & ((1u << frac_bits) - 1)), -frac_bits);
  return (word >> frac_bits) & 1u ? -mag : mag;
}

}  // namespace

TEST_CASE("msb_real closed form") {
  CHECK(msb_real(0.125) == doctest::Approx(1.0 / 3.0));
  CHECK(8.0 * 0.125 / 3.0 == doctest::Approx(1.0 / 3.0));
  CHECK(msb_real(1.0) == 1.0);
  CHECK(msb_real(-0.5) == doctest::Approx(-1.0));
  CHECK(msb_real(0.05) == doctest::Approx(8.0 * 0.05 / 3.0));
}

TEST_CASE("msb_quantize values") {
  RealTensor x({4}, Eigen::ArrayXd{{0.3, -0.3, 0.1, 2.0}});
  const auto q = msb_quantize(x);
  CHECK(q[0] == doctest::Approx(2.0 / 3.0));
  CHECK(q[1] == doctest::Approx(-2.0 / 3.0));
  CHECK(q[2] == 0.0);
  CHECK(q[3] == 1.0);
}

TEST_CASE("msb_backward examples and finite differences") {
  RealTensor x({3}, Eigen::ArrayXd{{0.125, 0.01, 0.5}});
  RealTensor g({3}, 1.0);
  const auto d = msb_backward(x, g);
  CHECK(d[0] == doctest::Approx(1.0 / (0.375 * std::log(2.0))));
  CHECK(d[0] == doctest::Approx(3.8472).epsilon(1e-4));
  CHECK(d[1] == doctest::Approx(8.0 / 3.0));
  CHECK(d[2] == doctest::Approx(0.9618).epsilon(1e-4));
  // msb_real saturates at |x| = 1/2, so only the left difference sees the log slope there.
  const double h = 1e-7;
  CHECK(d[2] == doctest::Approx((msb_real(0.5) - msb_real(0.5 - h)) / h).epsilon(1e-4));
  CHECK(msb_gradient(1.5) == 0.0);
  CHECK(msb_gradient(-1.5) == 0.0);
  CHECK_THROWS_AS(msb_backward(x, RealTensor({2})), ValidationError);
}

TEST_CASE("msb gradient matches finite differences of msb_real where it is not saturated") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  const double h = 1e-6;
  int checked = 0;
  while (checked < 1000) {
    const double x = d(rng);
    const double a = std::abs(x);
    if (std::abs(a - 0.125) < 1e-4 || 0.5 - a < 1e-4) continue;
    const double fd = (msb_real(x + h) - msb_real(x - h)) / (2 * h);
    CHECK(msb_gradient(x) == doctest::Approx(fd).epsilon(1e-4));
    ++checked;
  }
}

TEST_CASE("msb gradient keeps the log slope in the saturated band (1/2, 1]") {
  for (double x : {0.6, 0.75, 1.0, -0.8}) {
    CHECK(msb_real(x) == doctest::Approx(x > 0 ? 1.0 : -1.0));
    CHECK(msb_gradient(x) == doctest::Approx(1.0 / (3.0 * std::abs(x) * std::log(2.0))));
  }
}

TEST_CASE("hwmsb table rows") {
  CHECK(hwmsb_code(0.6).code == 3);
  CHECK(hwmsb_code(0.2).code == 1);
  CHECK(hwmsb_code(-0.9).code == 0);
  CHECK(hwmsb_code(0.3).code == 2);
  // Bin edges belong to the upper bin.
  CHECK(hwmsb_code(0.125).code == 1);
  CHECK(hwmsb_code(0.25).code == 2);
  CHECK(hwmsb_code(0.5).code == 3);
  CHECK(hwmsb_code(std::nextafter(0.25, 0.0)).code == 1);

  RealTensor x({2}, Eigen::ArrayXd{{0.6, 0.2}});
  const auto y = hwmsb(x);
  CHECK(y.divisor() == 3);
  CHECK(resolve_divisor(y)[0] == 1.0);
  CHECK(resolve_divisor(y)[1] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("hwmsb reproduces the mapping table on all 8-bit sign+magnitude inputs") {
  for (std::uint32_t w = 0; w < 256; ++w) {
    const double x = sign_magnitude(w, 7);
    CHECK(hwmsb_code(x).code == table_code(x));
  }
}

TEST_CASE("hwmsb on its own alphabet") {
  CHECK(hwmsb_code(0.0).code == 0);
  CHECK(hwmsb_code(1.0).code == 3);
  // 1/3 and 2/3 are not fixed points: they fall in the [1/4, 1/2) and [1/2, 1) bins.
  CHECK(hwmsb_code(1.0 / 3.0).code == 2);
  CHECK(hwmsb_code(2.0 / 3.0).code == 3);
}

TEST_CASE("hwmsb is monotone") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  std::vector<double> xs(5000);
  for (auto& x : xs) x = d(rng);
  std::sort(xs.begin(), xs.end());
  for (size_t i = 1; i < xs.size(); ++i) CHECK(hwmsb_code(xs[i]).code >= hwmsb_code(xs[i - 1]).code);
}

TEST_CASE("hwmsb_integer matches the real path on every 16-bit accumulator") {
  for (int scale_exp : {-15, -9, -1, 0, 2}) {
    for (std::int64_t acc = -32768; acc < 32768; ++acc) {
      const double real = std::ldexp(static_cast<double>(acc), scale_exp);
      if (hwmsb_integer(acc, scale_exp, {}) != hwmsb_code(real)) {
        FAIL("mismatch at acc=" << acc << " exp=" << scale_exp);
      }
    }
  }
  CHECK(hwmsb_integer(0, 0, {}).code == 0);
}

TEST_CASE("hwmsb_integer with the HWMSB divisor matches the real path") {
  for (int scale_exp : {-12, -4, 0, 3})
    for (std::int64_t acc = -4096; acc < 65536; ++acc) {
      const double real = std::ldexp(static_cast<double>(acc), scale_exp) / 3.0;
      if (hwmsb_integer(acc, scale_exp, {}, 3) != hwmsb_code(real)) FAIL("mismatch at acc=" << acc << " exp=" << scale_exp);
    }
}

TEST_CASE("hwmsb_integer: 0.3 under different factorizations") {
  // 0.3 is not dyadic; use the 16-bit fixed-point approximations at several exponents.
  for (int e = -15; e <= -8; ++e) {
    const auto acc = static_cast<std::int64_t>(std::llround(std::ldexp(0.3, -e)));
    CHECK(hwmsb_integer(acc, e, {}).code == 2);
  }
}

TEST_CASE("reference position absorbs power-of-two prescaling") {
  for (int s = -8; s <= 8; ++s) {
    for (std::uint32_t w = 0; w < 65536; ++w) {
      const double x = sign_magnitude(w, 15);
      const auto mag = static_cast<std::int64_t>(w & 0x7fff);
      const std::int64_t acc = (w >> 15) ? -mag : mag;
      if (hwmsb_integer(acc, -15, ReferencePosition{}.shifted(s)) != hwmsb_code(std::ldexp(x, s))) {
        FAIL("mismatch at word=" << w << " s=" << s);
      }
    }
  }
}

TEST_CASE("hwmsb_backward gate") {
  RealTensor x({5}, Eigen::ArrayXd{{-0.5, -0.05, 0.05, 0.5, 1.5}});
  RealTensor g({5}, 1.0);
  const auto d = hwmsb_backward(x, g);
  CHECK(d[0] == 0.0);
  CHECK(d[1] == doctest::Approx(8.0 / 3.0));
  CHECK(d[2] == doctest::Approx(8.0 / 3.0));
  CHECK(d[3] == doctest::Approx(1.0 / (1.5 * std::log(2.0))));
  CHECK(d[4] == 0.0);
  const double h = 1e-7;
  for (double v : {-0.5, -0.05, 0.05, 0.3, 0.7, 1.5})
    CHECK(hwmsb_gradient(v) == doctest::Approx((hwmsb_surrogate(v + h) - hwmsb_surrogate(v - h)) / (2 * h)).epsilon(1e-5));
}

TEST_CASE("hwmsb codes pack four per byte") {
  const std::vector<std::uint8_t> codes{1, 2, 3, 0, 3};
  const auto bytes = pack_hwmsb_codes(codes);
  REQUIRE(bytes.size() == 2);
  CHECK(bytes[0] == (1 | 2 << 2 | 3 << 4));
  CHECK(bytes[1] == 3);
  CHECK(unpack_hwmsb_codes(bytes, codes.size()) == codes);
}
