#include "doctest.h"

#include "nqe/metrics.hpp"

#include <cmath>

using namespace nqe;

namespace {

// The pair also fed to tf.image.ssim_multiscale(a, b, max_val=1) for the oracle values.
std::pair<RealTensor, RealTensor> wave_pair(Index h, Index w) {
  RealTensor a({h, w, 3}), b({h, w, 3});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) {
        const Index i = (y * w + x) * 3 + c;
        a[i] = (std::sin(0.11 * x + 0.07 * y + c) + 1) / 2;
        b[i] = std::clamp(a[i] + 0.08 * std::cos(0.3 * x - 0.21 * y + 0.5 * c), 0.0, 1.0);
      }
  return {a, b};
}

}  // namespace

TEST_CASE("psnr") {
  RealTensor a({4, 4, 3}, 0.5), b({4, 4, 3}, 0.6);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(std::isinf(psnr(a, a)));
  CHECK(psnr_finite(psnr(a, a)) == std::numeric_limits<double>::max());
  CHECK(psnr_finite(12.5) == 12.5);
  CHECK_THROWS_AS(psnr(a, RealTensor({4, 4, 1})), ValidationError);
}

TEST_CASE("ms-ssim: identity, symmetry and bounds") {
  auto [a, b] = wave_pair(176, 192);
  CHECK(ms_ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ms_ssim(a, b) == doctest::Approx(ms_ssim(b, a)).epsilon(1e-12));
  CHECK(ms_ssim(a, b) < 1.0);
  CHECK(ms_ssim(a, b) > 0.0);
  CHECK_THROWS_AS(ms_ssim(a, RealTensor({176, 191, 3})), ValidationError);
  CHECK_THROWS_AS(ms_ssim(RealTensor({8, 8, 3}), RealTensor({8, 8, 3})), ValidationError);
}

TEST_CASE("ms-ssim matches the TensorFlow reference") {
  // TensorFlow computes in float32, hence the tolerance.
  auto [a, b] = wave_pair(176, 192);
  CHECK(ms_ssim(a, b) == doctest::Approx(0.963040828704834).epsilon(1e-5));
  auto [c, d] = wave_pair(171, 165);
  CHECK(ms_ssim(c, d) == doctest::Approx(0.963050365447998).epsilon(1e-5));
}

TEST_CASE("ms-ssim of small images uses a shrunken window") {
  auto [a, b] = wave_pair(32, 32);
  const double v = ms_ssim(a, b);
  CHECK(std::isfinite(v));
  CHECK(v > 0.0);
  CHECK(v < 1.0);
}
