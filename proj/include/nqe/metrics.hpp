#pragma once

// Image quality metrics on [H, W, C] tensors with values in [0, 1].

#include "nqe/tensor.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace nqe {

/// 10·log10(1 / MSE); +inf for identical images.
double psnr(const RealTensor& a, const RealTensor& b);

/// Structured outputs cannot carry +inf; identical images report the largest double.
inline double psnr_finite(double db) { return std::isinf(db) ? std::numeric_limits<double>::max() : db; }

struct MsSsimOptions {
  int filter_size = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  std::array<double, 5> weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
};

/// Five-scale MS-SSIM: Gaussian-weighted SSIM over valid windows, 2x2 average
/// downsampling (odd sizes padded by repeating the edge), contrast-structure terms at
/// the first four scales and full SSIM at the last, computed per channel and averaged.
/// The window shrinks to the image size at coarse scales of small images.
double ms_ssim(const RealTensor& a, const RealTensor& b, const MsSsimOptions& opt = {});

}  // namespace nqe
