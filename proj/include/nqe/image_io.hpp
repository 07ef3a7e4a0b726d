#pragma once

// 8-bit RGB images as [H, W, 3] tensors of p · 2^-8. PNG through libpng, binary PPM (P6)
// directly.

#include "nqe/tensor.hpp"

#include <string>

namespace nqe {

/// Pixel byte -> [0, 1) value.
inline double pixel_value(int p) { return std::ldexp(static_cast<double>(p), -8); }
/// Inverse of pixel_value with clamping; 1.0 saturates at 255.
int pixel_byte(double v);

RealTensor read_png(const std::string& path);
void write_png(const std::string& path, const RealTensor& image);
RealTensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RealTensor& image);
/// Dispatches on the extension (.png, .ppm).
RealTensor read_image(const std::string& path);
void write_image(const std::string& path, const RealTensor& image);

}  // namespace nqe
