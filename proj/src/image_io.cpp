#include "nqe/image_io.hpp"

#include "nqe/binary_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace nqe {
namespace {

void require_rgb(const RealTensor& image) {
  require_rank(image.shape(), 3, "image");
  if (image.dim(2) != 3) throw ValidationError("image must have 3 channels, got " + shape_string(image.shape()));
}

bool ends_with(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                    [](char a, char b) { return std::tolower(static_cast<unsigned char>(a)) == b; });
}

}  // namespace

int pixel_byte(double v) { return static_cast<int>(std::clamp(std::round(v * 256.0), 0.0, 255.0)); }

RealTensor read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ValidationError("cannot read PNG " + path + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ValidationError("cannot decode PNG " + path + ": " + img.message);
  }
  RealTensor out({static_cast<Index>(img.height), static_cast<Index>(img.width), 3});
  for (Index i = 0; i < out.size(); ++i) out[i] = pixel_value(buf[static_cast<size_t>(i)]);
  return out;
}

void write_png(const std::string& path, const RealTensor& image) {
  require_rgb(image);
  std::vector<png_byte> buf(static_cast<size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<png_byte>(pixel_byte(image[i]));
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path + ": " + img.message);
}

RealTensor read_ppm(const std::string& path) {
  const auto bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    return t;
  };
  if (token() != "P6") throw ValidationError(path + ": not a binary PPM (P6)");
  Index w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw ValidationError(path + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw ValidationError(path + ": only 8-bit PPM with positive size is supported");
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + static_cast<size_t>(w * h * 3)) throw ValidationError(path + ": truncated PPM raster");
  RealTensor out({h, w, 3});
  for (Index i = 0; i < out.size(); ++i) out[i] = pixel_value(bytes[pos + static_cast<size_t>(i)]);
  return out;
}

void write_ppm(const std::string& path, const RealTensor& image) {
  require_rgb(image);
  const std::string header = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (Index i = 0; i < image.size(); ++i) bytes.push_back(static_cast<std::uint8_t>(pixel_byte(image[i])));
  write_file(path, bytes);
}

RealTensor read_image(const std::string& path) {
  if (ends_with(path, ".png")) return read_png(path);
  if (ends_with(path, ".ppm")) return read_ppm(path);
  throw ValidationError("unsupported image format: " + path + " (use .png or .ppm)");
}

void write_image(const std::string& path, const RealTensor& image) {
  if (ends_with(path, ".png")) return write_png(path, image);
  if (ends_with(path, ".ppm")) return write_ppm(path, image);
  throw ValidationError("unsupported image format: " + path + " (use .png or .ppm)");
}

}  // namespace nqe
