#include "nqe/datasets.hpp"

#include "nqe/binary_io.hpp"
#include "nqe/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

namespace nqe {
namespace {

double quantize8(double v) { return pixel_value(pixel_byte(std::clamp(v, 0.0, 1.0))); }

}  // namespace

LabeledImages synthetic_shapes(Index n, Index size, Index classes, std::uint64_t seed) {
  if (n < 1 || size < 2 || classes < 2) throw ValidationError("synthetic_shapes: need n >= 1, size >= 2, classes >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  LabeledImages d;
  d.classes = classes;
  d.images = RealTensor({n, size, size, 3});
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    d.labels.push_back(label);
    const double angle = std::numbers::pi * label / static_cast<double>(classes);
    const double cycles = 1.5 + 1.5 * u(rng);
    const double freq = 2.0 * std::numbers::pi * cycles / static_cast<double>(size);
    const double phase = 2.0 * std::numbers::pi * u(rng);
    double lo[3], hi[3];
    for (int c = 0; c < 3; ++c) {
      lo[c] = 0.35 * u(rng);
      hi[c] = 0.65 + 0.35 * u(rng);
    }
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const double t = 0.5 + 0.5 * std::sin(freq * (x * std::cos(angle) + y * std::sin(angle)) + phase);
        for (Index c = 0; c < 3; ++c)
          d.images.at(i, y, x, c) = quantize8(lo[c] + (hi[c] - lo[c]) * t + noise(rng));
      }
  }
  return d;
}

RealTensor synthetic_frames(Index n, Index height, Index width, std::uint64_t seed) {
  if (n < 1 || height < 1 || width < 1) throw ValidationError("synthetic_frames: empty request");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RealTensor out({n, height, width, 3});
  std::vector<double> px(3);
  for (Index i = 0; i < n; ++i) {
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
      c0[c] = u(rng);
      c1[c] = u(rng);
    }
    const double gx = u(rng) - 0.5, gy = u(rng) - 0.5;
    struct Shape2 {
      bool ellipse;
      double cx, cy, rx, ry, soft, color[3];
    };
    std::vector<Shape2> shapes(2 + static_cast<size_t>(u(rng) * 3));
    for (auto& s : shapes) {
      s.ellipse = u(rng) < 0.5;
      s.cx = u(rng) * width;
      s.cy = u(rng) * height;
      s.rx = (0.1 + 0.3 * u(rng)) * width;
      s.ry = (0.1 + 0.3 * u(rng)) * height;
      s.soft = 0.5 + 2.0 * u(rng);
      for (double& c : s.color) c = u(rng);
    }
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x) {
        const double t = std::clamp(0.5 + gx * (2.0 * x / width - 1.0) + gy * (2.0 * y / height - 1.0), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) px[static_cast<size_t>(c)] = c0[c] + (c1[c] - c0[c]) * t;
        for (const auto& s : shapes) {
          const double dx = (x + 0.5 - s.cx) / s.rx, dy = (y + 0.5 - s.cy) / s.ry;
          // Signed distance in pixels, approximately, to the shape boundary.
          const double dist = s.ellipse ? (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(s.rx, s.ry)
                                        : std::max(std::abs(dx) - 1.0, std::abs(dy) - 1.0) * std::min(s.rx, s.ry);
          const double a = 1.0 / (1.0 + std::exp(dist / s.soft));
          for (int c = 0; c < 3; ++c) px[static_cast<size_t>(c)] = (1.0 - a) * px[static_cast<size_t>(c)] + a * s.color[c];
        }
        for (Index c = 0; c < 3; ++c) out.at(i, y, x, c) = quantize8(px[static_cast<size_t>(c)]);
      }
  }
  return out;
}

LabeledImages load_cifar10(const std::string& dir, bool train, Index limit) {
  std::vector<std::string> files;
  if (train)
    for (int b = 1; b <= 5; ++b) files.push_back(dir + "/data_batch_" + std::to_string(b) + ".bin");
  else
    files.push_back(dir + "/test_batch.bin");
  constexpr Index kRecord = 1 + 32 * 32 * 3;
  std::vector<std::vector<std::uint8_t>> blobs;
  Index total = 0;
  for (const auto& f : files) {
    blobs.push_back(read_file(f));
    if (static_cast<Index>(blobs.back().size()) % kRecord != 0) throw ValidationError(f + ": not a CIFAR-10 batch");
    total += static_cast<Index>(blobs.back().size()) / kRecord;
    if (limit > 0 && total >= limit) break;
  }
  if (limit > 0) total = std::min(total, limit);
  LabeledImages d;
  d.classes = 10;
  d.images = RealTensor({total, 32, 32, 3});
  Index i = 0;
  for (const auto& blob : blobs)
    for (Index r = 0; r * kRecord < static_cast<Index>(blob.size()) && i < total; ++r, ++i) {
      const std::uint8_t* rec = blob.data() + r * kRecord;
      if (rec[0] > 9) throw ValidationError("CIFAR-10 label out of range");
      d.labels.push_back(rec[0]);
      // Stored channel-major: 1024 red, 1024 green, 1024 blue.
      for (Index c = 0; c < 3; ++c)
        for (Index p = 0; p < 1024; ++p) d.images.at(i, p / 32, p % 32, c) = pixel_value(rec[1 + c * 1024 + p]);
    }
  return d;
}

RealTensor load_png_crops(const std::string& dir, Index crop, Index per_image, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir);
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png") paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw ValidationError("no PNG files in " + dir);
  std::mt19937_64 rng(seed);
  RealTensor out({static_cast<Index>(paths.size()) * per_image, crop, crop, 3});
  Index k = 0;
  for (const auto& p : paths) {
    const RealTensor img = read_png(p);
    if (img.dim(0) < crop || img.dim(1) < crop) throw ValidationError(p + " is smaller than the crop size");
    for (Index j = 0; j < per_image; ++j, ++k) {
      const Index y0 = std::uniform_int_distribution<Index>(0, img.dim(0) - crop)(rng);
      const Index x0 = std::uniform_int_distribution<Index>(0, img.dim(1) - crop)(rng);
      for (Index y = 0; y < crop; ++y)
        for (Index x = 0; x < crop; ++x)
          for (Index c = 0; c < 3; ++c) out.at(k, y, x, c) = img[((y0 + y) * img.dim(1) + x0 + x) * 3 + c];
    }
  }
  return out;
}

RealTensor gather(const RealTensor& x, std::span<const Index> idx) {
  if (x.rank() < 1) throw ValidationError("gather on a scalar tensor");
  Shape s = x.shape();
  const Index row = x.size() / std::max<Index>(s[0], 1);
  s[0] = static_cast<Index>(idx.size());
  RealTensor out(s);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.dim(0)) throw ValidationError("gather index out of range");
    out.array().segment(static_cast<Index>(i) * row, row) = x.array().segment(idx[i] * row, row);
  }
  out.set_divisor(x.divisor());
  return out;
}

}  // namespace nqe
