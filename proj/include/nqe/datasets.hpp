#pragma once

// Desk-scale synthetic data plus loaders for CIFAR-10 (binary version) and folders of
// PNG frames such as DIV2K.

#include "nqe/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace nqe {

struct LabeledImages {
  RealTensor images;  // [N, H, W, C], pixel values p * 2^-8
  std::vector<int> labels;
  Index classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
};

/// Oriented gratings: class k has stripes at angle k·pi/classes with random frequency,
/// phase and colours, plus pixel noise. Balanced labels, quantized to 8 bits.
LabeledImages synthetic_shapes(Index n, Index size, Index classes, std::uint64_t seed);

/// Smooth frames: a two-colour gradient background with a few soft-edged ellipses and
/// rectangles. [N, H, W, 3], quantized to 8 bits.
RealTensor synthetic_frames(Index n, Index height, Index width, std::uint64_t seed);

/// CIFAR-10 binary batches from `dir` (data_batch_1..5.bin or test_batch.bin).
/// `limit` > 0 keeps the first `limit` images.
LabeledImages load_cifar10(const std::string& dir, bool train, Index limit = 0);

/// Every PNG in `dir` (sorted by name) cut into `per_image` random crop x crop tiles.
RealTensor load_png_crops(const std::string& dir, Index crop, Index per_image, std::uint64_t seed);

/// Rows `idx` of a batch-major tensor.
RealTensor gather(const RealTensor& x, std::span<const Index> idx);

}  // namespace nqe
