#pragma once

// Patch-based compression: tiling, the NQEB bitstream, encode through the real or the
// integer encoder, PURENET-family decode.

#include "nqe/integer.hpp"
#include "nqe/topology.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nqe {

/// Non-overlapping P x P tiles of one image in row-major order.
struct PatchGrid {
  Index rows = 0, cols = 0, patch = 0;
  RealTensor patches;  // [rows*cols, P, P, C]
};

/// image [H, W, C] with H and W multiples of `patch`; anything else is a ValidationError.
PatchGrid extract_patches(const RealTensor& image, Index patch = 32);
RealTensor assemble_patches(const PatchGrid& grid);

/// Header plus rows·cols·4F code bits, one byte per bit in memory, patch-major.
struct Bitstream {
  static constexpr std::uint16_t kVersion = 1;

  std::uint32_t height = 0, width = 0;
  std::uint16_t patch = 32;
  std::uint16_t rows = 0, cols = 0;
  std::uint16_t F = 64;
  std::vector<std::uint8_t> bits;

  Index code_bits() const { return 4 * static_cast<Index>(F); }
  Index patches() const { return static_cast<Index>(rows) * cols; }
  std::size_t payload_bits() const { return bits.size(); }
  /// Payload bits per pixel, header excluded.
  double bpp() const;
  std::span<const std::uint8_t> code(Index p) const;
  /// Field consistency: grid covers the frame, payload is exactly rows·cols·4F bits of 0/1.
  void validate() const;
  bool operator==(const Bitstream&) const = default;
};

/// "NQEB", version, H, W, patch, rows, cols, F, payload packed LSB-first, FNV-1a seal.
std::vector<std::uint8_t> serialize_bitstream(const Bitstream& bs);
Bitstream parse_bitstream(std::span<const std::uint8_t> bytes);
void save_bitstream(const std::string& path, const Bitstream& bs);
Bitstream load_bitstream(const std::string& path);

/// Evaluation-phase encoder, one patch at a time in effect (the encoder has no
/// cross-sample state in evaluation).
Bitstream encode_image(Network& net, const RealTensor& image);
/// Integer path. Pixels must be exact multiples of 2^-8.
Bitstream encode_image(const IntegerModel& im, const RealTensor& image);

/// Codes of the stream as a [rows·cols, 4F] real tensor.
RealTensor bitstream_codes(const Bitstream& bs);

/// [H, W, 3] reconstruction clamped to [0, 1]. `variant` temporarily overrides the
/// decoder's (PURENET <-> PI-PURENET share weights; BBD cannot be switched to).
RealTensor decode_image(const Bitstream& bs, Network& net, std::optional<DecoderVariant> variant = {});

/// Patch batch [N, P, P, 3] through encoder and decoder with each patch on its own
/// 1x1 grid, clamped to [0, 1].
RealTensor reconstruct_patches(Network& net, const RealTensor& patches);

/// The average training patch [P, P, C]: the zero-information reconstruction.
RealTensor mean_patch(const RealTensor& patches);
/// `n` copies of `patch` as [n, P, P, C].
RealTensor repeat_patch(const RealTensor& patch, Index n);

}  // namespace nqe
