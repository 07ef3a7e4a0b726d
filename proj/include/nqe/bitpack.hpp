#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace nqe {

/// Packs unsigned fields of `bits` width LSB-first: field i occupies bit positions
/// [i*bits, (i+1)*bits) of the little-endian byte stream.
std::vector<std::uint8_t> pack_fields(std::span<const std::uint32_t> fields, int bits);

/// Inverse of pack_fields; throws ValidationError if `bytes` is too short.
std::vector<std::uint32_t> unpack_fields(std::span<const std::uint8_t> bytes, int bits, std::size_t count);

inline std::size_t packed_bytes(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

/// 64-bit FNV-1a, used as the integrity digest of the binary file formats.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace nqe
