#include "nqe/bitpack.hpp"

#include "nqe/tensor.hpp"

namespace nqe {

std::vector<std::uint8_t> pack_fields(std::span<const std::uint32_t> fields, int bits) {
  if (bits < 1 || bits > 32) throw ValidationError("pack_fields: bad field width " + std::to_string(bits));
  std::vector<std::uint8_t> out(packed_bytes(fields.size(), bits), 0);
  std::size_t pos = 0;
  for (std::uint32_t v : fields) {
    if (bits < 32 && (v >> bits) != 0)
      throw ValidationError("pack_fields: value " + std::to_string(v) + " exceeds " + std::to_string(bits) + " bits");
    for (int b = 0; b < bits; ++b, ++pos)
      if ((v >> b) & 1U) out[pos / 8] |= static_cast<std::uint8_t>(1U << (pos % 8));
  }
  return out;
}

std::vector<std::uint32_t> unpack_fields(std::span<const std::uint8_t> bytes, int bits, std::size_t count) {
  if (bits < 1 || bits > 32) throw ValidationError("unpack_fields: bad field width " + std::to_string(bits));
  if (bytes.size() < packed_bytes(count, bits))
    throw ValidationError("unpack_fields: truncated payload (" + std::to_string(bytes.size()) + " bytes for " +
                          std::to_string(count) + " fields of " + std::to_string(bits) + " bits)");
  std::vector<std::uint32_t> out(count, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i)
    for (int b = 0; b < bits; ++b, ++pos)
      if ((bytes[pos / 8] >> (pos % 8)) & 1U) out[i] |= 1U << b;
  return out;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace nqe
