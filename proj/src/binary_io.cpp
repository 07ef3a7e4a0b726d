#include "nqe/binary_io.hpp"

#include "nqe/bitpack.hpp"

#include <fstream>
#include <iterator>
#include <stdexcept>

namespace nqe {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

void seal(ByteWriter& w) { w.put(fnv1a64(w.bytes())); }

std::span<const std::uint8_t> unseal(std::span<const std::uint8_t> bytes, const std::string& what) {
  if (bytes.size() < 8) throw ValidationError(what + ": truncated (no digest)");
  const auto body = bytes.first(bytes.size() - 8);
  ByteReader r(bytes.last(8), what);
  if (r.get<std::uint64_t>() != fnv1a64(body)) throw ValidationError(what + ": digest mismatch");
  return body;
}

}  // namespace nqe
