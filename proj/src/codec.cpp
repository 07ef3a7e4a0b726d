#include "nqe/codec.hpp"

#include "nqe/binary_io.hpp"
#include "nqe/bitpack.hpp"
#include "nqe/image_io.hpp"

#include <cmath>
#include <limits>

namespace nqe {

namespace {

constexpr std::uint8_t kMagic[4] = {'N', 'Q', 'E', 'B'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 4 + 2 + 2 + 2 + 2;

Bitstream empty_stream(const PatchGrid& g, Index F) {
  if (F < 1 || F > std::numeric_limits<std::uint16_t>::max()) throw ValidationError("bitstream: F out of range");
  if (g.rows > std::numeric_limits<std::uint16_t>::max() || g.cols > std::numeric_limits<std::uint16_t>::max())
    throw ValidationError("bitstream: patch grid too large");
  Bitstream bs;
  bs.height = static_cast<std::uint32_t>(g.rows * g.patch);
  bs.width = static_cast<std::uint32_t>(g.cols * g.patch);
  bs.patch = static_cast<std::uint16_t>(g.patch);
  bs.rows = static_cast<std::uint16_t>(g.rows);
  bs.cols = static_cast<std::uint16_t>(g.cols);
  bs.F = static_cast<std::uint16_t>(F);
  return bs;
}

void fill_codes(Bitstream& bs, const RealTensor& codes) {
  if (codes.rank() != 2 || codes.dim(0) != bs.patches() || codes.dim(1) != bs.code_bits())
    throw ValidationError("encoder produced " + shape_string(codes.shape()) + ", expected " +
                          std::to_string(bs.patches()) + " codes of " + std::to_string(bs.code_bits()) + " bits");
  bs.bits.resize(static_cast<std::size_t>(codes.size()));
  for (Index i = 0; i < codes.size(); ++i) bs.bits[static_cast<std::size_t>(i)] = codes[i] > 0.5 ? 1 : 0;
}

void require_image(const RealTensor& image) {
  if (image.rank() != 3) throw ValidationError("expected an [H, W, C] image, got " + shape_string(image.shape()));
}

}  // namespace

PatchGrid extract_patches(const RealTensor& image, Index patch) {
  require_image(image);
  if (patch < 1) throw ValidationError("patch size must be positive");
  const Index H = image.dim(0), W = image.dim(1);
  if (H < patch || W < patch || H % patch != 0 || W % patch != 0)
    throw ValidationError("image " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible into " +
                          std::to_string(patch) + "x" + std::to_string(patch) + " patches (no padding mode)");
  PatchGrid g;
  g.rows = H / patch;
  g.cols = W / patch;
  g.patch = patch;
  g.patches = untile_patches(image.reshaped({1, H, W, image.dim(2)}), g.rows, g.cols);
  return g;
}

RealTensor assemble_patches(const PatchGrid& g) {
  const RealTensor m = tile_patches(g.patches, g.rows, g.cols);
  return m.reshaped({m.dim(1), m.dim(2), m.dim(3)});
}

double Bitstream::bpp() const {
  return static_cast<double>(payload_bits()) / (static_cast<double>(height) * static_cast<double>(width));
}

std::span<const std::uint8_t> Bitstream::code(Index p) const {
  if (p < 0 || p >= patches()) throw ValidationError("bitstream: patch index out of range");
  return std::span(bits).subspan(static_cast<std::size_t>(p * code_bits()), static_cast<std::size_t>(code_bits()));
}

void Bitstream::validate() const {
  if (patch == 0 || F == 0 || rows == 0 || cols == 0) throw ValidationError("bitstream: empty header field");
  if (static_cast<std::uint64_t>(rows) * patch != height || static_cast<std::uint64_t>(cols) * patch != width)
    throw ValidationError("bitstream: grid " + std::to_string(rows) + "x" + std::to_string(cols) + " of " +
                          std::to_string(patch) + " does not cover " + std::to_string(height) + "x" +
                          std::to_string(width));
  if (bits.size() != static_cast<std::size_t>(patches() * code_bits()))
    throw ValidationError("bitstream: payload has " + std::to_string(bits.size()) + " bits, expected " +
                          std::to_string(patches() * code_bits()));
  for (auto b : bits)
    if (b > 1) throw ValidationError("bitstream: payload value other than 0/1");
}

std::vector<std::uint8_t> serialize_bitstream(const Bitstream& bs) {
  bs.validate();
  ByteWriter w;
  w.put_bytes(kMagic);
  w.put(Bitstream::kVersion);
  w.put(bs.height);
  w.put(bs.width);
  w.put(bs.patch);
  w.put(bs.rows);
  w.put(bs.cols);
  w.put(bs.F);
  const std::vector<std::uint32_t> fields(bs.bits.begin(), bs.bits.end());
  w.put_bytes(pack_fields(fields, 1));
  seal(w);
  return std::move(w.bytes());
}

Bitstream parse_bitstream(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "bitstream");
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw ValidationError("bitstream: bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != Bitstream::kVersion)
    throw ValidationError("bitstream: unsupported version " + std::to_string(version));
  Bitstream bs;
  bs.height = r.get<std::uint32_t>();
  bs.width = r.get<std::uint32_t>();
  bs.patch = r.get<std::uint16_t>();
  bs.rows = r.get<std::uint16_t>();
  bs.cols = r.get<std::uint16_t>();
  bs.F = r.get<std::uint16_t>();
  const auto count = static_cast<std::size_t>(bs.patches() * bs.code_bits());
  const std::size_t expected = kHeaderBytes + packed_bytes(count, 1) + 8;
  if (bytes.size() < expected)
    throw ValidationError("bitstream: truncated, " + std::to_string(bytes.size()) + " of " +
                          std::to_string(expected) + " bytes");
  if (bytes.size() > expected) throw ValidationError("bitstream: trailing bytes after the digest");
  unseal(bytes, "bitstream");
  const auto fields = unpack_fields(r.get_bytes(packed_bytes(count, 1)), 1, count);
  bs.bits.assign(fields.begin(), fields.end());
  bs.validate();
  return bs;
}

void save_bitstream(const std::string& path, const Bitstream& bs) { write_file(path, serialize_bitstream(bs)); }
Bitstream load_bitstream(const std::string& path) { return parse_bitstream(read_file(path)); }

Bitstream encode_image(Network& net, const RealTensor& image) {
  const auto g = extract_patches(image, net.config().input_size);
  if (image.dim(2) != net.config().in_channels) throw ValidationError("image channel count does not match the model");
  Bitstream bs = empty_stream(g, net.config().F);
  fill_codes(bs, resolve_divisor(net.encode(g.patches, eval_pass())));
  return bs;
}

Bitstream encode_image(const IntegerModel& im, const RealTensor& image) {
  const auto g = extract_patches(image, im.config.input_size);
  ByteTensor bytes(g.patches.shape());
  for (Index i = 0; i < bytes.size(); ++i) {
    const int b = pixel_byte(g.patches[i]);
    if (pixel_value(b) != g.patches[i]) throw ValidationError("integer encoder needs 8-bit pixels (p * 2^-8)");
    bytes[i] = static_cast<std::uint8_t>(b);
  }
  Bitstream bs = empty_stream(g, im.config.F);
  fill_codes(bs, int_forward(im, bytes, false).code.cast<double>());
  return bs;
}

RealTensor bitstream_codes(const Bitstream& bs) {
  bs.validate();
  RealTensor codes({bs.patches(), bs.code_bits()});
  for (Index i = 0; i < codes.size(); ++i) codes[i] = bs.bits[static_cast<std::size_t>(i)];
  return codes;
}

RealTensor decode_image(const Bitstream& bs, Network& net, std::optional<DecoderVariant> variant) {
  if (!net.has_decoder()) throw ValidationError("model has no decoder");
  Decoder& dec = net.decoder();
  if (bs.F != net.config().F)
    throw ValidationError("bitstream F=" + std::to_string(bs.F) + " but the decoder expects F=" +
                          std::to_string(net.config().F));
  if (bs.patch != dec.config().patch_size)
    throw ValidationError("bitstream patch " + std::to_string(bs.patch) + " but the decoder reconstructs " +
                          std::to_string(dec.config().patch_size));
  const DecoderVariant before = dec.variant();
  if (variant) dec.set_variant(*variant);
  RealTensor y;
  try {
    y = resolve_divisor(dec.forward(bitstream_codes(bs), bs.rows, bs.cols, eval_pass()));
  } catch (...) {
    dec.set_variant(before);
    throw;
  }
  dec.set_variant(before);
  y.array() = y.array().max(0.0).min(1.0);
  return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
}

RealTensor reconstruct_patches(Network& net, const RealTensor& patches) {
  if (!net.has_decoder()) throw ValidationError("model has no decoder");
  const RealTensor codes = resolve_divisor(net.encode(patches, eval_pass()));
  RealTensor y = resolve_divisor(net.decoder().forward(codes, 1, 1, eval_pass()));
  y.array() = y.array().max(0.0).min(1.0);
  return y;
}

RealTensor mean_patch(const RealTensor& patches) {
  require_rank(patches.shape(), 4, "patches");
  if (patches.dim(0) < 1) throw ValidationError("mean_patch: no patches");
  const Index per = patches.size() / patches.dim(0);
  RealTensor m({patches.dim(1), patches.dim(2), patches.dim(3)});
  m.array() = patches.array().reshaped(per, patches.dim(0)).rowwise().mean();
  return m;
}

RealTensor repeat_patch(const RealTensor& patch, Index n) {
  require_rank(patch.shape(), 3, "patch");
  RealTensor out({n, patch.dim(0), patch.dim(1), patch.dim(2)});
  out.array() = patch.array().replicate(n, 1);
  return out;
}

}  // namespace nqe
