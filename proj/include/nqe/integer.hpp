#pragma once

// Integer-only deployment of a BSN-folded network: small integer weight codes, mantissas
// with a layer-constant power-of-two exponent, shifts folded into exponents or HWMSB
// reference positions, and 2-bit / 1-bit activations.

#include "nqe/topology.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nqe {

enum class IntOp { Conv, Depthwise, Dense, Bsn, Sign, Heaviside, Hwmsb, MaxPool, OrPool, Flatten };
std::string to_string(IntOp op);
IntOp int_op_from_string(const std::string& s);

/// One step of the lowered program. Mantissa m at exponent e and divisor d stands for
/// m · 2^e / d; d is 3 only for HWMSB codes.
struct IntLayer {
  std::string name;
  IntOp op = IntOp::Flatten;

  // Conv, Depthwise, Dense
  Shape weight_shape;               // HWIO, [kh, kw, 1, C] or [in, out]
  std::vector<std::int8_t> codes;   // quinary -2..2, ternary -1..1, binary -1/+1
  int weight_bits = 0;              // naive storage width: 3, 2, 1
  int weight_exp = 0;               // -1 for quinary, else 0
  Index groups = 1;
  bool fixed = false;               // seeded random projection, regenerated instead of stored
  std::uint64_t fixed_seed = 0;
  std::vector<std::int32_t> bias;   // 16-bit fixed point at the accumulator exponent
  Index fan_in = 0;

  // Bsn: exponent bookkeeping only
  int shift_exp = 0;
  // Hwmsb
  ReferencePosition ref{};

  int in_exp = 0, out_exp = 0;
  int in_divisor = 1, out_divisor = 1;
  int acc_bits = 0;                 // accumulator width of a weighted op
  int out_bits = 0;                 // storage width of the output mantissas
  bool out_signed = true;
  std::int64_t out_bound = 0;       // largest |mantissa| the output can hold
};

/// A BSN that needs no operation after lowering, and why.
struct ElidedBsn {
  std::string name;
  int shift_exp = 0;
  BsnElision decision = BsnElision::Elide;
};

struct LowerOptions {
  bool absorb_bsn = true;  // fold BSN shifts in front of HWMSB into the reference position
  bool or_pooling = true;  // MP2 -> Heaviside becomes Heaviside -> OR pooling
};

struct IntegerModel {
  ModelConfig config;
  LowerOptions options;
  int input_exp = -8;
  std::vector<IntLayer> encoder, classifier;
  std::vector<ElidedBsn> elided;
};

/// Requires every BN folded to BSN and every encoder/classifier weight quantized.
IntegerModel lower(Network& net, const LowerOptions& options = {});

/// Operation counts of one int_forward call, by kind.
struct IntOpCounts {
  std::uint64_t mac = 0, add = 0, compare = 0, msb = 0, bit_or = 0;
  std::map<std::string, std::uint64_t> layer_macs;
};

/// Called after every op with its output mantissas.
using TraceSink = std::function<void(const IntLayer&, const IntTensor&)>;

class IntegerOverflow : public std::runtime_error {
 public:
  IntegerOverflow(const std::string& layer, std::int64_t value, int bits);
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

struct IntForwardResult {
  IntTensor code;    // [N, 4F] Heaviside bits
  IntTensor logits;  // [N, classes], empty when only encoding
};

/// Integer-only evaluation of 8-bit images [N, H, W, C].
IntForwardResult int_forward(const IntegerModel& im, const ByteTensor& images, bool classify = true,
                             IntOpCounts* counts = nullptr, const TraceSink& trace = {});

/// The real-valued view of 8-bit pixels, p · 2^-8.
RealTensor image_from_bytes(const ByteTensor& images);

struct WidthRow {
  std::string name;
  IntOp op;
  Index fan_in = 0;
  int acc_bits = 0, out_bits = 0, out_exp = 0;
};
std::vector<WidthRow> report_widths(const IntegerModel& im);
std::string format_widths(const std::vector<WidthRow>& rows);

/// Lowered-model file: packed codes (1/2/3 bits, LSB-first), exponents, reference
/// positions, widths and the elision table, sealed with a digest.
std::vector<std::uint8_t> serialize_lowered(const IntegerModel& im);
IntegerModel deserialize_lowered(std::span<const std::uint8_t> bytes);
void save_lowered(const IntegerModel& im, const std::string& path);
IntegerModel load_lowered(const std::string& path);

/// Activation trace: one record per op (name, exponent, divisor, width, shape, packed
/// two's-complement mantissas), sealed with a digest on finish().
class TraceWriter {
 public:
  TraceSink sink();
  std::vector<std::uint8_t> finish();

 private:
  std::vector<std::uint8_t> body_;
  std::uint32_t records_ = 0;
};

struct TraceRecord {
  std::string name;
  int exponent = 0, divisor = 1, bits = 0;
  IntTensor mantissas;
};
std::vector<TraceRecord> read_trace(std::span<const std::uint8_t> bytes);

}  // namespace nqe
