#include "nqe/activations.hpp"

#include "nqe/bitpack.hpp"

namespace nqe {
namespace {

void require_same_shape(const RealTensor& a, const RealTensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ValidationError(std::string(what) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

}  // namespace

RealTensor msb_quantize(const RealTensor& x) {
  const RealTensor v = resolve_divisor(x);
  return RealTensor(v.shape(), v.array().unaryExpr([](double e) { return msb_quantize_value(e); }).eval());
}

RealTensor msb_backward(const RealTensor& x, const RealTensor& upstream) {
  require_same_shape(x, upstream, "msb_backward");
  return RealTensor(x.shape(), (upstream.array() * x.array().unaryExpr([](double e) { return msb_gradient(e); })).eval());
}

RealTensor hwmsb(const RealTensor& x) {
  const RealTensor v = resolve_divisor(x);
  RealTensor out(v.shape(), v.array().unaryExpr([](double e) { return double(hwmsb_code(e).code); }).eval());
  out.set_divisor(HwmsbCode::kDivisor);
  return out;
}

RealTensor hwmsb_backward(const RealTensor& x, const RealTensor& upstream) {
  require_same_shape(x, upstream, "hwmsb_backward");
  return RealTensor(x.shape(),
                    (upstream.array() * x.array().unaryExpr([](double e) { return hwmsb_gradient(e); })).eval());
}

std::vector<std::uint8_t> pack_hwmsb_codes(std::span<const std::uint8_t> codes) {
  std::vector<std::uint32_t> fields(codes.begin(), codes.end());
  return pack_fields(fields, 2);
}

std::vector<std::uint8_t> unpack_hwmsb_codes(std::span<const std::uint8_t> bytes, std::size_t count) {
  const auto fields = unpack_fields(bytes, 2, count);
  return {fields.begin(), fields.end()};
}

}  // namespace nqe
