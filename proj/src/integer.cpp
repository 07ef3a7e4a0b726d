#include "nqe/integer.hpp"

#include "nqe/binary_io.hpp"
#include "nqe/bitpack.hpp"
#include "nqe/image_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>

namespace nqe {
namespace {

constexpr std::uint32_t kLoweredMagic = 0x4c45514e;  // "NQEL"
constexpr std::uint32_t kTraceMagic = 0x5445514e;    // "NQET"
constexpr std::uint32_t kLoweredVersion = 1;

const char* const kOpNames[] = {"conv", "depthwise", "dense", "bsn", "sign", "heaviside", "hwmsb", "maxpool", "orpool",
                                "flatten"};

int signed_width(std::int64_t bound) { return static_cast<int>(std::bit_width(static_cast<std::uint64_t>(bound))) + 1; }

int weight_exponent(WeightPrecision p) { return p == WeightPrecision::Quinary ? -1 : 0; }

struct Flat {
  Layer* layer;
  bool classifier;
};

std::vector<Flat> flatten_network(Network& net) {
  std::vector<Flat> out;
  for (auto& p : net.encoder().layers()) out.push_back({p.get(), false});
  for (auto& p : net.classifier().layers()) out.push_back({p.get(), true});
  return out;
}

BsnConsumer consumer_of(const std::vector<Flat>& flat, size_t i) {
  size_t j = i + 1;
  while (j < flat.size() && (flat[j].layer->kind() == LayerKind::MaxPool2 || flat[j].layer->kind() == LayerKind::Flatten ||
                             flat[j].layer->kind() == LayerKind::Reshape))
    ++j;
  if (j == flat.size()) return flat[i].classifier ? BsnConsumer::Logits : BsnConsumer::Other;
  const Layer& next = *flat[j].layer;
  switch (next.kind()) {
    case LayerKind::Activation:
      switch (static_cast<const ActivationLayer&>(next).act()) {
        case ActKind::Sign: return BsnConsumer::Sign;
        case ActKind::Heaviside: return BsnConsumer::Heaviside;
        case ActKind::Hwmsb: return BsnConsumer::Hwmsb;
        default: return BsnConsumer::Other;
      }
    case LayerKind::Conv:
    case LayerKind::DepthwiseConv:
    case LayerKind::Dense:
    case LayerKind::FixedDense: return BsnConsumer::Linear;
    default: return BsnConsumer::Other;
  }
}

// Running description of the mantissas flowing between ops during lowering.
struct Stream {
  int exp = -8, divisor = 1;
  std::int64_t bound = 255;
};

void set_output(IntLayer& l, const Stream& in, const Stream& out, int bits, bool is_signed) {
  l.in_exp = in.exp;
  l.in_divisor = in.divisor;
  l.out_exp = out.exp;
  l.out_divisor = out.divisor;
  l.out_bound = out.bound;
  l.out_bits = bits;
  l.out_signed = is_signed;
}

IntLayer weighted_layer(const std::string& name, IntOp op, const QuantizedWeight& w, Index fan_in) {
  if (w.precision() == WeightPrecision::Float)
    throw ValidationError("lower: " + name + " has full-precision weights");
  IntLayer l;
  l.name = name;
  l.op = op;
  l.weight_shape = w.proxy().value.shape();
  const auto codes = w.codes();
  l.codes.assign(codes.begin(), codes.end());
  l.weight_bits = static_cast<int>(w.precision());
  l.weight_exp = weight_exponent(w.precision());
  l.fan_in = fan_in;
  return l;
}

void finish_weighted(IntLayer& l, Stream& s) {
  std::int64_t max_code = 0;
  for (auto c : l.codes) max_code = std::max<std::int64_t>(max_code, std::abs(c));
  std::int64_t max_bias = 0;
  for (auto b : l.bias) max_bias = std::max<std::int64_t>(max_bias, std::abs(b));
  const std::int64_t bound = l.fan_in * max_code * s.bound + max_bias;
  l.acc_bits = signed_width(std::max<std::int64_t>(bound, 1));
  if (l.acc_bits > 31) throw ValidationError("lower: " + l.name + " needs a " + std::to_string(l.acc_bits) +
                                             "-bit accumulator, more than 32-bit arithmetic allows");
  const Stream in = s;
  s.exp += l.weight_exp;
  s.bound = bound;
  set_output(l, in, s, l.acc_bits, true);
}

IntLayer simple(const std::string& name, IntOp op) {
  IntLayer l;
  l.name = name;
  l.op = op;
  return l;
}

}  // namespace

std::string to_string(IntOp op) { return kOpNames[static_cast<int>(op)]; }

IntOp int_op_from_string(const std::string& s) {
  for (int i = 0; i < 10; ++i)
    if (s == kOpNames[i]) return static_cast<IntOp>(i);
  throw ValidationError("unknown integer op '" + s + "'");
}

IntegerOverflow::IntegerOverflow(const std::string& layer, std::int64_t value, int bits)
    : std::runtime_error("accumulator overflow in " + layer + ": " + std::to_string(value) + " does not fit " +
                         std::to_string(bits) + " bits"),
      layer_(layer) {}

IntegerModel lower(Network& net, const LowerOptions& options) {
  IntegerModel im;
  im.config = net.config();
  im.options = options;
  const auto flat = flatten_network(net);
  Stream s;
  int absorbed = 0;  // pending BSN shift for the next HWMSB
  for (size_t i = 0; i < flat.size(); ++i) {
    Layer& layer = *flat[i].layer;
    auto& program = flat[i].classifier ? im.classifier : im.encoder;
    const std::string& name = layer.name();
    switch (layer.kind()) {
      case LayerKind::Conv: {
        auto& c = static_cast<ConvLayer&>(layer);
        if (c.stride() != 1) throw ValidationError("lower: " + name + " has stride " + std::to_string(c.stride()));
        const Shape& ws = c.weight().proxy().value.shape();
        IntLayer l = weighted_layer(name, IntOp::Conv, c.weight(), ws[0] * ws[1] * ws[2]);
        l.groups = c.groups();
        if (c.has_bias()) {
          const int acc_exp = s.exp + l.weight_exp;
          if (!c.bias_fixed_exp || *c.bias_fixed_exp != acc_exp)
            throw ValidationError("lower: " + name + " bias is not fixed point at the accumulator exponent " +
                                  std::to_string(acc_exp));
          if (s.divisor != 1) throw ValidationError("lower: " + name + " adds a bias to HWMSB codes");
          const RealTensor b = c.effective_bias(eval_pass());
          for (Index k = 0; k < b.size(); ++k)
            l.bias.push_back(static_cast<std::int32_t>(std::ldexp(b[k], -acc_exp)));
        }
        finish_weighted(l, s);
        program.push_back(std::move(l));
        break;
      }
      case LayerKind::DepthwiseConv: {
        auto& d = static_cast<DepthwiseLayer&>(layer);
        const Shape& ws = d.weight().proxy().value.shape();
        IntLayer l = weighted_layer(name, IntOp::Depthwise, d.weight(), ws[0] * ws[1]);
        finish_weighted(l, s);
        program.push_back(std::move(l));
        break;
      }
      case LayerKind::Dense: {
        auto& d = static_cast<DenseLayer&>(layer);
        IntLayer l = weighted_layer(name, IntOp::Dense, d.weight(), d.weight().proxy().value.dim(0));
        finish_weighted(l, s);
        program.push_back(std::move(l));
        break;
      }
      case LayerKind::FixedDense: {
        auto& f = static_cast<FixedDenseLayer&>(layer);
        IntLayer l = simple(name, IntOp::Dense);
        l.weight_shape = f.matrix().shape();
        l.codes.resize(static_cast<size_t>(f.matrix().size()));
        for (Index k = 0; k < f.matrix().size(); ++k) l.codes[static_cast<size_t>(k)] = f.matrix()[k] > 0 ? 1 : -1;
        l.weight_bits = 1;
        l.fixed = true;
        l.fixed_seed = f.seed();
        l.fan_in = f.matrix().dim(0);
        finish_weighted(l, s);
        program.push_back(std::move(l));
        break;
      }
      case LayerKind::BatchNorm: {
        auto& bn = static_cast<BatchNormLayer&>(layer);
        if (!bn.is_bsn()) throw ValidationError("lower: " + name + " is still a BatchNorm; fold it to BSN first");
        const int shift = bn.bsn().shift_exp;
        BsnElision d = elide_bsn(consumer_of(flat, i));
        if (d == BsnElision::AbsorbIntoHwmsb && !options.absorb_bsn) d = BsnElision::Keep;
        if (d == BsnElision::Keep) {
          IntLayer l = simple(name, IntOp::Bsn);
          l.shift_exp = shift;
          const Stream in = s;
          s.exp += shift;
          set_output(l, in, s, program.empty() ? 8 : program.back().out_bits, true);
          program.push_back(std::move(l));
        } else {
          if (d == BsnElision::AbsorbIntoHwmsb) absorbed = shift;
          im.elided.push_back({name, shift, d});
        }
        break;
      }
      case LayerKind::MaxPool2: {
        const bool reorder = options.or_pooling && i + 1 < flat.size() &&
                             flat[i + 1].layer->kind() == LayerKind::Activation &&
                             static_cast<ActivationLayer&>(*flat[i + 1].layer).act() == ActKind::Heaviside;
        if (reorder) {
          IntLayer h = simple(flat[i + 1].layer->name(), IntOp::Heaviside);
          const Stream in = s;
          s = {0, 1, 1};
          set_output(h, in, s, 1, false);
          program.push_back(std::move(h));
          IntLayer p = simple(name, IntOp::OrPool);
          set_output(p, s, s, 1, false);
          program.push_back(std::move(p));
          ++i;
        } else {
          IntLayer p = simple(name, IntOp::MaxPool);
          set_output(p, s, s, program.empty() ? 8 : program.back().out_bits,
                     program.empty() ? false : program.back().out_signed);
          program.push_back(std::move(p));
        }
        break;
      }
      case LayerKind::Activation: {
        const ActKind act = static_cast<ActivationLayer&>(layer).act();
        const Stream in = s;
        IntLayer l = simple(name, IntOp::Sign);
        switch (act) {
          case ActKind::Sign:
            s = {0, 1, 1};
            set_output(l, in, s, 1, true);
            break;
          case ActKind::Heaviside:
            l.op = IntOp::Heaviside;
            s = {0, 1, 1};
            set_output(l, in, s, 1, false);
            break;
          case ActKind::Hwmsb:
            l.op = IntOp::Hwmsb;
            l.ref = ReferencePosition{}.shifted(absorbed);
            absorbed = 0;
            s = {0, HwmsbCode::kDivisor, 3};
            set_output(l, in, s, 2, false);
            break;
          default: throw ValidationError("lower: " + name + " uses an activation without an integer form");
        }
        program.push_back(std::move(l));
        break;
      }
      case LayerKind::Flatten: {
        IntLayer l = simple(name, IntOp::Flatten);
        set_output(l, s, s, program.empty() ? 8 : program.back().out_bits,
                   program.empty() ? false : program.back().out_signed);
        program.push_back(std::move(l));
        break;
      }
      default: throw ValidationError("lower: layer " + name + " has no integer form");
    }
  }
  return im;
}

// ---------------------------------------------------------------- evaluation

namespace {

IntTensor weight_tensor(const IntLayer& l) {
  IntTensor w(l.weight_shape);
  for (Index i = 0; i < w.size(); ++i) w[i] = l.codes[static_cast<size_t>(i)];
  return w;
}

void check_range(const IntLayer& l, const IntTensor& acc) {
  if (acc.size() == 0) return;
  const std::int64_t hi = (std::int64_t{1} << (l.acc_bits - 1)) - 1, lo = -(std::int64_t{1} << (l.acc_bits - 1));
  const std::int64_t mx = acc.array().maxCoeff(), mn = acc.array().minCoeff();
  if (mx > hi) throw IntegerOverflow(l.name, mx, l.acc_bits);
  if (mn < lo) throw IntegerOverflow(l.name, mn, l.acc_bits);
}

IntTensor run_op(const IntLayer& l, IntTensor x, IntOpCounts* counts) {
  auto count = [&](std::uint64_t IntOpCounts::*field, Index n) {
    if (counts) counts->*field += static_cast<std::uint64_t>(n);
  };
  switch (l.op) {
    case IntOp::Conv:
    case IntOp::Depthwise:
    case IntOp::Dense: {
      const IntTensor w = weight_tensor(l);
      IntTensor y = l.op == IntOp::Conv        ? group_conv(x, w, l.groups)
                    : l.op == IntOp::Depthwise ? depthwise_conv(x, w)
                                               : dense(x, w);
      const int div = y.divisor();
      if (!l.bias.empty()) {
        y.set_divisor(1);
        IntTensor b({static_cast<Index>(l.bias.size())});
        for (Index k = 0; k < b.size(); ++k) b[k] = l.bias[static_cast<size_t>(k)];
        y = bias_add(std::move(y), b);
        count(&IntOpCounts::add, y.size());
      }
      y.set_divisor(div);
      const auto macs = static_cast<std::uint64_t>(y.size()) * static_cast<std::uint64_t>(l.fan_in);
      if (counts) {
        counts->mac += macs;
        counts->layer_macs[l.name] += macs;
      }
      check_range(l, y);
      return y;
    }
    case IntOp::Bsn: return x;
    case IntOp::Sign:
      count(&IntOpCounts::compare, x.size());
      x.array() = x.array().unaryExpr([](std::int32_t v) { return v >= 0 ? 1 : -1; });
      x.set_divisor(1);
      return x;
    case IntOp::Heaviside:
      count(&IntOpCounts::compare, x.size());
      x.array() = (x.array() > 0).cast<std::int32_t>();
      x.set_divisor(1);
      return x;
    case IntOp::Hwmsb:
      count(&IntOpCounts::msb, x.size());
      for (Index i = 0; i < x.size(); ++i) x[i] = hwmsb_integer(x[i], l.in_exp, l.ref, l.in_divisor).code;
      x.set_divisor(HwmsbCode::kDivisor);
      return x;
    case IntOp::MaxPool: {
      IntTensor y = maxpool2(x);
      count(&IntOpCounts::compare, 3 * y.size());
      return y;
    }
    case IntOp::OrPool: {
      require_rank(x.shape(), 4, "or-pooling input");
      const Index n = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2, c = x.dim(3);
      IntTensor y({n, h, w, c});
      for (Index b = 0; b < n; ++b)
        for (Index i = 0; i < h; ++i)
          for (Index j = 0; j < w; ++j)
            for (Index ch = 0; ch < c; ++ch) {
              auto at = [&](Index di, Index dj) { return x[((b * x.dim(1) + 2 * i + di) * x.dim(2) + 2 * j + dj) * c + ch]; };
              y[((b * h + i) * w + j) * c + ch] = at(0, 0) | at(0, 1) | at(1, 0) | at(1, 1);
            }
      count(&IntOpCounts::bit_or, 3 * y.size());
      return y;
    }
    case IntOp::Flatten: return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  return x;
}

IntTensor run_program(const std::vector<IntLayer>& program, IntTensor x, IntOpCounts* counts, const TraceSink& trace) {
  for (const auto& l : program) {
    x = run_op(l, std::move(x), counts);
    if (trace) trace(l, x);
  }
  return x;
}

}  // namespace

IntForwardResult int_forward(const IntegerModel& im, const ByteTensor& images, bool classify, IntOpCounts* counts,
                             const TraceSink& trace) {
  require_rank(images.shape(), 4, "int_forward input");
  const auto& c = im.config;
  if (images.dim(1) != c.input_size || images.dim(2) != c.input_size || images.dim(3) != c.in_channels)
    throw ValidationError("int_forward expects [N, " + std::to_string(c.input_size) + ", " +
                          std::to_string(c.input_size) + ", " + std::to_string(c.in_channels) + "] images, got " +
                          shape_string(images.shape()));
  IntForwardResult r;
  r.code = run_program(im.encoder, images.cast<std::int32_t>(), counts, trace);
  if (classify) r.logits = run_program(im.classifier, r.code, counts, trace);
  return r;
}

RealTensor image_from_bytes(const ByteTensor& images) {
  RealTensor x(images.shape());
  for (Index i = 0; i < x.size(); ++i) x[i] = pixel_value(images[i]);
  return x;
}

std::vector<WidthRow> report_widths(const IntegerModel& im) {
  std::vector<WidthRow> rows;
  for (const auto* program : {&im.encoder, &im.classifier})
    for (const auto& l : *program) rows.push_back({l.name, l.op, l.fan_in, l.acc_bits, l.out_bits, l.out_exp});
  return rows;
}

std::string format_widths(const std::vector<WidthRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "layer" << std::setw(11) << "op" << std::right << std::setw(8) << "fan_in"
     << std::setw(10) << "acc_bits" << std::setw(10) << "out_bits" << std::setw(9) << "out_exp" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(24) << r.name << std::setw(11) << to_string(r.op) << std::right << std::setw(8);
    if (r.fan_in) os << r.fan_in; else os << '-';
    os << std::setw(10);
    if (r.acc_bits) os << r.acc_bits; else os << '-';
    os << std::setw(10) << r.out_bits << std::setw(9) << r.out_exp << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- files

namespace {

std::uint32_t code_field(int code, int bits) {
  switch (bits) {
    case 3: return static_cast<std::uint32_t>(code + 2);
    case 2: return static_cast<std::uint32_t>(code + 1);
    default: return code > 0 ? 1u : 0u;
  }
}

int field_code(std::uint32_t f, int bits) {
  switch (bits) {
    case 3: return static_cast<int>(f) - 2;
    case 2: return static_cast<int>(f) - 1;
    default: return f ? 1 : -1;
  }
}

void put_shape(ByteWriter& w, const Shape& s) {
  w.put(static_cast<std::uint8_t>(s.size()));
  for (Index d : s) w.put(static_cast<std::int64_t>(d));
}

Shape get_shape(ByteReader& r) {
  const auto rank = r.get<std::uint8_t>();
  if (rank > 8) throw ValidationError("implausible tensor rank " + std::to_string(rank));
  Shape s(rank);
  for (auto& d : s) {
    d = static_cast<Index>(r.get<std::int64_t>());
    if (d < 0 || d > (Index{1} << 32)) throw ValidationError("implausible dimension " + std::to_string(d));
  }
  return s;
}

void put_layer(ByteWriter& w, const IntLayer& l) {
  w.put_string(l.name);
  w.put(static_cast<std::uint8_t>(l.op));
  put_shape(w, l.weight_shape);
  w.put(static_cast<std::uint8_t>(l.weight_bits));
  w.put(static_cast<std::int8_t>(l.weight_exp));
  w.put(static_cast<std::int64_t>(l.groups));
  w.put(static_cast<std::uint8_t>(l.fixed));
  w.put(l.fixed_seed);
  if (!l.fixed && !l.codes.empty()) {
    std::vector<std::uint32_t> fields(l.codes.size());
    for (size_t i = 0; i < fields.size(); ++i) fields[i] = code_field(l.codes[i], l.weight_bits);
    w.put_bytes(pack_fields(fields, l.weight_bits));
  }
  w.put(static_cast<std::uint32_t>(l.bias.size()));
  for (auto b : l.bias) w.put(static_cast<std::int16_t>(b));
  w.put(static_cast<std::int64_t>(l.fan_in));
  w.put(static_cast<std::int8_t>(l.shift_exp));
  w.put(static_cast<std::int8_t>(l.ref.bias));
  w.put(static_cast<std::int32_t>(l.in_exp));
  w.put(static_cast<std::int32_t>(l.out_exp));
  w.put(static_cast<std::uint8_t>(l.in_divisor));
  w.put(static_cast<std::uint8_t>(l.out_divisor));
  w.put(static_cast<std::uint8_t>(l.acc_bits));
  w.put(static_cast<std::uint8_t>(l.out_bits));
  w.put(static_cast<std::uint8_t>(l.out_signed));
  w.put(l.out_bound);
}

IntLayer get_layer(ByteReader& r) {
  IntLayer l;
  l.name = r.get_string(4096);
  const auto op = r.get<std::uint8_t>();
  if (op > static_cast<std::uint8_t>(IntOp::Flatten)) throw ValidationError("unknown op code " + std::to_string(op));
  l.op = static_cast<IntOp>(op);
  l.weight_shape = get_shape(r);
  l.weight_bits = r.get<std::uint8_t>();
  l.weight_exp = r.get<std::int8_t>();
  l.groups = static_cast<Index>(r.get<std::int64_t>());
  l.fixed = r.get<std::uint8_t>() != 0;
  l.fixed_seed = r.get<std::uint64_t>();
  const bool weighted = l.op == IntOp::Conv || l.op == IntOp::Depthwise || l.op == IntOp::Dense;
  if (weighted) {
    if (l.weight_bits < 1 || l.weight_bits > 3) throw ValidationError(l.name + ": bad weight width");
    const auto n = static_cast<size_t>(shape_product(l.weight_shape));
    if (l.fixed) {
      const RealTensor m = rademacher_matrix(l.weight_shape.at(0), l.weight_shape.at(1), l.fixed_seed);
      l.codes.resize(n);
      for (size_t i = 0; i < n; ++i) l.codes[i] = m[static_cast<Index>(i)] > 0 ? 1 : -1;
    } else {
      const auto fields = unpack_fields(r.get_bytes(packed_bytes(n, l.weight_bits)), l.weight_bits, n);
      l.codes.resize(n);
      for (size_t i = 0; i < n; ++i) l.codes[i] = static_cast<std::int8_t>(field_code(fields[i], l.weight_bits));
    }
  }
  const auto nb = r.get<std::uint32_t>();
  if (nb > r.remaining() / 2) throw ValidationError(l.name + ": truncated bias");
  for (std::uint32_t i = 0; i < nb; ++i) l.bias.push_back(r.get<std::int16_t>());
  l.fan_in = static_cast<Index>(r.get<std::int64_t>());
  l.shift_exp = r.get<std::int8_t>();
  l.ref.bias = r.get<std::int8_t>();
  l.in_exp = r.get<std::int32_t>();
  l.out_exp = r.get<std::int32_t>();
  l.in_divisor = r.get<std::uint8_t>();
  l.out_divisor = r.get<std::uint8_t>();
  l.acc_bits = r.get<std::uint8_t>();
  l.out_bits = r.get<std::uint8_t>();
  l.out_signed = r.get<std::uint8_t>() != 0;
  l.out_bound = r.get<std::int64_t>();
  if (weighted && (l.acc_bits < 2 || l.acc_bits > 31)) throw ValidationError(l.name + ": bad accumulator width");
  return l;
}

}  // namespace

std::vector<std::uint8_t> serialize_lowered(const IntegerModel& im) {
  ByteWriter w;
  w.put(kLoweredMagic);
  w.put(kLoweredVersion);
  w.put_string(to_json(im.config).dump());
  w.put(static_cast<std::uint8_t>(im.options.absorb_bsn));
  w.put(static_cast<std::uint8_t>(im.options.or_pooling));
  w.put(static_cast<std::int32_t>(im.input_exp));
  for (const auto* program : {&im.encoder, &im.classifier}) {
    w.put(static_cast<std::uint32_t>(program->size()));
    for (const auto& l : *program) put_layer(w, l);
  }
  w.put(static_cast<std::uint32_t>(im.elided.size()));
  for (const auto& e : im.elided) {
    w.put_string(e.name);
    w.put(static_cast<std::int8_t>(e.shift_exp));
    w.put(static_cast<std::uint8_t>(e.decision));
  }
  seal(w);
  return std::move(w.bytes());
}

IntegerModel deserialize_lowered(std::span<const std::uint8_t> bytes) {
  ByteReader r(unseal(bytes, "lowered model"), "lowered model");
  if (r.get<std::uint32_t>() != kLoweredMagic) throw ValidationError("not a lowered model file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kLoweredVersion)
    throw ValidationError("lowered model version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kLoweredVersion) + ")");
  IntegerModel im;
  try {
    im.config = model_config_from_json(nlohmann::json::parse(r.get_string()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("lowered model config: ") + e.what());
  }
  im.options.absorb_bsn = r.get<std::uint8_t>() != 0;
  im.options.or_pooling = r.get<std::uint8_t>() != 0;
  im.input_exp = r.get<std::int32_t>();
  for (auto* program : {&im.encoder, &im.classifier}) {
    const auto n = r.get<std::uint32_t>();
    if (n > 4096) throw ValidationError("implausible layer count " + std::to_string(n));
    for (std::uint32_t i = 0; i < n; ++i) program->push_back(get_layer(r));
  }
  const auto ne = r.get<std::uint32_t>();
  if (ne > 4096) throw ValidationError("implausible elision count");
  for (std::uint32_t i = 0; i < ne; ++i) {
    ElidedBsn e;
    e.name = r.get_string(4096);
    e.shift_exp = r.get<std::int8_t>();
    const auto d = r.get<std::uint8_t>();
    if (d > static_cast<std::uint8_t>(BsnElision::Keep)) throw ValidationError("bad elision code");
    e.decision = static_cast<BsnElision>(d);
    im.elided.push_back(e);
  }
  if (r.remaining() != 0) throw ValidationError("lowered model: trailing bytes");
  return im;
}

void save_lowered(const IntegerModel& im, const std::string& path) { write_file(path, serialize_lowered(im)); }
IntegerModel load_lowered(const std::string& path) { return deserialize_lowered(read_file(path)); }

// ---------------------------------------------------------------- traces

namespace {

enum class TraceEncoding : std::uint8_t { Unsigned = 0, TwosComplement = 1, SignBit = 2 };

}  // namespace

TraceSink TraceWriter::sink() {
  return [this](const IntLayer& l, const IntTensor& x) {
    ByteWriter w;
    w.put_string(l.name);
    w.put(static_cast<std::int32_t>(l.out_exp));
    w.put(static_cast<std::uint8_t>(x.divisor()));
    const int bits = std::max(l.out_bits, 1);
    const TraceEncoding enc = l.op == IntOp::Sign ? TraceEncoding::SignBit
                              : l.out_signed      ? TraceEncoding::TwosComplement
                                                  : TraceEncoding::Unsigned;
    w.put(static_cast<std::uint8_t>(bits));
    w.put(static_cast<std::uint8_t>(enc));
    put_shape(w, x.shape());
    const std::uint32_t mask = bits >= 32 ? ~0u : (1u << bits) - 1;
    std::vector<std::uint32_t> fields(static_cast<size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i)
      fields[static_cast<size_t>(i)] =
          enc == TraceEncoding::SignBit ? (x[i] > 0 ? 1u : 0u) : static_cast<std::uint32_t>(x[i]) & mask;
    w.put_bytes(pack_fields(fields, bits));
    body_.insert(body_.end(), w.bytes().begin(), w.bytes().end());
    ++records_;
  };
}

std::vector<std::uint8_t> TraceWriter::finish() {
  ByteWriter w;
  w.put(kTraceMagic);
  w.put(kLoweredVersion);
  w.put(records_);
  w.put_bytes(body_);
  seal(w);
  return std::move(w.bytes());
}

std::vector<TraceRecord> read_trace(std::span<const std::uint8_t> bytes) {
  ByteReader r(unseal(bytes, "trace"), "trace");
  if (r.get<std::uint32_t>() != kTraceMagic) throw ValidationError("not a trace file (bad magic)");
  if (r.get<std::uint32_t>() != kLoweredVersion) throw ValidationError("unsupported trace version");
  const auto n = r.get<std::uint32_t>();
  std::vector<TraceRecord> out;
  for (std::uint32_t k = 0; k < n; ++k) {
    TraceRecord t;
    t.name = r.get_string(4096);
    t.exponent = r.get<std::int32_t>();
    t.divisor = r.get<std::uint8_t>();
    t.bits = r.get<std::uint8_t>();
    const auto enc = static_cast<TraceEncoding>(r.get<std::uint8_t>());
    if (t.bits < 1 || t.bits > 32) throw ValidationError("trace: bad width");
    const Shape s = get_shape(r);
    const auto count = static_cast<size_t>(shape_product(s));
    const auto fields = unpack_fields(r.get_bytes(packed_bytes(count, t.bits)), t.bits, count);
    t.mantissas = IntTensor(s);
    for (size_t i = 0; i < count; ++i) {
      std::int64_t v = fields[i];
      if (enc == TraceEncoding::SignBit) v = v ? 1 : -1;
      if (enc == TraceEncoding::TwosComplement && t.bits < 32 && (v >> (t.bits - 1)) & 1) v -= std::int64_t{1} << t.bits;
      t.mantissas[static_cast<Index>(i)] = static_cast<std::int32_t>(v);
    }
    t.mantissas.set_divisor(t.divisor);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace nqe
