#include "nqe/weights_io.hpp"

#include "nqe/binary_io.hpp"
#include "nqe/bitpack.hpp"

#include <cstring>
#include <map>

namespace nqe {
namespace {

constexpr char kMagic[4] = {'N', 'Q', 'E', 'W'};
constexpr std::int8_t kNoShift = 127;

enum class RecordKind : std::uint8_t { Weight = 0, Tensor = 1, BatchNorm = 2 };

// One stateful piece of a network, addressed by name.
struct Entry {
  std::string name;
  RecordKind kind;
  QuantizedWeight* weight = nullptr;
  Parameter* tensor = nullptr;
  BatchNormLayer* bn = nullptr;
  bool encoder = false;
};

std::vector<Entry> entries(Network& net) {
  std::vector<Entry> out;
  auto add_weight = [&](const std::string& n, QuantizedWeight& w) {
    out.push_back({n + ".weight", RecordKind::Weight, &w, nullptr, nullptr, false});
  };
  auto add_tensor = [&](const std::string& n, Parameter& p) {
    out.push_back({n, RecordKind::Tensor, nullptr, &p, nullptr, false});
  };
  auto collect = [&](Layer& l) {
    switch (l.kind()) {
      case LayerKind::Conv: {
        auto& c = static_cast<ConvLayer&>(l);
        add_weight(l.name(), c.weight());
        if (c.has_bias()) add_tensor(l.name() + ".bias", c.bias());
        break;
      }
      case LayerKind::DepthwiseConv: add_weight(l.name(), static_cast<DepthwiseLayer&>(l).weight()); break;
      case LayerKind::Dense: add_weight(l.name(), static_cast<DenseLayer&>(l).weight()); break;
      case LayerKind::ConvTranspose: {
        auto& t = static_cast<ConvTransposeLayer&>(l);
        add_tensor(l.name() + ".weight", t.weight());
        add_tensor(l.name() + ".bias", t.bias());
        break;
      }
      case LayerKind::BatchNorm:
        out.push_back({l.name(), RecordKind::BatchNorm, nullptr, nullptr, static_cast<BatchNormLayer*>(&l), false});
        break;
      default: break;
    }
  };
  net.encoder().visit(collect);
  for (auto& e : out) e.encoder = true;
  net.classifier().visit(collect);
  if (net.has_decoder()) net.decoder().visit(collect);
  return out;
}

void put_shape(ByteWriter& w, const Shape& s) {
  w.put(static_cast<std::uint8_t>(s.size()));
  for (Index d : s) w.put(static_cast<std::uint32_t>(d));
}

Shape get_shape(ByteReader& r) {
  const auto rank = r.get<std::uint8_t>();
  if (rank > 4) throw ValidationError("weights file: rank " + std::to_string(rank) + " out of range");
  Shape s(rank);
  for (auto& d : s) d = r.get<std::uint32_t>();
  return s;
}

std::uint32_t code_offset(WeightPrecision p) {
  return p == WeightPrecision::Quinary ? 2 : p == WeightPrecision::Ternary ? 1 : 0;
}

void put_doubles(ByteWriter& w, const Eigen::ArrayXd& a) {
  for (Index i = 0; i < a.size(); ++i) w.put(a[i]);
}

Eigen::ArrayXd get_doubles(ByteReader& r, Index n) {
  Eigen::ArrayXd a(n);
  for (Index i = 0; i < n; ++i) a[i] = r.get<double>();
  return a;
}

// Table metadata of one record as written.
struct Header {
  std::string name;
  RecordKind kind{};
  Shape shape;
  int bits = 0;
  QuantizerSpec spec;
  std::int8_t shift = kNoShift;
  double source_quantile = 1.0;
};

Header header_of(const Entry& e) {
  Header h{e.name, e.kind, {}, 0, {}, kNoShift, 1.0};
  switch (e.kind) {
    case RecordKind::Weight:
      h.shape = e.weight->proxy().value.shape();
      h.bits = static_cast<int>(e.weight->precision());
      h.spec = e.weight->spec();
      break;
    case RecordKind::Tensor: h.shape = e.tensor->value.shape(); break;
    case RecordKind::BatchNorm:
      h.shape = {4, e.bn->channels()};
      if (e.bn->is_bsn()) {
        h.shift = static_cast<std::int8_t>(e.bn->bsn().shift_exp);
        h.source_quantile = e.bn->bsn().source_quantile;
      }
      break;
  }
  return h;
}

void write_payload(ByteWriter& w, const Entry& e) {
  switch (e.kind) {
    case RecordKind::Weight: {
      const auto p = e.weight->precision();
      if (p == WeightPrecision::Float) {
        put_doubles(w, e.weight->proxy().value.array());
        break;
      }
      const auto codes = e.weight->codes();
      std::vector<std::uint32_t> fields(codes.size());
      for (size_t i = 0; i < codes.size(); ++i)
        fields[i] = p == WeightPrecision::Binary ? (codes[i] > 0 ? 1u : 0u)
                                                 : static_cast<std::uint32_t>(codes[i] + static_cast<int>(code_offset(p)));
      w.put_bytes(pack_fields(fields, static_cast<int>(p)));
      break;
    }
    case RecordKind::Tensor: put_doubles(w, e.tensor->value.array()); break;
    case RecordKind::BatchNorm: {
      const auto s = e.bn->state();
      put_doubles(w, s.gamma);
      put_doubles(w, s.beta);
      put_doubles(w, s.moving_mean);
      put_doubles(w, s.moving_var);
      w.put(s.eps);
      w.put(s.momentum);
      break;
    }
  }
}

void write_header(ByteWriter& w, const Header& h) {
  w.put_string(h.name);
  w.put(static_cast<std::uint8_t>(h.kind));
  put_shape(w, h.shape);
  w.put(static_cast<std::uint8_t>(h.bits));
  w.put(static_cast<std::uint8_t>(h.spec.n_levels));
  w.put(h.spec.delta);
  w.put(h.spec.tau);
  w.put(h.shift);
  w.put(h.source_quantile);
}

Header read_header(ByteReader& r) {
  Header h;
  h.name = r.get_string(4096);
  const auto kind = r.get<std::uint8_t>();
  if (kind > 2) throw ValidationError("weights file: unknown record kind " + std::to_string(kind) + " for " + h.name);
  h.kind = static_cast<RecordKind>(kind);
  h.shape = get_shape(r);
  h.bits = r.get<std::uint8_t>();
  if (h.bits > 3) throw ValidationError("weights file: bad precision for " + h.name);
  h.spec.n_levels = r.get<std::uint8_t>();
  h.spec.delta = r.get<double>();
  h.spec.tau = r.get<double>();
  h.shift = r.get<std::int8_t>();
  h.source_quantile = r.get<double>();
  return h;
}

void check_header(const Entry& e, const Header& h) {
  const Header mine = header_of(e);
  if (mine.kind != h.kind || mine.shape != h.shape || mine.bits != h.bits)
    throw ValidationError("weights file: record " + h.name + " has kind/shape/precision " +
                          std::to_string(static_cast<int>(h.kind)) + "/" + shape_string(h.shape) + "/" +
                          std::to_string(h.bits) + ", model expects " +
                          std::to_string(static_cast<int>(mine.kind)) + "/" + shape_string(mine.shape) + "/" +
                          std::to_string(mine.bits));
}

// Reads the payload of a record into `e` (or just skips it when e is null).
void read_payload(ByteReader& r, const Header& h, Entry* e) {
  const Index n = shape_product(h.shape);
  switch (h.kind) {
    case RecordKind::Weight: {
      const auto p = static_cast<WeightPrecision>(h.bits);
      if (p == WeightPrecision::Float) {
        auto a = get_doubles(r, n);
        if (e) e->weight->proxy().value = RealTensor(h.shape, std::move(a));
        break;
      }
      const auto bytes = r.get_bytes(packed_bytes(static_cast<size_t>(n), h.bits));
      if (!e) break;
      const auto fields = unpack_fields(bytes, h.bits, static_cast<size_t>(n));
      h.spec.validate();
      if (p != WeightPrecision::Binary && h.spec.n_levels != level_count(p))
        throw ValidationError("weights file: quantizer of " + h.name + " does not match its precision");
      // Proxies sit at bin centres so the stored codes are reproduced exactly.
      RealTensor proxy(h.shape);
      for (Index i = 0; i < n; ++i) {
        const int code = static_cast<int>(fields[static_cast<size_t>(i)]) - static_cast<int>(code_offset(p));
        if (p == WeightPrecision::Binary) {
          proxy[i] = fields[static_cast<size_t>(i)] ? 1.0 : -1.0;
        } else {
          if (std::abs(code) > (level_count(p) - 1) / 2)
            throw ValidationError("weights file: code out of range in " + h.name);
          proxy[i] = 2.0 * h.spec.delta * code / (level_count(p) - 2);
        }
      }
      e->weight->proxy().value = std::move(proxy);
      if (p != WeightPrecision::Binary) e->weight->set_spec(h.spec);
      break;
    }
    case RecordKind::Tensor: {
      auto a = get_doubles(r, n);
      if (e) e->tensor->value = RealTensor(h.shape, std::move(a));
      break;
    }
    case RecordKind::BatchNorm: {
      const Index c = h.shape.at(1);
      BatchNormState s;
      s.gamma = get_doubles(r, c);
      s.beta = get_doubles(r, c);
      s.moving_mean = get_doubles(r, c);
      s.moving_var = get_doubles(r, c);
      s.eps = r.get<double>();
      s.momentum = r.get<double>();
      if (!e) break;
      s.validate();
      e->bn->set_state(s);
      if (h.shift == kNoShift) {
        e->bn->clear_bsn();
      } else {
        if (h.shift < BsnScale::kMinShift || h.shift > BsnScale::kMaxShift)
          throw ValidationError("weights file: BSN shift out of range in " + h.name);
        e->bn->set_bsn({h.shift, h.source_quantile});
      }
      break;
    }
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_weights(Network& net, bool with_proxies) {
  const auto es = entries(net);
  ByteWriter w;
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kWeightsVersion);
  w.put_string(to_json(net.config()).dump());
  w.put(static_cast<std::uint32_t>(es.size()));
  w.put(static_cast<std::uint8_t>(with_proxies));
  for (const auto& e : es) write_header(w, header_of(e));
  for (const auto& e : es) write_payload(w, e);
  if (with_proxies)
    for (const auto& e : es)
      if (e.kind == RecordKind::Weight && e.weight->precision() != WeightPrecision::Float)
        put_doubles(w, e.weight->proxy().value.array());
  seal(w);
  return std::move(w.bytes());
}

namespace {

struct Parsed {
  ModelConfig config;
  bool with_proxies = false;
  std::vector<Header> headers;
};

Parsed parse_prefix(ByteReader& r) {
  const auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw ValidationError("not a weights file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightsVersion)
    throw ValidationError("weights file version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kWeightsVersion) + ")");
  Parsed p;
  try {
    p.config = model_config_from_json(nlohmann::json::parse(r.get_string()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("weights file: bad config: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  if (count > 100000) throw ValidationError("weights file: implausible record count");
  p.with_proxies = r.get<std::uint8_t>() != 0;
  for (std::uint32_t i = 0; i < count; ++i) p.headers.push_back(read_header(r));
  return p;
}

}  // namespace

ModelConfig weights_config(std::span<const std::uint8_t> bytes) {
  ByteReader r(unseal(bytes, "weights file"), "weights file");
  return parse_prefix(r).config;
}

WeightsLoadReport load_weights(Network& net, std::span<const std::uint8_t> bytes) {
  ByteReader r(unseal(bytes, "weights file"), "weights file");
  const Parsed p = parse_prefix(r);
  auto es = entries(net);
  std::map<std::string, Entry*> by_name;
  for (auto& e : es) by_name[e.name] = &e;

  WeightsLoadReport report;
  std::vector<Entry*> targets;
  std::map<std::string, bool> seen;
  for (const auto& h : p.headers) {
    auto it = by_name.find(h.name);
    Entry* e = it == by_name.end() ? nullptr : it->second;
    if (e) check_header(*e, h);
    targets.push_back(e);
    seen[h.name] = true;
  }
  for (const auto& e : es)
    if (e.encoder && !seen.count(e.name)) throw ValidationError("weights file lacks encoder record " + e.name);
  for (size_t i = 0; i < p.headers.size(); ++i) {
    read_payload(r, p.headers[i], targets[i]);
    ++(targets[i] ? report.loaded : report.skipped);
  }
  if (p.with_proxies)
    for (size_t i = 0; i < p.headers.size(); ++i) {
      const auto& h = p.headers[i];
      if (h.kind != RecordKind::Weight || h.bits == 0) continue;
      auto a = get_doubles(r, shape_product(h.shape));
      if (targets[i]) targets[i]->weight->proxy().value = RealTensor(h.shape, std::move(a));
    }
  if (r.remaining() != 0) throw ValidationError("weights file: trailing bytes");
  for (auto& e : es)
    if (e.weight) e.weight->proxy().zero_grad();
    else if (e.tensor) e.tensor->zero_grad();
  return report;
}

void export_weights(Network& net, const std::string& path, bool with_proxies) {
  write_file(path, serialize_weights(net, with_proxies));
}

std::unique_ptr<Network> import_weights(const std::string& path) {
  const auto bytes = read_file(path);
  auto net = std::make_unique<Network>(weights_config(bytes));
  load_weights(*net, bytes);
  return net;
}

std::uint64_t model_digest(Network& net) {
  const auto bytes = serialize_weights(net, false);
  return fnv1a64(std::span<const std::uint8_t>(bytes).first(bytes.size() - 8));
}

}  // namespace nqe
