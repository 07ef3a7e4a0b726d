#include "nqe/topology.hpp"

#include <bit>

namespace nqe {
namespace {

template <typename E, std::size_t N>
E enum_from_string(const std::string& s, const std::array<E, N>& all, const char* what) {
  for (E e : all)
    if (to_string(e) == s) return e;
  throw ValidationError(std::string("unknown ") + what + " '" + s + "'");
}

LayerSpec weighted(std::string name, OpKind kind, Index k, Index spatial, Index in, Index out, int wbits, int abits) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = kind;
  s.kernel_h = s.kernel_w = k;
  s.in_h = s.in_w = spatial;
  s.in_ch = in;
  s.out_ch = out;
  s.weight_bits = wbits;
  s.input_bits = abits;
  return s;
}

LayerSpec plain(std::string name, OpKind kind, Index spatial, Index ch, ActKind act = ActKind::None) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = kind;
  s.in_h = s.in_w = spatial;
  s.in_ch = s.out_ch = ch;
  s.activation = act;
  return s;
}

// Input exponent of conv1: 8-bit pixels at 2^-8 times weight codes (quinary 2^-1).
int first_layer_exp(int weight_bits) { return -8 + (weight_bits == 3 ? -1 : 0); }

}  // namespace

std::string to_string(BottleneckKind k) {
  switch (k) {
    case BottleneckKind::Lfc: return "lfc";
    case BottleneckKind::RcsFc: return "rcs";
    default: return "dwconv";
  }
}
std::string to_string(PrecisionProfile p) { return p == PrecisionProfile::Mixed ? "mixed" : "binary"; }
std::string to_string(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::Purenet: return "purenet";
    case DecoderVariant::PiPurenet: return "pi";
    default: return "bbd";
  }
}
std::string to_string(OpKind k) {
  static const char* names[] = {"conv",    "group_conv", "depthwise_conv", "dense",  "maxpool2",
                                "bias",    "bn_or_bsn",  "activation",     "flatten"};
  return names[static_cast<int>(k)];
}

BottleneckKind bottleneck_from_string(const std::string& s) {
  return enum_from_string(s, std::array{BottleneckKind::Lfc, BottleneckKind::RcsFc, BottleneckKind::DwconvFc},
                          "bottleneck");
}
PrecisionProfile precision_from_string(const std::string& s) {
  return enum_from_string(s, std::array{PrecisionProfile::Mixed, PrecisionProfile::Binary}, "precision");
}
DecoderVariant variant_from_string(const std::string& s) {
  return enum_from_string(s, std::array{DecoderVariant::Purenet, DecoderVariant::PiPurenet, DecoderVariant::Bbd},
                          "decoder variant");
}
OpKind op_kind_from_string(const std::string& s) {
  return enum_from_string(s,
                          std::array{OpKind::Conv, OpKind::GroupConv, OpKind::DepthwiseConv, OpKind::Dense,
                                     OpKind::MaxPool2, OpKind::Bias, OpKind::BnOrBsn, OpKind::Activation,
                                     OpKind::Flatten},
                          "layer kind");
}

int PurenetConfig::pu_stages() const { return std::bit_width(static_cast<std::uint64_t>(patch_size / 2)) - 1; }

std::vector<Index> PurenetConfig::stage_channels() const {
  const int n = pu_stages();
  return {pu_channels.end() - n, pu_channels.end()};
}

void PurenetConfig::validate() const {
  if (patch_size < 4 || !std::has_single_bit(static_cast<std::uint64_t>(patch_size)))
    throw ValidationError("patch size must be a power of two >= 4, got " + std::to_string(patch_size));
  if (pu_stages() > 4)
    throw ValidationError("patch size " + std::to_string(patch_size) + " needs more than four upsampling stages");
  if (n_feature < 1 || rc_blocks < 0) throw ValidationError("decoder width and RC block count must be positive");
  for (Index c : pu_channels)
    if (c < 1) throw ValidationError("PU channel plan entries must be positive");
  if (pu_channels.back() != n_feature)
    throw ValidationError("PU must end at the refinement width n=" + std::to_string(n_feature) + ", plan ends at " +
                          std::to_string(pu_channels.back()));
}

void ModelConfig::validate() const {
  if (F < 8 || F % 4 != 0) throw ValidationError("F must be >= 8 and divisible by 4, got " + std::to_string(F));
  if (G < 1 || (4 * F) % G != 0) throw ValidationError("G=" + std::to_string(G) + " must divide 4F");
  if (input_size < 8 || input_size % 8 != 0)
    throw ValidationError("input size must be a positive multiple of 8, got " + std::to_string(input_size));
  if (in_channels < 1 || classes < 2) throw ValidationError("need >= 1 input channel and >= 2 classes");
  if (decoder) {
    decoder->validate();
    if (decoder->patch_size != input_size)
      throw ValidationError("decoder patch size " + std::to_string(decoder->patch_size) + " != encoder input size " +
                            std::to_string(input_size));
  }
}

Index LayerSpec::out_h() const {
  switch (kind) {
    case OpKind::MaxPool2: return in_h / 2;
    case OpKind::DepthwiseConv: return in_h - kernel_h + 1;
    case OpKind::Dense:
    case OpKind::Flatten: return 1;
    default: return in_h;
  }
}

Index LayerSpec::out_w() const {
  switch (kind) {
    case OpKind::MaxPool2: return in_w / 2;
    case OpKind::DepthwiseConv: return in_w - kernel_w + 1;
    case OpKind::Dense:
    case OpKind::Flatten: return 1;
    default: return in_w;
  }
}

Index LayerSpec::param_count() const {
  switch (kind) {
    case OpKind::Conv:
    case OpKind::GroupConv: return kernel_h * kernel_w * (in_ch / groups) * out_ch;
    case OpKind::DepthwiseConv: return kernel_h * kernel_w * in_ch;
    case OpKind::Dense: return in_ch * out_ch;
    default: return 0;
  }
}

std::vector<LayerSpec> bottleneck_topology(BottleneckKind kind, Index F, Index spatial) {
  const Index c = 4 * F, flat = spatial * spatial * c;
  std::vector<LayerSpec> v;
  switch (kind) {
    case BottleneckKind::Lfc:
      v.push_back(plain("bottleneck.flatten", OpKind::Flatten, spatial, c));
      v.back().out_ch = flat;
      v.push_back(weighted("bottleneck.fc", OpKind::Dense, 0, 1, flat, c, 1, 1));
      v.push_back(plain("bottleneck.bn", OpKind::BnOrBsn, 1, c));
      break;
    case BottleneckKind::RcsFc:
      v.push_back(plain("bottleneck.flatten", OpKind::Flatten, spatial, c));
      v.back().out_ch = flat;
      v.push_back(weighted("bottleneck.rcs", OpKind::Dense, 0, 1, flat, c, 1, 1));
      v.back().fixed = true;
      v.push_back(plain("bottleneck.rcs_bn", OpKind::BnOrBsn, 1, c));
      v.push_back(weighted("bottleneck.fc", OpKind::Dense, 0, 1, c, c, 1, 1));
      v.push_back(plain("bottleneck.bn", OpKind::BnOrBsn, 1, c));
      break;
    case BottleneckKind::DwconvFc:
      v.push_back(weighted("bottleneck.dw", OpKind::DepthwiseConv, spatial, spatial, c, c, 1, 1));
      v.push_back(plain("bottleneck.dw_bn", OpKind::BnOrBsn, 1, c));
      v.push_back(plain("bottleneck.flatten", OpKind::Flatten, 1, c));
      v.push_back(weighted("bottleneck.fc", OpKind::Dense, 0, 1, c, c, 1, 1));
      v.push_back(plain("bottleneck.bn", OpKind::BnOrBsn, 1, c));
      break;
  }
  v.push_back(plain("bottleneck.heaviside", OpKind::Activation, 1, c, ActKind::Heaviside));
  return v;
}

std::vector<LayerSpec> nqe_topology(const ModelConfig& cfg) {
  cfg.validate();
  const Index F = cfg.F, s = cfg.input_size;
  const bool mixed = cfg.precision == PrecisionProfile::Mixed;
  const int quinary = mixed ? 3 : 1, ternary = mixed ? 2 : 1, after_msb = mixed ? 2 : 1;
  const ActKind msb = mixed ? ActKind::Hwmsb : ActKind::Sign;
  std::vector<LayerSpec> v;

  v.push_back(weighted("conv1", OpKind::Conv, 3, s, cfg.in_channels, F, quinary, 8));
  v.push_back(plain("conv1.bias", OpKind::Bias, s, F));
  v.push_back(plain("conv1.bn", OpKind::BnOrBsn, s, F));
  v.push_back(plain("conv1.act", OpKind::Activation, s, F, ActKind::Sign));
  v.push_back(weighted("conv2", OpKind::Conv, 3, s, F, F, quinary, 1));
  v.push_back(plain("conv2.bn", OpKind::BnOrBsn, s, F));
  v.push_back(plain("conv2.act", OpKind::Activation, s, F, msb));
  v.push_back(plain("conv2.pool", OpKind::MaxPool2, s, F));

  v.push_back(weighted("conv3", OpKind::Conv, 3, s / 2, F, 2 * F, ternary, after_msb));
  v.push_back(plain("conv3.bn", OpKind::BnOrBsn, s / 2, 2 * F));
  v.push_back(plain("conv3.act", OpKind::Activation, s / 2, 2 * F, ActKind::Sign));
  v.push_back(weighted("conv4", OpKind::Conv, 3, s / 2, 2 * F, 2 * F, ternary, 1));
  v.push_back(plain("conv4.bn", OpKind::BnOrBsn, s / 2, 2 * F));
  v.push_back(plain("conv4.act", OpKind::Activation, s / 2, 2 * F, msb));
  v.push_back(plain("conv4.pool", OpKind::MaxPool2, s / 2, 2 * F));

  v.push_back(weighted("conv5", OpKind::Conv, 3, s / 4, 2 * F, 4 * F, 1, after_msb));
  v.push_back(plain("conv5.bn", OpKind::BnOrBsn, s / 4, 4 * F));
  v.push_back(plain("conv5.act", OpKind::Activation, s / 4, 4 * F, ActKind::Sign));
  v.push_back(weighted("gconv", OpKind::GroupConv, 3, s / 4, 4 * F, 4 * F, 1, 1));
  v.back().groups = cfg.G;
  v.push_back(plain("gconv.bn", OpKind::BnOrBsn, s / 4, 4 * F));
  v.push_back(plain("gconv.pool", OpKind::MaxPool2, s / 4, 4 * F));
  v.push_back(plain("gconv.act", OpKind::Activation, s / 8, 4 * F, ActKind::Heaviside));

  for (auto& b : bottleneck_topology(cfg.bottleneck, F, s / 8)) v.push_back(std::move(b));

  v.push_back(weighted("classifier.fc", OpKind::Dense, 0, 1, 4 * F, cfg.classes, 1, 1));
  v.back().encoder = false;
  v.push_back(plain("classifier.bn", OpKind::BnOrBsn, 1, cfg.classes));
  v.back().encoder = false;
  return v;
}

Network::Network(const ModelConfig& config) : config_(config), specs_(nqe_topology(config)) {
  std::mt19937_64 rng(config.seed);
  for (size_t i = 0; i < specs_.size(); ++i) {
    const LayerSpec& s = specs_[i];
    Sequential& seq = s.encoder ? encoder_ : classifier_;
    const auto precision = weight_precision_from_bits(s.weight_bits);
    switch (s.kind) {
      case OpKind::Conv:
      case OpKind::GroupConv: {
        const Shape shape{s.kernel_h, s.kernel_w, s.in_ch / s.groups, s.out_ch};
        const bool bias = i + 1 < specs_.size() && specs_[i + 1].kind == OpKind::Bias;
        auto& conv = seq.add<ConvLayer>(
            s.name, QuantizedWeight(s.name + ".w", fan_in_uniform(shape, shape[0] * shape[1] * shape[2], rng), precision),
            s.groups, 1, bias);
        if (bias) conv.bias_fixed_exp = first_layer_exp(s.weight_bits);
        break;
      }
      case OpKind::DepthwiseConv: {
        const Shape shape{s.kernel_h, s.kernel_w, 1, s.in_ch};
        seq.add<DepthwiseLayer>(
            s.name, QuantizedWeight(s.name + ".w", fan_in_uniform(shape, s.kernel_h * s.kernel_w, rng), precision));
        break;
      }
      case OpKind::Dense:
        if (s.fixed) {
          seq.add<FixedDenseLayer>(s.name, s.in_ch, s.out_ch, config.seed ^ 0x5eed5eedULL);
        } else {
          seq.add<DenseLayer>(s.name, QuantizedWeight(s.name + ".w", fan_in_uniform({s.in_ch, s.out_ch}, s.in_ch, rng),
                                                      precision));
        }
        break;
      case OpKind::MaxPool2: seq.add<MaxPoolLayer>(s.name); break;
      case OpKind::BnOrBsn: seq.add<BatchNormLayer>(s.name, s.out_ch); break;
      case OpKind::Activation: seq.add<ActivationLayer>(s.name, s.activation); break;
      case OpKind::Flatten: seq.add<ReshapeLayer>(s.name); break;
      case OpKind::Bias: break;
    }
  }
  if (config.decoder)
    decoder_ = std::make_unique<Decoder>(*config.decoder, config.code_bits(), config.in_channels, config.seed + 1);
}

Network::~Network() = default;

Decoder& Network::decoder() {
  if (!decoder_) throw ValidationError("model has no decoder configured");
  return *decoder_;
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  encoder_.collect_parameters(out);
  classifier_.collect_parameters(out);
  if (decoder_) {
    auto d = decoder_->parameters();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

void Network::visit(const std::function<void(Layer&)>& f) {
  encoder_.visit(f);
  classifier_.visit(f);
  if (decoder_) decoder_->visit(f);
}

// ---------------------------------------------------------------- Decoder

Decoder::Decoder(const PurenetConfig& config, Index code_bits, Index out_channels, std::uint64_t seed)
    : config_(config), code_bits_(code_bits) {
  config_.validate();
  std::mt19937_64 rng(seed);
  pu_.add<ReshapeLayer>("decoder.pu.reshape", Shape{1, 1, code_bits});
  Index ch = code_bits;
  int stage = 0;
  for (Index next : config_.stage_channels()) {
    add_transpose_cbr(pu_, "decoder.pu.cbr" + std::to_string(++stage), ch, next, rng);
    ch = next;
  }
  const Index n = config_.n_feature;
  if (config_.variant == DecoderVariant::Bbd) {
    add_transpose_cbr(refine_, "decoder.bbd.cbr", n, n, rng);
    refine_.add<ConvLayer>("decoder.bbd.rgb",
                           QuantizedWeight("decoder.bbd.rgb.w", fan_in_uniform({1, 1, n, out_channels}, n, rng),
                                           WeightPrecision::Float),
                           1, 1, true);
    return;
  }
  for (int i = 0; i < config_.rc_blocks; ++i)
    refine_.add<RCBlock>("decoder.refine.rc" + std::to_string(i + 1), n, rng);
  add_transpose_cbr(refine_, "decoder.refine.up", n, n, rng);
  refine_.add<RCBlock>("decoder.refine.rc_final", n, rng);
  refine_.add<AttentionHead>("decoder.refine.head", n, out_channels, rng);
}

void Decoder::set_variant(DecoderVariant v) {
  if ((v == DecoderVariant::Bbd) != (config_.variant == DecoderVariant::Bbd))
    throw ValidationError("cannot switch between BBD and the PURENET family on the same weights");
  config_.variant = v;
}

RealTensor Decoder::forward(const RealTensor& codes, Index rows, Index cols, const PassOptions& opt) {
  require_rank(codes.shape(), 2, "decoder codes");
  if (codes.dim(1) != code_bits_)
    throw ValidationError("decoder expects " + std::to_string(code_bits_) + "-bit codes, got " +
                          shape_string(codes.shape()));
  if (rows < 1 || cols < 1 || codes.dim(0) % (rows * cols) != 0)
    throw ValidationError("decoder: " + std::to_string(codes.dim(0)) + " codes do not fill a " + std::to_string(rows) +
                          "x" + std::to_string(cols) + " grid");
  rows_ = rows;
  cols_ = cols;
  const RealTensor u = pu_.forward(codes, opt);
  if (config_.variant == DecoderVariant::Purenet) {
    aggregate_.set_grid(rows, cols);
    return refine_.forward(aggregate_.forward(u, opt), opt);
  }
  return tile_patches(refine_.forward(u, opt), rows, cols);
}

RealTensor Decoder::backward(const RealTensor& grad) {
  RealTensor g = config_.variant == DecoderVariant::Purenet ? aggregate_.backward(refine_.backward(grad))
                                                            : refine_.backward(untile_patches(grad, rows_, cols_));
  // With the PU frozen there is no gradient to return.
  return pu_.frozen ? RealTensor() : pu_.backward(g);
}

std::vector<Parameter*> Decoder::parameters() {
  std::vector<Parameter*> out;
  pu_.collect_parameters(out);
  refine_.collect_parameters(out);
  return out;
}

void Decoder::visit(const std::function<void(Layer&)>& f) {
  pu_.visit(f);
  refine_.visit(f);
}

// ---------------------------------------------------------------- JSON

nlohmann::json to_json(const LayerSpec& s) {
  nlohmann::json j{{"name", s.name},
                   {"kind", to_string(s.kind)},
                   {"kernel", {s.kernel_h, s.kernel_w}},
                   {"input", {s.in_h, s.in_w, s.in_ch}},
                   {"out_ch", s.out_ch},
                   {"groups", s.groups},
                   {"weight_bits", s.weight_bits},
                   {"input_bits", s.input_bits},
                   {"activation", to_string(s.activation)},
                   {"section", s.encoder ? "encoder" : "classifier"}};
  if (s.fixed) j["fixed"] = true;
  return j;
}

LayerSpec layer_spec_from_json(const nlohmann::json& j) {
  try {
    LayerSpec s;
    s.name = j.at("name").get<std::string>();
    s.kind = op_kind_from_string(j.at("kind").get<std::string>());
    s.kernel_h = j.at("kernel").at(0).get<Index>();
    s.kernel_w = j.at("kernel").at(1).get<Index>();
    s.in_h = j.at("input").at(0).get<Index>();
    s.in_w = j.at("input").at(1).get<Index>();
    s.in_ch = j.at("input").at(2).get<Index>();
    s.out_ch = j.at("out_ch").get<Index>();
    s.groups = j.at("groups").get<Index>();
    s.weight_bits = j.at("weight_bits").get<int>();
    s.input_bits = j.at("input_bits").get<int>();
    s.activation = act_kind_from_string(j.at("activation").get<std::string>());
    s.encoder = j.at("section").get<std::string>() != "classifier";
    s.fixed = j.value("fixed", false);
    if (s.weight_bits < 0 || s.weight_bits > 3) throw ValidationError("weight_bits out of range in " + s.name);
    if (s.groups < 1 || s.in_ch % s.groups || s.out_ch % s.groups)
      throw ValidationError("group divisibility violated in " + s.name);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed layer spec: ") + e.what());
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j{{"F", c.F},
                   {"G", c.G},
                   {"bottleneck", to_string(c.bottleneck)},
                   {"precision", to_string(c.precision)},
                   {"input_size", c.input_size},
                   {"in_channels", c.in_channels},
                   {"classes", c.classes},
                   {"seed", c.seed}};
  if (c.decoder) {
    const auto& d = *c.decoder;
    j["decoder"] = {{"n_feature", d.n_feature},
                    {"pu_channels", d.pu_channels},
                    {"rc_blocks", d.rc_blocks},
                    {"variant", to_string(d.variant)},
                    {"patch_size", d.patch_size}};
  }
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.F = j.value("F", c.F);
    c.G = j.value("G", c.G);
    c.bottleneck = bottleneck_from_string(j.value("bottleneck", to_string(c.bottleneck)));
    c.precision = precision_from_string(j.value("precision", to_string(c.precision)));
    c.input_size = j.value("input_size", c.input_size);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.classes = j.value("classes", c.classes);
    c.seed = j.value("seed", c.seed);
    if (j.contains("decoder") && !j["decoder"].is_null()) {
      const auto& d = j["decoder"];
      PurenetConfig p;
      p.n_feature = d.value("n_feature", p.n_feature);
      if (d.contains("pu_channels")) p.pu_channels = d["pu_channels"].get<std::array<Index, 4>>();
      p.rc_blocks = d.value("rc_blocks", p.rc_blocks);
      p.variant = variant_from_string(d.value("variant", to_string(p.variant)));
      p.patch_size = d.value("patch_size", c.input_size);
      c.decoder = p;
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed model config: ") + e.what());
  }
}

nlohmann::json topology_json(const ModelConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : nqe_topology(c)) layers.push_back(to_json(s));
  return {{"config", to_json(c)}, {"layers", layers}};
}

}  // namespace nqe
