#pragma once

// Declarative NQE / bottleneck / PURENET topologies and the networks built from them.

#include "nqe/layers.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace nqe {

enum class BottleneckKind { Lfc, RcsFc, DwconvFc };
enum class PrecisionProfile { Mixed, Binary };
enum class DecoderVariant { Purenet, PiPurenet, Bbd };

std::string to_string(BottleneckKind k);
std::string to_string(PrecisionProfile p);
std::string to_string(DecoderVariant v);
BottleneckKind bottleneck_from_string(const std::string& s);
PrecisionProfile precision_from_string(const std::string& s);
DecoderVariant variant_from_string(const std::string& s);

struct PurenetConfig {
  Index n_feature = 32;
  std::array<Index, 4> pu_channels{128, 64, 32, 32};
  int rc_blocks = 3;
  DecoderVariant variant = DecoderVariant::Purenet;
  Index patch_size = 32;

  /// Stride-2 stages taking the 1x1 code to half the patch size: log2(patch / 2).
  int pu_stages() const;
  /// The last pu_stages() entries of pu_channels.
  std::vector<Index> stage_channels() const;
  void validate() const;
  bool operator==(const PurenetConfig&) const = default;
};

struct ModelConfig {
  Index F = 64;
  Index G = 4;
  BottleneckKind bottleneck = BottleneckKind::DwconvFc;
  PrecisionProfile precision = PrecisionProfile::Mixed;
  Index input_size = 32;
  Index in_channels = 3;
  Index classes = 10;
  std::uint64_t seed = 1;
  std::optional<PurenetConfig> decoder;

  Index code_bits() const { return 4 * F; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class OpKind { Conv, GroupConv, DepthwiseConv, Dense, MaxPool2, Bias, BnOrBsn, Activation, Flatten };
std::string to_string(OpKind k);
OpKind op_kind_from_string(const std::string& s);

/// One row of the topology. Spatial sizes are the op's input; weight_bits is the naive
/// storage width (3 quinary, 2 ternary, 1 binary, 0 none); input_bits the activation
/// width feeding the op. `fixed` marks the seeded random projection of RCS.
struct LayerSpec {
  std::string name;
  OpKind kind = OpKind::Conv;
  Index kernel_h = 0, kernel_w = 0;
  Index in_h = 1, in_w = 1, in_ch = 0, out_ch = 0;
  Index groups = 1;
  int weight_bits = 0;
  int input_bits = 0;
  ActKind activation = ActKind::None;
  bool fixed = false;
  bool encoder = true;  // false for the classifier head

  bool weighted() const {
    return kind == OpKind::Conv || kind == OpKind::GroupConv || kind == OpKind::DepthwiseConv || kind == OpKind::Dense;
  }
  Index param_count() const;
  Index out_h() const;
  Index out_w() const;
  bool operator==(const LayerSpec&) const = default;
};

/// The full classifier stack: encoder modules, bottleneck, classifier head.
std::vector<LayerSpec> nqe_topology(const ModelConfig& config);
/// Bottleneck rows for a 4x4x4F (at 32x32 input) Heaviside feature map.
std::vector<LayerSpec> bottleneck_topology(BottleneckKind kind, Index F, Index spatial);

class Decoder;

/// Encoder (through the bottleneck Heaviside) and classifier head, plus an optional decoder.
class Network {
 public:
  explicit Network(const ModelConfig& config);
  ~Network();

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  Sequential& encoder() { return encoder_; }
  Sequential& classifier() { return classifier_; }
  const Sequential& encoder() const { return encoder_; }
  const Sequential& classifier() const { return classifier_; }
  bool has_decoder() const { return decoder_ != nullptr; }
  Decoder& decoder();

  RealTensor encode(const RealTensor& x, const PassOptions& opt) { return encoder_.forward(x, opt); }
  RealTensor classify(const RealTensor& x, const PassOptions& opt) {
    return classifier_.forward(encoder_.forward(x, opt), opt);
  }
  std::vector<Parameter*> parameters();
  /// Every layer in forward order (encoder, classifier, decoder), composites included.
  void visit(const std::function<void(Layer&)>& f);

 private:
  ModelConfig config_;
  std::vector<LayerSpec> specs_;
  Sequential encoder_{"encoder"}, classifier_{"classifier"};
  std::unique_ptr<Decoder> decoder_;
};

/// PURENET family decoder on [P, 4F] codes.
class Decoder {
 public:
  Decoder(const PurenetConfig& config, Index code_bits, Index out_channels, std::uint64_t seed);

  const PurenetConfig& config() const { return config_; }
  DecoderVariant variant() const { return config_.variant; }
  /// Switching PI-PURENET <-> PURENET reuses the same PU and Refinement weights.
  void set_variant(DecoderVariant v);
  Sequential& upsampler() { return pu_; }
  Sequential& refinement() { return refine_; }

  /// Per-patch PU maps [P, patch/2, patch/2, n].
  RealTensor upsample(const RealTensor& codes, const PassOptions& opt) { return pu_.forward(codes, opt); }
  /// Reconstructs rows x cols patches per image: codes [N*rows*cols, 4F] -> [N, rows*P, cols*P, C].
  RealTensor forward(const RealTensor& codes, Index rows, Index cols, const PassOptions& opt);
  /// Gradient with respect to the codes of the last training-phase forward; empty when
  /// the PU is frozen.
  RealTensor backward(const RealTensor& grad);
  std::vector<Parameter*> parameters();
  void visit(const std::function<void(Layer&)>& f);

 private:
  PurenetConfig config_;
  Index code_bits_;
  Sequential pu_{"decoder.pu"}, refine_{"decoder.refine"};
  AggregateLayer aggregate_{"decoder.aggregate"};
  Index rows_ = 1, cols_ = 1;
};

nlohmann::json to_json(const LayerSpec& s);
LayerSpec layer_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json topology_json(const ModelConfig& c);

}  // namespace nqe
