#pragma once

// Trainable layer graph for the real-valued path. Each layer records what its backward
// pass needs during a training-phase forward. Evaluation-phase forwards keep the
// rational HWMSB divisor intact so quantized evaluation stays exact.

#include "nqe/activations.hpp"
#include "nqe/normalization.hpp"
#include "nqe/ops.hpp"
#include "nqe/quantizers.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace nqe {

enum class Phase { Train, Eval };

/// `surrogate` swaps every quantizer for the continuous function whose derivative the
/// backward pass computes (clip for weights, Sign and Heaviside; hwmsb_surrogate).
struct PassOptions {
  Phase phase = Phase::Eval;
  bool surrogate = false;
};

inline PassOptions train_pass() { return {Phase::Train, false}; }
inline PassOptions eval_pass() { return {Phase::Eval, false}; }

struct Parameter {
  std::string name;
  RealTensor value, grad;
  bool clip_unit = false;  // quantized proxy: kept in [-1, 1] by the optimizer

  void zero_grad() { grad = RealTensor(value.shape()); }
};

/// Weight precision by naive storage bits: 3 quinary, 2 ternary, 1 binary, 0 full precision.
enum class WeightPrecision { Float = 0, Binary = 1, Ternary = 2, Quinary = 3 };

int level_count(WeightPrecision p);
std::string to_string(WeightPrecision p);
WeightPrecision weight_precision_from_bits(int bits);

/// Real-valued proxy plus its deployed quantization.
class QuantizedWeight {
 public:
  QuantizedWeight() = default;
  QuantizedWeight(std::string name, RealTensor init, WeightPrecision precision);

  Parameter& proxy() { return proxy_; }
  const Parameter& proxy() const { return proxy_; }
  WeightPrecision precision() const { return precision_; }
  const QuantizerSpec& spec() const { return spec_; }
  void set_spec(const QuantizerSpec& s) { spec_ = s; }

  /// Deployed weight: Sign for binary, the linear symmetric quantizer for ternary and
  /// quinary, the proxy itself for full precision. Surrogate mode returns Clip(w, -1, 1).
  RealTensor effective(const PassOptions& opt) const;
  /// Integer codes: binary +-1, ternary {-1,0,1}, quinary {-2..2} (value = code / 2).
  std::vector<int> codes() const;
  /// Accumulates dL/dproxy from dL/d(effective weight).
  void accumulate_grad(const RealTensor& grad_effective);
  /// Re-estimates Δ and τ from the current proxies (ternary and quinary only).
  std::optional<QuantizerSpec> recalibrate();

 private:
  Parameter proxy_;
  WeightPrecision precision_ = WeightPrecision::Float;
  QuantizerSpec spec_{};
};

enum class LayerKind {
  Conv,
  DepthwiseConv,
  Dense,
  FixedDense,
  ConvTranspose,
  MaxPool2,
  BatchNorm,
  Activation,
  Flatten,
  Reshape,
  Softmax,
  Aggregate,
  Sequential,
  RCBlock,
  Attention,
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const { return name_; }
  virtual LayerKind kind() const = 0;
  /// Per-sample output shape for a per-sample input shape (batch dimension excluded).
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual RealTensor forward(const RealTensor& x, const PassOptions& opt) = 0;
  /// Gradient with respect to the input of the last training-phase forward.
  virtual RealTensor backward(const RealTensor& grad) = 0;
  virtual void collect_parameters(std::vector<Parameter*>&) {}
  /// Visits this layer and, for composites, every sub-layer in forward order.
  virtual void visit(const std::function<void(Layer&)>& f) { f(*this); }

  bool frozen = false;

 protected:
  [[noreturn]] void no_forward_recorded() const;

 private:
  std::string name_;
};

using LayerPtr = std::unique_ptr<Layer>;

/// Convolution (groups >= 1, SAME padding) with an optional channel bias. With
/// `bias_fixed_exp` set, evaluation-phase forwards use the bias rounded to 16-bit
/// fixed point at that exponent, as the integer path does.
class ConvLayer : public Layer {
 public:
  ConvLayer(std::string name, QuantizedWeight w, Index groups = 1, Index stride = 1, bool with_bias = false);
  LayerKind kind() const override { return LayerKind::Conv; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  QuantizedWeight& weight() { return w_; }
  const QuantizedWeight& weight() const { return w_; }
  Index groups() const { return groups_; }
  Index stride() const { return stride_; }
  bool has_bias() const { return bias_.has_value(); }
  Parameter& bias() { return *bias_; }
  const Parameter& bias() const { return *bias_; }
  std::optional<int> bias_fixed_exp;
  RealTensor effective_bias(const PassOptions& opt) const;
  /// Kernel column of output channel c (undoes the group shuffle).
  Index kernel_column(Index c) const;

 private:
  QuantizedWeight w_;
  Index groups_, stride_;
  std::optional<Parameter> bias_;
  RealTensor x_, w_eff_;
  bool recorded_ = false;
};

class DepthwiseLayer : public Layer {
 public:
  DepthwiseLayer(std::string name, QuantizedWeight w);
  LayerKind kind() const override { return LayerKind::DepthwiseConv; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  QuantizedWeight& weight() { return w_; }
  const QuantizedWeight& weight() const { return w_; }

 private:
  QuantizedWeight w_;
  RealTensor x_, w_eff_;
  bool recorded_ = false;
};

class DenseLayer : public Layer {
 public:
  DenseLayer(std::string name, QuantizedWeight w);
  LayerKind kind() const override { return LayerKind::Dense; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  QuantizedWeight& weight() { return w_; }
  const QuantizedWeight& weight() const { return w_; }

 private:
  QuantizedWeight w_;
  RealTensor x_, w_eff_;
  bool recorded_ = false;
};

/// Dense layer with a fixed Rademacher (+-1) matrix regenerated from a seed; never
/// stored and never trained.
class FixedDenseLayer : public Layer {
 public:
  FixedDenseLayer(std::string name, Index in, Index out, std::uint64_t seed);
  LayerKind kind() const override { return LayerKind::FixedDense; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  const RealTensor& matrix() const { return m_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  RealTensor m_;
  bool recorded_ = false;
};

RealTensor rademacher_matrix(Index rows, Index cols, std::uint64_t seed);

/// Full-precision transposed convolution, stride s, plus channel bias.
class ConvTransposeLayer : public Layer {
 public:
  ConvTransposeLayer(std::string name, RealTensor w, Index stride);
  LayerKind kind() const override { return LayerKind::ConvTranspose; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  Parameter& weight() { return w_; }
  Parameter& bias() { return b_; }
  Index stride() const { return stride_; }

 private:
  Parameter w_, b_;
  Index stride_;
  RealTensor x_;
  bool recorded_ = false;
};

class MaxPoolLayer : public Layer {
 public:
  explicit MaxPoolLayer(std::string name) : Layer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::MaxPool2; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;

 private:
  Shape in_shape_;
  std::vector<Index> argmax_;
  bool recorded_ = false;
};

/// Batch Normalization during the first stage; after `fold()` a bias-free BSN.
class BatchNormLayer : public Layer {
 public:
  BatchNormLayer(std::string name, Index channels);
  LayerKind kind() const override { return LayerKind::BatchNorm; }
  Shape output_shape(const Shape& in) const override { return in; }
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;

  Index channels() const { return gamma_.value.size(); }
  BatchNormState state() const;
  void set_state(const BatchNormState& s);
  bool is_bsn() const { return bsn_.has_value(); }
  const BsnScale& bsn() const { return *bsn_; }
  void set_bsn(const BsnScale& s) { bsn_ = s; }
  void clear_bsn() { bsn_.reset(); }
  /// Replaces BN by the BSN folded from the current statistics.
  BsnScale fold();
  /// Flips channel c: negates γ and the moving mean so the layer computes the same
  /// function of a negated input channel.
  void negate_channel(Index c);
  /// Negates γ and β of channel c, so the layer output of that channel changes sign.
  void negate_output(Index c);

 private:
  Parameter gamma_, beta_;
  Eigen::ArrayXd moving_mean_, moving_var_;
  double eps_ = 1e-3, momentum_ = 0.99;
  std::optional<BsnScale> bsn_;
  BnCache cache_;
  bool recorded_ = false;
};

enum class ActKind { None, Sign, Heaviside, Hwmsb, Relu };
std::string to_string(ActKind a);
ActKind act_kind_from_string(const std::string& s);

class ActivationLayer : public Layer {
 public:
  ActivationLayer(std::string name, ActKind act) : Layer(std::move(name)), act_(act) {}
  LayerKind kind() const override { return LayerKind::Activation; }
  Shape output_shape(const Shape& in) const override { return in; }
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  ActKind act() const { return act_; }

 private:
  ActKind act_;
  RealTensor x_;
  bool recorded_ = false;
};

/// Softmax across channels at every pixel.
class SoftmaxLayer : public Layer {
 public:
  explicit SoftmaxLayer(std::string name) : Layer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::Softmax; }
  Shape output_shape(const Shape& in) const override { return in; }
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;

 private:
  RealTensor y_;
  bool recorded_ = false;
};

/// [N, ...] -> [N, target...]. An empty target flattens to [N, U].
class ReshapeLayer : public Layer {
 public:
  ReshapeLayer(std::string name, Shape target = {});
  LayerKind kind() const override { return target_.empty() ? LayerKind::Flatten : LayerKind::Reshape; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;

 private:
  Shape target_, in_shape_;
};

/// Tiles per-patch maps [N*rows*cols, h, w, C] into mosaics [N, rows*h, cols*w, C]
/// in row-major patch order.
class AggregateLayer : public Layer {
 public:
  explicit AggregateLayer(std::string name) : Layer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::Aggregate; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void set_grid(Index rows, Index cols) {
    rows_ = rows;
    cols_ = cols;
  }

 private:
  Index rows_ = 1, cols_ = 1;
  Shape in_shape_;
};

RealTensor tile_patches(const RealTensor& patches, Index rows, Index cols);
RealTensor untile_patches(const RealTensor& mosaic, Index rows, Index cols);

class Sequential : public Layer {
 public:
  explicit Sequential(std::string name) : Layer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::Sequential; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void visit(const std::function<void(Layer&)>& f) override;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }
  void push(LayerPtr p) { layers_.push_back(std::move(p)); }

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }
  const Layer& at(std::size_t i) const { return *layers_.at(i); }
  std::vector<LayerPtr>& layers() { return layers_; }

 private:
  std::vector<LayerPtr> layers_;
};

/// Residual and Concatenation block: y = x + cbr2(concat(x, cbr1(x))).
class RCBlock : public Layer {
 public:
  RCBlock(std::string name, Index channels, std::mt19937_64& rng);
  LayerKind kind() const override { return LayerKind::RCBlock; }
  Shape output_shape(const Shape& in) const override { return in; }
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void visit(const std::function<void(Layer&)>& f) override;

 private:
  Sequential cbr1_, cbr2_;
  Index channels_;
};

/// Two 1x1 conv+BN+ReLU branches, one followed by a channel softmax, multiplied
/// elementwise and projected to RGB by a 1x1 convolution with bias.
class AttentionHead : public Layer {
 public:
  AttentionHead(std::string name, Index channels, Index out_channels, std::mt19937_64& rng);
  LayerKind kind() const override { return LayerKind::Attention; }
  Shape output_shape(const Shape& in) const override;
  RealTensor forward(const RealTensor& x, const PassOptions& opt) override;
  RealTensor backward(const RealTensor& grad) override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void visit(const std::function<void(Layer&)>& f) override;

 private:
  Sequential feat_, gate_;
  LayerPtr project_;
  RealTensor a_, b_;
  Index out_channels_;
};

/// Uniform init in +-sqrt(6 / fan_in), capped at 1.
RealTensor fan_in_uniform(const Shape& shape, Index fan_in, std::mt19937_64& rng);

/// Conv (3x3 unless `kernel` given) + BN + ReLU, full precision.
void add_cbr(Sequential& seq, const std::string& name, Index in, Index out, std::mt19937_64& rng, Index kernel = 3);
/// Transposed 3x3 stride-2 conv + BN + ReLU, full precision.
void add_transpose_cbr(Sequential& seq, const std::string& name, Index in, Index out, std::mt19937_64& rng);

}  // namespace nqe
