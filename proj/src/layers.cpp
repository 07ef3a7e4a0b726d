#include "nqe/layers.hpp"

#include <cmath>

namespace nqe {
namespace {

RealTensor clip_unit(const RealTensor& x) {
  return RealTensor(x.shape(), x.array().max(-1.0).min(1.0).eval());
}

void add_into(RealTensor& acc, const RealTensor& g) {
  if (acc.shape() != g.shape()) acc = RealTensor(g.shape());
  acc.array() += g.array();
}

Shape per_sample(const RealTensor& x) { return Shape(x.shape().begin() + 1, x.shape().end()); }

Shape with_batch(Index n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

RealTensor concat_channels(const RealTensor& a, const RealTensor& b) {
  const Index ca = a.shape().back(), cb = b.shape().back();
  Shape s = a.shape();
  s.back() = ca + cb;
  RealTensor out(s);
  out.matrix().leftCols(ca) = a.matrix();
  out.matrix().rightCols(cb) = b.matrix();
  return out;
}

RealTensor channel_block(const RealTensor& x, Index c0, Index count) {
  Shape s = x.shape();
  s.back() = count;
  RealTensor out(s);
  out.matrix() = x.matrix().middleCols(c0, count);
  return out;
}

}  // namespace

int level_count(WeightPrecision p) {
  switch (p) {
    case WeightPrecision::Binary: return 2;
    case WeightPrecision::Ternary: return 3;
    case WeightPrecision::Quinary: return 5;
    default: return 0;
  }
}

std::string to_string(WeightPrecision p) {
  switch (p) {
    case WeightPrecision::Binary: return "binary";
    case WeightPrecision::Ternary: return "ternary";
    case WeightPrecision::Quinary: return "quinary";
    default: return "float";
  }
}

WeightPrecision weight_precision_from_bits(int bits) {
  if (bits < 0 || bits > 3) throw ValidationError("weight precision must be 0..3 bits, got " + std::to_string(bits));
  return static_cast<WeightPrecision>(bits);
}

QuantizedWeight::QuantizedWeight(std::string name, RealTensor init, WeightPrecision precision)
    : precision_(precision) {
  proxy_.name = std::move(name);
  proxy_.value = std::move(init);
  proxy_.clip_unit = precision != WeightPrecision::Float;
  proxy_.zero_grad();
  if (precision == WeightPrecision::Ternary || precision == WeightPrecision::Quinary) {
    spec_.n_levels = level_count(precision);
    recalibrate();
  }
}

RealTensor QuantizedWeight::effective(const PassOptions& opt) const {
  switch (precision_) {
    case WeightPrecision::Float: return proxy_.value;
    case WeightPrecision::Binary: return opt.surrogate ? clip_unit(proxy_.value) : sign_binarize(proxy_.value);
    default: return opt.surrogate ? clip_unit(proxy_.value) : linear_symmetric_quantize(proxy_.value, spec_);
  }
}

std::vector<int> QuantizedWeight::codes() const {
  std::vector<int> out(static_cast<size_t>(proxy_.value.size()));
  for (Index i = 0; i < proxy_.value.size(); ++i) {
    const double w = proxy_.value[i];
    switch (precision_) {
      case WeightPrecision::Binary: out[static_cast<size_t>(i)] = w >= 0.0 ? 1 : -1; break;
      case WeightPrecision::Ternary:
      case WeightPrecision::Quinary: out[static_cast<size_t>(i)] = quantize_code(w, spec_); break;
      default: throw ValidationError("codes() on full-precision weight " + proxy_.name);
    }
  }
  return out;
}

void QuantizedWeight::accumulate_grad(const RealTensor& grad_effective) {
  add_into(proxy_.grad, precision_ == WeightPrecision::Float ? grad_effective
                                                             : ste_backward(proxy_.value, grad_effective));
}

std::optional<QuantizerSpec> QuantizedWeight::recalibrate() {
  if (precision_ != WeightPrecision::Ternary && precision_ != WeightPrecision::Quinary) return std::nullopt;
  const std::span<const double> w(proxy_.value.data(), static_cast<size_t>(proxy_.value.size()));
  const bool have_previous = spec_.n_levels == level_count(precision_) && spec_.delta > 0.0;
  spec_ = calibrate(w, level_count(precision_), have_previous ? std::optional<double>(spec_.delta) : std::nullopt);
  return spec_;
}

void Layer::no_forward_recorded() const {
  throw ValidationError(name_ + ": backward called without a recorded training-phase forward");
}

RealTensor fan_in_uniform(const Shape& shape, Index fan_in, std::mt19937_64& rng) {
  const double a = std::min(1.0, std::sqrt(6.0 / static_cast<double>(std::max<Index>(fan_in, 1))));
  std::uniform_real_distribution<double> d(-a, a);
  RealTensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

// ---------------------------------------------------------------- ConvLayer

ConvLayer::ConvLayer(std::string name, QuantizedWeight w, Index groups, Index stride, bool with_bias)
    : Layer(std::move(name)), w_(std::move(w)), groups_(groups), stride_(stride) {
  require_rank(w_.proxy().value.shape(), 4, "conv kernel");
  const Index out = w_.proxy().value.dim(3);
  if (groups_ < 1 || out % groups_ != 0)
    throw ValidationError(this->name() + ": output channels not divisible by G=" + std::to_string(groups_));
  if (with_bias) {
    bias_.emplace();
    bias_->name = this->name() + ".bias";
    bias_->value = RealTensor({out});
    bias_->zero_grad();
  }
}

Shape ConvLayer::output_shape(const Shape& in) const {
  require_rank(in, 3, "conv input");
  const auto& w = w_.proxy().value;
  if (in[2] != w.dim(2) * groups_)
    throw ValidationError(name() + ": expected " + std::to_string(w.dim(2) * groups_) + " input channels, got " +
                          shape_string(in));
  return {(in[0] + stride_ - 1) / stride_, (in[1] + stride_ - 1) / stride_, w.dim(3)};
}

RealTensor ConvLayer::effective_bias(const PassOptions& opt) const {
  RealTensor b = bias_->value;
  if (opt.phase == Phase::Eval && bias_fixed_exp) {
    const double scale = std::ldexp(1.0, -*bias_fixed_exp);
    for (Index i = 0; i < b.size(); ++i) b[i] = std::ldexp(std::clamp(std::round(b[i] * scale), -32768.0, 32767.0),
                                                           *bias_fixed_exp);
  }
  return b;
}

Index ConvLayer::kernel_column(Index c) const {
  const Index out_g = w_.proxy().value.dim(3) / groups_;
  return (c % groups_) * out_g + c / groups_;
}

RealTensor ConvLayer::forward(const RealTensor& x_in, const PassOptions& opt) {
  const bool train = opt.phase == Phase::Train;
  const RealTensor x = train ? resolve_divisor(x_in) : x_in;
  RealTensor w = w_.effective(opt);
  RealTensor y = group_conv(x, w, groups_, stride_);
  if (bias_) y = bias_add(resolve_divisor(std::move(y)), effective_bias(opt));
  recorded_ = train;
  if (train) {
    x_ = x;
    w_eff_ = std::move(w);
  }
  return y;
}

RealTensor ConvLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  w_.accumulate_grad(group_conv_backward_weight(x_, grad, w_eff_.shape(), groups_, stride_));
  if (bias_) {
    RealTensor db({grad.shape().back()});
    db.array() = grad.matrix().colwise().sum().transpose().array();
    add_into(bias_->grad, db);
  }
  return group_conv_backward_input(grad, w_eff_, x_.shape(), groups_, stride_);
}

void ConvLayer::collect_parameters(std::vector<Parameter*>& out) {
  if (frozen) return;
  out.push_back(&w_.proxy());
  if (bias_) out.push_back(&*bias_);
}

// ---------------------------------------------------------------- DepthwiseLayer

DepthwiseLayer::DepthwiseLayer(std::string name, QuantizedWeight w) : Layer(std::move(name)), w_(std::move(w)) {
  require_rank(w_.proxy().value.shape(), 4, "depthwise kernel");
}

Shape DepthwiseLayer::output_shape(const Shape& in) const {
  require_rank(in, 3, "depthwise input");
  const auto& w = w_.proxy().value;
  if (in[2] != w.dim(3) || w.dim(0) > in[0] || w.dim(1) > in[1])
    throw ValidationError(name() + ": kernel " + shape_string(w.shape()) + " does not fit input " + shape_string(in));
  return {in[0] - w.dim(0) + 1, in[1] - w.dim(1) + 1, in[2]};
}

RealTensor DepthwiseLayer::forward(const RealTensor& x_in, const PassOptions& opt) {
  const bool train = opt.phase == Phase::Train;
  const RealTensor x = train ? resolve_divisor(x_in) : x_in;
  RealTensor w = w_.effective(opt);
  RealTensor y = depthwise_conv(x, w);
  recorded_ = train;
  if (train) {
    x_ = x;
    w_eff_ = std::move(w);
  }
  return y;
}

RealTensor DepthwiseLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  auto [dx, dw] = depthwise_conv_backward(x_, w_eff_, grad);
  w_.accumulate_grad(dw);
  return dx;
}

void DepthwiseLayer::collect_parameters(std::vector<Parameter*>& out) {
  if (!frozen) out.push_back(&w_.proxy());
}

// ---------------------------------------------------------------- DenseLayer

DenseLayer::DenseLayer(std::string name, QuantizedWeight w) : Layer(std::move(name)), w_(std::move(w)) {
  require_rank(w_.proxy().value.shape(), 2, "dense kernel");
}

Shape DenseLayer::output_shape(const Shape& in) const {
  if (in.size() != 1 || in[0] != w_.proxy().value.dim(0))
    throw ValidationError(name() + ": expected [" + std::to_string(w_.proxy().value.dim(0)) + "] input, got " +
                          shape_string(in));
  return {w_.proxy().value.dim(1)};
}

RealTensor DenseLayer::forward(const RealTensor& x_in, const PassOptions& opt) {
  const bool train = opt.phase == Phase::Train;
  const RealTensor x = train ? resolve_divisor(x_in) : x_in;
  RealTensor w = w_.effective(opt);
  RealTensor y = dense(x, w);
  recorded_ = train;
  if (train) {
    x_ = x;
    w_eff_ = std::move(w);
  }
  return y;
}

RealTensor DenseLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  RealTensor dw(w_eff_.shape());
  dw.matrix().noalias() = x_.matrix().transpose() * grad.matrix();
  w_.accumulate_grad(dw);
  RealTensor dx(x_.shape());
  dx.matrix().noalias() = grad.matrix() * w_eff_.matrix().transpose();
  return dx;
}

void DenseLayer::collect_parameters(std::vector<Parameter*>& out) {
  if (!frozen) out.push_back(&w_.proxy());
}

// ---------------------------------------------------------------- FixedDenseLayer

RealTensor rademacher_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  RealTensor m({rows, cols});
  std::uint64_t bits = 0;
  for (Index i = 0; i < m.size(); ++i) {
    if (i % 64 == 0) bits = gen();
    m[i] = (bits >> (i % 64)) & 1u ? 1.0 : -1.0;
  }
  return m;
}

FixedDenseLayer::FixedDenseLayer(std::string name, Index in, Index out, std::uint64_t seed)
    : Layer(std::move(name)), seed_(seed), m_(rademacher_matrix(in, out, seed)) {}

Shape FixedDenseLayer::output_shape(const Shape& in) const {
  if (in.size() != 1 || in[0] != m_.dim(0))
    throw ValidationError(name() + ": expected [" + std::to_string(m_.dim(0)) + "] input, got " + shape_string(in));
  return {m_.dim(1)};
}

RealTensor FixedDenseLayer::forward(const RealTensor& x, const PassOptions& opt) {
  recorded_ = opt.phase == Phase::Train;
  return dense(opt.phase == Phase::Train ? resolve_divisor(x) : x, m_);
}

RealTensor FixedDenseLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  RealTensor dx({grad.dim(0), m_.dim(0)});
  dx.matrix().noalias() = grad.matrix() * m_.matrix().transpose();
  return dx;
}


// ---------------------------------------------------------------- ConvTransposeLayer

ConvTransposeLayer::ConvTransposeLayer(std::string name, RealTensor w, Index stride)
    : Layer(std::move(name)), stride_(stride) {
  require_rank(w.shape(), 4, "conv_transpose kernel");
  w_.name = this->name() + ".w";
  b_.name = this->name() + ".bias";
  b_.value = RealTensor({w.dim(3)});
  w_.value = std::move(w);
  w_.zero_grad();
  b_.zero_grad();
}

Shape ConvTransposeLayer::output_shape(const Shape& in) const {
  require_rank(in, 3, "conv_transpose input");
  if (in[2] != w_.value.dim(2)) throw ValidationError(name() + ": channel mismatch with " + shape_string(in));
  return {in[0] * stride_, in[1] * stride_, w_.value.dim(3)};
}

RealTensor ConvTransposeLayer::forward(const RealTensor& x_in, const PassOptions& opt) {
  const RealTensor x = resolve_divisor(x_in);
  recorded_ = opt.phase == Phase::Train;
  if (recorded_) x_ = x;
  return bias_add(conv_transpose2d(x, w_.value, stride_), b_.value);
}

RealTensor ConvTransposeLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  auto [dx, dw] = conv_transpose2d_backward(x_, w_.value, grad, stride_);
  add_into(w_.grad, dw);
  RealTensor db({grad.shape().back()});
  db.array() = grad.matrix().colwise().sum().transpose().array();
  add_into(b_.grad, db);
  return dx;
}

void ConvTransposeLayer::collect_parameters(std::vector<Parameter*>& out) {
  if (frozen) return;
  out.push_back(&w_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------- MaxPoolLayer

Shape MaxPoolLayer::output_shape(const Shape& in) const {
  require_rank(in, 3, "maxpool2 input");
  if (in[0] % 2 || in[1] % 2) throw ValidationError(name() + ": odd spatial dims " + shape_string(in));
  return {in[0] / 2, in[1] / 2, in[2]};
}

RealTensor MaxPoolLayer::forward(const RealTensor& x, const PassOptions& opt) {
  recorded_ = opt.phase == Phase::Train;
  if (!recorded_) return maxpool2(x);
  in_shape_ = x.shape();
  return maxpool2(resolve_divisor(x), &argmax_);
}

RealTensor MaxPoolLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  RealTensor dx(in_shape_);
  for (Index o = 0; o < grad.size(); ++o) dx[argmax_[static_cast<size_t>(o)]] += grad[o];
  return dx;
}

// ---------------------------------------------------------------- BatchNormLayer

BatchNormLayer::BatchNormLayer(std::string name, Index channels) : Layer(std::move(name)) {
  const auto id = BatchNormState::identity(channels);
  gamma_.name = this->name() + ".gamma";
  beta_.name = this->name() + ".beta";
  gamma_.value = RealTensor({channels}, id.gamma);
  beta_.value = RealTensor({channels}, id.beta);
  gamma_.zero_grad();
  beta_.zero_grad();
  moving_mean_ = id.moving_mean;
  moving_var_ = id.moving_var;
}

BatchNormState BatchNormLayer::state() const {
  BatchNormState s;
  s.gamma = gamma_.value.array();
  s.beta = beta_.value.array();
  s.moving_mean = moving_mean_;
  s.moving_var = moving_var_;
  s.eps = eps_;
  s.momentum = momentum_;
  return s;
}

void BatchNormLayer::set_state(const BatchNormState& s) {
  s.validate();
  if (s.channels() != channels()) throw ValidationError(name() + ": channel count mismatch in set_state");
  gamma_.value.array() = s.gamma;
  beta_.value.array() = s.beta;
  moving_mean_ = s.moving_mean;
  moving_var_ = s.moving_var;
  eps_ = s.eps;
  momentum_ = s.momentum;
}

RealTensor BatchNormLayer::forward(const RealTensor& x, const PassOptions& opt) {
  recorded_ = opt.phase == Phase::Train;
  if (bsn_) return bsn_apply(x, *bsn_);
  auto s = state();
  if (opt.phase == Phase::Eval) return bn_forward(x, s, BnMode::Infer);
  RealTensor y = bn_forward(x, s, BnMode::Train, &cache_);
  moving_mean_ = s.moving_mean;
  moving_var_ = s.moving_var;
  return y;
}

RealTensor BatchNormLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  if (bsn_) {
    RealTensor dx = grad;
    dx.array() *= std::ldexp(1.0, bsn_->shift_exp);
    return dx;
  }
  Eigen::ArrayXd dg, db;
  RealTensor dx = bn_backward(grad, state(), cache_, dg, db);
  add_into(gamma_.grad, RealTensor({channels()}, dg));
  add_into(beta_.grad, RealTensor({channels()}, db));
  return dx;
}

void BatchNormLayer::collect_parameters(std::vector<Parameter*>& out) {
  if (frozen || bsn_) return;
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

BsnScale BatchNormLayer::fold() {
  if (bsn_) return *bsn_;
  bsn_ = fold_to_bsn(state());
  return *bsn_;
}

void BatchNormLayer::negate_channel(Index c) {
  gamma_.value[c] = -gamma_.value[c];
  moving_mean_[c] = -moving_mean_[c];
}

void BatchNormLayer::negate_output(Index c) {
  gamma_.value[c] = -gamma_.value[c];
  beta_.value[c] = -beta_.value[c];
}

// ---------------------------------------------------------------- ActivationLayer

std::string to_string(ActKind a) {
  switch (a) {
    case ActKind::Sign: return "sign";
    case ActKind::Heaviside: return "heaviside";
    case ActKind::Hwmsb: return "hwmsb";
    case ActKind::Relu: return "relu";
    default: return "none";
  }
}

ActKind act_kind_from_string(const std::string& s) {
  for (ActKind a : {ActKind::None, ActKind::Sign, ActKind::Heaviside, ActKind::Hwmsb, ActKind::Relu})
    if (to_string(a) == s) return a;
  throw ValidationError("unknown activation '" + s + "'");
}

RealTensor ActivationLayer::forward(const RealTensor& x_in, const PassOptions& opt) {
  recorded_ = opt.phase == Phase::Train;
  if (act_ == ActKind::None) return x_in;
  const RealTensor x = resolve_divisor(x_in);
  if (recorded_) x_ = x;
  switch (act_) {
    case ActKind::Sign: return opt.surrogate ? clip_unit(x) : sign_binarize(x);
    case ActKind::Heaviside: return opt.surrogate ? clip_unit(x) : heaviside(x);
    case ActKind::Hwmsb:
      if (opt.surrogate) return RealTensor(x.shape(), x.array().unaryExpr([](double v) { return hwmsb_surrogate(v); }).eval());
      return hwmsb(x);
    default: return RealTensor(x.shape(), x.array().max(0.0).eval());
  }
}

RealTensor ActivationLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  switch (act_) {
    case ActKind::None: return grad;
    case ActKind::Sign:
    case ActKind::Heaviside: return ste_backward(x_, grad);
    case ActKind::Hwmsb: return hwmsb_backward(x_, grad);
    default: return RealTensor(grad.shape(), (x_.array() > 0.0).select(grad.array(), 0.0).eval());
  }
}

// ---------------------------------------------------------------- SoftmaxLayer

RealTensor SoftmaxLayer::forward(const RealTensor& x_in, const PassOptions& opt) {
  const RealTensor x = resolve_divisor(x_in);
  RealTensor y(x.shape());
  auto ym = y.matrix();
  const auto xm = x.matrix();
  ym = (xm.colwise() - xm.rowwise().maxCoeff()).array().exp().matrix();
  ym.array().colwise() /= ym.rowwise().sum().array();
  recorded_ = opt.phase == Phase::Train;
  if (recorded_) y_ = y;
  return y;
}

RealTensor SoftmaxLayer::backward(const RealTensor& grad) {
  if (!recorded_) no_forward_recorded();
  RealTensor dx(grad.shape());
  const auto y = y_.matrix();
  const Eigen::VectorXd dots = (grad.matrix().array() * y.array()).rowwise().sum();
  dx.matrix() = (y.array() * (grad.matrix().colwise() - dots).array()).matrix();
  return dx;
}

// ---------------------------------------------------------------- ReshapeLayer

ReshapeLayer::ReshapeLayer(std::string name, Shape target) : Layer(std::move(name)), target_(std::move(target)) {}

Shape ReshapeLayer::output_shape(const Shape& in) const {
  if (target_.empty()) return {shape_product(in)};
  if (shape_product(target_) != shape_product(in))
    throw ValidationError(name() + ": cannot reshape " + shape_string(in) + " to " + shape_string(target_));
  return target_;
}

RealTensor ReshapeLayer::forward(const RealTensor& x, const PassOptions&) {
  in_shape_ = x.shape();
  return x.reshaped(with_batch(x.dim(0), output_shape(per_sample(x))));
}

RealTensor ReshapeLayer::backward(const RealTensor& grad) {
  if (in_shape_.empty()) no_forward_recorded();
  return grad.reshaped(in_shape_);
}

// ---------------------------------------------------------------- AggregateLayer

RealTensor tile_patches(const RealTensor& p, Index rows, Index cols) {
  require_rank(p.shape(), 4, "tile_patches input");
  const Index per = rows * cols;
  if (per < 1 || p.dim(0) % per != 0)
    throw ValidationError("tile_patches: " + std::to_string(p.dim(0)) + " patches do not fill a " +
                          std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  const Index n = p.dim(0) / per, h = p.dim(1), w = p.dim(2), c = p.dim(3);
  RealTensor out({n, rows * h, cols * w, c});
  for (Index b = 0; b < n; ++b)
    for (Index r = 0; r < rows; ++r)
      for (Index q = 0; q < cols; ++q)
        for (Index i = 0; i < h; ++i)
          std::copy_n(p.data() + (((b * per + r * cols + q) * h + i) * w) * c, w * c,
                      out.data() + ((b * rows * h + r * h + i) * cols * w + q * w) * c);
  out.set_divisor(p.divisor());
  return out;
}

RealTensor untile_patches(const RealTensor& m, Index rows, Index cols) {
  require_rank(m.shape(), 4, "untile_patches input");
  if (rows < 1 || cols < 1 || m.dim(1) % rows != 0 || m.dim(2) % cols != 0)
    throw ValidationError("untile_patches: " + shape_string(m.shape()) + " is not divisible into a " +
                          std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  const Index n = m.dim(0), h = m.dim(1) / rows, w = m.dim(2) / cols, c = m.dim(3), per = rows * cols;
  RealTensor out({n * per, h, w, c});
  for (Index b = 0; b < n; ++b)
    for (Index r = 0; r < rows; ++r)
      for (Index q = 0; q < cols; ++q)
        for (Index i = 0; i < h; ++i)
          std::copy_n(m.data() + ((b * rows * h + r * h + i) * cols * w + q * w) * c, w * c,
                      out.data() + (((b * per + r * cols + q) * h + i) * w) * c);
  out.set_divisor(m.divisor());
  return out;
}

Shape AggregateLayer::output_shape(const Shape& in) const {
  require_rank(in, 3, "aggregate input");
  return {in[0] * rows_, in[1] * cols_, in[2]};
}

RealTensor AggregateLayer::forward(const RealTensor& x, const PassOptions&) {
  in_shape_ = x.shape();
  return tile_patches(x, rows_, cols_);
}

RealTensor AggregateLayer::backward(const RealTensor& grad) {
  if (in_shape_.empty()) no_forward_recorded();
  return untile_patches(grad, rows_, cols_);
}

// ---------------------------------------------------------------- Sequential

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& l : layers_) s = l->output_shape(s);
  return s;
}

RealTensor Sequential::forward(const RealTensor& x, const PassOptions& opt) {
  // A frozen block behaves as deployed and records nothing.
  const PassOptions o = frozen ? PassOptions{Phase::Eval, opt.surrogate} : opt;
  RealTensor y = x;
  for (auto& l : layers_) y = l->forward(y, o);
  return y;
}

RealTensor Sequential::backward(const RealTensor& grad) {
  if (frozen) throw ValidationError(name() + ": backward through a frozen block");
  RealTensor g = grad;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  if (frozen) return;
  for (auto& l : layers_) l->collect_parameters(out);
}

void Sequential::visit(const std::function<void(Layer&)>& f) {
  f(*this);
  for (auto& l : layers_) l->visit(f);
}

// ---------------------------------------------------------------- decoder blocks

void add_cbr(Sequential& seq, const std::string& name, Index in, Index out, std::mt19937_64& rng, Index kernel) {
  seq.add<ConvLayer>(name + ".conv",
                     QuantizedWeight(name + ".conv.w", fan_in_uniform({kernel, kernel, in, out}, kernel * kernel * in, rng),
                                     WeightPrecision::Float));
  seq.add<BatchNormLayer>(name + ".bn", out);
  seq.add<ActivationLayer>(name + ".relu", ActKind::Relu);
}

void add_transpose_cbr(Sequential& seq, const std::string& name, Index in, Index out, std::mt19937_64& rng) {
  // Each output pixel of a 3x3 stride-2 transpose sees about 9/4 of the input taps.
  seq.add<ConvTransposeLayer>(name + ".convt", fan_in_uniform({3, 3, in, out}, std::max<Index>(9 * in / 4, 1), rng), 2);
  seq.add<BatchNormLayer>(name + ".bn", out);
  seq.add<ActivationLayer>(name + ".relu", ActKind::Relu);
}

RCBlock::RCBlock(std::string name, Index channels, std::mt19937_64& rng)
    : Layer(name), cbr1_(name + ".cbr1"), cbr2_(name + ".cbr2"), channels_(channels) {
  add_cbr(cbr1_, name + ".cbr1", channels, channels, rng);
  add_cbr(cbr2_, name + ".cbr2", 2 * channels, channels, rng);
}

RealTensor RCBlock::forward(const RealTensor& x_in, const PassOptions& opt) {
  const RealTensor x = resolve_divisor(x_in);
  const RealTensor c1 = cbr1_.forward(x, opt);
  RealTensor y = cbr2_.forward(concat_channels(x, c1), opt);
  y.array() += x.array();
  return y;
}

RealTensor RCBlock::backward(const RealTensor& grad) {
  const RealTensor gcat = cbr2_.backward(grad);
  RealTensor gx = channel_block(gcat, 0, channels_);
  gx.array() += grad.array();
  gx.array() += cbr1_.backward(channel_block(gcat, channels_, channels_)).array();
  return gx;
}

void RCBlock::collect_parameters(std::vector<Parameter*>& out) {
  if (frozen) return;
  cbr1_.collect_parameters(out);
  cbr2_.collect_parameters(out);
}

void RCBlock::visit(const std::function<void(Layer&)>& f) {
  f(*this);
  cbr1_.visit(f);
  cbr2_.visit(f);
}

AttentionHead::AttentionHead(std::string name, Index channels, Index out_channels, std::mt19937_64& rng)
    : Layer(name), feat_(name + ".feat"), gate_(name + ".gate"), out_channels_(out_channels) {
  add_cbr(feat_, name + ".feat", channels, channels, rng, 1);
  add_cbr(gate_, name + ".gate", channels, channels, rng, 1);
  gate_.add<SoftmaxLayer>(name + ".gate.softmax");
  project_ = std::make_unique<ConvLayer>(
      name + ".rgb",
      QuantizedWeight(name + ".rgb.w", fan_in_uniform({1, 1, channels, out_channels}, channels, rng),
                      WeightPrecision::Float),
      1, 1, true);
}

Shape AttentionHead::output_shape(const Shape& in) const {
  require_rank(in, 3, "attention input");
  return {in[0], in[1], out_channels_};
}

RealTensor AttentionHead::forward(const RealTensor& x, const PassOptions& opt) {
  a_ = feat_.forward(x, opt);
  b_ = gate_.forward(x, opt);
  RealTensor p = a_;
  p.array() *= b_.array();
  return project_->forward(p, opt);
}

RealTensor AttentionHead::backward(const RealTensor& grad) {
  const RealTensor gp = project_->backward(grad);
  RealTensor ga = gp, gb = gp;
  ga.array() *= b_.array();
  gb.array() *= a_.array();
  RealTensor dx = feat_.backward(ga);
  dx.array() += gate_.backward(gb).array();
  return dx;
}

void AttentionHead::collect_parameters(std::vector<Parameter*>& out) {
  if (frozen) return;
  feat_.collect_parameters(out);
  gate_.collect_parameters(out);
  project_->collect_parameters(out);
}

void AttentionHead::visit(const std::function<void(Layer&)>& f) {
  f(*this);
  feat_.visit(f);
  gate_.visit(f);
  project_->visit(f);
}

}  // namespace nqe
