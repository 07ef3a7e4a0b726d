#include "nqe/training.hpp"

#include "nqe/binary_io.hpp"
#include "nqe/logging.hpp"
#include "nqe/metrics.hpp"
#include "nqe/weights_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>

namespace nqe {

std::string to_string(LossKind k) { return k == LossKind::Mse ? "mse" : "squared_hinge"; }

LossKind loss_from_string(const std::string& s) {
  if (s == "squared_hinge") return LossKind::SquaredHinge;
  if (s == "mse") return LossKind::Mse;
  throw ValidationError("unknown loss '" + s + "' (squared_hinge|mse)");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (epochs_stage1 < 0 || epochs_stage2 < 0) throw ValidationError("epoch counts must be non-negative");
  if (!(lr_init > 0.0)) throw ValidationError("lr_init must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValidationError("lr_decay must lie in (0, 1]");
  if (decay_period < 1) throw ValidationError("decay_period must be positive");
}

double TrainConfig::lr_at(int epoch) const { return lr_init * std::pow(lr_decay, epoch / decay_period); }

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"epochs_stage1", c.epochs_stage1}, {"epochs_stage2", c.epochs_stage2},
          {"lr_init", c.lr_init},       {"lr_decay", c.lr_decay},           {"decay_period", c.decay_period},
          {"loss", to_string(c.loss)},  {"seed", c.seed},                   {"augmentation", c.augmentation}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs_stage1 = j.value("epochs_stage1", c.epochs_stage1);
    c.epochs_stage2 = j.value("epochs_stage2", c.epochs_stage2);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_period = j.value("decay_period", c.decay_period);
    c.loss = loss_from_string(j.value("loss", to_string(c.loss)));
    c.seed = j.value("seed", c.seed);
    c.augmentation = j.value("augmentation", c.augmentation);
    c.dump_path = j.value("dump_path", c.dump_path);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- Adam

void adam_step(const std::vector<Parameter*>& params, OptimizerState& s, double lr) {
  if (s.m.empty()) {
    for (auto* p : params) {
      s.m.emplace_back(p->value.shape());
      s.v.emplace_back(p->value.shape());
    }
  }
  if (s.m.size() != params.size()) throw ValidationError("optimizer state holds " + std::to_string(s.m.size()) +
                                                         " moments for " + std::to_string(params.size()) + " parameters");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.shape() != p.value.shape() || s.m[i].shape() != p.value.shape())
      throw ValidationError("adam: shape mismatch for " + p.name);
    auto& m = s.m[i].array();
    auto& v = s.v[i].array();
    const auto& g = p.grad.array();
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.square();
    p.value.array() -= lr * (m / c1) / ((v / c2).sqrt() + s.eps);
    if (p.clip_unit) p.value.array() = p.value.array().min(1.0).max(-1.0);
  }
}

std::vector<std::uint8_t> serialize_optimizer(const OptimizerState& s) {
  ByteWriter w;
  for (char c : {'N', 'Q', 'E', 'O'}) w.put(static_cast<std::uint8_t>(c));
  w.put(std::uint32_t{1});
  w.put(s.beta1);
  w.put(s.beta2);
  w.put(s.eps);
  w.put(s.step);
  w.put(static_cast<std::uint32_t>(s.m.size()));
  for (size_t i = 0; i < s.m.size(); ++i)
    for (const RealTensor* t : {&s.m[i], &s.v[i]}) {
      w.put(static_cast<std::uint8_t>(t->rank()));
      for (Index d : t->shape()) w.put(static_cast<std::uint32_t>(d));
      for (Index k = 0; k < t->size(); ++k) w.put((*t)[k]);
    }
  seal(w);
  return std::move(w.bytes());
}

OptimizerState deserialize_optimizer(std::span<const std::uint8_t> bytes) {
  ByteReader r(unseal(bytes, "optimizer state"), "optimizer state");
  const auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), "NQEO", 4) != 0) throw ValidationError("not an optimizer state (bad magic)");
  if (r.get<std::uint32_t>() != 1) throw ValidationError("optimizer state version unsupported");
  OptimizerState s;
  s.beta1 = r.get<double>();
  s.beta2 = r.get<double>();
  s.eps = r.get<double>();
  s.step = r.get<std::int64_t>();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i)
    for (auto* dst : {&s.m, &s.v}) {
      Shape shape(r.get<std::uint8_t>());
      if (shape.size() > 4) throw ValidationError("optimizer state: bad rank");
      for (auto& d : shape) d = r.get<std::uint32_t>();
      RealTensor t(shape);
      for (Index k = 0; k < t.size(); ++k) t[k] = r.get<double>();
      dst->push_back(std::move(t));
    }
  if (r.remaining() != 0) throw ValidationError("optimizer state: trailing bytes");
  return s;
}

// ---------------------------------------------------------------- losses

LossValue squared_hinge_loss(const RealTensor& logits, const RealTensor& labels) {
  const RealTensor z = resolve_divisor(logits);
  if (z.shape() != labels.shape()) throw ValidationError("hinge: logits " + shape_string(z.shape()) +
                                                         " vs labels " + shape_string(labels.shape()));
  if (((labels.array() != 1.0) && (labels.array() != -1.0)).any())
    throw ValidationError("hinge labels must be -1 or +1");
  const double n = static_cast<double>(std::max<Index>(z.size(), 1));
  const Eigen::ArrayXd margin = (1.0 - labels.array() * z.array()).max(0.0);
  LossValue out;
  out.value = margin.square().sum() / n;
  out.grad = RealTensor(z.shape(), (-2.0 / n) * labels.array() * margin);
  return out;
}

LossValue mse_loss(const RealTensor& pred, const RealTensor& target) {
  const RealTensor p = resolve_divisor(pred);
  if (p.shape() != target.shape())
    throw ValidationError("mse: " + shape_string(p.shape()) + " vs " + shape_string(target.shape()));
  const double n = static_cast<double>(std::max<Index>(p.size(), 1));
  const Eigen::ArrayXd d = p.array() - target.array();
  return {d.square().sum() / n, RealTensor(p.shape(), (2.0 / n) * d)};
}

RealTensor one_vs_rest(std::span<const int> labels, Index classes) {
  RealTensor y({static_cast<Index>(labels.size()), classes}, -1.0);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw ValidationError("label out of range");
    y[static_cast<Index>(i) * classes + labels[i]] = 1.0;
  }
  return y;
}

// ---------------------------------------------------------------- augmentation

RealTensor pad_crop_flip(const RealTensor& image, Index pad, Index dy, Index dx, bool flip) {
  require_rank(image.shape(), 3, "augment input");
  const Index h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (dy < 0 || dx < 0 || dy > 2 * pad || dx > 2 * pad) throw ValidationError("crop offset outside the padded image");
  RealTensor out(image.shape());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const Index sy = y + dy - pad, sx0 = x + dx - pad;
      const Index sx = flip ? w - 1 - sx0 : sx0;
      if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
      for (Index k = 0; k < c; ++k) out[(y * w + x) * c + k] = image[(sy * w + sx) * c + k];
    }
  return out;
}

namespace {

RealTensor random_pad_crop_flip(const RealTensor& image, std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> off(0, 8);
  const Index dy = off(rng), dx = off(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  return pad_crop_flip(image, 4, dy, dx, flip);
}

}  // namespace

RealTensor augment(const RealTensor& image, std::mt19937_64& rng) {
  if (image.shape() != Shape{32, 32, 3}) throw ValidationError("augment expects 32x32x3, got " + shape_string(image.shape()));
  return random_pad_crop_flip(image, rng);
}

// ---------------------------------------------------------------- quantizers and folding

namespace {

QuantizedWeight* quantized_weight(Layer& l) {
  switch (l.kind()) {
    case LayerKind::Conv: return &static_cast<ConvLayer&>(l).weight();
    case LayerKind::DepthwiseConv: return &static_cast<DepthwiseLayer&>(l).weight();
    case LayerKind::Dense: return &static_cast<DenseLayer&>(l).weight();
    default: return nullptr;
  }
}

template <typename F>
void for_each_quantizer(Network& net, F&& f) {
  auto visit = [&](Layer& l) {
    if (auto* w = quantized_weight(l))
      if (w->precision() == WeightPrecision::Ternary || w->precision() == WeightPrecision::Quinary) f(l, *w);
  };
  net.encoder().visit(visit);
  net.classifier().visit(visit);
}

void negate_column(RealTensor& w, Index col) {
  const Index cols = w.shape().back();
  for (Index i = col; i < w.size(); i += cols) w[i] = -w[i];
}

void negate_row(RealTensor& w, Index row) {
  const Index cols = w.shape().back();
  w.array().segment(row * cols, cols) *= -1.0;
}

}  // namespace

std::vector<QuantizerRecord> recalibrate_quantizers(Network& net) {
  std::vector<QuantizerRecord> out;
  for_each_quantizer(net, [&](Layer& l, QuantizedWeight& w) {
    const auto s = *w.recalibrate();
    out.push_back({l.name(), s.n_levels, s.delta, s.tau});
  });
  return out;
}

std::vector<QuantizerRecord> quantizer_snapshot(Network& net) {
  std::vector<QuantizerRecord> out;
  for_each_quantizer(net, [&](Layer& l, QuantizedWeight& w) {
    out.push_back({l.name(), w.spec().n_levels, w.spec().delta, w.spec().tau});
  });
  return out;
}

std::vector<BsnRecord> fold_sequential_to_bsn(Sequential& seq) {
  std::vector<BsnRecord> out;
  auto& layers = seq.layers();
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i]->kind() != LayerKind::BatchNorm) continue;
    auto& bn = static_cast<BatchNormLayer&>(*layers[i]);
    if (bn.is_bsn()) continue;
    if (i == 0) throw ValidationError(bn.name() + ": BN without a producer");
    Layer& producer = *layers[i - 1];
    const Eigen::ArrayXd scale = bn.state().folded_scale();
    Index flipped = 0;
    for (Index c = 0; c < scale.size(); ++c) {
      if (!(scale[c] < 0.0)) continue;
      ++flipped;
      switch (producer.kind()) {
        case LayerKind::Conv: {
          auto& conv = static_cast<ConvLayer&>(producer);
          negate_column(conv.weight().proxy().value, conv.kernel_column(c));
          if (conv.has_bias()) conv.bias().value[c] = -conv.bias().value[c];
          bn.negate_channel(c);
          break;
        }
        case LayerKind::DepthwiseConv:
        case LayerKind::Dense:
          negate_column(quantized_weight(producer)->proxy().value, c);
          bn.negate_channel(c);
          break;
        case LayerKind::FixedDense: {
          if (i + 1 >= layers.size() || layers[i + 1]->kind() != LayerKind::Dense)
            throw ValidationError(bn.name() + ": fixed projection must feed a dense layer to fold signs");
          negate_row(static_cast<DenseLayer&>(*layers[i + 1]).weight().proxy().value, c);
          bn.negate_output(c);
          break;
        }
        default: throw ValidationError(bn.name() + ": cannot fold a negative scale through " + producer.name());
      }
    }
    const BsnScale s = bn.fold();
    out.push_back({bn.name(), s.shift_exp, flipped});
  }
  return out;
}

std::vector<BsnRecord> fold_network_to_bsn(Network& net) {
  auto out = fold_sequential_to_bsn(net.encoder());
  auto head = fold_sequential_to_bsn(net.classifier());
  out.insert(out.end(), head.begin(), head.end());
  return out;
}

// ---------------------------------------------------------------- logging helpers

void estimate_bn_statistics(Network& net, const RealTensor& x) {
  RealTensor y = x;
  for (Sequential* seq : {&net.encoder(), &net.classifier()})
    for (auto& layer : seq->layers()) {
      if (layer->kind() == LayerKind::BatchNorm) {
        auto& bn = static_cast<BatchNormLayer&>(*layer);
        if (!bn.is_bsn()) {
          const RealTensor r = resolve_divisor(y);
          const auto m = r.matrix();
          auto st = bn.state();
          st.moving_mean = m.colwise().mean().transpose().array();
          st.moving_var = (m.rowwise() - m.colwise().mean()).array().square().colwise().mean().transpose();
          bn.set_state(st);
        }
      }
      y = layer->forward(y, eval_pass());
    }
}

RecordSink jsonl_sink(const std::string& path) {
  auto out = std::make_shared<std::ofstream>(path, std::ios::app);
  if (!*out) throw ValidationError("cannot open metrics log " + path);
  return [out](const nlohmann::json& j) { *out << j.dump() << '\n' << std::flush; };
}

namespace {

nlohmann::json quantizer_json(const std::vector<QuantizerRecord>& qs) {
  auto arr = nlohmann::json::array();
  for (const auto& q : qs) arr.push_back({{"layer", q.layer}, {"n", q.n_levels}, {"delta", q.delta}, {"tau", q.tau}});
  return arr;
}

void emit(const RecordSink& sink, std::vector<nlohmann::json>* log, const nlohmann::json& j) {
  if (log) log->push_back(j);
  if (sink) sink(j);
}

std::vector<Parameter*> trunk_parameters(Network& net) {
  std::vector<Parameter*> out;
  net.encoder().collect_parameters(out);
  net.classifier().collect_parameters(out);
  return out;
}

void check_finite(double loss, Network& net, const std::string& dump_path, const std::string& where) {
  if (std::isfinite(loss)) return;
  std::string msg = "loss became non-finite during " + where;
  if (!dump_path.empty()) {
    export_weights(net, dump_path);
    msg += "; state dumped to " + dump_path;
  }
  throw TrainingDiverged(msg);
}

std::vector<Index> shuffled(Index n, std::mt19937_64& rng) {
  std::vector<Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

Index argmax_row(const RealTensor& z, Index row) {
  Index best = 0;
  z.matrix().row(row).maxCoeff(&best);
  return best;
}

}  // namespace

double classification_accuracy(Network& net, const LabeledImages& data, Index batch) {
  if (data.size() == 0) throw ValidationError("accuracy on an empty dataset");
  Index correct = 0;
  for (Index start = 0; start < data.size(); start += batch) {
    const Index n = std::min(batch, data.size() - start);
    std::vector<Index> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), start);
    const RealTensor z = net.classify(gather(data.images, idx), eval_pass());
    for (Index i = 0; i < n; ++i) correct += argmax_row(z, i) == data.labels[static_cast<size_t>(start + i)];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------- classifier

namespace {

struct EpochStats {
  double loss = 0.0, accuracy = 0.0;
};

EpochStats classifier_epoch(Network& net, const LabeledImages& data, const TrainConfig& cfg, OptimizerState& opt,
                            double lr, std::mt19937_64& rng, const std::string& stage) {
  const auto order = shuffled(data.size(), rng);
  const auto params = trunk_parameters(net);
  double loss_sum = 0.0;
  Index correct = 0, batches = 0;
  for (Index start = 0; start < data.size(); start += cfg.batch_size) {
    const Index n = std::min(cfg.batch_size, data.size() - start);
    if (n < 2) break;  // BN needs batch statistics
    std::span<const Index> idx(order.data() + start, static_cast<size_t>(n));
    RealTensor x = gather(data.images, idx);
    if (cfg.augmentation) {
      const Index per = x.size() / n;
      const Shape img(x.shape().begin() + 1, x.shape().end());
      for (Index i = 0; i < n; ++i)
        x.array().segment(i * per, per) =
            random_pad_crop_flip(RealTensor(img, x.array().segment(i * per, per).eval()), rng).array();
    }
    std::vector<int> labels;
    for (Index i : idx) labels.push_back(data.labels[static_cast<size_t>(i)]);
    const RealTensor target = one_vs_rest(labels, data.classes);

    const RealTensor z = net.classify(x, train_pass());
    const LossValue l = cfg.loss == LossKind::SquaredHinge ? squared_hinge_loss(z, target) : mse_loss(z, target);
    check_finite(l.value, net, cfg.dump_path, stage);
    for (auto* p : params) p->zero_grad();
    net.encoder().backward(net.classifier().backward(l.grad));
    adam_step(params, opt, lr);

    loss_sum += l.value;
    const RealTensor zr = resolve_divisor(z);
    for (Index i = 0; i < n; ++i) correct += argmax_row(zr, i) == labels[static_cast<size_t>(i)];
    ++batches;
  }
  if (batches == 0) throw ValidationError("dataset smaller than two samples per batch");
  return {loss_sum / static_cast<double>(batches), static_cast<double>(correct) / static_cast<double>(data.size())};
}

}  // namespace

ClassifierResult train_classifier(Network& net, const LabeledImages& data, const TrainConfig& cfg,
                                  const RecordSink& sink) {
  cfg.validate();
  if (data.size() == 0) throw ValidationError("train_classifier: empty dataset");
  if (data.classes != net.config().classes)
    throw ValidationError("dataset has " + std::to_string(data.classes) + " classes, model " +
                          std::to_string(net.config().classes));
  ClassifierResult res;
  auto config_record = to_json(cfg);
  config_record["record"] = "config";
  config_record["model"] = to_json(net.config());
  config_record["optimizer"] = {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}};
  emit(sink, &res.log, config_record);

  std::mt19937_64 rng(cfg.seed);
  recalibrate_quantizers(net);
  for (int stage = 1; stage <= 2; ++stage) {
    const int epochs = stage == 1 ? cfg.epochs_stage1 : cfg.epochs_stage2;
    const std::string name = stage == 1 ? "stage1_bn" : "stage2_bsn";
    if (stage == 2) {
      const auto folds = fold_network_to_bsn(net);
      recalibrate_quantizers(net);
      res.folded_accuracy = classification_accuracy(net, data);
      auto arr = nlohmann::json::array();
      for (const auto& f : folds) arr.push_back({{"layer", f.layer}, {"shift", f.shift_exp}, {"flipped", f.flipped_channels}});
      emit(sink, &res.log, {{"record", "bsn_fold"}, {"layers", arr}, {"accuracy", res.folded_accuracy}});
    }
    OptimizerState opt;
    for (int e = 0; e < epochs; ++e) {
      const double lr = cfg.lr_at(e);
      const auto st = classifier_epoch(net, data, cfg, opt, lr, rng, name);
      const auto qs = recalibrate_quantizers(net);
      emit(sink, &res.log,
           {{"record", "epoch"}, {"stage", name}, {"epoch", e + 1}, {"loss", st.loss}, {"accuracy", st.accuracy},
            {"lr", lr}, {"quantizers", quantizer_json(qs)}});
    }
    const double acc = classification_accuracy(net, data);
    (stage == 1 ? res.stage1_accuracy : res.stage2_accuracy) = acc;
    emit(sink, &res.log, {{"record", "stage_end"}, {"stage", name}, {"eval_accuracy", acc}});
  }
  return res;
}

// ---------------------------------------------------------------- codec

double CodecStage::lr_at(int epoch) const { return lr_init * std::pow(lr_decay, std::max(0, epoch + 1 - decay_after)); }

void CodecTrainConfig::validate() const {
  if (batch_a < 1 || stage_b.batch_size < 1 || stage_c.batch_size < 1) throw ValidationError("batch sizes must be positive");
  if (epochs_a_bn < 0 || epochs_a_bsn < 0 || stage_b.epochs < 0 || stage_c.epochs < 0)
    throw ValidationError("epoch counts must be non-negative");
  for (double lr : {lr_a, stage_b.lr_init, stage_c.lr_init})
    if (!(lr > 0.0)) throw ValidationError("learning rates must be positive");
  for (double d : {lr_decay_a, stage_b.lr_decay, stage_c.lr_decay})
    if (!(d > 0.0 && d <= 1.0)) throw ValidationError("lr decay must lie in (0, 1]");
  if (decay_period_a < 1) throw ValidationError("decay_period_a must be positive");
}

namespace {

nlohmann::json stage_json(const CodecStage& s) {
  return {{"batch_size", s.batch_size}, {"epochs", s.epochs}, {"lr_init", s.lr_init}, {"lr_decay", s.lr_decay},
          {"decay_after", s.decay_after}};
}

CodecStage stage_from_json(const nlohmann::json& j, CodecStage s) {
  s.batch_size = j.value("batch_size", s.batch_size);
  s.epochs = j.value("epochs", s.epochs);
  s.lr_init = j.value("lr_init", s.lr_init);
  s.lr_decay = j.value("lr_decay", s.lr_decay);
  s.decay_after = j.value("decay_after", s.decay_after);
  return s;
}

}  // namespace

nlohmann::json to_json(const CodecTrainConfig& c) {
  return {{"batch_a", c.batch_a},         {"epochs_a_bn", c.epochs_a_bn},       {"epochs_a_bsn", c.epochs_a_bsn},
          {"lr_a", c.lr_a},               {"lr_decay_a", c.lr_decay_a},         {"decay_period_a", c.decay_period_a},
          {"stage_b", stage_json(c.stage_b)}, {"stage_c", stage_json(c.stage_c)}, {"seed", c.seed}};
}

CodecTrainConfig codec_train_config_from_json(const nlohmann::json& j) {
  CodecTrainConfig c;
  try {
    c.batch_a = j.value("batch_a", c.batch_a);
    c.epochs_a_bn = j.value("epochs_a_bn", c.epochs_a_bn);
    c.epochs_a_bsn = j.value("epochs_a_bsn", c.epochs_a_bsn);
    c.lr_a = j.value("lr_a", c.lr_a);
    c.lr_decay_a = j.value("lr_decay_a", c.lr_decay_a);
    c.decay_period_a = j.value("decay_period_a", c.decay_period_a);
    if (j.contains("stage_b")) c.stage_b = stage_from_json(j["stage_b"], c.stage_b);
    if (j.contains("stage_c")) c.stage_c = stage_from_json(j["stage_c"], c.stage_c);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("codec train config: ") + e.what());
  }
  c.validate();
  return c;
}

CodecTrainer::CodecTrainer(Network& net, CodecTrainConfig cfg, RecordSink sink)
    : net_(net), cfg_(std::move(cfg)), sink_(std::move(sink)), rng_(cfg_.seed) {
  cfg_.validate();
  if (!net_.has_decoder()) throw ValidationError("codec training needs a model with a decoder");
  if (net_.decoder().variant() == DecoderVariant::Bbd)
    throw ValidationError("codec stages train PI-PURENET then PURENET; the model has a BBD decoder");
  auto rec = to_json(cfg_);
  rec["record"] = "config";
  rec["model"] = to_json(net_.config());
  emit(sink_, nullptr, rec);
}

std::vector<double> CodecTrainer::stage_a(const RealTensor& patches) {
  if (done_ != 0) throw ValidationError("codec stage A must run first and only once");
  const Index P = net_.decoder().config().patch_size;
  if (patches.rank() != 4 || patches.dim(1) != P || patches.dim(2) != P)
    throw ValidationError("stage A expects [N, " + std::to_string(P) + ", " + std::to_string(P) + ", C] patches, got " +
                          shape_string(patches.shape()));
  if (patches.dim(0) < 2) throw ValidationError("stage A: empty patch set");
  Decoder& dec = net_.decoder();
  dec.set_variant(DecoderVariant::PiPurenet);
  recalibrate_quantizers(net_);
  std::vector<double> losses;
  const int total = cfg_.epochs_a_bn + cfg_.epochs_a_bsn;
  OptimizerState opt;
  for (int e = 0; e < total; ++e) {
    const bool bsn = e >= cfg_.epochs_a_bn;
    if (e == cfg_.epochs_a_bn && bsn) {
      fold_sequential_to_bsn(net_.encoder());
      recalibrate_quantizers(net_);
      opt = OptimizerState{};
    }
    const int sub = bsn ? e - cfg_.epochs_a_bn : e;
    const double lr = cfg_.lr_a * std::pow(cfg_.lr_decay_a, sub / cfg_.decay_period_a);
    std::vector<Parameter*> params;
    net_.encoder().collect_parameters(params);
    for (auto* p : dec.parameters()) params.push_back(p);

    const auto order = shuffled(patches.dim(0), rng_);
    double sum = 0.0;
    Index batches = 0;
    for (Index start = 0; start < patches.dim(0); start += cfg_.batch_a) {
      const Index n = std::min(cfg_.batch_a, patches.dim(0) - start);
      if (n < 2) break;
      const RealTensor x = gather(patches, std::span<const Index>(order.data() + start, static_cast<size_t>(n)));
      const RealTensor codes = net_.encode(x, train_pass());
      const RealTensor y = dec.forward(codes, 1, 1, train_pass());
      const LossValue l = mse_loss(y, x);
      check_finite(l.value, net_, "", "codec stage A");
      for (auto* p : params) p->zero_grad();
      net_.encoder().backward(dec.backward(l.grad));
      adam_step(params, opt, lr);
      sum += l.value;
      ++batches;
    }
    const auto qs = recalibrate_quantizers(net_);
    losses.push_back(sum / static_cast<double>(std::max<Index>(batches, 1)));
    emit(sink_, nullptr,
         {{"record", "epoch"}, {"stage", bsn ? "A_bsn" : "A_bn"}, {"epoch", e + 1}, {"loss", losses.back()},
          {"psnr", 10.0 * std::log10(1.0 / losses.back())}, {"lr", lr}, {"quantizers", quantizer_json(qs)}});
  }
  if (cfg_.epochs_a_bsn == 0) {
    fold_sequential_to_bsn(net_.encoder());
    recalibrate_quantizers(net_);
  }
  done_ = 1;
  return losses;
}

std::vector<double> CodecTrainer::frame_epochs(const RealTensor& frames, const CodecStage& s, const std::string& name) {
  const Index P = net_.decoder().config().patch_size;
  if (frames.rank() != 4 || frames.dim(1) % P != 0 || frames.dim(2) % P != 0 || frames.dim(0) < 1)
    throw ValidationError("stage " + name + " expects frames [M, H, W, C] with H, W multiples of " + std::to_string(P) +
                          ", got " + shape_string(frames.shape()));
  const Index rows = frames.dim(1) / P, cols = frames.dim(2) / P;
  Decoder& dec = net_.decoder();
  const auto params = dec.parameters();
  OptimizerState opt;
  std::vector<double> losses;
  for (int e = 0; e < s.epochs; ++e) {
    const double lr = s.lr_at(e);
    const auto order = shuffled(frames.dim(0), rng_);
    double sum = 0.0;
    Index batches = 0;
    for (Index start = 0; start < frames.dim(0); start += s.batch_size) {
      const Index n = std::min(s.batch_size, frames.dim(0) - start);
      const RealTensor x = gather(frames, std::span<const Index>(order.data() + start, static_cast<size_t>(n)));
      const RealTensor codes = net_.encode(untile_patches(x, rows, cols), train_pass());
      const RealTensor y = dec.forward(codes, rows, cols, train_pass());
      const LossValue l = mse_loss(y, x);
      check_finite(l.value, net_, "", "codec stage " + name);
      for (auto* p : params) p->zero_grad();
      dec.backward(l.grad);
      adam_step(params, opt, lr);
      sum += l.value;
      ++batches;
    }
    losses.push_back(sum / static_cast<double>(batches));
    emit(sink_, nullptr,
         {{"record", "epoch"}, {"stage", name}, {"epoch", e + 1}, {"loss", losses.back()},
          {"psnr", 10.0 * std::log10(1.0 / losses.back())}, {"lr", lr}});
  }
  return losses;
}

std::vector<double> CodecTrainer::stage_b(const RealTensor& frames) {
  if (done_ != 1) throw ValidationError("codec stage B requires stage A and runs once");
  net_.decoder().set_variant(DecoderVariant::Purenet);
  net_.encoder().frozen = true;
  std::vector<double> out;
  try {
    out = frame_epochs(frames, cfg_.stage_b, "B");
  } catch (...) {
    net_.encoder().frozen = false;
    throw;
  }
  net_.encoder().frozen = false;
  done_ = 2;
  return out;
}

std::vector<double> CodecTrainer::stage_c(const RealTensor& frames) {
  if (done_ != 2) throw ValidationError("codec stage C requires stage B and runs once");
  net_.encoder().frozen = true;
  net_.decoder().upsampler().frozen = true;
  std::vector<double> out;
  try {
    out = frame_epochs(frames, cfg_.stage_c, "C");
  } catch (...) {
    net_.encoder().frozen = false;
    net_.decoder().upsampler().frozen = false;
    throw;
  }
  net_.encoder().frozen = false;
  net_.decoder().upsampler().frozen = false;
  done_ = 3;
  return out;
}

RealTensor reconstruct_frames(Network& net, const RealTensor& frames) {
  if (!net.has_decoder()) throw ValidationError("model has no decoder");
  const Index P = net.decoder().config().patch_size;
  require_rank(frames.shape(), 4, "frames");
  if (frames.dim(1) % P != 0 || frames.dim(2) % P != 0)
    throw ValidationError("frame size not divisible by the patch size " + std::to_string(P));
  const Index rows = frames.dim(1) / P, cols = frames.dim(2) / P;
  RealTensor out(frames.shape());
  const Index per = frames.size() / frames.dim(0);
  for (Index i = 0; i < frames.dim(0); ++i) {
    const Index idx[] = {i};
    const RealTensor codes = net.encode(untile_patches(gather(frames, idx), rows, cols), eval_pass());
    const RealTensor y = resolve_divisor(net.decoder().forward(resolve_divisor(codes), rows, cols, eval_pass()));
    out.array().segment(i * per, per) = y.array().max(0.0).min(1.0);
  }
  return out;
}

RealTensor mean_patch_baseline(const RealTensor& frames, Index patch) {
  require_rank(frames.shape(), 4, "frames");
  if (frames.dim(1) % patch != 0 || frames.dim(2) % patch != 0)
    throw ValidationError("frame size not divisible by the patch size");
  const Index rows = frames.dim(1) / patch, cols = frames.dim(2) / patch;
  RealTensor p = untile_patches(frames, rows, cols);
  const Index c = p.dim(3), per = patch * patch;
  for (Index i = 0; i < p.dim(0); ++i) {
    auto block = p.array().segment(i * per * c, per * c).reshaped(c, per);
    const Eigen::ArrayXd mean = block.rowwise().mean();
    block.colwise() = mean;
  }
  return tile_patches(p, rows, cols);
}

double mean_psnr(const RealTensor& a, const RealTensor& b) {
  if (a.shape() != b.shape() || a.rank() < 2) throw ValidationError("mean_psnr: shape mismatch");
  const Index per = a.size() / a.dim(0);
  const Shape img(a.shape().begin() + 1, a.shape().end());
  double sum = 0.0;
  for (Index i = 0; i < a.dim(0); ++i)
    sum += psnr(RealTensor(img, a.array().segment(i * per, per).eval()),
                RealTensor(img, b.array().segment(i * per, per).eval()));
  return sum / static_cast<double>(a.dim(0));
}

}  // namespace nqe
