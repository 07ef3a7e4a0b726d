#pragma once

// Adam, losses, augmentation, per-epoch quantizer recalibration, BN -> BSN folding,
// and the classifier and codec training schedules.

#include "nqe/datasets.hpp"
#include "nqe/topology.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace nqe {

enum class LossKind { SquaredHinge, Mse };
std::string to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

/// Classifier protocol. lr is multiplied by lr_decay every decay_period epochs; each
/// stage starts again from lr_init.
struct TrainConfig {
  Index batch_size = 50;
  int epochs_stage1 = 100;
  int epochs_stage2 = 120;
  double lr_init = 1e-3;
  double lr_decay = 0.8;
  int decay_period = 10;
  LossKind loss = LossKind::SquaredHinge;
  std::uint64_t seed = 1;
  bool augmentation = true;
  std::string dump_path;  // weights dumped here if the loss turns NaN

  void validate() const;
  double lr_at(int epoch) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct OptimizerState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;
  std::vector<RealTensor> m, v;
};

/// One bias-corrected Adam update. Proxies of quantized weights are clamped to [-1, 1]
/// afterwards. Moments are created on the first call.
void adam_step(const std::vector<Parameter*>& params, OptimizerState& state, double lr);

std::vector<std::uint8_t> serialize_optimizer(const OptimizerState& s);
OptimizerState deserialize_optimizer(std::span<const std::uint8_t> bytes);

struct LossValue {
  double value = 0.0;
  RealTensor grad;
};

/// mean over samples and classes of max(0, 1 - y·ŷ)², labels in {-1, +1}.
LossValue squared_hinge_loss(const RealTensor& logits, const RealTensor& labels);
LossValue mse_loss(const RealTensor& pred, const RealTensor& target);
/// [N, classes] with +1 at the label and -1 elsewhere.
RealTensor one_vs_rest(std::span<const int> labels, Index classes);

/// Zero-pads by `pad`, crops the original size at (dy, dx) of the padded image, and
/// mirrors horizontally when `flip`. (pad, pad) without flip is the identity.
RealTensor pad_crop_flip(const RealTensor& image, Index pad, Index dy, Index dx, bool flip);
/// 4-pixel padding, uniform random 32x32 crop, horizontal flip with probability 1/2.
RealTensor augment(const RealTensor& image, std::mt19937_64& rng);

struct QuantizerRecord {
  std::string layer;
  int n_levels = 0;
  double delta = 0.0, tau = 0.0;
};

/// Re-estimates Δ and τ of every ternary and quinary layer from its current proxies.
std::vector<QuantizerRecord> recalibrate_quantizers(Network& net);
/// The current specs without recomputing.
std::vector<QuantizerRecord> quantizer_snapshot(Network& net);

struct BsnRecord {
  std::string layer;
  int shift_exp = 0;
  Index flipped_channels = 0;
};

/// Replaces every BN of `seq` by a BSN. Channels with negative γ̂ are first flipped
/// upstream (producer output channel negated, BN rewritten for the negated input) so
/// the shared positive shift keeps their sign; after the fixed RCS projection the
/// BN output and the consumer's input row are negated instead.
std::vector<BsnRecord> fold_sequential_to_bsn(Sequential& seq);
/// Encoder and classifier.
std::vector<BsnRecord> fold_network_to_bsn(Network& net);

/// Sets every unfolded BN's moving mean and variance to the statistics of `x` as it
/// reaches that BN in evaluation phase, layer by layer. Gives untrained networks
/// realistic BSN shifts.
void estimate_bn_statistics(Network& net, const RealTensor& x);

/// Thrown when the training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using RecordSink = std::function<void(const nlohmann::json&)>;

/// Line-delimited JSON records appended to a file.
RecordSink jsonl_sink(const std::string& path);

double classification_accuracy(Network& net, const LabeledImages& data, Index batch = 256);

struct ClassifierResult {
  double stage1_accuracy = 0.0;      // after stage 1, BN, evaluation phase
  double folded_accuracy = 0.0;      // right after the BSN swap, before fine-tuning
  double stage2_accuracy = 0.0;      // after stage 2
  std::vector<nlohmann::json> log;
};

/// Stage 1 with BN, fold to BSN, stage 2 fine-tuning from the stage-1 proxies.
/// Quantizers are recalibrated before training and after every epoch of both stages.
ClassifierResult train_classifier(Network& net, const LabeledImages& data, const TrainConfig& cfg,
                                  const RecordSink& sink = {});

struct CodecStage {
  Index batch_size = 1;
  int epochs = 30;
  double lr_init = 1e-3;
  double lr_decay = 0.95;
  int decay_after = 5;  // lr ← lr·decay at the end of every epoch past this one

  double lr_at(int epoch) const;
};

/// Stage A trains NQE + PI-PURENET on patches (BN epochs, then BSN epochs, lr decaying
/// as TrainConfig); stage B trains PURENET on frames with the NQE frozen; stage C
/// freezes the PU and fine-tunes the Refinement.
struct CodecTrainConfig {
  Index batch_a = 100;
  int epochs_a_bn = 60;
  int epochs_a_bsn = 30;
  double lr_a = 1e-3;
  double lr_decay_a = 0.8;
  int decay_period_a = 10;
  CodecStage stage_b{1, 30, 1e-3, 0.95, 5};
  CodecStage stage_c{2, 30, 1e-3, 0.95, 10};
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const CodecTrainConfig& c);
CodecTrainConfig codec_train_config_from_json(const nlohmann::json& j);

/// Runs the codec stages in order; calling them out of order is a ValidationError.
class CodecTrainer {
 public:
  CodecTrainer(Network& net, CodecTrainConfig cfg, RecordSink sink = {});

  /// patches [N, P, P, 3]. Returns the per-epoch mean training MSE.
  std::vector<double> stage_a(const RealTensor& patches);
  /// frames [M, H, W, 3] with H and W multiples of P.
  std::vector<double> stage_b(const RealTensor& frames);
  std::vector<double> stage_c(const RealTensor& frames);

 private:
  std::vector<double> frame_epochs(const RealTensor& frames, const CodecStage& s, const std::string& name);

  Network& net_;
  CodecTrainConfig cfg_;
  RecordSink sink_;
  std::mt19937_64 rng_;
  int done_ = 0;
};

/// Decoder reconstruction of whole frames through the evaluation-phase encoder.
RealTensor reconstruct_frames(Network& net, const RealTensor& frames);
/// Each P x P patch replaced by its per-channel mean.
RealTensor mean_patch_baseline(const RealTensor& frames, Index patch);
/// Mean PSNR over a batch of [0,1] images.
double mean_psnr(const RealTensor& a, const RealTensor& b);

}  // namespace nqe
