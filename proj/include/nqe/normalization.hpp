#pragma once

// Batch Normalization for the first training stage and its replacement by a single
// layer-shared power-of-two BitShift Normalization (BSN).

#include "nqe/tensor.hpp"

#include <optional>

namespace nqe {

/// Per-channel BN parameters and moving statistics. Channels are the last dimension.
struct BatchNormState {
  Eigen::ArrayXd gamma, beta, moving_mean, moving_var;
  double eps = 1e-3;
  double momentum = 0.99;

  static BatchNormState identity(Index channels);
  Index channels() const { return gamma.size(); }
  void validate() const;

  /// γ̂ = γ / sqrt(σ² + ε)
  Eigen::ArrayXd folded_scale() const { return gamma / (moving_var + eps).sqrt(); }
  /// β̂ = β - γμ / sqrt(σ² + ε)
  Eigen::ArrayXd folded_offset() const { return beta - folded_scale() * moving_mean; }
};

/// y = 2^shift_exp · x, bias-free. shift_exp fits a 4-bit signed field.
struct BsnScale {
  int shift_exp = 0;
  double source_quantile = 1.0;

  static constexpr int kMinShift = -8;
  static constexpr int kMaxShift = 7;
  bool operator==(const BsnScale&) const = default;
};

enum class BnMode { Train, Infer };

/// Intermediates recorded by bn_forward for the backward pass.
struct BnCache {
  BnMode mode = BnMode::Infer;
  RealTensor normalized;          // x̂ (train mode)
  Eigen::ArrayXd inv_std;         // 1 / sqrt(var + ε) of the batch (train) or moving stats (infer)
};

/// Train mode normalizes with batch statistics and updates the moving averages;
/// infer mode applies γ̂x + β̂.
RealTensor bn_forward(const RealTensor& x, BatchNormState& state, BnMode mode, BnCache* cache = nullptr);

/// Returns dL/dx and writes dL/dγ, dL/dβ.
RealTensor bn_backward(const RealTensor& grad, const BatchNormState& state, const BnCache& cache,
                       Eigen::ArrayXd& dgamma, Eigen::ArrayXd& dbeta);

/// γ̃ = 0.9-quantile (nearest rank) of |γ̂| over channels, shift = floor(log2 γ̃),
/// clamped to [-8, 7]. β̂ is dropped.
BsnScale fold_to_bsn(const BatchNormState& state);

RealTensor bsn_apply(const RealTensor& x, const BsnScale& scale);

/// What consumes a BSN's output, as far as lowering is concerned.
enum class BsnConsumer { Sign, Heaviside, Hwmsb, Logits, Linear, Other };

enum class BsnElision { Elide, AbsorbIntoHwmsb, Keep };

/// Positive power-of-two scaling preserves sign (Sign/Heaviside) and argmax (logits),
/// and folds into the HWMSB reference position. Anything else keeps the shift.
BsnElision elide_bsn(BsnConsumer consumer);

}  // namespace nqe
