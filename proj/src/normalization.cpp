#include "nqe/normalization.hpp"

#include "nqe/logging.hpp"
#include "nqe/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace nqe {

BatchNormState BatchNormState::identity(Index channels) {
  BatchNormState s;
  s.gamma = Eigen::ArrayXd::Ones(channels);
  s.beta = Eigen::ArrayXd::Zero(channels);
  s.moving_mean = Eigen::ArrayXd::Zero(channels);
  s.moving_var = Eigen::ArrayXd::Ones(channels);
  return s;
}

void BatchNormState::validate() const {
  const Index c = gamma.size();
  if (beta.size() != c || moving_mean.size() != c || moving_var.size() != c)
    throw ValidationError("batch-norm state vectors have inconsistent lengths");
  if ((moving_var < 0.0).any()) throw ValidationError("batch-norm moving variance must be non-negative");
  if (!(eps > 0.0)) throw ValidationError("batch-norm epsilon must be positive");
  if (!(momentum > 0.0 && momentum < 1.0)) throw ValidationError("batch-norm momentum must lie in (0, 1)");
}

RealTensor bn_forward(const RealTensor& x_in, BatchNormState& state, BnMode mode, BnCache* cache) {
  const RealTensor x = resolve_divisor(x_in);
  const Index c = state.channels();
  if (x.rank() < 2 || x.shape().back() != c)
    throw ValidationError("batch-norm over " + std::to_string(c) + " channels got input " + shape_string(x.shape()));
  const auto xm = x.matrix();
  RealTensor y(x.shape());
  Eigen::Map<RowMatrix<double>> ym = y.matrix();

  if (mode == BnMode::Infer) {
    const Eigen::ArrayXd scale = state.folded_scale(), offset = state.folded_offset();
    ym = ((xm.array().rowwise() * scale.transpose()).rowwise() + offset.transpose()).matrix();
    if (cache) {
      cache->mode = mode;
      cache->inv_std = (state.moving_var + state.eps).rsqrt();
      cache->normalized = RealTensor(x.shape());
      cache->normalized.matrix() =
          ((xm.array().rowwise() - state.moving_mean.transpose()).rowwise() * cache->inv_std.transpose()).matrix();
    }
    return y;
  }

  const Index m = xm.rows();
  if (m < 2) throw ValidationError("batch-norm training needs at least 2 values per channel, got " + std::to_string(m));
  const Eigen::ArrayXd mean = xm.colwise().mean().transpose().array();
  const RowMatrix<double> centered = xm.rowwise() - mean.matrix().transpose();
  const Eigen::ArrayXd var = centered.array().square().colwise().mean().transpose();
  const Eigen::ArrayXd inv_std = (var + state.eps).rsqrt();
  RealTensor xhat(x.shape());
  xhat.matrix() = (centered.array().rowwise() * inv_std.transpose()).matrix();
  ym = ((xhat.matrix().array().rowwise() * state.gamma.transpose()).rowwise() + state.beta.transpose()).matrix();

  state.moving_mean = state.momentum * state.moving_mean + (1.0 - state.momentum) * mean;
  state.moving_var = state.momentum * state.moving_var + (1.0 - state.momentum) * var;
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

RealTensor bn_backward(const RealTensor& grad, const BatchNormState& state, const BnCache& cache,
                       Eigen::ArrayXd& dgamma, Eigen::ArrayXd& dbeta) {
  const auto g = grad.matrix();
  RealTensor dx(grad.shape());
  dbeta = g.colwise().sum().transpose().array();
  if (cache.mode == BnMode::Infer) {
    // Moving statistics are constants here.
    dgamma = (g.array() * cache.normalized.matrix().array()).colwise().sum().transpose();
    dx.matrix() = (g.array().rowwise() * (state.gamma * cache.inv_std).transpose()).matrix();
    return dx;
  }
  const auto xhat = cache.normalized.matrix();
  const double m = static_cast<double>(g.rows());
  dgamma = (g.array() * xhat.array()).colwise().sum().transpose();
  const RowMatrix<double> dxhat = (g.array().rowwise() * state.gamma.transpose()).matrix();
  const Eigen::ArrayXd sum_dxhat = dxhat.colwise().sum().transpose().array();
  const Eigen::ArrayXd sum_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum().transpose();
  auto out = dx.matrix();
  out.array() = (dxhat.array() * m).rowwise() - sum_dxhat.transpose();
  out.array() -= xhat.array().rowwise() * sum_dxhat_xhat.transpose();
  out.array().rowwise() *= (cache.inv_std / m).transpose();
  return dx;
}

BsnScale fold_to_bsn(const BatchNormState& state) {
  state.validate();
  if (state.channels() < 1) throw ValidationError("fold_to_bsn: layer has no channels");
  const Eigen::ArrayXd scale = state.folded_scale().abs();
  if ((scale == 0.0).all()) throw ValidationError("fold_to_bsn: all folded scales are zero");
  std::vector<double> sorted(scale.data(), scale.data() + scale.size());
  std::sort(sorted.begin(), sorted.end());
  BsnScale out;
  out.source_quantile = nearest_rank(sorted, 9, 10);
  int shift = out.source_quantile > 0.0 ? std::ilogb(out.source_quantile) : BsnScale::kMinShift;
  if (shift < BsnScale::kMinShift || shift > BsnScale::kMaxShift) {
    const int clamped = std::clamp(shift, BsnScale::kMinShift, BsnScale::kMaxShift);
    warn("BSN shift " + std::to_string(shift) + " outside 4-bit range, clamped to " + std::to_string(clamped));
    shift = clamped;
  }
  out.shift_exp = shift;
  return out;
}

RealTensor bsn_apply(const RealTensor& x, const BsnScale& scale) {
  RealTensor y = x;
  y.array() *= std::ldexp(1.0, scale.shift_exp);
  return y;
}

BsnElision elide_bsn(BsnConsumer consumer) {
  switch (consumer) {
    case BsnConsumer::Sign:
    case BsnConsumer::Heaviside:
    case BsnConsumer::Logits:
      return BsnElision::Elide;
    case BsnConsumer::Hwmsb:
      return BsnElision::AbsorbIntoHwmsb;
    default:
      return BsnElision::Keep;
  }
}

}  // namespace nqe
