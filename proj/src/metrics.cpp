#include "nqe/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace nqe {
namespace {

using Plane = Eigen::ArrayXXd;  // rows = image rows

void require_pair(const RealTensor& a, const RealTensor& b, const char* what) {
  if (a.shape() != b.shape()) throw ValidationError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                                                    " vs " + shape_string(b.shape()));
  require_rank(a.shape(), 3, what);
}

Plane channel(const RealTensor& t, Index c) {
  const Index h = t.dim(0), w = t.dim(1), ch = t.dim(2);
  Plane p(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) p(y, x) = t[(y * w + x) * ch + c] / static_cast<double>(t.divisor());
  return p;
}

Eigen::ArrayXd gaussian(int size, double sigma) {
  Eigen::ArrayXd g(size);
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return g / g.sum();
}

// Separable valid-mode filtering.
Plane filter(const Plane& p, const Eigen::ArrayXd& gy, const Eigen::ArrayXd& gx) {
  const Index oh = p.rows() - gy.size() + 1, ow = p.cols() - gx.size() + 1;
  Plane tmp = Plane::Zero(oh, p.cols());
  for (Index k = 0; k < gy.size(); ++k) tmp += gy[k] * p.middleRows(k, oh);
  Plane out = Plane::Zero(oh, ow);
  for (Index k = 0; k < gx.size(); ++k) out += gx[k] * tmp.middleCols(k, ow);
  return out;
}

Plane downsample(const Plane& p) {
  // Odd sizes gain one repeated edge row/column first.
  const Index h = (p.rows() + 1) / 2, w = (p.cols() + 1) / 2;
  Plane out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double s = 0.0;
      for (Index dy = 0; dy < 2; ++dy)
        for (Index dx = 0; dx < 2; ++dx)
          s += p(std::min(2 * y + dy, p.rows() - 1), std::min(2 * x + dx, p.cols() - 1));
      out(y, x) = s / 4.0;
    }
  return out;
}

// Mean SSIM and mean contrast-structure term of one scale.
std::pair<double, double> ssim_cs(const Plane& a, const Plane& b, const MsSsimOptions& o) {
  const auto gy = gaussian(static_cast<int>(std::min<Index>(o.filter_size, a.rows())), o.sigma);
  const auto gx = gaussian(static_cast<int>(std::min<Index>(o.filter_size, a.cols())), o.sigma);
  const double c1 = (o.k1) * (o.k1), c2 = (o.k2) * (o.k2);
  const Plane ma = filter(a, gy, gx), mb = filter(b, gy, gx);
  const Plane num0 = 2.0 * ma * mb, den0 = ma.square() + mb.square();
  const Plane lum = (num0 + c1) / (den0 + c1);
  const Plane num1 = 2.0 * filter(a * b, gy, gx), den1 = filter(a.square() + b.square(), gy, gx);
  const Plane cs = (num1 - num0 + c2) / (den1 - den0 + c2);
  return {(lum * cs).mean(), cs.mean()};
}

}  // namespace

double psnr(const RealTensor& a, const RealTensor& b) {
  if (a.shape() != b.shape()) throw ValidationError("psnr: shape mismatch");
  if (a.size() == 0) throw ValidationError("psnr of empty images");
  const RealTensor ra = resolve_divisor(a), rb = resolve_divisor(b);
  const double mse = (ra.array() - rb.array()).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double ms_ssim(const RealTensor& a, const RealTensor& b, const MsSsimOptions& opt) {
  require_pair(a, b, "ms_ssim");
  const Index scales = static_cast<Index>(opt.weights.size());
  if ((a.dim(0) >> (scales - 1)) < 1 || (a.dim(1) >> (scales - 1)) < 1)
    throw ValidationError("ms_ssim: image too small for " + std::to_string(scales) + " scales");
  double total = 0.0;
  for (Index c = 0; c < a.dim(2); ++c) {
    Plane pa = channel(a, c), pb = channel(b, c);
    double value = 1.0;
    for (Index s = 0; s < scales; ++s) {
      if (s > 0) {
        pa = downsample(pa);
        pb = downsample(pb);
      }
      const auto [ssim, cs] = ssim_cs(pa, pb, opt);
      const double term = s + 1 == scales ? ssim : cs;
      value *= std::pow(std::max(term, 0.0), opt.weights[static_cast<size_t>(s)]);
    }
    total += value;
  }
  return total / static_cast<double>(a.dim(2));
}

}  // namespace nqe
