#pragma once

// Layer primitives shared by the double training path and the int32 lowered path.
// Convolutions go through im2col + Eigen GEMM; all kernels are HWIO.

#include "nqe/tensor.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace nqe {

enum class Padding { Same, Valid };

struct ConvGeometry {
  Index batch = 0, in_h = 0, in_w = 0, in_c = 0;
  Index k_h = 0, k_w = 0, out_c = 0;
  Index stride = 1, pad_top = 0, pad_left = 0;
  Index out_h = 0, out_w = 0;

  Index patch_size() const { return k_h * k_w * in_c; }
  Index out_pixels() const { return out_h * out_w; }
};

/// Shapes follow TensorFlow's conventions: SAME gives ceil(in/stride), padding split
/// with the extra row/column at the bottom/right.
inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, Index stride, Padding padding) {
  require_rank(x, 4, "conv input");
  require_rank(w, 4, "conv kernel");
  if (stride < 1) throw ValidationError("conv stride must be >= 1");
  if (x[3] != w[2])
    throw ValidationError("conv channel mismatch: input " + shape_string(x) + " kernel " + shape_string(w));
  ConvGeometry g;
  g.batch = x[0];
  g.in_h = x[1];
  g.in_w = x[2];
  g.in_c = x[3];
  g.k_h = w[0];
  g.k_w = w[1];
  g.out_c = w[3];
  g.stride = stride;
  if (padding == Padding::Same) {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    const Index pad_h = std::max<Index>((g.out_h - 1) * stride + g.k_h - g.in_h, 0);
    const Index pad_w = std::max<Index>((g.out_w - 1) * stride + g.k_w - g.in_w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (g.k_h > g.in_h || g.k_w > g.in_w)
      throw ValidationError("kernel " + shape_string(w) + " larger than input " + shape_string(x));
    g.out_h = (g.in_h - g.k_h) / stride + 1;
    g.out_w = (g.in_w - g.k_w) / stride + 1;
  }
  return g;
}

namespace detail {

/// Images per GEMM chunk so the patch matrix stays around a few MB.
inline Index images_per_chunk(const ConvGeometry& g) {
  const Index per_image = std::max<Index>(g.out_pixels() * g.patch_size(), 1);
  return std::clamp<Index>((Index{1} << 21) / per_image, 1, std::max<Index>(g.batch, 1));
}

template <typename Scalar>
void im2col(const Tensor<Scalar>& x, const ConvGeometry& g, Index n0, Index n1, RowMatrix<Scalar>& cols) {
  cols.setZero((n1 - n0) * g.out_pixels(), g.patch_size());
  const Scalar* src = x.data();
  for (Index n = n0; n < n1; ++n)
    for (Index oh = 0; oh < g.out_h; ++oh)
      for (Index ow = 0; ow < g.out_w; ++ow) {
        Scalar* row = cols.row(((n - n0) * g.out_h + oh) * g.out_w + ow).data();
        for (Index kh = 0; kh < g.k_h; ++kh) {
          const Index ih = oh * g.stride + kh - g.pad_top;
          if (ih < 0 || ih >= g.in_h) continue;
          for (Index kw = 0; kw < g.k_w; ++kw) {
            const Index iw = ow * g.stride + kw - g.pad_left;
            if (iw < 0 || iw >= g.in_w) continue;
            const Scalar* px = src + ((n * g.in_h + ih) * g.in_w + iw) * g.in_c;
            std::copy(px, px + g.in_c, row + (kh * g.k_w + kw) * g.in_c);
          }
        }
      }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Index n0, Index n1, Tensor<Scalar>& dx) {
  Scalar* dst = dx.data();
  for (Index n = n0; n < n1; ++n)
    for (Index oh = 0; oh < g.out_h; ++oh)
      for (Index ow = 0; ow < g.out_w; ++ow) {
        const Scalar* row = cols.row(((n - n0) * g.out_h + oh) * g.out_w + ow).data();
        for (Index kh = 0; kh < g.k_h; ++kh) {
          const Index ih = oh * g.stride + kh - g.pad_top;
          if (ih < 0 || ih >= g.in_h) continue;
          for (Index kw = 0; kw < g.k_w; ++kw) {
            const Index iw = ow * g.stride + kw - g.pad_left;
            if (iw < 0 || iw >= g.in_w) continue;
            Scalar* px = dst + ((n * g.in_h + ih) * g.in_w + iw) * g.in_c;
            const Scalar* src = row + (kh * g.k_w + kw) * g.in_c;
            for (Index c = 0; c < g.in_c; ++c) px[c] += src[c];
          }
        }
      }
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> kernel_matrix(const Tensor<Scalar>& w) {
  return {w.data(), w.dim(0) * w.dim(1) * w.dim(2), w.dim(3)};
}

/// Copies channels [c0, c0 + count) of an NHWC tensor.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index c0, Index count) {
  Shape shape = x.shape();
  const Index channels = shape.back();
  shape.back() = count;
  Tensor<Scalar> out(shape);
  const Index pixels = x.size() / channels;
  for (Index p = 0; p < pixels; ++p)
    std::copy_n(x.data() + p * channels + c0, count, out.data() + p * count);
  out.set_divisor(x.divisor());
  return out;
}

}  // namespace detail

/// 2-D cross-correlation, NHWC input, HWIO kernel.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride = 1,
                      Padding padding = Padding::Same) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, padding);
  Tensor<Scalar> out({g.batch, g.out_h, g.out_w, g.out_c});
  const auto kernel = detail::kernel_matrix(w);
  const Index chunk = detail::images_per_chunk(g);
  RowMatrix<Scalar> cols;
  for (Index n0 = 0; n0 < g.batch; n0 += chunk) {
    const Index n1 = std::min(g.batch, n0 + chunk);
    detail::im2col(x, g, n0, n1, cols);
    Eigen::Map<RowMatrix<Scalar>> dst(out.data() + n0 * g.out_pixels() * g.out_c, cols.rows(), g.out_c);
    dst.noalias() = cols * kernel;
  }
  out.set_divisor(x.divisor());
  return out;
}

template <typename Scalar>
Tensor<Scalar> conv2d_backward_input(const Tensor<Scalar>& grad, const Tensor<Scalar>& w, const Shape& x_shape,
                                     Index stride = 1, Padding padding = Padding::Same) {
  const ConvGeometry g = conv_geometry(x_shape, w.shape(), stride, padding);
  Tensor<Scalar> dx(x_shape);
  const auto kernel = detail::kernel_matrix(w);
  const Index chunk = detail::images_per_chunk(g);
  RowMatrix<Scalar> cols;
  for (Index n0 = 0; n0 < g.batch; n0 += chunk) {
    const Index n1 = std::min(g.batch, n0 + chunk);
    Eigen::Map<const RowMatrix<Scalar>> gout(grad.data() + n0 * g.out_pixels() * g.out_c,
                                             (n1 - n0) * g.out_pixels(), g.out_c);
    cols.noalias() = gout * kernel.transpose();
    detail::col2im_add(cols, g, n0, n1, dx);
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> conv2d_backward_weight(const Tensor<Scalar>& x, const Tensor<Scalar>& grad, const Shape& w_shape,
                                      Index stride = 1, Padding padding = Padding::Same) {
  const ConvGeometry g = conv_geometry(x.shape(), w_shape, stride, padding);
  Tensor<Scalar> dw(w_shape);
  Eigen::Map<RowMatrix<Scalar>> dk(dw.data(), g.patch_size(), g.out_c);
  const Index chunk = detail::images_per_chunk(g);
  RowMatrix<Scalar> cols;
  for (Index n0 = 0; n0 < g.batch; n0 += chunk) {
    const Index n1 = std::min(g.batch, n0 + chunk);
    detail::im2col(x, g, n0, n1, cols);
    Eigen::Map<const RowMatrix<Scalar>> gout(grad.data() + n0 * g.out_pixels() * g.out_c, cols.rows(), g.out_c);
    dk.noalias() += cols.transpose() * gout;
  }
  return dw;
}

/// Output channel of group `group`, local index `j`, after the structural shuffle:
/// channels are interleaved across groups (j * G + group), as in ShuffleNet.
inline Index shuffled_channel(Index group, Index j, Index groups) { return j * groups + group; }

/// Grouped convolution: input channels split into `groups` contiguous blocks, kernel
/// HWIO with I = in_c / groups and O = out_c (columns [g*O/G, (g+1)*O/G) belong to
/// group g), followed by the interleaving channel shuffle.
template <typename Scalar>
Tensor<Scalar> group_conv(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index groups, Index stride = 1,
                          Padding padding = Padding::Same) {
  require_rank(x.shape(), 4, "group_conv input");
  require_rank(w.shape(), 4, "group_conv kernel");
  const Index in_c = x.dim(3), out_c = w.dim(3);
  if (groups < 1 || in_c % groups != 0 || out_c % groups != 0)
    throw ValidationError("group_conv: channels " + std::to_string(in_c) + "->" + std::to_string(out_c) +
                          " not divisible by G=" + std::to_string(groups));
  if (w.dim(2) * groups != in_c)
    throw ValidationError("group_conv: kernel input depth " + std::to_string(w.dim(2)) + " != in_c/G");
  if (groups == 1) return conv2d(x, w, stride, padding);
  const Index in_g = in_c / groups, out_g = out_c / groups;
  Tensor<Scalar> out;
  for (Index g = 0; g < groups; ++g) {
    const Tensor<Scalar> xg = detail::slice_channels(x, g * in_g, in_g);
    const Tensor<Scalar> wg = detail::slice_channels(w, g * out_g, out_g);
    const Tensor<Scalar> yg = conv2d(xg, wg, stride, padding);
    if (g == 0) {
      Shape s = yg.shape();
      s.back() = out_c;
      out = Tensor<Scalar>(s);
    }
    const Index pixels = yg.size() / out_g;
    for (Index p = 0; p < pixels; ++p)
      for (Index j = 0; j < out_g; ++j) out[p * out_c + shuffled_channel(g, j, groups)] = yg[p * out_g + j];
  }
  out.set_divisor(x.divisor());
  return out;
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> unshuffle_group(const Tensor<Scalar>& y, Index g, Index groups) {
  const Index out_c = y.shape().back(), out_g = out_c / groups;
  Shape s = y.shape();
  s.back() = out_g;
  Tensor<Scalar> yg(s);
  const Index pixels = y.size() / out_c;
  for (Index p = 0; p < pixels; ++p)
    for (Index j = 0; j < out_g; ++j) yg[p * out_g + j] = y[p * out_c + shuffled_channel(g, j, groups)];
  return yg;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> group_conv_backward_input(const Tensor<Scalar>& grad, const Tensor<Scalar>& w, const Shape& x_shape,
                                         Index groups, Index stride = 1, Padding padding = Padding::Same) {
  if (groups == 1) return conv2d_backward_input(grad, w, x_shape, stride, padding);
  const Index in_c = x_shape[3], in_g = in_c / groups, out_g = w.dim(3) / groups;
  Tensor<Scalar> dx(x_shape);
  Shape xg_shape = x_shape;
  xg_shape[3] = in_g;
  for (Index g = 0; g < groups; ++g) {
    const Tensor<Scalar> gg = detail::unshuffle_group(grad, g, groups);
    const Tensor<Scalar> wg = detail::slice_channels(w, g * out_g, out_g);
    const Tensor<Scalar> dxg = conv2d_backward_input(gg, wg, xg_shape, stride, padding);
    const Index pixels = dxg.size() / in_g;
    for (Index p = 0; p < pixels; ++p)
      std::copy_n(dxg.data() + p * in_g, in_g, dx.data() + p * in_c + g * in_g);
  }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> group_conv_backward_weight(const Tensor<Scalar>& x, const Tensor<Scalar>& grad, const Shape& w_shape,
                                          Index groups, Index stride = 1, Padding padding = Padding::Same) {
  if (groups == 1) return conv2d_backward_weight(x, grad, w_shape, stride, padding);
  const Index in_g = x.dim(3) / groups, out_c = w_shape[3], out_g = out_c / groups;
  Tensor<Scalar> dw(w_shape);
  Shape wg_shape = w_shape;
  wg_shape[3] = out_g;
  for (Index g = 0; g < groups; ++g) {
    const Tensor<Scalar> xg = detail::slice_channels(x, g * in_g, in_g);
    const Tensor<Scalar> gg = detail::unshuffle_group(grad, g, groups);
    const Tensor<Scalar> dwg = conv2d_backward_weight(xg, gg, wg_shape, stride, padding);
    const Index rows = dwg.size() / out_g;
    for (Index r = 0; r < rows; ++r)
      std::copy_n(dwg.data() + r * out_g, out_g, dw.data() + r * out_c + g * out_g);
  }
  return dw;
}

/// Depthwise VALID convolution, kernel [kh, kw, 1, C], stride 1.
template <typename Scalar>
Tensor<Scalar> depthwise_conv(const Tensor<Scalar>& x, const Tensor<Scalar>& w) {
  require_rank(x.shape(), 4, "depthwise input");
  require_rank(w.shape(), 4, "depthwise kernel");
  const Index c = x.dim(3);
  if (w.dim(2) != 1 || w.dim(3) != c)
    throw ValidationError("depthwise kernel " + shape_string(w.shape()) + " does not match input " +
                          shape_string(x.shape()));
  if (w.dim(0) > x.dim(1) || w.dim(1) > x.dim(2))
    throw ValidationError("depthwise kernel " + shape_string(w.shape()) + " larger than input " +
                          shape_string(x.shape()));
  const Index oh = x.dim(1) - w.dim(0) + 1, ow = x.dim(2) - w.dim(1) + 1;
  Tensor<Scalar> out({x.dim(0), oh, ow, c});
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j)
        for (Index kh = 0; kh < w.dim(0); ++kh)
          for (Index kw = 0; kw < w.dim(1); ++kw) {
            const Scalar* px = x.data() + ((n * x.dim(1) + i + kh) * x.dim(2) + j + kw) * c;
            const Scalar* wk = w.data() + (kh * w.dim(1) + kw) * c;
            Scalar* dst = out.data() + ((n * oh + i) * ow + j) * c;
            for (Index ch = 0; ch < c; ++ch) dst[ch] += px[ch] * wk[ch];
          }
  out.set_divisor(x.divisor());
  return out;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> depthwise_conv_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                                                   const Tensor<Scalar>& grad) {
  const Index c = x.dim(3), oh = grad.dim(1), ow = grad.dim(2);
  Tensor<Scalar> dx(x.shape()), dw(w.shape());
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j)
        for (Index kh = 0; kh < w.dim(0); ++kh)
          for (Index kw = 0; kw < w.dim(1); ++kw) {
            const Index xo = ((n * x.dim(1) + i + kh) * x.dim(2) + j + kw) * c;
            const Index wo = (kh * w.dim(1) + kw) * c;
            const Index go = ((n * oh + i) * ow + j) * c;
            for (Index ch = 0; ch < c; ++ch) {
              dx[xo + ch] += grad[go + ch] * w[wo + ch];
              dw[wo + ch] += grad[go + ch] * x[xo + ch];
            }
          }
  return {std::move(dx), std::move(dw)};
}

/// x [N, U] times w [U, V].
template <typename Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& x, const Tensor<Scalar>& w) {
  require_rank(x.shape(), 2, "dense input");
  require_rank(w.shape(), 2, "dense kernel");
  if (x.dim(1) != w.dim(0))
    throw ValidationError("dense shape mismatch: " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
  Tensor<Scalar> out({x.dim(0), w.dim(1)});
  out.matrix().noalias() = x.matrix() * w.matrix();
  out.set_divisor(x.divisor());
  return out;
}

/// 2x2 max pooling, stride 2. When `argmax` is given it receives, per output element,
/// the flat input index that won (first maximum in window order on ties).
template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& x, std::vector<Index>* argmax = nullptr) {
  require_rank(x.shape(), 4, "maxpool2 input");
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
    throw ValidationError("maxpool2 needs even spatial dims, got " + shape_string(x.shape()));
  const Index n = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2, c = x.dim(3);
  Tensor<Scalar> out({n, h, w, c});
  if (argmax) argmax->assign(static_cast<size_t>(out.size()), 0);
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j)
        for (Index ch = 0; ch < c; ++ch) {
          Index best = ((b * x.dim(1) + 2 * i) * x.dim(2) + 2 * j) * c + ch;
          for (Index di = 0; di < 2; ++di)
            for (Index dj = 0; dj < 2; ++dj) {
              const Index idx = ((b * x.dim(1) + 2 * i + di) * x.dim(2) + 2 * j + dj) * c + ch;
              if (x[idx] > x[best]) best = idx;
            }
          const Index o = ((b * h + i) * w + j) * c + ch;
          out[o] = x[best];
          if (argmax) (*argmax)[static_cast<size_t>(o)] = best;
        }
  out.set_divisor(x.divisor());
  return out;
}

/// Per-channel bias over the last dimension.
template <typename Scalar>
Tensor<Scalar> bias_add(Tensor<Scalar> x, const Tensor<Scalar>& b) {
  if (b.size() != x.shape().back())
    throw ValidationError("bias length " + std::to_string(b.size()) + " != channels " +
                          std::to_string(x.shape().back()));
  if (x.divisor() != 1) throw ValidationError("bias_add on a tensor with a pending divisor");
  x.matrix().rowwise() += b.array().matrix().transpose();
  return x;
}

/// Transposed 3x3-style convolution with stride s and TensorFlow SAME output size
/// (out = in * s). Kernel [kh, kw, in_c, out_c]; input pixel (i, j) scatters to
/// output (i*s + kh - pad, j*s + kw - pad) with pad = max(kh - s, 0) / 2.
struct TransposeGeometry {
  Index batch, in_h, in_w, in_c, k_h, k_w, out_c, stride, pad_top, pad_left, out_h, out_w;
};

inline TransposeGeometry transpose_geometry(const Shape& x, const Shape& w, Index stride) {
  require_rank(x, 4, "conv_transpose input");
  require_rank(w, 4, "conv_transpose kernel");
  if (x[3] != w[2]) throw ValidationError("conv_transpose channel mismatch");
  TransposeGeometry g{x[0], x[1], x[2], x[3], w[0], w[1], w[3], stride, 0, 0, x[1] * stride, x[2] * stride};
  g.pad_top = std::max<Index>(w[0] - stride, 0) / 2;
  g.pad_left = std::max<Index>(w[1] - stride, 0) / 2;
  return g;
}

template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride) {
  const TransposeGeometry g = transpose_geometry(x.shape(), w.shape(), stride);
  const Index taps = g.k_h * g.k_w;
  // Per-tap products: [pixels, taps*out_c] with W reordered to [in_c, taps*out_c].
  RowMatrix<Scalar> wmat(g.in_c, taps * g.out_c);
  for (Index t = 0; t < taps; ++t)
    for (Index ci = 0; ci < g.in_c; ++ci)
      for (Index co = 0; co < g.out_c; ++co) wmat(ci, t * g.out_c + co) = w[(t * g.in_c + ci) * g.out_c + co];
  const RowMatrix<Scalar> prod = x.matrix() * wmat;
  Tensor<Scalar> out({g.batch, g.out_h, g.out_w, g.out_c});
  for (Index n = 0; n < g.batch; ++n)
    for (Index i = 0; i < g.in_h; ++i)
      for (Index j = 0; j < g.in_w; ++j) {
        const Scalar* row = prod.row((n * g.in_h + i) * g.in_w + j).data();
        for (Index kh = 0; kh < g.k_h; ++kh) {
          const Index oh = i * stride + kh - g.pad_top;
          if (oh < 0 || oh >= g.out_h) continue;
          for (Index kw = 0; kw < g.k_w; ++kw) {
            const Index ow = j * stride + kw - g.pad_left;
            if (ow < 0 || ow >= g.out_w) continue;
            Scalar* dst = out.data() + ((n * g.out_h + oh) * g.out_w + ow) * g.out_c;
            const Scalar* src = row + (kh * g.k_w + kw) * g.out_c;
            for (Index c = 0; c < g.out_c; ++c) dst[c] += src[c];
          }
        }
      }
  return out;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> conv_transpose2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                                                     const Tensor<Scalar>& grad, Index stride) {
  const TransposeGeometry g = transpose_geometry(x.shape(), w.shape(), stride);
  const Index taps = g.k_h * g.k_w;
  // Gather grad at each tap target: [pixels, taps*out_c].
  RowMatrix<Scalar> gathered = RowMatrix<Scalar>::Zero(g.batch * g.in_h * g.in_w, taps * g.out_c);
  for (Index n = 0; n < g.batch; ++n)
    for (Index i = 0; i < g.in_h; ++i)
      for (Index j = 0; j < g.in_w; ++j) {
        Scalar* row = gathered.row((n * g.in_h + i) * g.in_w + j).data();
        for (Index kh = 0; kh < g.k_h; ++kh) {
          const Index oh = i * stride + kh - g.pad_top;
          if (oh < 0 || oh >= g.out_h) continue;
          for (Index kw = 0; kw < g.k_w; ++kw) {
            const Index ow = j * stride + kw - g.pad_left;
            if (ow < 0 || ow >= g.out_w) continue;
            const Scalar* src = grad.data() + ((n * g.out_h + oh) * g.out_w + ow) * g.out_c;
            std::copy_n(src, g.out_c, row + (kh * g.k_w + kw) * g.out_c);
          }
        }
      }
  RowMatrix<Scalar> wmat(g.in_c, taps * g.out_c);
  for (Index t = 0; t < taps; ++t)
    for (Index ci = 0; ci < g.in_c; ++ci)
      for (Index co = 0; co < g.out_c; ++co) wmat(ci, t * g.out_c + co) = w[(t * g.in_c + ci) * g.out_c + co];
  Tensor<Scalar> dx(x.shape());
  dx.matrix().noalias() = gathered * wmat.transpose();
  const RowMatrix<Scalar> dwmat = x.matrix().transpose() * gathered;
  Tensor<Scalar> dw(w.shape());
  for (Index t = 0; t < taps; ++t)
    for (Index ci = 0; ci < g.in_c; ++ci)
      for (Index co = 0; co < g.out_c; ++co) dw[(t * g.in_c + ci) * g.out_c + co] = dwmat(ci, t * g.out_c + co);
  return {std::move(dx), std::move(dw)};
}

}  // namespace nqe
