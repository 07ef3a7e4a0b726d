#include "doctest.h"

#include "nqe/ops.hpp"
#include "nqe/quantizers.hpp"

#include <random>

using namespace nqe;

namespace {

std::mt19937_64 rng(2024);

// Small integers keep every sum exact, so oracles compare with ==.
RealTensor random_int(const Shape& s, int lo = -3, int hi = 3) {
  std::uniform_int_distribution<int> d(lo, hi);
  RealTensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

double dot(const RealTensor& a, const RealTensor& b) { return (a.array() * b.array()).sum(); }

// Direct 6-loop cross-correlation with explicit zero padding.
RealTensor conv_oracle(const RealTensor& x, const RealTensor& w, Index stride, Index pad_top, Index pad_left,
                       Index oh, Index ow) {
  const Index n = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3);
  const Index kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
  RealTensor out({n, oh, ow, co});
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j)
        for (Index o = 0; o < co; ++o) {
          double acc = 0.0;
          for (Index a = 0; a < kh; ++a)
            for (Index c = 0; c < kw; ++c)
              for (Index k = 0; k < ci; ++k) {
                const Index y = i * stride + a - pad_top, z = j * stride + c - pad_left;
                if (y < 0 || y >= h || z < 0 || z >= wd) continue;
                acc += x.at(b, y, z, k) * w[((a * kw + c) * ci + k) * co + o];
              }
          out.at(b, i, j, o) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d trivial kernels") {
  RealTensor x({1, 4, 4, 3}, 2.0);
  RealTensor ones({1, 1, 3, 1}, 1.0);
  const auto y = conv2d(x, ones);
  CHECK((y.array() == 6.0).all());

  const auto r = random_int({2, 5, 5, 3});
  RealTensor id({3, 3, 3, 3});
  for (Index c = 0; c < 3; ++c) id[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0;
  CHECK(conv2d(r, id) == r);
}

TEST_CASE("conv2d matches the loop oracle") {
  for (int t = 0; t < 10; ++t) {
    const Index h = 3 + t % 6, w = 2 + (t * 3) % 7;
    const auto x = random_int({2, h, w, 1 + t % 4});
    const auto k = random_int({3, 3, 1 + t % 4, 1 + (t * 5) % 6});
    const Index oh = h, ow = w;
    CHECK(conv2d(x, k) == conv_oracle(x, k, 1, 1, 1, oh, ow));
  }
  const auto x = random_int({1, 5, 5, 2});
  const auto k5 = random_int({5, 5, 2, 3});
  CHECK(conv2d(x, k5) == conv_oracle(x, k5, 1, 2, 2, 5, 5));
  CHECK(conv2d(x, k5, 1, Padding::Valid) == conv_oracle(x, k5, 1, 0, 0, 1, 1));
  // Stride 2, SAME on an even input: total pad 1, split (0, 1).
  const auto x8 = random_int({1, 8, 8, 2});
  const auto k3 = random_int({3, 3, 2, 2});
  CHECK(conv2d(x8, k3, 2) == conv_oracle(x8, k3, 2, 0, 0, 4, 4));
  CHECK_THROWS_AS(conv2d(x8, random_int({3, 3, 3, 2})), ValidationError);
}

TEST_CASE("conv2d backward is the adjoint of forward") {
  for (Index stride : {1, 2}) {
    const auto x = random_int({2, 6, 6, 3});
    const auto w = random_int({3, 3, 3, 4});
    const auto y = conv2d(x, w, stride);
    const auto g = random_int(y.shape());
    CHECK(dot(y, g) == dot(x, conv2d_backward_input(g, w, x.shape(), stride)));
    CHECK(dot(y, g) == dot(w, conv2d_backward_weight(x, g, w.shape(), stride)));
  }
}

TEST_CASE("group_conv: G=1 equals conv2d") {
  const auto x = random_int({2, 5, 5, 4});
  const auto w = random_int({3, 3, 4, 6});
  CHECK(group_conv(x, w, 1) == conv2d(x, w));
}

TEST_CASE("group_conv: 4 input channels, 2 groups, 8 outputs against per-group summation") {
  const auto x = random_int({1, 5, 5, 4});
  const auto w = random_int({3, 3, 2, 8});
  const auto y = group_conv(x, w, 2);
  REQUIRE(y.shape() == Shape{1, 5, 5, 8});
  for (Index g = 0; g < 2; ++g)
    for (Index j = 0; j < 4; ++j)
      for (Index i = 0; i < 5; ++i)
        for (Index k = 0; k < 5; ++k) {
          double acc = 0.0;
          for (Index a = 0; a < 3; ++a)
            for (Index b = 0; b < 3; ++b)
              for (Index c = 0; c < 2; ++c) {
                const Index yy = i + a - 1, zz = k + b - 1;
                if (yy < 0 || yy >= 5 || zz < 0 || zz >= 5) continue;
                acc += x.at(0, yy, zz, g * 2 + c) * w[((a * 3 + b) * 2 + c) * 8 + g * 4 + j];
              }
          CHECK(y.at(0, i, k, j * 2 + g) == acc);
        }
}

TEST_CASE("group_conv: G = in_ch with 1x1 kernels equals depthwise") {
  const auto x = random_int({2, 4, 4, 6});
  const auto w = random_int({1, 1, 1, 6});
  CHECK(group_conv(x, w, 6) == depthwise_conv(x, w));
}

TEST_CASE("group_conv parameter count and divisibility") {
  const Shape full{3, 3, 16, 16}, grouped{3, 3, 4, 16};
  CHECK(shape_product(grouped) * 4 == shape_product(full));
  CHECK_THROWS_AS(group_conv(random_int({1, 4, 4, 6}), random_int({3, 3, 2, 6}), 4), ValidationError);
  CHECK_THROWS_AS(group_conv(random_int({1, 4, 4, 8}), random_int({3, 3, 2, 6}), 4), ValidationError);
}

TEST_CASE("group_conv backward is the adjoint of forward") {
  const auto x = random_int({2, 4, 4, 8});
  const auto w = random_int({3, 3, 2, 12});
  const auto y = group_conv(x, w, 4);
  const auto g = random_int(y.shape());
  CHECK(dot(y, g) == dot(x, group_conv_backward_input(g, w, x.shape(), 4)));
  CHECK(dot(y, g) == dot(w, group_conv_backward_weight(x, g, w.shape(), 4)));
}

TEST_CASE("depthwise_conv") {
  const auto x = random_int({3, 4, 4, 5});
  RealTensor ones({4, 4, 1, 5}, 1.0);
  const auto s = depthwise_conv(x, ones);
  REQUIRE(s.shape() == Shape{3, 1, 1, 5});
  for (Index n = 0; n < 3; ++n)
    for (Index c = 0; c < 5; ++c) {
      double acc = 0.0;
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) acc += x.at(n, i, j, c);
      CHECK(s.at(n, 0, 0, c) == acc);
    }
  // 64F parameters for the 4x4 bottleneck collapse at F=64.
  CHECK(shape_product({4, 4, 1, 4 * 64}) == 64 * 64);

  const auto x2 = random_int({2, 6, 5, 3});
  const auto w2 = random_int({3, 2, 1, 3});
  const auto y2 = depthwise_conv(x2, w2);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 4; ++j)
        for (Index c = 0; c < 3; ++c) {
          double acc = 0.0;
          for (Index a = 0; a < 3; ++a)
            for (Index b = 0; b < 2; ++b) acc += x2.at(n, i + a, j + b, c) * w2[(a * 2 + b) * 3 + c];
          CHECK(y2.at(n, i, j, c) == acc);
        }
  const auto g = random_int(y2.shape());
  const auto [dx, dw] = depthwise_conv_backward(x2, w2, g);
  CHECK(dot(y2, g) == dot(x2, dx));
  CHECK(dot(y2, g) == dot(w2, dw));
  CHECK_THROWS_AS(depthwise_conv(random_int({1, 3, 3, 2}), random_int({4, 4, 1, 2})), ValidationError);
}

TEST_CASE("dense") {
  const auto x = random_int({4, 6});
  RealTensor id({6, 6});
  for (Index i = 0; i < 6; ++i) id[i * 6 + i] = 1.0;
  CHECK(dense(x, id) == x);
  const auto w = random_int({6, 3});
  const auto y = dense(x, w);
  for (Index n = 0; n < 4; ++n)
    for (Index v = 0; v < 3; ++v) {
      double acc = 0.0;
      for (Index u = 0; u < 6; ++u) acc += x[n * 6 + u] * w[u * 3 + v];
      CHECK(y[n * 3 + v] == acc);
    }
  CHECK_THROWS_AS(dense(x, random_int({5, 3})), ValidationError);
}

TEST_CASE("maxpool2") {
  const auto bits = random_int({2, 6, 4, 3}, 0, 1);
  const auto y = maxpool2(bits);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 2; ++j)
        for (Index c = 0; c < 3; ++c) {
          const bool any = bits.at(n, 2 * i, 2 * j, c) != 0 || bits.at(n, 2 * i + 1, 2 * j, c) != 0 ||
                           bits.at(n, 2 * i, 2 * j + 1, c) != 0 || bits.at(n, 2 * i + 1, 2 * j + 1, c) != 0;
          CHECK(y.at(n, i, j, c) == (any ? 1.0 : 0.0));
        }
  std::vector<Index> arg;
  const auto x = random_int({1, 4, 4, 2});
  const auto m = maxpool2(x, &arg);
  for (Index o = 0; o < m.size(); ++o) CHECK(x[arg[static_cast<size_t>(o)]] == m[o]);
  CHECK_THROWS_AS(maxpool2(random_int({1, 3, 4, 1})), ValidationError);
}

TEST_CASE("maxpool2 commutes with heaviside") {
  std::normal_distribution<double> d(0.0, 1.0);
  for (int t = 0; t < 10000; ++t) {
    RealTensor x({1, 2, 4, 2});
    for (Index i = 0; i < x.size(); ++i) x[i] = (t % 5 == 0) ? std::round(d(rng)) : d(rng);
    CHECK(maxpool2(heaviside(x)) == heaviside(maxpool2(x)));
  }
}

TEST_CASE("bias_add") {
  RealTensor x({2, 2, 2, 3}, 1.0);
  RealTensor b({3}, Eigen::ArrayXd{{0.5, -1.0, 2.0}});
  const auto y = bias_add(x, b);
  for (Index p = 0; p < 8; ++p)
    for (Index c = 0; c < 3; ++c) CHECK(y[p * 3 + c] == 1.0 + b[c]);
  CHECK_THROWS_AS(bias_add(x, RealTensor({2})), ValidationError);
}

TEST_CASE("conv_transpose2d is the adjoint of the strided SAME convolution") {
  for (Index in : {1, 2, 4, 5}) {
    const auto x = random_int({2, in, in, 3});
    const auto w = random_int({3, 3, 3, 4});  // [kh, kw, in_c, out_c]
    const auto y = conv_transpose2d(x, w, 2);
    REQUIRE(y.shape() == Shape{2, 2 * in, 2 * in, 4});
    // The forward convolution reading y back: kernel [kh, kw, out_c, in_c].
    RealTensor wf({3, 3, 4, 3});
    for (Index t = 0; t < 9; ++t)
      for (Index a = 0; a < 3; ++a)
        for (Index b = 0; b < 4; ++b) wf[(t * 4 + b) * 3 + a] = w[(t * 3 + a) * 4 + b];
    const auto probe = random_int(y.shape());
    CHECK(dot(y, probe) == dot(x, conv2d(probe, wf, 2)));

    const auto [dx, dw] = conv_transpose2d_backward(x, w, probe, 2);
    CHECK(dot(y, probe) == dot(x, dx));
    CHECK(dot(y, probe) == dot(w, dw));
  }
  // 1x1 to 2x2: only the taps (1..2, 1..2) of a 3x3 kernel land inside.
  RealTensor one({1, 1, 1, 1}, 1.0);
  RealTensor w({3, 3, 1, 1});
  for (Index i = 0; i < 9; ++i) w[i] = static_cast<double>(i);
  const auto y = conv_transpose2d(one, w, 2);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 1.0);
  CHECK(y[2] == 3.0);
  CHECK(y[3] == 4.0);
}
