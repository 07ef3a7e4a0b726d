#pragma once

// Shared test fixtures: random 8-bit images and deployable random-weight networks.

#include "nqe/integer.hpp"
#include "nqe/training.hpp"

#include <memory>
#include <random>

namespace nqe::testing {

inline ByteTensor random_bytes(Index n, Index size, Index channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  ByteTensor t({n, size, size, channels});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<std::uint8_t>(d(rng));
  return t;
}

// Random weights, BN statistics from random images, random γ signs, folded to BSN.
inline std::unique_ptr<Network> deployable(ModelConfig cfg) {
  auto net = std::make_unique<Network>(cfg);
  recalibrate_quantizers(*net);
  std::mt19937_64 rng(cfg.seed + 77);
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  std::bernoulli_distribution neg(0.3);
  net->visit([&](Layer& l) {
    if (l.kind() == LayerKind::Conv && static_cast<ConvLayer&>(l).has_bias()) {
      auto& b = static_cast<ConvLayer&>(l).bias().value;
      std::normal_distribution<double> d(0.0, 0.1);
      for (Index i = 0; i < b.size(); ++i) b[i] = d(rng);
    }
  });
  estimate_bn_statistics(*net, image_from_bytes(random_bytes(32, cfg.input_size, cfg.in_channels, cfg.seed + 5)));
  net->visit([&](Layer& l) {
    if (l.kind() != LayerKind::BatchNorm) return;
    auto& bn = static_cast<BatchNormLayer&>(l);
    auto s = bn.state();
    for (Index c = 0; c < s.channels(); ++c) s.gamma[c] = (neg(rng) ? -1.0 : 1.0) * mag(rng);
    bn.set_state(s);
  });
  fold_network_to_bsn(*net);
  return net;
}

}  // namespace nqe::testing
