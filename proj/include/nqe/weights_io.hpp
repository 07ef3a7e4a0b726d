#pragma once

// Weights file: magic, version, model config, a layer table (name, kind, shape,
// precision, quantizer spec, BSN shift), the packed parameters, optional real-valued
// proxies, and an FNV-1a digest. Quantized weights use the naive encoding: quinary
// 3 bits (code + 2), ternary 2 bits (code + 1), binary 1 bit (1 for +1), LSB-first.

#include "nqe/topology.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace nqe {

inline constexpr std::uint32_t kWeightsVersion = 1;

struct WeightsLoadReport {
  int loaded = 0;
  int skipped = 0;  // records with no matching layer in the target
};

std::vector<std::uint8_t> serialize_weights(Network& net, bool with_proxies = true);

/// Loads every record whose name exists in `net`. Encoder records are mandatory and
/// must match shape and precision; classifier and decoder records load when both
/// sides have them, which makes classification and codec weights interchangeable.
WeightsLoadReport load_weights(Network& net, std::span<const std::uint8_t> bytes);

/// The model config embedded in a weights file (digest checked).
ModelConfig weights_config(std::span<const std::uint8_t> bytes);

void export_weights(Network& net, const std::string& path, bool with_proxies = true);
std::unique_ptr<Network> import_weights(const std::string& path);

/// Digest of the deployed state (codes, specs, float tensors, BN/BSN); proxies excluded.
std::uint64_t model_digest(Network& net);

}  // namespace nqe
