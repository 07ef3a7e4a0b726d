#pragma once

// Analytic weight memory, MAC, MAC x bit and BOP accounting over a resolved topology.
// Mb is 10^6 bits; compute metrics are absolute counts.

#include "nqe/topology.hpp"

#include <string>
#include <vector>

#include "json.hpp"

namespace nqe {

/// naive: 3/2/1 bits per quinary/ternary/binary weight. entropy: log2 of the level count.
enum class BitsMode { Naive, Entropy };
std::string to_string(BitsMode m);
BitsMode bits_mode_from_string(const std::string& s);

/// Storage bits of one weight with `naive_bits` (3, 2 or 1) under `mode`.
double weight_bits(int naive_bits, BitsMode mode);

struct CostOptions {
  BitsMode memory = BitsMode::Naive;
  BitsMode compute = BitsMode::Entropy;  // weight bitwidth inside MAC x bit and BOPs
};

struct CostRow {
  std::string name;
  OpKind kind = OpKind::Conv;
  Index params = 0;
  int weight_bits = 0;  // naive width
  int input_bits = 0;
  bool fixed = false;   // generated on chip, charges no memory
  bool encoder = true;
  double memory_bits = 0.0;
  double macs = 0.0, mac_bit = 0.0, bops = 0.0;
};

struct CostReport {
  ModelConfig config;
  CostOptions options;
  std::vector<CostRow> rows;
  CostRow total;
};

/// MACs of one weighted op: out_h · out_w · k_h · k_w · (in / G) · out for convolutions,
/// out_h · out_w · k_h · k_w · C for depthwise, in · out for dense.
double mac_count(const LayerSpec& s);

CostReport cost_report(const std::vector<LayerSpec>& topology, const CostOptions& options = {});
CostReport cost_report(const ModelConfig& config, const CostOptions& options = {});

/// Memory bits of the bottleneck rows alone, and of everything except the bottleneck.
double bottleneck_memory_bits(const ModelConfig& config, BitsMode mode = BitsMode::Naive);
double trunk_memory_bits(const ModelConfig& config, BitsMode mode = BitsMode::Naive);

/// Half-up rounding to `decimals` places, printed with exactly that many decimals.
std::string round_half_up(double v, int decimals = 3);
inline std::string format_mb(double bits) { return round_half_up(bits / 1e6); }
inline std::string format_giga(double v) { return round_half_up(v / 1e9); }

nlohmann::json to_json(const CostReport& r);
/// Per-layer rows and totals as aligned text.
std::string format_cost_table(const CostReport& r);

/// Memory, MAC x bit and BOPs of the F=64 NQE for both precision profiles.
std::string format_table_iii();
/// Bottleneck memory for F in {32, 64, 128} and each bottleneck, plus the remainder.
std::string format_appendix_a();

}  // namespace nqe
