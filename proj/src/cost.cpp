#include "nqe/cost.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace nqe {

std::string to_string(BitsMode m) { return m == BitsMode::Naive ? "naive" : "entropy"; }

BitsMode bits_mode_from_string(const std::string& s) {
  if (s == "naive") return BitsMode::Naive;
  if (s == "entropy") return BitsMode::Entropy;
  throw ValidationError("unknown bits mode '" + s + "' (naive|entropy)");
}

double weight_bits(int naive_bits, BitsMode mode) {
  if (naive_bits < 1 || naive_bits > 3) throw ValidationError("weight width must be 1, 2 or 3 bits");
  if (mode == BitsMode::Naive || naive_bits == 1) return naive_bits;
  return std::log2(naive_bits == 3 ? 5.0 : 3.0);
}

double mac_count(const LayerSpec& s) {
  const double out_px = static_cast<double>(s.out_h() * s.out_w());
  switch (s.kind) {
    case OpKind::Conv:
    case OpKind::GroupConv:
      return out_px * static_cast<double>(s.kernel_h * s.kernel_w * (s.in_ch / s.groups) * s.out_ch);
    case OpKind::DepthwiseConv: return out_px * static_cast<double>(s.kernel_h * s.kernel_w * s.in_ch);
    case OpKind::Dense: return static_cast<double>(s.in_ch * s.out_ch);
    default: return 0.0;
  }
}

CostReport cost_report(const std::vector<LayerSpec>& topology, const CostOptions& options) {
  CostReport r;
  r.options = options;
  r.total.name = "total";
  for (const auto& s : topology) {
    if (!s.weighted()) continue;
    if (s.in_h < 1 || s.in_ch < 1 || s.out_ch < 1) throw ValidationError("cost: unresolved shape for " + s.name);
    CostRow row;
    row.name = s.name;
    row.kind = s.kind;
    row.params = s.param_count();
    row.weight_bits = s.weight_bits;
    row.input_bits = s.input_bits;
    row.fixed = s.fixed;
    row.encoder = s.encoder;
    row.memory_bits = s.fixed ? 0.0 : static_cast<double>(row.params) * weight_bits(s.weight_bits, options.memory);
    row.macs = mac_count(s);
    row.mac_bit = row.macs * weight_bits(s.weight_bits, options.compute);
    row.bops = row.mac_bit * s.input_bits;
    r.total.params += row.params;
    r.total.memory_bits += row.memory_bits;
    r.total.macs += row.macs;
    r.total.mac_bit += row.mac_bit;
    r.total.bops += row.bops;
    r.rows.push_back(row);
  }
  return r;
}

CostReport cost_report(const ModelConfig& config, const CostOptions& options) {
  CostReport r = cost_report(nqe_topology(config), options);
  r.config = config;
  return r;
}

namespace {

bool in_bottleneck(const std::string& name) { return name.rfind("bottleneck.", 0) == 0; }

double memory_where(const ModelConfig& config, BitsMode mode, bool bottleneck) {
  double bits = 0.0;
  for (const auto& row : cost_report(config, {mode, BitsMode::Entropy}).rows)
    if (in_bottleneck(row.name) == bottleneck) bits += row.memory_bits;
  return bits;
}

}  // namespace

double bottleneck_memory_bits(const ModelConfig& config, BitsMode mode) { return memory_where(config, mode, true); }
double trunk_memory_bits(const ModelConfig& config, BitsMode mode) { return memory_where(config, mode, false); }

std::string round_half_up(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // The nudge keeps values like 0.2625 (stored as 0.26249999...) rounding up.
  const double r = std::floor(std::abs(v) * scale + 0.5 + 1e-9) / scale;
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << std::copysign(r, v);
  return os.str();
}

nlohmann::json to_json(const CostReport& r) {
  auto row_json = [](const CostRow& c) {
    return nlohmann::json{{"name", c.name},          {"kind", to_string(c.kind)}, {"params", c.params},
                          {"weight_bits", c.weight_bits}, {"input_bits", c.input_bits}, {"fixed", c.fixed},
                          {"memory_bits", c.memory_bits}, {"macs", c.macs},         {"mac_bit", c.mac_bit},
                          {"bops", c.bops}};
  };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : r.rows) rows.push_back(row_json(c));
  return {{"config", to_json(r.config)},
          {"memory_mode", to_string(r.options.memory)},
          {"compute_mode", to_string(r.options.compute)},
          {"rows", rows},
          {"total", row_json(r.total)},
          {"memory_mb", format_mb(r.total.memory_bits)},
          {"mac_bit_g", format_giga(r.total.mac_bit)},
          {"bops_g", format_giga(r.total.bops)}};
}

std::string format_cost_table(const CostReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "layer" << std::setw(16) << "kind" << std::right << std::setw(10) << "params"
     << std::setw(4) << "wb" << std::setw(4) << "ab" << std::setw(14) << "memory_bits" << std::setw(14) << "macs"
     << std::setw(16) << "mac_bit" << std::setw(16) << "bops" << '\n';
  auto line = [&](const CostRow& c, bool total) {
    os << std::left << std::setw(22) << c.name << std::setw(16) << (total ? "" : to_string(c.kind)) << std::right
       << std::setw(10) << c.params;
    if (total) os << std::setw(4) << "" << std::setw(4) << "";
    else os << std::setw(4) << c.weight_bits << std::setw(4) << c.input_bits;
    os << std::fixed << std::setprecision(1) << std::setw(14) << c.memory_bits << std::setprecision(0) << std::setw(14)
       << c.macs << std::setprecision(1) << std::setw(16) << c.mac_bit << std::setw(16) << c.bops << '\n';
  };
  for (const auto& c : r.rows) line(c, false);
  line(r.total, true);
  os << "memory (" << to_string(r.options.memory) << ", Mb): " << format_mb(r.total.memory_bits) << '\n'
     << "MACxbit (x10^9): " << format_giga(r.total.mac_bit) << '\n'
     << "BOPs (x10^9): " << format_giga(r.total.bops) << '\n';
  return os.str();
}

std::string format_table_iii() {
  std::ostringstream os;
  os << "NQE F=64, 32x32x3 input, DWConv+FC bottleneck\n";
  os << std::left << std::setw(26) << "metric" << std::right << std::setw(10) << "mixed" << std::setw(10) << "binary"
     << '\n';
  CostReport reps[2];
  for (int i = 0; i < 2; ++i) {
    ModelConfig c;
    c.precision = i == 0 ? PrecisionProfile::Mixed : PrecisionProfile::Binary;
    reps[i] = cost_report(c);
  }
  os << std::left << std::setw(26) << "On-chip memory (Mb)" << std::right << std::setw(10)
     << format_mb(reps[0].total.memory_bits) << std::setw(10) << format_mb(reps[1].total.memory_bits) << '\n';
  os << std::left << std::setw(26) << "MACxbit (x10^9)" << std::right << std::setw(10)
     << format_giga(reps[0].total.mac_bit) << std::setw(10) << format_giga(reps[1].total.mac_bit) << '\n';
  os << std::left << std::setw(26) << "BOPs (x10^9)" << std::right << std::setw(10) << format_giga(reps[0].total.bops)
     << std::setw(10) << format_giga(reps[1].total.bops) << '\n';
  return os.str();
}

std::string format_appendix_a() {
  std::ostringstream os;
  os << "Weight memory (Mb), naive encoding\n";
  os << std::left << std::setw(22) << "" << std::right << std::setw(8) << "F=32" << std::setw(8) << "F=64"
     << std::setw(8) << "F=128" << '\n';
  const Index fs[] = {32, 64, 128};
  const std::pair<const char*, BottleneckKind> kinds[] = {
      {"LFC", BottleneckKind::Lfc}, {"RCS+FC", BottleneckKind::RcsFc}, {"DWConv+FC", BottleneckKind::DwconvFc}};
  for (const auto& [label, kind] : kinds) {
    os << std::left << std::setw(22) << label << std::right;
    for (Index f : fs) {
      ModelConfig c;
      c.F = f;
      c.bottleneck = kind;
      os << std::setw(8) << format_mb(bottleneck_memory_bits(c));
    }
    os << '\n';
  }
  os << std::left << std::setw(22) << "without bottleneck" << std::right;
  for (Index f : fs) {
    ModelConfig c;
    c.F = f;
    os << std::setw(8) << format_mb(trunk_memory_bits(c));
  }
  os << '\n';
  return os.str();
}

}  // namespace nqe
