// Acceptance criteria, one PASS/FAIL line each. `acceptance 3` runs criterion 3 alone;
// without arguments every criterion runs. Exit status is non-zero when any line fails.

#include "fixtures.hpp"
#include "gradcheck.hpp"

#include "nqe/activations.hpp"
#include "nqe/cli.hpp"
#include "nqe/codec.hpp"
#include "nqe/cost.hpp"
#include "nqe/datasets.hpp"
#include "nqe/image_io.hpp"
#include "nqe/integer.hpp"
#include "nqe/normalization.hpp"
#include "nqe/ops.hpp"
#include "nqe/quantizers.hpp"
#include "nqe/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

using namespace nqe;
using namespace nqe::testing;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

struct Criterion {
  int id;
  std::string name;
  double limit_s;
  std::function<void(Outcome&)> run;
};

json cli_record(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  if (run_cli(args, out, err) != kExitOk) throw std::runtime_error("nqe exited with an error: " + err.str());
  std::istringstream is(out.str());
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty() && line.front() == '{') last = line;
  return json::parse(last);
}

std::string cli_text(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  if (run_cli(args, out, err) != kExitOk) throw std::runtime_error("nqe exited with an error: " + err.str());
  return out.str();
}

ModelConfig model(Index F, BottleneckKind b = BottleneckKind::DwconvFc, PrecisionProfile p = PrecisionProfile::Mixed) {
  ModelConfig c;
  c.F = F;
  c.bottleneck = b;
  c.precision = p;
  return c;
}

// ---------------------------------------------------------------------------------

void cost_table(Outcome& o) {
  const struct {
    const char* precision;
    const char *memory, *mac_bit, *bops;
  } cells[] = {{"mixed", "1.073", "0.210", "0.287"}, {"binary", "0.774", "0.125", "0.137"}};
  for (const auto& c : cells) {
    const json r = cli_record({"cost", "--F", "64", "--precision", c.precision, "--json"});
    o.detail << c.precision << " " << r["memory_mb"].get<std::string>() << "/" << r["mac_bit_g"].get<std::string>()
             << "/" << r["bops_g"].get<std::string>() << "; ";
    o.require(r["memory_mb"] == c.memory, std::string(c.precision) + " memory");
    o.require(r["mac_bit_g"] == c.mac_bit, std::string(c.precision) + " MAC x bit");
    o.require(r["bops_g"] == c.bops, std::string(c.precision) + " BOPs");
  }
  // The library agrees with the CLI.
  const auto mixed = cost_report(model(64));
  o.require(format_mb(mixed.total.memory_bits) == "1.073" && format_giga(mixed.total.mac_bit) == "0.210" &&
                format_giga(mixed.total.bops) == "0.287",
            "library report");
}

void appendix_a(Outcome& o) {
  const char* expected[3][3] = {{"0.262", "1.049", "4.194"}, {"0.016", "0.066", "0.262"}, {"0.018", "0.070", "0.270"}};
  const char* without[3] = {"0.253", "1.003", "3.997"};
  const BottleneckKind kinds[] = {BottleneckKind::Lfc, BottleneckKind::RcsFc, BottleneckKind::DwconvFc};
  const Index fs[] = {32, 64, 128};
  int matched = 0;
  for (int k = 0; k < 3; ++k)
    for (int f = 0; f < 3; ++f) {
      const std::string got = format_mb(bottleneck_memory_bits(model(fs[f], kinds[k])));
      matched += got == expected[k][f];
      o.require(got == expected[k][f], to_string(kinds[k]) + " F=" + std::to_string(fs[f]) + " gave " + got);
    }
  for (int f = 0; f < 3; ++f) {
    const std::string got = format_mb(trunk_memory_bits(model(fs[f])));
    matched += got == without[f];
    o.require(got == without[f], "without bottleneck F=" + std::to_string(fs[f]) + " gave " + got);
  }
  const std::string table = cli_text({"tables", "--appendix-a"});
  for (int k = 0; k < 3; ++k)
    for (int f = 0; f < 3; ++f) o.require(table.find(expected[k][f]) != std::string::npos, "tables output");
  o.detail << matched << "/12 cells";
}

// Mapping table rows written as plain comparisons.
int table_code(double x) {
  if (x < 0.125) return 0;
  if (x < 0.25) return 1;
  if (x < 0.5) return 2;
  return 3;
}

void hwmsb_conformance(Outcome& o) {
  long long table_mismatch = 0, integer_mismatch = 0, integer_div3_mismatch = 0;
  for (std::uint32_t w = 0; w < (1u << 16); ++w) {
    // Bit 15 is the sign, bits 14..0 the fraction.
    const std::int64_t mag = w & 0x7fff;
    const std::int64_t acc = (w >> 15) ? -mag : mag;
    const double x = std::ldexp(static_cast<double>(acc), -15);
    table_mismatch += hwmsb_code(x).code != table_code(x);
    for (int bias = -8; bias <= 8; ++bias) {
      const double moved = std::ldexp(x, bias - 4);
      integer_mismatch += hwmsb_integer(acc, -15, {bias}) != hwmsb_code(moved);
      integer_div3_mismatch += hwmsb_integer(acc, -15, {bias}, 3) != hwmsb_code(moved / 3.0);
    }
  }
  o.detail << "table mismatches " << table_mismatch << ", integer mismatches " << integer_mismatch
           << " (divisor 3: " << integer_div3_mismatch << ") over 65536 words x 17 biases";
  o.require(table_mismatch == 0, "table");
  o.require(integer_mismatch == 0 && integer_div3_mismatch == 0, "integer form");
}

void gradient_checks(Outcome& o) {
  // MSB: the real function saturates at |x| = 1/2, so points come from the unsaturated band.
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  const double h = 1e-6;
  int checked = 0, failed = 0;
  double worst = 0.0;
  while (checked < 1000) {
    const double x = d(rng);
    const double a = std::abs(x);
    if (std::abs(a - 0.125) < 1e-4 || 0.5 - a < 1e-4) continue;
    const double fd = (msb_real(x + h) - msb_real(x - h)) / (2 * h);
    const double err = std::abs(msb_gradient(x) - fd) / std::abs(fd);
    worst = std::max(worst, err);
    failed += err > 1e-4;
    ++checked;
  }
  RealTensor xs({1000});
  RealTensor up({1000}, 1.0);
  for (Index i = 0; i < 1000; ++i) xs[i] = d(rng);
  const RealTensor g = msb_backward(xs, up);
  for (Index i = 0; i < 1000; ++i) failed += g[i] != msb_gradient(xs[i]);
  o.detail << "msb: " << checked << " points, worst rel " << std::scientific << std::setprecision(2) << worst;
  o.require(failed == 0, "msb_backward");

  // Three weighted layers with BN, HWMSB, Sign and a binary dense head, in surrogate mode.
  std::normal_distribution<double> nd(0.0, 1.0);
  auto normal = [&](const Shape& s, double sigma) {
    RealTensor t(s);
    for (Index i = 0; i < t.size(); ++i) t[i] = sigma * nd(rng);
    return t;
  };
  Sequential net("toy");
  net.add<ConvLayer>("conv1", QuantizedWeight("conv1.w", normal({3, 3, 3, 4}, 0.3), WeightPrecision::Quinary));
  net.add<BatchNormLayer>("bn1", 4);
  net.add<ActivationLayer>("hwmsb", ActKind::Hwmsb);
  net.add<ConvLayer>("conv2", QuantizedWeight("conv2.w", normal({3, 3, 4, 4}, 0.3), WeightPrecision::Ternary));
  net.add<BatchNormLayer>("bn2", 4);
  net.add<ActivationLayer>("sign", ActKind::Sign);
  net.add<ReshapeLayer>("flat");
  net.add<DenseLayer>("fc", QuantizedWeight("fc.w", normal({5 * 5 * 4, 3}, 0.3), WeightPrecision::Binary));
  const auto r = check_layer(net, normal({3, 5, 5, 3}, 1.0), rng, 80, 1e-4);
  o.detail << "; toy net: " << r.checked << " checked, " << r.skipped << " skipped at edges, worst rel " << r.worst;
  o.require(r.ok(), "toy net " + r.first_failure);
}

struct Occupancy {
  double calibrated = 0.0, twn = 0.0;
};

double max_deviation(const std::vector<double>& w, const QuantizerSpec& spec) {
  std::vector<long long> count(static_cast<size_t>(spec.n_levels), 0);
  for (double v : w) ++count[static_cast<size_t>(quantize_code(v, spec) + spec.half_range())];
  double worst = 0.0;
  for (auto c : count)
    worst = std::max(worst, std::abs(static_cast<double>(c) / static_cast<double>(w.size()) - 1.0 / spec.n_levels));
  return worst;
}

void equidistribution(Outcome& o) {
  std::mt19937_64 rng(5);
  const int n = 100000;
  const char* names[] = {"uniform", "gaussian", "laplace"};
  for (int dist = 0; dist < 3; ++dist) {
    std::vector<double> w(n);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    std::exponential_distribution<double> e(1.0);
    std::bernoulli_distribution coin(0.5);
    for (auto& v : w) v = dist == 0 ? u(rng) : dist == 1 ? g(rng) : (coin(rng) ? 1.0 : -1.0) * e(rng);
    double mean_abs = 0.0;
    for (double v : w) mean_abs += std::abs(v);
    mean_abs /= n;
    o.detail << names[dist] << ":";
    for (int levels : {3, 5}) {
      const double dev = max_deviation(w, calibrate(w, levels));
      o.detail << " n=" << levels << " " << std::fixed << std::setprecision(4) << dev;
      o.require(dev <= 0.02, std::string(names[dist]) + " n=" + std::to_string(levels) + " deviation " +
                                 std::to_string(dev));
      if (levels == 3) {
        const double twn = max_deviation(w, QuantizerSpec{3, 0.7 * mean_abs, 0.7});
        o.detail << " (TWN " << twn << ")";
        if (dist == 0) o.require(twn > dev, "TWN not worse on uniform");
      }
    }
    o.detail << "; ";
  }
}

void bsn_invariants(Outcome& o) {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> d(0.0, 2.0);
  std::uniform_int_distribution<int> shift(BsnScale::kMinShift, BsnScale::kMaxShift);
  std::uniform_int_distribution<int> dim(1, 4);
  long long heaviside_bad = 0, argmax_bad = 0, pool_bad = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const Index n = dim(rng), h = 2 * dim(rng), w = 2 * dim(rng), c = dim(rng);
    RealTensor x({n, h, w, c});
    for (Index i = 0; i < x.size(); ++i) x[i] = (t % 5 == 0 && i % 3 == 0) ? 0.0 : d(rng);
    const BsnScale s{shift(rng), 0.9};
    heaviside_bad += !(heaviside(bsn_apply(x, s)) == heaviside(x));
    pool_bad += !(heaviside(maxpool2(x)) == maxpool2(heaviside(x)));

    RealTensor logits({n, 2 + c});
    for (Index i = 0; i < logits.size(); ++i) logits[i] = d(rng);
    const RealTensor scaled = bsn_apply(logits, s);
    for (Index i = 0; i < n; ++i) {
      Index a = 0, b = 0;
      logits.matrix().row(i).maxCoeff(&a);
      scaled.matrix().row(i).maxCoeff(&b);
      argmax_bad += a != b;
    }
  }
  o.detail << trials << " tensors: Heaviside " << heaviside_bad << ", argmax " << argmax_bad << ", MP2 " << pool_bad
           << " violations";
  o.require(heaviside_bad + argmax_bad + pool_bad == 0, "violations");
}

struct Mismatches {
  Index logits = 0, codes = 0;
};

Mismatches compare(Network& net, const IntegerModel& im, const ByteTensor& x) {
  const RealTensor xr = image_from_bytes(x);
  const RealTensor code = net.encode(xr, eval_pass());
  const RealTensor logits = resolve_divisor(net.classifier().forward(code, eval_pass()));
  const auto r = int_forward(im, x);
  Mismatches m;
  const Eigen::MatrixXd il = r.logits.matrix().cast<double>();
  for (Index i = 0; i < x.dim(0); ++i) {
    Index ki = 0, kr = 0;
    il.row(i).maxCoeff(&ki);
    logits.matrix().row(i).maxCoeff(&kr);
    m.logits += ki != kr;
    m.codes += !(code.matrix().row(i) == r.code.matrix().row(i).cast<double>());
  }
  return m;
}

void integer_equivalence(Outcome& o) {
  ModelConfig small;
  small.F = 8;
  small.input_size = 8;
  small.classes = 4;
  small.seed = 7;
  for (const ModelConfig& cfg : {small, model(64)}) {
    auto net = deployable(cfg);
    const auto im = lower(*net);
    Mismatches total;
    const Index chunk = 100;
    for (Index start = 0; start < 1000; start += chunk) {
      const auto m = compare(*net, im, random_bytes(chunk, cfg.input_size, cfg.in_channels, 1000 + start));
      total.logits += m.logits;
      total.codes += m.codes;
    }
    o.detail << "F=" << cfg.F << ": " << total.logits << " argmax and " << total.codes << " code mismatches; ";
    o.require(total.logits == 0 && total.codes == 0, "F=" + std::to_string(cfg.F));
  }
}

void desk_training(Outcome& o) {
  // (a) and (b): two-class toy classifier.
  ModelConfig c;
  c.F = 8;
  c.input_size = 8;
  c.classes = 2;
  c.seed = 3;
  Network net(c);
  TrainConfig t;
  t.batch_size = 32;
  t.epochs_stage1 = 20;
  t.epochs_stage2 = 10;
  t.lr_init = 3e-3;
  t.augmentation = false;
  const auto r = train_classifier(net, synthetic_shapes(512, 8, 2, 11), t);
  o.detail << std::fixed << std::setprecision(3) << "stage 1 " << r.stage1_accuracy << ", swap " << r.folded_accuracy
           << ", stage 2 " << r.stage2_accuracy;
  o.require(r.stage1_accuracy >= 0.9, "stage 1 accuracy");
  o.require(r.stage2_accuracy >= r.stage1_accuracy - 0.02, "stage 2 recovery");

  bool taus_ok = true;
  json last_epoch;
  for (const auto& rec : r.log) {
    if (rec["record"] != "epoch") continue;
    last_epoch = rec;
    for (const auto& q : rec["quantizers"]) {
      const double tau = q["tau"].get<double>();
      taus_ok &= std::isfinite(tau) && tau > 0.0;
    }
  }
  o.require(taus_ok && !last_epoch.is_null(), "tau finite and positive");
  for (const auto& q : last_epoch["quantizers"])
    if (q["n"] == 3) {
      o.detail << ", " << q["layer"].get<std::string>() << " tau " << q["tau"].get<double>();
      o.require(q["tau"].get<double>() < 0.7, "ternary tau below 0.7");
    }

  // (c): toy codec on synthetic 8x8 tiles.
  ModelConfig cc;
  cc.F = 8;
  cc.input_size = 8;
  cc.seed = 5;
  PurenetConfig p;
  p.n_feature = 16;
  p.pu_channels = {64, 32, 16, 16};
  p.rc_blocks = 1;
  p.patch_size = 8;
  p.variant = DecoderVariant::PiPurenet;
  cc.decoder = p;
  Network codec(cc);
  const RealTensor train = untile_patches(synthetic_frames(128, 16, 16, 7), 2, 2);
  const RealTensor held = untile_patches(synthetic_frames(32, 16, 16, 8), 2, 2);
  CodecTrainConfig ct;
  ct.batch_a = 32;
  ct.lr_a = 3e-3;
  ct.decay_period_a = 20;
  ct.epochs_a_bn = 60;
  ct.epochs_a_bsn = 30;
  CodecTrainer trainer(codec, ct);
  const auto mse = trainer.stage_a(train);
  const double pi = mean_psnr(reconstruct_patches(codec, held), held);
  const double baseline = mean_psnr(repeat_patch(mean_patch(train), held.dim(0)), held);
  const double own = mean_psnr(mean_patch_baseline(held, 8), held);
  o.detail << "; codec MSE epoch 1 " << std::setprecision(5) << mse.at(0) << ", epoch 10 " << mse.at(9)
           << std::setprecision(2) << ", PI " << pi << " dB vs mean patch " << baseline << " dB (own-mean " << own
           << " dB)";
  o.require(mse.at(9) < mse.at(0), "stage A MSE did not fall");
  o.require(pi - baseline >= 1.0, "PI margin over the mean patch");
}

void bitstream_contract(Outcome& o) {
  ModelConfig cfg = model(64);
  cfg.seed = 11;
  auto net = deployable(cfg);
  const auto im = lower(*net);
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> grid(1, 2), px(0, 255);
  int ok_rate = 0, identical = 0, deterministic = 0, rejected = 0, attempts = 0;
  const int images = 100;
  for (int n = 0; n < images; ++n) {
    const Index rows = grid(rng), cols = grid(rng);
    RealTensor img({32 * rows, 32 * cols, 3});
    for (Index i = 0; i < img.size(); ++i) img[i] = pixel_value(px(rng));
    const Bitstream real = encode_image(*net, img);
    const Bitstream integer = encode_image(im, img);
    ok_rate += real.payload_bits() == static_cast<std::size_t>(256 * rows * cols) && real.bpp() == 0.25;
    identical += real == integer;
    const auto bytes = serialize_bitstream(real);
    deterministic += serialize_bitstream(encode_image(*net, img)) == bytes && parse_bitstream(bytes) == real;

    auto rejects = [&](std::vector<std::uint8_t> b) {
      ++attempts;
      try {
        parse_bitstream(b);
      } catch (const ValidationError&) {
        ++rejected;
      }
    };
    std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
    rejects({bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(pos(rng))});
    rejects({bytes.begin(), bytes.end() - 1});
    for (int k = 0; k < 3; ++k) {
      auto flipped = bytes;
      flipped[pos(rng)] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
      rejects(flipped);
    }
    auto longer = bytes;
    longer.push_back(0);
    rejects(longer);
  }
  o.detail << images << " images: rate " << ok_rate << ", real/integer identical " << identical << ", deterministic "
           << deterministic << ", rejected " << rejected << "/" << attempts << " damaged streams";
  o.require(ok_rate == images, "4F bits per patch");
  o.require(identical == images, "real/integer identity");
  o.require(deterministic == images, "determinism");
  o.require(rejected == attempts, "damaged stream accepted");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "cost table", 1.0, cost_table},
      {2, "appendix memory cells", 1.0, appendix_a},
      {3, "HWMSB conformance", 10.0, hwmsb_conformance},
      {4, "gradient checks", 30.0, gradient_checks},
      {5, "equidistribution", 10.0, equidistribution},
      {6, "BSN invariants", 0.0, bsn_invariants},
      {7, "integer-path equivalence", 120.0, integer_equivalence},
      {8, "desk-scale training", 900.0, desk_training},
      {9, "bitstream contract", 60.0, bitstream_contract},
  };
  int only = 0;
  if (argc > 1) only = std::atoi(argv[1]);
  bool all_pass = true;
  bool ran = false;
  for (const auto& c : all) {
    if (only != 0 && c.id != only) continue;
    ran = true;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0.0) o.require(secs < c.limit_s, "runtime over " + std::to_string(c.limit_s) + " s");
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.detail.str() << " ("
              << std::fixed << std::setprecision(2) << secs << " s)" << std::endl;
    all_pass &= o.pass;
  }
  if (!ran) {
    std::cerr << "usage: acceptance [1-9]\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}
