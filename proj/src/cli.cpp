#include "nqe/cli.hpp"

#include "nqe/binary_io.hpp"
#include "nqe/bitpack.hpp"
#include "nqe/codec.hpp"
#include "nqe/cost.hpp"
#include "nqe/datasets.hpp"
#include "nqe/image_io.hpp"
#include "nqe/integer.hpp"
#include "nqe/metrics.hpp"
#include "nqe/training.hpp"
#include "nqe/weights_io.hpp"

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#ifndef NQE_VERSION
#define NQE_VERSION "dev"
#endif

namespace nqe {

const char* version() { return NQE_VERSION; }

namespace {

using nlohmann::json;

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void require_file(const std::string& path) {
  if (path.empty()) throw ValidationError("missing file argument");
  if (!std::filesystem::is_regular_file(path)) throw ValidationError("no such file: " + path);
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  require_file(path);
  const auto bytes = read_file(path);
  try {
    json j = json::parse(bytes.begin(), bytes.end());
    if (!j.is_object()) throw ValidationError("config " + path + " is not a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ValidationError("cannot parse config " + path + ": " + e.what());
  }
}

// Defaults, then flags, then the config file.
struct ModelFlags {
  std::optional<Index> F, G, classes, input_size;
  std::string bottleneck, precision;

  void add(CLI::App* app) {
    app->add_option("--F", F, "base width F");
    app->add_option("--G", G, "group count of the group convolution");
    app->add_option("--classes", classes, "classifier outputs");
    app->add_option("--input-size", input_size, "square input side (patch size for the codec)");
    app->add_option("--bottleneck", bottleneck, "lfc | rcs_fc | dwconv_fc");
    app->add_option("--precision", precision, "mixed | binary");
  }

  ModelConfig resolve(const json& config, std::optional<std::uint64_t> seed) const {
    json j = to_json(ModelConfig{});
    if (F) j["F"] = *F;
    if (G) j["G"] = *G;
    if (classes) j["classes"] = *classes;
    if (input_size) j["input_size"] = *input_size;
    if (!bottleneck.empty()) j["bottleneck"] = bottleneck;
    if (!precision.empty()) j["precision"] = precision;
    if (seed) j["seed"] = *seed;
    if (config.contains("model")) j.merge_patch(config["model"]);
    return model_config_from_json(j);
  }
};

std::string file_digest(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args) {
    j_ = {{"tool", "nqe"}, {"version", version()}, {"command", std::move(command)}, {"argv", args},
          {"inputs", json::array()}, {"outputs", json::array()}};
  }
  void input(const std::string& path) {
    if (!path.empty()) j_["inputs"].push_back({{"path", path}, {"fnv1a64", file_digest(path)}});
  }
  void output(const std::string& path) {
    if (!path.empty()) j_["outputs"].push_back({{"path", path}, {"fnv1a64", file_digest(path)}});
  }
  json& operator[](const char* key) { return j_[key]; }
  /// Written to `path`, or next to the primary output when no path was given.
  void write(const std::string& path, const std::string& primary_output) const {
    const std::string target = !path.empty() ? path : primary_output.empty() ? "" : primary_output + ".manifest.json";
    if (target.empty()) return;
    const std::string text = j_.dump(2) + "\n";
    write_file(target, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

 private:
  json j_;
};

LabeledImages labeled_data(const std::string& spec, Index samples, const ModelConfig& mc, std::uint64_t seed,
                           bool train) {
  if (spec == "synthetic") return synthetic_shapes(samples, mc.input_size, mc.classes, seed);
  if (spec.rfind("cifar10:", 0) == 0) {
    auto d = load_cifar10(spec.substr(8), train, samples);
    if (d.images.dim(1) != mc.input_size) throw ValidationError("CIFAR-10 images are 32x32; set --input-size 32");
    return d;
  }
  throw ValidationError("unknown classification data '" + spec + "' (synthetic | cifar10:<dir>)");
}

RealTensor frame_data(const std::string& spec, Index samples, Index patch, std::uint64_t seed) {
  const Index side = 4 * patch;
  if (spec == "synthetic") return synthetic_frames(samples, side, side, seed);
  if (spec.rfind("png:", 0) == 0) return load_png_crops(spec.substr(4), side, samples, seed);
  throw ValidationError("unknown frame data '" + spec + "' (synthetic | png:<dir>)");
}

ByteTensor to_bytes(const RealTensor& images) {
  ByteTensor b(images.shape());
  for (Index i = 0; i < b.size(); ++i) {
    const int p = pixel_byte(images[i]);
    if (pixel_value(p) != images[i]) throw ValidationError("integer inference needs 8-bit pixels");
    b[i] = static_cast<std::uint8_t>(p);
  }
  return b;
}

std::unique_ptr<Network> load_model(const std::string& path) {
  require_file(path);
  return import_weights(path);
}

PurenetConfig default_decoder(const ModelConfig& mc) {
  PurenetConfig p;
  p.patch_size = mc.input_size;
  p.variant = DecoderVariant::PiPurenet;
  return p;
}

double mean_ms_ssim(const RealTensor& a, const RealTensor& b) {
  const Index per = a.size() / a.dim(0);
  const Shape img(a.shape().begin() + 1, a.shape().end());
  double sum = 0.0;
  for (Index i = 0; i < a.dim(0); ++i)
    sum += ms_ssim(RealTensor(img, a.array().segment(i * per, per).eval()),
                   RealTensor(img, b.array().segment(i * per, per).eval()));
  return sum / static_cast<double>(a.dim(0));
}

struct Options {
  std::string config, manifest, out, in, model, lowered, data = "synthetic", log, trace, reference, variant, task;
  std::optional<std::uint64_t> seed;
  ModelFlags mf;
  Index samples = 0, batch = 0, trace_samples = 1;
  std::optional<int> epochs1, epochs2, epochs_a_bn, epochs_a_bsn, epochs_b, epochs_c;
  std::optional<double> lr;
  bool no_augment = false, verbose = false, no_absorb = false, no_or_pool = false, widths = false, json_out = false,
       lean = false, appendix_a = false, table_iii = false;
  std::string mode = "naive", compute_bits = "entropy";
};

void emit_line(std::ostream& out, const json& j) { out << j.dump() << '\n'; }

int cmd_train(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("train: --out is required");
  const json config = load_config(o.config);
  Manifest m("train", args);
  m.input(o.config);
  ModelConfig mc = o.mf.resolve(config, o.seed);
  RecordSink file_sink = o.log.empty() ? RecordSink{} : jsonl_sink(o.log);
  RecordSink sink = [&](const json& r) {
    if (file_sink) file_sink(r);
    if (o.verbose) emit_line(out, r);
  };
  json summary;
  if (o.task == "classifier") {
    json t = to_json(TrainConfig{});
    if (o.batch) t["batch_size"] = o.batch;
    if (o.epochs1) t["epochs_stage1"] = *o.epochs1;
    if (o.epochs2) t["epochs_stage2"] = *o.epochs2;
    if (o.lr) t["lr_init"] = *o.lr;
    if (o.no_augment) t["augmentation"] = false;
    t["seed"] = mc.seed;
    t["dump_path"] = o.out + ".diverged";
    if (config.contains("train")) t.merge_patch(config["train"]);
    const TrainConfig tc = train_config_from_json(t);
    const std::string data_spec = config.value("data", o.data);
    const auto data = labeled_data(data_spec, o.samples > 0 ? o.samples : 1000, mc, tc.seed, true);
    Network net(mc);
    const auto r = train_classifier(net, data, tc, sink);
    export_weights(net, o.out);
    summary = {{"record", "summary"},
               {"task", "classifier"},
               {"stage1_accuracy", r.stage1_accuracy},
               {"folded_accuracy", r.folded_accuracy},
               {"stage2_accuracy", r.stage2_accuracy},
               {"model_digest", hex64(model_digest(net))}};
    m["config"] = {{"model", to_json(mc)}, {"train", to_json(tc)}, {"data", data_spec}, {"samples", data.size()}};
  } else if (o.task == "codec") {
    if (!mc.decoder) {
      json j = to_json(mc);
      j["decoder"] = {{"patch_size", mc.input_size}, {"variant", "pi"}};
      if (config.contains("model")) j.merge_patch(config["model"]);
      mc = model_config_from_json(j);
      if (!mc.decoder) mc.decoder = default_decoder(mc);
    }
    json c = to_json(CodecTrainConfig{});
    if (o.batch) c["batch_a"] = o.batch;
    if (o.epochs_a_bn) c["epochs_a_bn"] = *o.epochs_a_bn;
    if (o.epochs_a_bsn) c["epochs_a_bsn"] = *o.epochs_a_bsn;
    if (o.epochs_b) c["stage_b"]["epochs"] = *o.epochs_b;
    if (o.epochs_c) c["stage_c"]["epochs"] = *o.epochs_c;
    if (o.lr) c["lr_a"] = *o.lr;
    c["seed"] = mc.seed;
    if (config.contains("codec")) c.merge_patch(config["codec"]);
    const CodecTrainConfig cc = codec_train_config_from_json(c);
    const std::string data_spec = config.value("data", o.data);
    const Index P = mc.decoder->patch_size;
    const RealTensor frames = frame_data(data_spec, o.samples > 0 ? o.samples : 16, P, cc.seed);
    Network net(mc);
    CodecTrainer trainer(net, cc, sink);
    const auto a = trainer.stage_a(untile_patches(frames, 4, 4));
    std::vector<double> b, cl;
    if (cc.stage_b.epochs > 0) b = trainer.stage_b(frames);
    if (cc.stage_b.epochs > 0 && cc.stage_c.epochs > 0) cl = trainer.stage_c(frames);
    // The classifier head is untrained here; folding it keeps the file lowerable.
    fold_sequential_to_bsn(net.classifier());
    export_weights(net, o.out);
    summary = {{"record", "summary"},
               {"task", "codec"},
               {"stage_a_loss", a},
               {"stage_b_loss", b},
               {"stage_c_loss", cl},
               {"model_digest", hex64(model_digest(net))}};
    m["config"] = {{"model", to_json(mc)}, {"codec", to_json(cc)}, {"data", data_spec}, {"frames", frames.dim(0)}};
  } else {
    throw ValidationError("train: --task must be classifier or codec");
  }
  emit_line(out, summary);
  m["seed"] = mc.seed;
  m["result"] = summary;
  m.output(o.out);
  m.output(o.log);
  m.write(o.manifest, o.out);
  return kExitOk;
}

int cmd_eval(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  auto net = load_model(o.model);
  Manifest m("eval", args);
  m.input(o.model);
  const std::uint64_t seed = o.seed.value_or(12345);
  json r;
  if (o.task == "classifier") {
    const auto data = labeled_data(o.data, o.samples > 0 ? o.samples : 1000, net->config(), seed, false);
    r = {{"record", "eval"}, {"task", "classifier"}, {"samples", data.size()},
         {"accuracy", classification_accuracy(*net, data)}};
  } else if (o.task == "codec") {
    if (!net->has_decoder()) throw ValidationError("eval: model has no decoder");
    if (!o.variant.empty()) net->decoder().set_variant(variant_from_string(o.variant));
    const Index P = net->decoder().config().patch_size;
    const RealTensor frames = frame_data(o.data, o.samples > 0 ? o.samples : 8, P, seed);
    const RealTensor rec = reconstruct_frames(*net, frames);
    const RealTensor base = mean_patch_baseline(frames, P);
    r = {{"record", "eval"},
         {"task", "codec"},
         {"variant", to_string(net->decoder().variant())},
         {"frames", frames.dim(0)},
         {"psnr", psnr_finite(mean_psnr(rec, frames))},
         {"ms_ssim", mean_ms_ssim(rec, frames)},
         {"own_mean_patch_psnr", psnr_finite(mean_psnr(base, frames))}};
  } else {
    throw ValidationError("eval: --task must be classifier or codec");
  }
  emit_line(out, r);
  m["seed"] = seed;
  m["config"] = {{"data", o.data}, {"task", o.task}, {"model", to_json(net->config())}};
  m["result"] = r;
  m.write(o.manifest, "");
  return kExitOk;
}

int cmd_lower(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("lower: --out is required");
  auto net = load_model(o.model);
  LowerOptions lo;
  lo.absorb_bsn = !o.no_absorb;
  lo.or_pooling = !o.no_or_pool;
  const IntegerModel im = lower(*net, lo);
  save_lowered(im, o.out);
  const auto rows = report_widths(im);
  int max_acc = 0;
  for (const auto& w : rows) max_acc = std::max(max_acc, w.acc_bits);
  if (o.widths) out << format_widths(rows);
  const json r = {{"record", "lower"},
                  {"encoder_ops", im.encoder.size()},
                  {"classifier_ops", im.classifier.size()},
                  {"elided_bsn", im.elided.size()},
                  {"max_acc_bits", max_acc}};
  emit_line(out, r);
  Manifest m("lower", args);
  m.input(o.model);
  m["config"] = {{"absorb_bsn", lo.absorb_bsn}, {"or_pooling", lo.or_pooling}, {"model", to_json(im.config)}};
  m["result"] = r;
  m.output(o.out);
  m.write(o.manifest, o.out);
  return kExitOk;
}

int cmd_infer(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  require_file(o.lowered);
  const IntegerModel im = load_lowered(o.lowered);
  const std::uint64_t seed = o.seed.value_or(12345);
  const auto data = labeled_data(o.data, o.samples > 0 ? o.samples : 1000, im.config, seed, false);
  std::unique_ptr<Network> ref;
  if (!o.reference.empty()) ref = load_model(o.reference);

  IntOpCounts counts;
  TraceWriter trace;
  Index correct = 0, logit_mismatch = 0, code_mismatch = 0;
  const Index chunk = 128, n = data.size();
  for (Index s = 0; s < n; s += chunk) {
    const Index k = std::min(chunk, n - s);
    std::vector<Index> idx(static_cast<size_t>(k));
    for (Index i = 0; i < k; ++i) idx[static_cast<size_t>(i)] = s + i;
    const ByteTensor part = to_bytes(gather(data.images, idx));
    const auto r = int_forward(im, part, true, &counts, !o.trace.empty() && s == 0 ? trace.sink() : TraceSink{});
    RealTensor ref_logits, ref_code;
    if (ref) {
      const RealTensor x = image_from_bytes(part);
      ref_code = resolve_divisor(ref->encode(x, eval_pass()));
      ref_logits = resolve_divisor(ref->classify(x, eval_pass()));
    }
    for (Index i = 0; i < k; ++i) {
      Index best = 0;
      r.logits.matrix().row(i).maxCoeff(&best);
      correct += best == data.labels[static_cast<size_t>(s + i)];
      if (ref) {
        Index rb = 0;
        ref_logits.matrix().row(i).maxCoeff(&rb);
        logit_mismatch += rb != best;
        code_mismatch += r.code.matrix().row(i).cast<double>() != ref_code.matrix().row(i);
      }
    }
  }
  if (!o.trace.empty()) write_file(o.trace, trace.finish());
  json r = {{"record", "infer"},
            {"samples", n},
            {"accuracy", n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0},
            {"ops", {{"mac", counts.mac}, {"add", counts.add}, {"compare", counts.compare}, {"msb", counts.msb},
                     {"or", counts.bit_or}}}};
  if (ref) {
    r["argmax_mismatches"] = logit_mismatch;
    r["code_mismatches"] = code_mismatch;
  }
  emit_line(out, r);
  Manifest m("infer", args);
  m.input(o.lowered);
  m.input(o.reference);
  m["seed"] = seed;
  m["config"] = {{"data", o.data}, {"samples", n}};
  m["result"] = r;
  m.output(o.trace);
  m.write(o.manifest, o.trace);
  return kExitOk;
}

int cmd_cost(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const json config = load_config(o.config);
  const ModelConfig mc = o.mf.resolve(config, o.seed);
  CostOptions co;
  co.memory = bits_mode_from_string(o.mode);
  co.compute = bits_mode_from_string(o.compute_bits);
  const CostReport r = cost_report(mc, co);
  if (o.json_out) emit_line(out, to_json(r));
  else out << format_cost_table(r);
  Manifest m("cost", args);
  m["config"] = {{"model", to_json(mc)}, {"memory", o.mode}, {"compute", o.compute_bits}};
  m.write(o.manifest, "");
  return kExitOk;
}

int cmd_tables(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const bool both = !o.appendix_a && !o.table_iii;
  if (both || o.table_iii) out << format_table_iii();
  if (both) out << '\n';
  if (both || o.appendix_a) out << format_appendix_a();
  Manifest m("tables", args);
  m.write(o.manifest, "");
  return kExitOk;
}

int cmd_compress(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("compress: --out is required");
  require_file(o.in);
  const RealTensor image = read_image(o.in);
  Manifest m("compress", args);
  m.input(o.in);
  Bitstream bs;
  if (!o.lowered.empty()) {
    require_file(o.lowered);
    bs = encode_image(load_lowered(o.lowered), image);
    m.input(o.lowered);
  } else {
    auto net = load_model(o.model);
    bs = encode_image(*net, image);
    m.input(o.model);
  }
  save_bitstream(o.out, bs);
  const json r = {{"record", "compress"},
                  {"height", bs.height},
                  {"width", bs.width},
                  {"patches", bs.patches()},
                  {"payload_bits", bs.payload_bits()},
                  {"bpp", bs.bpp()},
                  {"file_bytes", std::filesystem::file_size(o.out)}};
  emit_line(out, r);
  m["result"] = r;
  m.output(o.out);
  m.write(o.manifest, o.out);
  return kExitOk;
}

int cmd_decompress(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("decompress: --out is required");
  require_file(o.in);
  auto net = load_model(o.model);
  const Bitstream bs = load_bitstream(o.in);
  std::optional<DecoderVariant> v;
  if (!o.variant.empty()) v = variant_from_string(o.variant);
  const RealTensor y = decode_image(bs, *net, v);
  write_image(o.out, y);
  json r = {{"record", "decompress"},
            {"height", y.dim(0)},
            {"width", y.dim(1)},
            {"variant", to_string(v.value_or(net->decoder().variant()))}};
  Manifest m("decompress", args);
  m.input(o.model);
  m.input(o.in);
  if (!o.reference.empty()) {
    require_file(o.reference);
    const RealTensor ref = read_image(o.reference);
    const RealTensor back = read_image(o.out);
    r["psnr"] = psnr_finite(psnr(back, ref));
    r["ms_ssim"] = ms_ssim(back, ref);
    m.input(o.reference);
  }
  emit_line(out, r);
  m["result"] = r;
  m.output(o.out);
  m.write(o.manifest, o.out);
  return kExitOk;
}

int cmd_export(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("export: --out is required");
  Manifest m("export", args);
  std::unique_ptr<Network> net;
  if (!o.model.empty()) {
    net = load_model(o.model);
    m.input(o.model);
  } else {
    const json config = load_config(o.config);
    m.input(o.config);
    net = std::make_unique<Network>(o.mf.resolve(config, o.seed));
    recalibrate_quantizers(*net);
  }
  export_weights(*net, o.out, !o.lean);
  const json r = {{"record", "export"}, {"model_digest", hex64(model_digest(*net))}, {"proxies", !o.lean}};
  emit_line(out, r);
  m["seed"] = net->config().seed;
  m["config"] = {{"model", to_json(net->config())}};
  m["result"] = r;
  m.output(o.out);
  m.write(o.manifest, o.out);
  return kExitOk;
}

int cmd_import(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.out.empty()) throw ValidationError("import: --out is required");
  require_file(o.in);
  const auto bytes = read_file(o.in);
  Manifest m("import", args);
  m.input(o.in);
  std::unique_ptr<Network> target;
  if (!o.model.empty()) {
    target = load_model(o.model);
    m.input(o.model);
  } else if (!o.config.empty() || o.mf.F || o.mf.classes) {
    const json config = load_config(o.config);
    m.input(o.config);
    target = std::make_unique<Network>(o.mf.resolve(config, o.seed));
  } else {
    target = std::make_unique<Network>(weights_config(bytes));
  }
  const auto report = load_weights(*target, bytes);
  export_weights(*target, o.out, !o.lean);
  const json r = {{"record", "import"},
                  {"loaded", report.loaded},
                  {"skipped", report.skipped},
                  {"model_digest", hex64(model_digest(*target))}};
  emit_line(out, r);
  m["config"] = {{"model", to_json(target->config())}};
  m["result"] = r;
  m.output(o.out);
  m.write(o.manifest, o.out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"nqe: mixed-precision quantized encoder toolkit"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(version()));
  Options o;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON config; its values override flags");
    s->add_option("--seed", o.seed, "random seed");
    s->add_option("--manifest", o.manifest, "manifest path (default: <output>.manifest.json)");
  };

  auto* train = app.add_subcommand("train", "train a classifier or a codec");
  common(train);
  o.mf.add(train);
  train->add_option("--task", o.task, "classifier | codec")->default_val("classifier");
  train->add_option("--data", o.data, "synthetic | cifar10:<dir> | png:<dir>");
  train->add_option("--samples", o.samples, "training images; codec frames, counted per image with png:<dir>");
  train->add_option("--batch", o.batch, "batch size");
  train->add_option("--epochs1", o.epochs1, "classifier stage 1 epochs");
  train->add_option("--epochs2", o.epochs2, "classifier stage 2 epochs");
  train->add_option("--epochs-a-bn", o.epochs_a_bn, "codec stage A epochs with BN");
  train->add_option("--epochs-a-bsn", o.epochs_a_bsn, "codec stage A epochs with BSN");
  train->add_option("--epochs-b", o.epochs_b, "codec stage B epochs");
  train->add_option("--epochs-c", o.epochs_c, "codec stage C epochs");
  train->add_option("--lr", o.lr, "initial learning rate");
  train->add_flag("--no-augment", o.no_augment, "disable pad/crop/flip augmentation");
  train->add_option("--log", o.log, "per-epoch JSONL log");
  train->add_flag("--verbose", o.verbose, "echo log records to stdout");
  train->add_option("--out", o.out, "weights file")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a model on held-out data");
  common(eval);
  eval->add_option("--model", o.model, "weights file")->required();
  eval->add_option("--task", o.task, "classifier | codec")->default_val("classifier");
  eval->add_option("--data", o.data, "synthetic | cifar10:<dir> | png:<dir>");
  eval->add_option("--samples", o.samples, "images or frames; frames per image with png:<dir>");
  eval->add_option("--variant", o.variant, "decoder variant override");

  auto* lower_cmd = app.add_subcommand("lower", "lower a folded model to the integer path");
  common(lower_cmd);
  lower_cmd->add_option("--model", o.model, "weights file")->required();
  lower_cmd->add_option("--out", o.out, "lowered model file")->required();
  lower_cmd->add_flag("--no-absorb", o.no_absorb, "keep BSN before HWMSB as a shift instead of moving the reference");
  lower_cmd->add_flag("--no-or-pool", o.no_or_pool, "keep max pooling after Heaviside");
  lower_cmd->add_flag("--widths", o.widths, "print the per-layer width table");

  auto* infer = app.add_subcommand("infer", "run the integer path");
  common(infer);
  infer->add_option("--lowered", o.lowered, "lowered model file")->required();
  infer->add_option("--data", o.data, "synthetic | cifar10:<dir>");
  infer->add_option("--samples", o.samples, "images");
  infer->add_option("--reference", o.reference, "weights file to compare against the real-valued path");
  infer->add_option("--trace", o.trace, "activation trace of the first batch");

  auto* cost = app.add_subcommand("cost", "analytic memory and compute cost");
  common(cost);
  o.mf.add(cost);
  cost->add_option("--mode", o.mode, "weight memory bits: naive | entropy")->default_val("naive");
  cost->add_option("--compute-bits", o.compute_bits, "weight bits in MACxbit/BOPs: entropy | naive")
      ->default_val("entropy");
  cost->add_flag("--json", o.json_out, "one JSON record instead of the table");

  auto* tables = app.add_subcommand("tables", "reproduction tables");
  common(tables);
  tables->add_flag("--appendix-a", o.appendix_a, "bottleneck memory table");
  tables->add_flag("--table-iii", o.table_iii, "F=64 memory / MACxbit / BOPs");

  auto* compress = app.add_subcommand("compress", "encode an image into a bitstream");
  common(compress);
  compress->add_option("--model", o.model, "weights file (real-valued encoder)");
  compress->add_option("--lowered", o.lowered, "lowered model (integer encoder)");
  compress->add_option("--in", o.in, "PNG or PPM image")->required();
  compress->add_option("--out", o.out, "bitstream")->required();

  auto* decompress = app.add_subcommand("decompress", "decode a bitstream");
  common(decompress);
  decompress->add_option("--model", o.model, "weights file with a decoder")->required();
  decompress->add_option("--in", o.in, "bitstream")->required();
  decompress->add_option("--out", o.out, "PNG or PPM image")->required();
  decompress->add_option("--variant", o.variant, "purenet | pi | bbd");
  decompress->add_option("--reference", o.reference, "original image for PSNR / MS-SSIM");

  auto* exp = app.add_subcommand("export", "write a weights file (fresh from a config, or re-export)");
  common(exp);
  o.mf.add(exp);
  exp->add_option("--model", o.model, "weights file to re-export");
  exp->add_option("--out", o.out, "weights file")->required();
  exp->add_flag("--lean", o.lean, "omit training proxies");

  auto* imp = app.add_subcommand("import", "load a weights file into a target model");
  common(imp);
  o.mf.add(imp);
  imp->add_option("--in", o.in, "weights file to import")->required();
  imp->add_option("--model", o.model, "target weights file");
  imp->add_option("--out", o.out, "resulting weights file")->required();
  imp->add_flag("--lean", o.lean, "omit training proxies");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(o, args, out);
    if (eval->parsed()) return cmd_eval(o, args, out);
    if (lower_cmd->parsed()) return cmd_lower(o, args, out);
    if (infer->parsed()) return cmd_infer(o, args, out);
    if (cost->parsed()) return cmd_cost(o, args, out);
    if (tables->parsed()) return cmd_tables(o, args, out);
    if (compress->parsed()) {
      if (o.model.empty() == o.lowered.empty()) throw ValidationError("compress: give exactly one of --model, --lowered");
      return cmd_compress(o, args, out);
    }
    if (decompress->parsed()) return cmd_decompress(o, args, out);
    if (exp->parsed()) return cmd_export(o, args, out);
    if (imp->parsed()) return cmd_import(o, args, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "fault: " << e.what() << '\n';
    return kExitFault;
  }
  return kExitUsage;
}

}  // namespace nqe
