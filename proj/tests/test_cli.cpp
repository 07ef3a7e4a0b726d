#include "doctest.h"

#include "nqe/binary_io.hpp"
#include "nqe/cli.hpp"
#include "nqe/codec.hpp"
#include "nqe/datasets.hpp"
#include "nqe/image_io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

using namespace nqe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run nqe_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json last_record(const Run& r) {
  std::istringstream is(r.out);
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty() && line.front() == '{') last = line;
  return json::parse(last);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

const std::string kData = NQE_TEST_DATA_DIR;

}  // namespace

TEST_CASE("tables output matches the golden file and is byte-stable") {
  const Run a = nqe_run({"tables"});
  REQUIRE(a.code == 0);
  CHECK(a.out == slurp(kData + "/../golden/tables.txt"));
  CHECK(nqe_run({"tables"}).out == a.out);
  const Run appendix = nqe_run({"tables", "--appendix-a"});
  for (const char* cell :
       {"0.262", "1.049", "4.194", "0.016", "0.066", "0.262", "0.018", "0.070", "0.270", "0.253", "1.003", "3.997"})
    CHECK(appendix.out.find(cell) != std::string::npos);
  CHECK(appendix.out.find("1.073") == std::string::npos);
}

TEST_CASE("cost subcommand") {
  const Run mixed = nqe_run({"cost", "--F", "64", "--precision", "mixed"});
  REQUIRE(mixed.code == 0);
  for (const char* cell : {"1.073", "0.210", "0.287"}) CHECK(mixed.out.find(cell) != std::string::npos);
  const Run binary = nqe_run({"cost", "--F", "64", "--precision", "binary", "--json"});
  REQUIRE(binary.code == 0);
  const json j = last_record(binary);
  CHECK(j["memory_mb"] == "0.774");
  CHECK(j["mac_bit_g"] == "0.125");
  CHECK(j["bops_g"] == "0.137");
  const json naive = last_record(nqe_run({"cost", "--json", "--compute-bits", "naive"}));
  CHECK(naive["mac_bit_g"] != "0.210");
  const json ent = last_record(nqe_run({"cost", "--json", "--mode", "entropy"}));
  CHECK(ent["total"]["memory_bits"].get<double>() < 1072704.0);
}

TEST_CASE("config files override flags") {
  TempDir d("nqe_cli_cfg");
  spit(d / "c.json", R"({"model": {"F": 32}})");
  const json j = last_record(nqe_run({"cost", "--json", "--F", "64", "--config", d / "c.json"}));
  CHECK(j["config"]["F"] == 32);
}

TEST_CASE("exit codes") {
  CHECK(nqe_run({}).code == kExitUsage);
  CHECK(nqe_run({"frobnicate"}).code == kExitUsage);
  CHECK(nqe_run({"cost", "--bogus"}).code == kExitUsage);
  CHECK(nqe_run({"cost", "--F"}).code == kExitUsage);
  CHECK(nqe_run({"cost", "--help"}).code == kExitOk);
  CHECK(nqe_run({"eval", "--model", "/nonexistent/m.nqew"}).code == kExitValidation);
  CHECK(nqe_run({"cost", "--precision", "ternary"}).code == kExitValidation);
  CHECK(nqe_run({"cost", "--mode", "fancy"}).code == kExitValidation);
  CHECK(nqe_run({"cost", "--F", "0"}).code == kExitValidation);
  TempDir d("nqe_cli_exit");
  spit(d / "bad.json", "{not json");
  const Run bad = nqe_run({"cost", "--config", d / "bad.json"});
  CHECK(bad.code == kExitValidation);
  CHECK(bad.err.find("error:") != std::string::npos);
  CHECK(nqe_run({"compress", "--in", kData + "/test64.png", "--out", d / "x"}).code == kExitValidation);
}

TEST_CASE("export, import and interchange") {
  TempDir d("nqe_cli_weights");
  REQUIRE(nqe_run({"export", "--F", "8", "--classes", "4", "--seed", "5", "--out", d / "a.nqew"}).code == 0);
  REQUIRE(nqe_run({"import", "--in", d / "a.nqew", "--out", d / "b.nqew"}).code == 0);
  CHECK(slurp(d / "a.nqew") == slurp(d / "b.nqew"));
  CHECK(fs::exists(d / "a.nqew.manifest.json"));

  const std::string bytes = slurp(d / "a.nqew");
  spit(d / "cut.nqew", bytes.substr(0, bytes.size() / 2));
  CHECK(nqe_run({"import", "--in", d / "cut.nqew", "--out", d / "c.nqew"}).code == kExitValidation);

  spit(d / "codec.json",
       R"({"model": {"F": 8, "classes": 4, "decoder": {"n_feature": 8, "pu_channels": [16, 16, 8, 8], "rc_blocks": 1}}})");
  REQUIRE(nqe_run({"export", "--config", d / "codec.json", "--seed", "9", "--out", d / "codec.nqew"}).code == 0);
  const Run into_classifier = nqe_run({"import", "--in", d / "codec.nqew", "--model", d / "a.nqew", "--out", d / "x.nqew"});
  REQUIRE(into_classifier.code == 0);
  const json r = last_record(into_classifier);
  CHECK(r["loaded"].get<int>() > 0);
  CHECK(r["skipped"].get<int>() > 0);  // decoder records have nowhere to go

  // A different width is a topology mismatch.
  REQUIRE(nqe_run({"export", "--F", "16", "--out", d / "f16.nqew"}).code == 0);
  CHECK(nqe_run({"import", "--in", d / "f16.nqew", "--model", d / "a.nqew", "--out", d / "y.nqew"}).code ==
        kExitValidation);
}

TEST_CASE("compress then decompress the bundled image") {
  TempDir d("nqe_cli_codec");
  spit(d / "codec.json",
       R"({"model": {"F": 8, "classes": 4, "decoder": {"n_feature": 8, "pu_channels": [16, 16, 8, 8], "rc_blocks": 1, "variant": "purenet"}}})");
  REQUIRE(nqe_run({"export", "--config", d / "codec.json", "--out", d / "m.nqew"}).code == 0);
  const Run c = nqe_run({"compress", "--model", d / "m.nqew", "--in", kData + "/test64.png", "--out", d / "x.nqeb"});
  REQUIRE(c.code == 0);
  const json cr = last_record(c);
  CHECK(cr["payload_bits"] == 4 * 32);
  CHECK(cr["bpp"].get<double>() == 4.0 * 8 / 1024);
  for (const char* v : {"purenet", "pi"}) {
    const Run dd = nqe_run({"decompress", "--model", d / "m.nqew", "--in", d / "x.nqeb", "--out", d / "y.png",
                            "--variant", v, "--reference", kData + "/test64.png"});
    REQUIRE(dd.code == 0);
    const RealTensor y = read_image(d / "y.png");
    CHECK(y.shape() == Shape{64, 64, 3});
    const json r = last_record(dd);
    CHECK(r["ms_ssim"].get<double>() <= 1.0);
  }
  CHECK(nqe_run({"decompress", "--model", d / "m.nqew", "--in", d / "x.nqeb", "--out", d / "y.png", "--variant",
                 "bbd"})
            .code == kExitValidation);
  std::string stream = slurp(d / "x.nqeb");
  stream[stream.size() / 2] ^= 0x10;
  spit(d / "bad.nqeb", stream);
  CHECK(nqe_run({"decompress", "--model", d / "m.nqew", "--in", d / "bad.nqeb", "--out", d / "z.png"}).code ==
        kExitValidation);

  const json manifest = json::parse(slurp(d / "x.nqeb.manifest.json"));
  CHECK(manifest["command"] == "compress");
  CHECK(manifest["version"] == version());
  CHECK(manifest["inputs"].size() == 2);
  CHECK(manifest["outputs"][0]["fnv1a64"].get<std::string>().size() == 16);
}

TEST_CASE("train, lower, infer and compress through both encoders") {
  TempDir d("nqe_cli_pipeline");
  const std::vector<std::string> train = {"train", "--F", "8", "--input-size", "8", "--classes", "4",
                                          "--samples", "64", "--epochs1", "1", "--epochs2", "1",
                                          "--batch", "32", "--no-augment", "--out", d / "cls.nqew",
                                          "--log", d / "log.jsonl"};
  const Run t = nqe_run(train);
  REQUIRE(t.code == 0);
  CHECK(last_record(t)["task"] == "classifier");
  CHECK(fs::file_size(d / "log.jsonl") > 0);

  // Reproducible from the manifest's argv alone.
  const json manifest = json::parse(slurp(d / "cls.nqew.manifest.json"));
  const std::string first = slurp(d / "cls.nqew");
  REQUIRE(nqe_run(manifest["argv"].get<std::vector<std::string>>()).code == 0);
  CHECK(slurp(d / "cls.nqew") == first);

  const Run l = nqe_run({"lower", "--model", d / "cls.nqew", "--out", d / "cls.nqel", "--widths"});
  REQUIRE(l.code == 0);
  CHECK(l.out.find("conv1") != std::string::npos);
  const Run inf = nqe_run({"infer", "--lowered", d / "cls.nqel", "--samples", "200", "--reference", d / "cls.nqew",
                           "--trace", d / "t.nqet"});
  REQUIRE(inf.code == 0);
  const json ir = last_record(inf);
  CHECK(ir["argmax_mismatches"] == 0);
  CHECK(ir["code_mismatches"] == 0);
  CHECK(ir["ops"]["mac"].get<std::uint64_t>() > 0);
  CHECK(fs::file_size(d / "t.nqet") > 0);

  const Run tc = nqe_run({"train", "--task", "codec", "--F", "8", "--input-size", "8", "--samples", "4",
                          "--epochs-a-bn", "1", "--epochs-a-bsn", "1", "--epochs-b", "1", "--epochs-c", "1",
                          "--batch", "16", "--out", d / "codec.nqew"});
  REQUIRE(tc.code == 0);
  CHECK(last_record(tc)["stage_c_loss"].size() == 1);
  REQUIRE(nqe_run({"lower", "--model", d / "codec.nqew", "--out", d / "codec.nqel"}).code == 0);
  write_png(d / "img.png", synthetic_frames(1, 16, 24, 3).reshaped({16, 24, 3}));
  REQUIRE(nqe_run({"compress", "--model", d / "codec.nqew", "--in", d / "img.png", "--out", d / "r.nqeb"}).code == 0);
  REQUIRE(nqe_run({"compress", "--lowered", d / "codec.nqel", "--in", d / "img.png", "--out", d / "i.nqeb"}).code == 0);
  CHECK(slurp(d / "r.nqeb") == slurp(d / "i.nqeb"));
  const Run ev = nqe_run({"eval", "--model", d / "codec.nqew", "--task", "codec", "--samples", "2"});
  REQUIRE(ev.code == 0);
  CHECK(last_record(ev).contains("psnr"));
}
