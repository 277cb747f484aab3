#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "panformer/checkpoint.hpp"
#include "panformer/metrics.hpp"
#include "test_support.hpp"

using namespace panformer;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const fs::path& work() {
  static const fs::path dir = testing::scratch_dir("cli");
  return dir;
}

Run cli(const std::string& args) {
  const auto o = work() / "stdout.txt", e = work() / "stderr.txt";
  const std::string cmd = std::string(PANFORMER_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

json error_json(const Run& r) {
  const auto start = r.err.rfind("{\"");
  REQUIRE(start != std::string::npos);
  return json::parse(r.err.substr(start));
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Synthetic scene plus train/test manifests shared by several cases.
const fs::path& prepared() {
  static const fs::path dir = [] {
    const auto d = work() / "prepared";
    REQUIRE(cli("synth --size 256 --seed 3 --out " + (d / "scene").string()).code == 0);
    REQUIRE(cli("prepare-data --pan " + (d / "scene/pan.pfr").string() + " --ms " + (d / "scene/ms.pfr").string() +
                " --out " + (d / "train").string() + " --split train --patch 32 --count 6 --seed 1")
                .code == 0);
    REQUIRE(cli("prepare-data --pan " + (d / "scene/pan.pfr").string() + " --ms " + (d / "scene/ms.pfr").string() +
                " --out " + (d / "test").string() + " --split test --patch 32 --stride 32")
                .code == 0);
    write_text(d / "tiny.json", R"({"model": {"channels": 8, "heads": 2, "sab_per_path": 2, "cab_count": 2,
      "mlp_ratio": 2}, "train": {"batch": 2, "max_iters": 4, "log_every": 1, "checkpoint_every": 2, "lr0": 0.001}})");
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("usage errors exit 2 with JSON on stderr") {
  auto none = cli("");
  CHECK(none.code == 2);
  auto bad = cli("frobnicate");
  CHECK(bad.code == 2);
  CHECK(error_json(bad)["exit_code"] == 2);
  auto missing = cli("train --config x.json");
  CHECK(missing.code == 2);
  CHECK(error_json(missing)["error"] == "usage");
}

TEST_CASE("param-count reports the exact count and the band verdict") {
  auto r = cli("param-count --all-variants");
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out.substr(0, r.out.rfind('}') + 1));
  CHECK(j["params"] == 1500420);
  CHECK(j["result"] == "PASS");
  CHECK(j["variants"]["concat"] == 1498884);
  CHECK(j["variants"]["pan_x_ms"] == 1499652);
  CHECK(j["variants"]["ms_x_pan"] == 1499652);
  CHECK(j["variants"]["bidirectional"] == 1500420);
  CHECK(r.out.find("PASS param-count 1500420 in [1380000, 1680000]") != std::string::npos);
}

TEST_CASE("configuration errors name the field") {
  write_text(work() / "unknown.json", R"({"model": {"chanels": 64}})");
  auto r = cli("param-count --config " + (work() / "unknown.json").string());
  CHECK(r.code == 2);
  CHECK(error_json(r)["error"] == "config");
  CHECK(error_json(r)["message"].get<std::string>().find("chanels") != std::string::npos);

  write_text(work() / "toplevel.json", R"({"optim": {}})");
  CHECK(cli("param-count --config " + (work() / "toplevel.json").string()).code == 2);
  write_text(work() / "bands.json", R"({"model": {"bands": 8}})");
  CHECK(cli("param-count --config " + (work() / "bands.json").string()).code == 2);

  const auto d = prepared();
  auto sigma = cli("prepare-data --pan " + (d / "scene/pan.pfr").string() + " --ms " +
                   (d / "scene/ms.pfr").string() + " --out " + (work() / "bad").string() + " --split train --sigma -1");
  CHECK(sigma.code == 2);
  CHECK(error_json(sigma)["message"].get<std::string>().find("sigma") != std::string::npos);
  auto nofile = cli("prepare-data --pan nope.pfr --ms nope.pfr --out x --split train");
  CHECK(nofile.code == 2);
  CHECK(error_json(nofile)["error"] == "lookup");
}

TEST_CASE("full-scale configuration is expressible") {
  write_text(work() / "full.json", R"({
    "model": {"channels": 64, "heads": 8, "window": 4, "sab_per_path": 4, "cab_count": 6, "mlp_ratio": 4,
              "bands": 4, "fusion_variant": "bidirectional", "scale_mode": "per_head"},
    "train": {"lr0": 1e-4, "beta1": 0.9, "beta2": 0.999, "batch": 4, "max_iters": 200000, "decay": 0.99,
              "decay_every": 10000, "seed": 42},
    "data": {"sigma": 1.0, "bit_depth": 10, "bands": 4, "patch": 256, "count": 24000},
    "paths": {"data": "data/gf2", "out": "runs/full"},
    "precision": "f32"})");
  auto r = cli("param-count --config " + (work() / "full.json").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("1500420") != std::string::npos);
}

TEST_CASE("prepare-data is deterministic and echoes its configuration") {
  const auto d = prepared();
  const std::string base = "prepare-data --pan " + (d / "scene/pan.pfr").string() + " --ms " +
                           (d / "scene/ms.pfr").string() + " --split train --patch 32 --count 6 --seed 1 --out ";
  REQUIRE(cli(base + (work() / "again").string()).code == 0);
  CHECK(slurp(d / "train/manifest.json") == slurp(work() / "again/manifest.json"));
  CHECK(slurp(d / "train/patch_00005_gt.pfr") == slurp(work() / "again/patch_00005_gt.pfr"));
  CHECK(fs::exists(d / "train/resolved_config.json"));
  CHECK(fs::exists(d / "scene/resolved_config.json"));
  CHECK(json::parse(slurp(d / "train/resolved_config.json"))["data"]["count"] == 6);

  auto train = DatasetManifest::load(d / "train/manifest.json");
  auto test = DatasetManifest::load(d / "test/manifest.json");
  CHECK(train.entries.size() == 6);
  CHECK(test.entries.size() == 4);
  CHECK(test.split == "test");
}

TEST_CASE("test split of a 1600 scene at patch 400 yields one patch") {
  const auto dir = work() / "big";
  REQUIRE(cli("synth --size 1600 --seed 5 --out " + (dir / "scene").string()).code == 0);
  auto r = cli("prepare-data --pan " + (dir / "scene/pan.pfr").string() + " --ms " + (dir / "scene/ms.pfr").string() +
               " --out " + (dir / "test").string() + " --split test --patch 400");
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["patches"] == 1);
  auto m = DatasetManifest::load(dir / "test/manifest.json");
  auto p = m.load_entry(0);
  CHECK(p.pan.width == 400);
  CHECK(p.lrms.width == 100);
}

TEST_CASE("train, infer and evaluate compose") {
  const auto d = prepared();
  const auto run = work() / "run";
  auto t = cli("train --config " + (d / "tiny.json").string() + " --data " + d.string() + " --out " + run.string());
  REQUIRE(t.code == 0);
  CHECK(json::parse(t.out)["iterations"] == 4);
  CHECK(fs::exists(run / "checkpoint.pfck"));
  CHECK(fs::exists(run / "resolved_config.json"));
  std::ifstream log(run / "loss_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    auto j = json::parse(line);
    CHECK(j.contains("iter"));
    CHECK(j.contains("lr"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("wall_ms"));
  }
  CHECK(lines == 4);

  auto more = work() / "more.json";
  auto cfg = json::parse(slurp(d / "tiny.json"));
  cfg["train"]["max_iters"] = 6;
  write_text(more, cfg.dump());
  auto resumed = cli("train --config " + more.string() + " --data " + d.string() + " --out " +
                     (work() / "resumed").string() + " --resume " + (run / "checkpoint.pfck").string());
  REQUIRE(resumed.code == 0);
  CHECK(json::parse(resumed.out)["iterations"] == 6);

  const auto pred = work() / "pred";
  auto inf = cli("infer --ckpt " + (run / "checkpoint.pfck").string() + " --manifest " + (d / "test").string() +
                 " --out-dir " + pred.string());
  REQUIRE(inf.code == 0);
  CHECK(fs::exists(pred / "resolved_config.json"));
  auto ev = cli("evaluate --manifest " + (d / "test").string() + " --pred " + pred.string() + " --report " +
                (work() / "report.json").string());
  REQUIRE(ev.code == 0);
  auto report = json::parse(slurp(work() / "report.json"));
  CHECK(report["images"].size() == 4);
  CHECK(report["means"]["psnr"].is_number());
  CHECK(ev.out.find("mean") != std::string::npos);

  auto missing = cli("evaluate --manifest " + (d / "test").string() + " --pred " + (work() / "nopred").string() +
                     " --report " + (work() / "r2.json").string());
  CHECK(missing.code == 2);
}

TEST_CASE("infer output evaluated against itself reports the identity scores") {
  const auto d = prepared();
  const auto run = work() / "run";
  if (!fs::exists(run / "checkpoint.pfck"))
    REQUIRE(cli("train --config " + (d / "tiny.json").string() + " --data " + d.string() + " --out " + run.string())
                .code == 0);
  auto test = DatasetManifest::load(d / "test/manifest.json");
  const auto id = work() / "identity";
  fs::create_directories(id / "pred");
  auto r = cli("infer --ckpt " + (run / "checkpoint.pfck").string() + " --pan " + test.resolve(test.entries[0].pan).string() +
               " --ms " + test.resolve(test.entries[0].lrms).string() + " --out " + (id / "pred/scene.pfr").string());
  REQUIRE(r.code == 0);
  auto out = read_pfr(id / "pred/scene.pfr");
  auto ms = read_pfr(test.resolve(test.entries[0].lrms));
  CHECK(out.bands == ms.bands);
  CHECK(out.bit_depth == ms.bit_depth);
  CHECK(out.width == 4 * ms.width);

  fs::copy_file(id / "pred/scene.pfr", id / "scene_gt.pfr");
  fs::copy_file(test.resolve(test.entries[0].pan), id / "scene_pan.pfr");
  fs::copy_file(test.resolve(test.entries[0].lrms), id / "scene_lrms.pfr");
  DatasetManifest m;
  m.split = "test";
  m.entries.push_back({"scene_pan.pfr", "scene_lrms.pfr", "scene_gt.pfr"});
  m.save(id / "manifest.json");
  auto ev = cli("evaluate --manifest " + (id / "manifest.json").string() + " --pred " + (id / "pred").string() +
                " --report " + (id / "report.json").string());
  REQUIRE(ev.code == 0);
  auto means = json::parse(slurp(id / "report.json"))["means"];
  CHECK(means["psnr"] == "inf");
  CHECK(means["ssim"] == 1.0);
  CHECK(means["ergas"] == 0.0);
  CHECK(std::abs(means["scc"].get<double>() - 1.0) < 1e-12);
}

TEST_CASE("bench prints its protocol") {
  const auto d = prepared();
  auto r = cli("bench --config " + (d / "tiny.json").string() + " --size 64 --repeat 3");
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["median_s"].get<double>() > 0);
  CHECK(j["times_s"].size() == 3);
  CHECK(j["protocol"].get<std::string>().find("median") != std::string::npos);
  CHECK(cli("bench --size 30").code == 2);
}

TEST_CASE("grad-check command") {
  auto r = cli("grad-check --seed 7 --report " + (work() / "gc.json").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(json::parse(slurp(work() / "gc.json"))["passed"] == true);
}

TEST_CASE("ablate emits the four-variant table") {
  const auto d = prepared();
  auto cfg = json::parse(slurp(d / "tiny.json"));
  cfg["train"]["max_iters"] = 2;
  write_text(work() / "ablate.json", cfg.dump());
  auto r = cli("ablate --config " + (work() / "ablate.json").string() + " --data " + d.string() + " --out " +
               (work() / "ablate").string());
  REQUIRE(r.code == 0);
  auto table = slurp(work() / "ablate/ablation.md");
  CHECK(table.find("| Fusion strategy | PSNR | SSIM | ERGAS | SCC |") == 0);
  for (auto v : kAllFusionVariants) {
    CHECK(table.find("| " + to_string(v) + " |") != std::string::npos);
    CHECK(fs::exists(work() / "ablate" / to_string(v) / "loss_log.jsonl"));
    CHECK(fs::exists(work() / "ablate" / to_string(v) / "resolved_config.json"));
  }
  CHECK(json::parse(slurp(work() / "ablate/ablation.json"))["variants"].size() == 4);
}
