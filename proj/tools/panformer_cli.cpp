#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <malloc.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "panformer/checkpoint.hpp"
#include "panformer/gradcheck.hpp"
#include "panformer/metrics.hpp"
#include "panformer/rng.hpp"
#include "panformer/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace panformer;

namespace {

constexpr std::int64_t kParamBandLo = 1380000;
constexpr std::int64_t kParamBandHi = 1680000;

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  f << j.dump(2) << "\n";
  if (!f) throw Error("io", "cannot write " + path.string());
}

fs::path manifest_path(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.json" : p; }

// Training data directory: <dir>/train/manifest.json, else <dir>/manifest.json.
fs::path train_manifest(const fs::path& dir) {
  if (fs::is_directory(dir) && fs::exists(dir / "train" / "manifest.json")) return dir / "train" / "manifest.json";
  return manifest_path(dir);
}

// Evaluation split for ablate: <dir>/test/manifest.json when present.
fs::path test_manifest(const fs::path& dir) {
  if (fs::is_directory(dir) && fs::exists(dir / "test" / "manifest.json")) return dir / "test" / "manifest.json";
  return train_manifest(dir);
}

// ---------------------------------------------------------------- prepare-data

struct PrepareArgs {
  std::string pan, ms, out, split = "train", satellite = "synthetic";
  double sigma = 1.0;
  int patch = 64;
  std::int64_t count = 24000;
  int stride = 0;
  std::uint64_t seed = 42;
};

int cmd_prepare(const PrepareArgs& a) {
  if (a.split != "train" && a.split != "test") throw ConfigError("--split must be train or test, got " + a.split);
  DataConfig dc;
  dc.sigma = a.sigma;
  dc.patch = a.patch;
  dc.count = a.count;
  dc.stride = a.stride;
  dc.seed = a.seed;
  const RasterImage pan = read_pfr(a.pan);
  const RasterImage ms = read_pfr(a.ms);
  dc.bit_depth = ms.bit_depth;
  dc.bands = ms.bands;
  dc.validate();

  const WaldTriple w = degrade_wald(pan, ms, a.sigma);
  CropMode mode;
  if (a.split == "train")
    mode = RandomCrop{static_cast<std::size_t>(a.count), derive_seed(a.seed, "cropping")};
  else
    mode = OrderedCrop{static_cast<std::uint32_t>(a.stride > 0 ? a.stride : a.patch)};
  const auto patches = crop_patches(w.lr_pan, w.lr_ms, w.gt, static_cast<std::uint32_t>(a.patch), mode);
  const auto manifest = write_patches(patches, a.out, a.split, a.satellite, a.sigma);
  write_json(fs::path(a.out) / "resolved_config.json",
             {{"command", "prepare-data"},
              {"pan", a.pan},
              {"ms", a.ms},
              {"split", a.split},
              {"satellite", a.satellite},
              {"data", dc.to_json()}});
  std::cout << json{{"manifest", (fs::path(a.out) / "manifest.json").string()}, {"patches", manifest.entries.size()}}
                   .dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- synth

int cmd_synth(std::uint32_t size, int bands, int depth, std::uint64_t seed, const std::string& out) {
  const auto scene = synthesize_scene(size, static_cast<std::uint16_t>(bands), static_cast<std::uint16_t>(depth),
                                      derive_seed(seed, "synthetic"));
  fs::create_directories(out);
  write_pfr(scene.pan, fs::path(out) / "pan.pfr");
  write_pfr(scene.ms, fs::path(out) / "ms.pfr");
  write_json(fs::path(out) / "resolved_config.json",
             {{"command", "synth"}, {"size", size}, {"bands", bands}, {"bit_depth", depth}, {"seed", seed}});
  std::cout << json{{"pan", (fs::path(out) / "pan.pfr").string()}, {"ms", (fs::path(out) / "ms.pfr").string()}}.dump()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

template <typename T>
int train_impl(const RunConfig& rc, const fs::path& data, const fs::path& out, const std::string& resume) {
  const auto manifest = DatasetManifest::load(train_manifest(data));
  if (manifest.split != "train") throw ConfigError("training manifest has split \"" + manifest.split + "\"");
  if (manifest.bands != rc.model.bands)
    throw ConfigError("manifest has " + std::to_string(manifest.bands) + " bands, model.bands is " +
                      std::to_string(rc.model.bands));
  rc.echo(out);
  PanFormerModel<T> model(rc.model, rc.train.seed);
  Trainer<T> trainer(model, load_samples<T>(manifest), rc.train);
  if (!resume.empty()) {
    const auto ckpt = load_checkpoint<T>(resume);
    restore_into(ckpt, model, &trainer.adam());
    trainer.set_iteration(ckpt.step);
  }
  const auto res = train(trainer, out, [&](const LossRecord& r) {
    if (r.iter % rc.train.log_every == 0) std::cerr << r.to_json().dump() << "\n";
  });
  std::cout << json{{"checkpoint", res.checkpoint.string()},
                    {"iterations", trainer.iteration()},
                    {"final_loss", res.log.empty() ? json(nullptr) : json(res.log.back().loss)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out, const std::string& resume) {
  const auto rc = RunConfig::load(config);
  return rc.precision == Precision::f64 ? train_impl<double>(rc, data, out, resume)
                                        : train_impl<float>(rc, data, out, resume);
}

// ---------------------------------------------------------------- infer

template <typename T>
RasterImage predict(const PanFormerModel<T>& model, const RasterImage& pan, const RasterImage& ms) {
  if (pan.bands != 1) throw DimensionError("PAN must have 1 band, got " + std::to_string(pan.bands));
  if (pan.width != 4 * ms.width || pan.height != 4 * ms.height)
    throw DimensionError("PAN " + std::to_string(pan.width) + "x" + std::to_string(pan.height) + " is not 4x MS " +
                         std::to_string(ms.width) + "x" + std::to_string(ms.height));
  if (ms.bands != model.config().bands)
    throw DimensionError("MS has " + std::to_string(ms.bands) + " bands, model expects " +
                         std::to_string(model.config().bands));
  if (pan.bit_depth != ms.bit_depth) throw ParameterError("PAN and MS bit depths differ");
  Var<T> out = model.forward(Var<T>(normalize<T>(pan)), Var<T>(normalize<T>(ms)));
  return denormalize(out.value(), ms.bit_depth);
}

template <typename T>
int infer_impl(const std::string& ckpt_path, const std::string& pan, const std::string& ms, const std::string& out,
               const std::string& manifest, const std::string& out_dir) {
  const auto ckpt = load_checkpoint<T>(ckpt_path);
  const auto model = model_from_checkpoint(ckpt);
  if (!manifest.empty()) {
    const auto m = DatasetManifest::load(manifest_path(manifest));
    fs::create_directories(out_dir);
    write_json(fs::path(out_dir) / "resolved_config.json",
               {{"command", "infer"},
                {"ckpt", ckpt_path},
                {"manifest", manifest},
                {"step", ckpt.step},
                {"model", ckpt.model.to_json()},
                {"train", ckpt.train.to_json()}});
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      const auto p = m.load_entry(i);
      write_pfr(predict(*model, p.pan, p.lrms), fs::path(out_dir) / (m.entries[i].name() + ".pfr"));
    }
    std::cout << json{{"predictions", out_dir}, {"count", m.entries.size()}}.dump() << "\n";
    return 0;
  }
  const auto img = predict(*model, read_pfr(pan), read_pfr(ms));
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_pfr(img, out);
  std::cout << json{{"output", out}, {"width", img.width}, {"height", img.height}, {"bands", img.bands}}.dump()
            << "\n";
  return 0;
}

bool checkpoint_is_f64(const std::string& path) {
  try {
    load_checkpoint<float>(path);
    return false;
  } catch (const ParseError& e) {
    if (e.reason() == ParseError::Reason::malformed && std::string(e.what()).find("holds f64") != std::string::npos)
      return true;
    throw;
  }
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const std::string& manifest, const std::string& pred, const std::string& report) {
  const auto m = DatasetManifest::load(manifest_path(manifest));
  const auto r = evaluate(m, pred);
  write_json(report, r.to_json());
  std::cout << r.to_table();
  return 0;
}

// ---------------------------------------------------------------- ablate

std::string fmt(const std::optional<double>& v, int prec) {
  if (!v) return "undefined";
  if (std::isinf(*v)) return "inf";
  char b[64];
  std::snprintf(b, sizeof b, "%.*f", prec, *v);
  return b;
}

template <typename T>
int ablate_impl(const RunConfig& base, const fs::path& data, const fs::path& out) {
  const auto train_m = DatasetManifest::load(train_manifest(data));
  const auto test_path = test_manifest(data);
  const auto test_m = DatasetManifest::load(test_path);
  const auto samples = load_samples<T>(train_m);
  base.echo(out);

  json rows = json::array();
  std::string table = "| Fusion strategy | PSNR | SSIM | ERGAS | SCC |\n|---|---|---|---|---|\n";
  for (FusionVariant v : kAllFusionVariants) {
    RunConfig rc = base;
    rc.model.fusion_variant = v;
    const fs::path dir = out / to_string(v);
    rc.echo(dir);
    PanFormerModel<T> model(rc.model, rc.train.seed);
    Trainer<T> trainer(model, samples, rc.train);
    const auto res = train(trainer, dir);
    const fs::path pred = dir / "pred";
    fs::create_directories(pred);
    for (std::size_t i = 0; i < test_m.entries.size(); ++i) {
      const auto p = test_m.load_entry(i);
      write_pfr(predict(model, p.pan, p.lrms), pred / (test_m.entries[i].name() + ".pfr"));
    }
    const auto report = evaluate(test_m, pred);
    write_json(dir / "report.json", report.to_json());
    rows.push_back({{"variant", to_string(v)},
                    {"params", model.param_count()},
                    {"iterations", trainer.iteration()},
                    {"final_loss", res.log.empty() ? json(nullptr) : json(res.log.back().loss)},
                    {"metrics", report.to_json()["means"]}});
    table += "| " + to_string(v) + " | " + fmt(report.means.psnr, 4) + " | " + fmt(report.means.ssim, 4) + " | " +
             fmt(report.means.ergas, 4) + " | " + fmt(report.means.scc, 4) + " |\n";
    std::cerr << to_string(v) << " done: " << trainer.iteration() << " iterations\n";
  }
  write_json(out / "ablation.json", {{"evaluated_on", test_path.string()}, {"variants", rows}});
  std::ofstream(out / "ablation.md") << table;
  std::cout << table;
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& data, const std::string& out) {
  const auto rc = RunConfig::load(config);
  return rc.precision == Precision::f64 ? ablate_impl<double>(rc, data, out) : ablate_impl<float>(rc, data, out);
}

// ---------------------------------------------------------------- bench

int cmd_bench(const std::string& ckpt_path, const std::string& config, int size, int repeat) {
  if (size <= 0 || size % 4 != 0) throw ConfigError("--size must be a positive multiple of 4");
  if (repeat < 1) throw ConfigError("--repeat must be >= 1");
  std::unique_ptr<PanFormerModel<float>> model;
  std::string source;
  if (!ckpt_path.empty()) {
    model = model_from_checkpoint(load_checkpoint<float>(ckpt_path));
    source = ckpt_path;
  } else {
    const RunConfig rc = config.empty() ? RunConfig{} : RunConfig::load(config);
    model = std::make_unique<PanFormerModel<float>>(rc.model, rc.train.seed);
    source = config.empty() ? "default config, seeded init" : config;
  }
  const int bands = model->config().bands;
  std::mt19937_64 rng(derive_seed(42, "bench"));
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Tensor<float> pan({1, size, size, 1}), ms({1, size / 4, size / 4, bands});
  for (auto& e : pan.data()) e = u(rng);
  for (auto& e : ms.data()) e = u(rng);
  const Var<float> vpan(pan), vms(ms);

  auto once = [&] {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = model->forward(vpan, vms);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  for (int i = 0; i < 2; ++i) once();
  std::vector<double> times;
  for (int i = 0; i < repeat; ++i) times.push_back(once());
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  const double median = repeat % 2 ? sorted[repeat / 2] : 0.5 * (sorted[repeat / 2 - 1] + sorted[repeat / 2]);
  double mean = 0;
  for (double t : times) mean += t / repeat;
  const std::string protocol = "forward only, fp32, batch 1, no I/O, 2 warmups then median of " +
                               std::to_string(repeat) + " timed runs, single process";
  std::cout << json{{"pan_size", size},
                    {"ms_size", size / 4},
                    {"bands", bands},
                    {"model", source},
                    {"params", model->param_count()},
                    {"protocol", protocol},
                    {"times_s", times},
                    {"median_s", median},
                    {"mean_s", mean}}
                   .dump(2)
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- param-count

int cmd_param_count(const std::string& config, bool all) {
  const RunConfig rc = config.empty() ? RunConfig{} : RunConfig::load(config);
  PanFormerModel<float> model(rc.model, 0);
  const auto n = model.param_count();
  const bool in_band = n >= kParamBandLo && n <= kParamBandHi;
  json j = {{"params", n},
            {"fusion_variant", to_string(rc.model.fusion_variant)},
            {"band", {kParamBandLo, kParamBandHi}},
            {"result", in_band ? "PASS" : "FAIL"}};
  if (all) {
    json per = json::object();
    for (FusionVariant v : kAllFusionVariants) {
      PanFormerConfig c = rc.model;
      c.fusion_variant = v;
      per[to_string(v)] = PanFormerModel<float>(c, 0).param_count();
    }
    j["variants"] = per;
  }
  std::cout << j.dump(2) << "\n";
  std::cout << (in_band ? "PASS" : "FAIL") << " param-count " << n << " in [" << kParamBandLo << ", " << kParamBandHi
            << "]\n";
  return 0;
}

// ---------------------------------------------------------------- grad-check

int cmd_grad_check(std::uint64_t seed, std::size_t samples, const std::string& report) {
  GradCheckOptions opt;
  opt.samples = samples;
  const auto r = run_grad_check(seed, opt, [](const GradCheckCase& c) {
    std::printf("%-4s %-28s checked %4zu  failed %3zu  max rel err %.3e at %-26s floor %.1e  kinks %zu  %.2fs\n",
                c.passed() ? "ok" : "FAIL", c.name.c_str(), c.checked, c.failed, c.max_rel_error, c.worst.c_str(),
                c.floor, c.kinks, c.seconds);
    for (const auto& f : c.failures) std::printf("       %s\n", f.c_str());
    std::fflush(stdout);
  });
  if (!report.empty()) write_json(report, r.to_json());
  std::printf("%s: %zu cases in %.1fs\n", r.passed() ? "PASS" : "FAIL", r.cases.size(), r.seconds);
  return r.passed() ? 0 : 1;
}

int error_exit(const std::string& command, const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"command", command}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  // keep freed activation buffers in the heap instead of unmapping them
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"panformer: pan-sharpening with windowed attention"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* c_prep = app.add_subcommand("prepare-data", "Wald degradation and patch cropping");
  c_prep->add_option("--pan", prep.pan, "PAN raster (PFR)")->required();
  c_prep->add_option("--ms", prep.ms, "MS raster (PFR)")->required();
  c_prep->add_option("--out", prep.out, "output directory")->required();
  c_prep->add_option("--split", prep.split, "train or test")->required();
  c_prep->add_option("--sigma", prep.sigma, "blur sigma")->capture_default_str();
  c_prep->add_option("--patch", prep.patch, "PAN/GT patch side")->capture_default_str();
  c_prep->add_option("--count", prep.count, "random crops (train)")->capture_default_str();
  c_prep->add_option("--stride", prep.stride, "tiling stride in PAN pixels (test); 0 = patch")->capture_default_str();
  c_prep->add_option("--seed", prep.seed, "seed")->capture_default_str();
  c_prep->add_option("--satellite", prep.satellite, "manifest label")->capture_default_str();

  std::uint32_t syn_size = 256;
  int syn_bands = 4, syn_depth = 10;
  std::uint64_t syn_seed = 42;
  std::string syn_out;
  auto* c_synth = app.add_subcommand("synth", "write a seeded synthetic PAN/MS scene");
  c_synth->add_option("--size", syn_size, "PAN side")->capture_default_str();
  c_synth->add_option("--bands", syn_bands)->capture_default_str();
  c_synth->add_option("--bit-depth", syn_depth)->capture_default_str();
  c_synth->add_option("--seed", syn_seed)->capture_default_str();
  c_synth->add_option("--out", syn_out, "output directory")->required();

  std::string tr_config, tr_data, tr_out, tr_resume;
  auto* c_train = app.add_subcommand("train", "train from a manifest");
  c_train->add_option("--config", tr_config, "RunConfig JSON")->required();
  c_train->add_option("--data", tr_data, "data directory or manifest")->required();
  c_train->add_option("--out", tr_out, "output directory")->required();
  c_train->add_option("--resume", tr_resume, "checkpoint to continue from");

  std::string in_ckpt, in_pan, in_ms, in_out, in_manifest, in_out_dir;
  auto* c_infer = app.add_subcommand("infer", "pan-sharpen one image or a manifest");
  c_infer->add_option("--ckpt", in_ckpt)->required();
  auto* o_pan = c_infer->add_option("--pan", in_pan);
  auto* o_ms = c_infer->add_option("--ms", in_ms);
  auto* o_out = c_infer->add_option("--out", in_out);
  auto* o_man = c_infer->add_option("--manifest", in_manifest, "predict every entry");
  auto* o_outdir = c_infer->add_option("--out-dir", in_out_dir, "prediction directory for --manifest");
  o_pan->needs(o_ms)->needs(o_out)->excludes(o_man);
  o_man->needs(o_outdir);

  std::string ev_manifest, ev_pred, ev_report;
  auto* c_eval = app.add_subcommand("evaluate", "score predictions against a manifest");
  c_eval->add_option("--manifest", ev_manifest)->required();
  c_eval->add_option("--pred", ev_pred)->required();
  c_eval->add_option("--report", ev_report)->required();

  std::string ab_config, ab_data, ab_out;
  auto* c_ablate = app.add_subcommand("ablate", "train and score all four fusion variants");
  c_ablate->add_option("--config", ab_config)->required();
  c_ablate->add_option("--data", ab_data)->required();
  c_ablate->add_option("--out", ab_out)->required();

  std::string b_ckpt, b_config;
  int b_size = 400, b_repeat = 5;
  auto* c_bench = app.add_subcommand("bench", "time the forward pass");
  c_bench->add_option("--ckpt", b_ckpt);
  c_bench->add_option("--config", b_config, "used when no checkpoint is given");
  c_bench->add_option("--size", b_size, "PAN side")->capture_default_str();
  c_bench->add_option("--repeat", b_repeat)->capture_default_str();

  std::string pc_config;
  bool pc_all = false;
  auto* c_pc = app.add_subcommand("param-count", "count trainable parameters");
  c_pc->add_option("--config", pc_config);
  c_pc->add_flag("--all-variants", pc_all);

  std::uint64_t gc_seed = 42;
  std::size_t gc_samples = 200;
  std::string gc_report;
  auto* c_gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
  c_gc->add_option("--seed", gc_seed)->capture_default_str();
  c_gc->add_option("--samples", gc_samples, "elements per block")->capture_default_str();
  c_gc->add_option("--report", gc_report, "JSON report path");

  std::string command = argc > 1 ? argv[1] : "";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return error_exit(command, "usage", e.what(), 2);
  }

  try {
    if (c_prep->parsed()) return cmd_prepare(prep);
    if (c_synth->parsed()) return cmd_synth(syn_size, syn_bands, syn_depth, syn_seed, syn_out);
    if (c_train->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume);
    if (c_infer->parsed()) {
      if (in_manifest.empty() && in_pan.empty()) throw ConfigError("infer needs --pan/--ms/--out or --manifest");
      return checkpoint_is_f64(in_ckpt) ? infer_impl<double>(in_ckpt, in_pan, in_ms, in_out, in_manifest, in_out_dir)
                                        : infer_impl<float>(in_ckpt, in_pan, in_ms, in_out, in_manifest, in_out_dir);
    }
    if (c_eval->parsed()) return cmd_evaluate(ev_manifest, ev_pred, ev_report);
    if (c_ablate->parsed()) return cmd_ablate(ab_config, ab_data, ab_out);
    if (c_bench->parsed()) return cmd_bench(b_ckpt, b_config, b_size, b_repeat);
    if (c_pc->parsed()) return cmd_param_count(pc_config, pc_all);
    if (c_gc->parsed()) return cmd_grad_check(gc_seed, gc_samples, gc_report);
  } catch (const ParseError& e) {
    return error_exit(command, e.kind(), e.what(), 2);
  } catch (const Error& e) {
    const bool validation = e.kind() == "config" || e.kind() == "parameter" || e.kind() == "dimension" ||
                            e.kind() == "lookup";
    return error_exit(command, e.kind(), e.what(), validation ? 2 : 1);
  } catch (const std::exception& e) {
    return error_exit(command, "runtime", e.what(), 1);
  }
  return 2;
}
