#include "panformer/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>
#include <cmath>
#include <set>

#include "panformer/attention.hpp"
#include "panformer/model.hpp"
#include "panformer/ops.hpp"
#include "panformer/rng.hpp"

namespace panformer {

namespace {

using D = double;
using Clock = std::chrono::steady_clock;

Tensor<D> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& e : t.data()) e = u(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
Tensor<D> off_zero_tensor(const Shape& s, std::mt19937_64& rng) {
  Tensor<D> t = random_tensor(s, rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& e : t.data())
    if (sign(rng)) e = -e;
  return t;
}

Var<D> input(const Shape& s, std::mt19937_64& rng) { return Var<D>(random_tensor(s, rng), true); }

void randomize(ParameterSet<D>& params, std::mt19937_64& rng, double scale) {
  for (auto& p : params) p.var.mutable_value() = random_tensor(p.value().shape(), rng, -scale, scale);
}

std::vector<Probe> probes_of(ParameterSet<D>& params, const std::string& prefix = "") {
  std::vector<Probe> out;
  for (auto& p : params)
    if (p.name.rfind(prefix, 0) == 0) out.push_back({p.name, p.var});
  return out;
}

double weighted_sum(const Tensor<D>& out, const Tensor<D>& w) {
  double s = 0;
  for (std::int64_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
  return s;
}

}  // namespace

bool GradCheckReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed(); });
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cases)
    arr.push_back({{"name", c.name},
                   {"checked", c.checked},
                   {"failed", c.failed},
                   {"tensors", c.tensors},
                   {"max_rel_error", c.max_rel_error},
                   {"worst", c.worst},
                   {"failures", c.failures},
                   {"floor", c.floor},
                   {"kinks_skipped", c.kinks},
                   {"seconds", c.seconds},
                   {"passed", c.passed()}});
  return {{"cases", arr}, {"passed", passed()}, {"seconds", seconds}};
}

GradCheckCase check_gradients(const std::string& name, const std::vector<Probe>& probes,
                              const std::function<Var<D>()>& f, std::mt19937_64& rng, const GradCheckOptions& opt) {
  const auto t0 = Clock::now();
  GradCheckCase res;
  res.name = name;
  res.tensors = probes.size();

  Tensor<D> weights;
  std::vector<Tensor<D>> analytic;
  {
    Tape<D> tape;
    TapeScope<D> scope(tape);
    Var<D> out = f();
    weights = random_tensor(out.shape(), rng);
    Var<D> loss = ops::sum(ops::mul(out, Var<D>(weights)));
    double magnitude = 0;
    for (std::int64_t i = 0; i < out.numel(); ++i) magnitude += std::abs(out.value()[i] * weights[i]);
    const double resolution = opt.resolution_ulps * std::numeric_limits<double>::epsilon() * magnitude / (2 * opt.h);
    res.floor = std::max(opt.min_floor, resolution / opt.tolerance);
    for (const auto& p : probes) Var<D>(p.var).zero_grad();
    tape.backward(loss);
    for (const auto& p : probes) analytic.push_back(p.var.grad());
  }

  std::int64_t total = 0;
  for (const auto& p : probes) total += p.var.numel();
  const bool exhaustive = total <= static_cast<std::int64_t>(opt.samples);
  const double base = weighted_sum(f().value(), weights);

  // Returns false when the element sits on a kink.
  auto check = [&](std::size_t i, std::int64_t k) {
    Var<D> v = probes[i].var;
    D& x = v.mutable_value()[k];
    const D saved = x;
    x = saved + opt.h;
    const double up = weighted_sum(f().value(), weights);
    x = saved - opt.h;
    const double down = weighted_sum(f().value(), weights);
    x = saved;
    const double numeric = (up - down) / (2 * opt.h);
    const double a = analytic[i][k];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), res.floor});
    // A miss explained by disagreeing one-sided slopes is a kink crossing, not a gradient error.
    const double fwd = (up - base) / opt.h, bwd = (base - down) / opt.h;
    if (!(rel < opt.tolerance) && std::abs(fwd - bwd) >= std::abs(a - numeric)) {
      ++res.kinks;
      return false;
    }
    ++res.checked;
    if (!(rel < opt.tolerance)) {
      ++res.failed;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s[%lld] analytic %.6e numeric %.6e", probes[i].name.c_str(),
                    static_cast<long long>(k), a, numeric);
      res.failures.push_back(buf);
    }
    if (!(rel <= res.max_rel_error)) {
      res.max_rel_error = rel;
      res.worst = probes[i].name + "[" + std::to_string(k) + "]";
    }
    return true;
  };

  if (exhaustive) {
    for (std::size_t i = 0; i < probes.size(); ++i)
      for (std::int64_t k = 0; k < probes[i].var.numel(); ++k) check(i, k);
  } else {
    // one element per probe first, then uniform over all elements
    std::set<std::pair<std::size_t, std::int64_t>> seen;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      std::uniform_int_distribution<std::int64_t> d(0, probes[i].var.numel() - 1);
      for (int attempt = 0; attempt < 8; ++attempt) {
        const std::int64_t k = d(rng);
        if (seen.insert({i, k}).second && check(i, k)) break;
      }
    }
    std::uniform_int_distribution<std::int64_t> any(0, total - 1);
    while (res.checked < opt.samples && static_cast<std::int64_t>(seen.size()) < total) {
      std::int64_t flat = any(rng);
      std::size_t i = 0;
      while (flat >= probes[i].var.numel()) flat -= probes[i++].var.numel();
      if (seen.insert({i, flat}).second) check(i, flat);
    }
  }
  res.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return res;
}

GradCheckReport run_grad_check(std::uint64_t seed, const GradCheckOptions& opt,
                               const std::function<void(const GradCheckCase&)>& on_case) {
  const auto t0 = Clock::now();
  GradCheckReport report;
  std::mt19937_64 rng(derive_seed(seed, "gradcheck"));
  auto run = [&](const std::string& name, const std::vector<Probe>& probes, const std::function<Var<D>()>& f) {
    report.cases.push_back(check_gradients(name, probes, f, rng, opt));
    if (on_case) on_case(report.cases.back());
  };

  // elementwise and reductions
  {
    auto a = input({2, 3, 4}, rng), b = input({2, 3, 4}, rng);
    run("add", {{"a", a}, {"b", b}}, [=] { return ops::add(a, b); });
    run("sub", {{"a", a}, {"b", b}}, [=] { return ops::sub(a, b); });
    run("mul", {{"a", a}, {"b", b}}, [=] { return ops::mul(a, b); });
    run("scale", {{"a", a}}, [=] { return ops::scale(a, D(-1.7)); });
    run("sum", {{"a", a}}, [=] { return ops::sum(a); });
    run("mean", {{"a", a}}, [=] { return ops::mean(a); });
    run("reshape", {{"a", a}}, [=] { return ops::reshape(a, Shape{6, 4}); });
    run("gelu", {{"a", a}}, [=] { return ops::gelu(a); });
    Var<D> r(off_zero_tensor({2, 3, 4}, rng), true);
    run("relu", {{"a", r}}, [=] { return ops::relu(r); });
    Var<D> target(random_tensor({2, 3, 4}, rng));
    Var<D> pred(Tensor<D>(target.value()), true);
    {
      const auto off = off_zero_tensor({2, 3, 4}, rng);
      for (std::int64_t i = 0; i < off.numel(); ++i) pred.mutable_value()[i] += off[i];
    }
    run("l1_loss", {{"pred", pred}}, [=] { return ops::l1_loss(pred, target); });
  }
  {
    auto a = input({3, 5}, rng), b = input({5, 4}, rng);
    run("matmul", {{"a", a}, {"b", b}}, [=] { return ops::matmul(a, b); });
    auto x = input({2, 3, 5}, rng);
    run("softmax", {{"x", x}}, [=] { return ops::softmax(x, -1); });
    run("softmax_axis1", {{"x", x}}, [=] { return ops::softmax(x, 1); });
    auto g = input({5}, rng), bb = input({5}, rng);
    run("layer_norm", {{"x", x}, {"gamma", g}, {"beta", bb}}, [=] { return ops::layer_norm(x, g, bb); });
    auto w = input({5, 6}, rng), bias = input({6}, rng);
    run("linear", {{"x", x}, {"w", w}, {"b", bias}}, [=] { return ops::linear(x, w, bias); });
  }
  {
    auto x = input({2, 5, 4, 3}, rng), w = input({3, 3, 3, 4}, rng), b = input({4}, rng);
    run("conv2d_3x3", {{"x", x}, {"w", w}, {"b", b}}, [=] { return ops::conv2d_3x3(x, w, b); });
    auto ps = input({1, 3, 2, 8}, rng);
    run("pixel_shuffle", {{"x", ps}}, [=] { return ops::pixel_shuffle(ps, 2); });
    auto rows = input({4, 3}, rng);
    run("gather_rows", {{"x", rows}},
        [=] { return ops::gather_rows(rows, Shape{6, 3}, 3, std::vector<std::int64_t>{2, -1, 0, 2, 3, 1}); });
  }
  {
    auto x = input({2, 8, 4, 3}, rng);
    run("window_partition", {{"x", x}}, [=] { return ops::window_partition(x, 4); });
    auto win = input({4, 16, 3}, rng);
    run("window_reverse", {{"win", win}}, [=] { return ops::window_reverse(win, 4, Shape{2, 8, 4, 3}); });
    run("cyclic_shift", {{"x", x}}, [=] { return ops::cyclic_shift(x, -2, 3); });
    auto y = input({1, 3, 5, 2}, rng);
    run("pad_spatial", {{"x", y}}, [=] { return ops::pad_spatial(y, 4, 8); });
    run("crop_spatial", {{"x", x}}, [=] { return ops::crop_spatial(x, 5, 3); });
    run("space_to_depth", {{"x", x}}, [=] { return ops::space_to_depth(x, 2); });
    auto z = input({2, 8, 4, 5}, rng);
    run("concat_channels", {{"a", x}, {"b", z}}, [=] { return ops::concat_channels(x, z); });
  }
  {
    auto q = input({4, 6, 8}, rng), k = input({4, 6, 8}, rng), v = input({4, 6, 8}, rng);
    run("attention", {{"q", q}, {"k", k}, {"v", v}}, [=] { return ops::attention(q, k, v, 2, D(0.5)); });
    Tensor<D> mask({2, 6, 6}, D(0));
    std::bernoulli_distribution masked(0.3);
    for (std::int64_t m = 0; m < 2; ++m)
      for (std::int64_t i = 0; i < 6; ++i)
        for (std::int64_t j = 0; j < 6; ++j)
          if (i != j && masked(rng)) mask.at({m, i, j}) = D(kMaskSentinel);
    run("attention_masked", {{"q", q}, {"k", k}, {"v", v}},
        [=] { return ops::attention(q, k, v, 2, D(0.5), mask); });
  }

  // composite blocks on two-window inputs
  AttnConfig acfg;
  acfg.dim = 8;
  acfg.heads = 2;
  acfg.window = 4;
  acfg.mlp_ratio = 2;
  for (int shift : {0, 2}) {
    acfg.shift = shift;
    const std::string tag = "_shift" + std::to_string(shift);
    {
      auto params = std::make_shared<ParameterSet<D>>();
      Initializer init(derive_seed(seed, "gradcheck.sab", shift));
      auto block = std::make_shared<SelfAttentionBlock<D>>(*params, "sab", acfg, init);
      randomize(*params, rng, 0.5);
      auto x = input({1, 4, 8, 8}, rng);
      auto probes = probes_of(*params);
      probes.push_back({"x", x});
      run("sab" + tag, probes, [=] { return block->forward(x); });
    }
    {
      auto params = std::make_shared<ParameterSet<D>>();
      Initializer init(derive_seed(seed, "gradcheck.cab", shift));
      auto block = std::make_shared<CrossAttentionBlock<D>>(*params, "cab", acfg, init);
      randomize(*params, rng, 0.5);
      auto kv = input({1, 4, 8, 8}, rng), q = input({1, 4, 8, 8}, rng);
      auto probes = probes_of(*params);
      probes.push_back({"kv_src", kv});
      probes.push_back({"q_src", q});
      run("cab" + tag, probes, [=] { return block->forward(kv, q); });
    }
  }
  for (int p : {2, 1}) {
    auto params = std::make_shared<ParameterSet<D>>();
    Initializer init(derive_seed(seed, "gradcheck.embed", p));
    auto embed = std::make_shared<PatchEmbed<D>>(*params, "embed", p, 3, 8, init);
    randomize(*params, rng, 0.5);
    auto x = input({2, 4, 8, 3}, rng);
    auto probes = probes_of(*params);
    probes.push_back({"img", x});
    run("patch_embed_p" + std::to_string(p), probes, [=] { return embed->forward(x); });
  }
  {
    auto params = std::make_shared<ParameterSet<D>>();
    Initializer init(derive_seed(seed, "gradcheck.merge"));
    auto merge = std::make_shared<PatchMerge<D>>(*params, "merge", 8, init);
    randomize(*params, rng, 0.5);
    auto x = input({1, 4, 8, 8}, rng);
    auto probes = probes_of(*params);
    probes.push_back({"x", x});
    run("patch_merge", probes, [=] { return merge->forward(x); });
  }

  // restoration head and full forward on a reduced model
  PanFormerConfig mcfg;
  mcfg.channels = 8;
  mcfg.heads = 2;
  mcfg.sab_per_path = 2;
  mcfg.cab_count = 2;
  mcfg.mlp_ratio = 2;
  mcfg.bands = 4;
  {
    auto model = std::make_shared<PanFormerModel<D>>(mcfg, derive_seed(seed, "gradcheck.head"));
    randomize(model->parameters(), rng, 0.3);
    auto f = input({1, 2, 2, 16}, rng);
    auto probes = probes_of(model->parameters(), "head.");
    probes.push_back({"features", f});
    run("restoration_head", probes, [=] { return model->restore(f); });
  }
  for (FusionVariant v : kAllFusionVariants) {
    mcfg.fusion_variant = v;
    auto model = std::make_shared<PanFormerModel<D>>(mcfg, derive_seed(seed, "gradcheck.model"));
    randomize(model->parameters(), rng, 0.3);
    auto pan = input({1, 16, 16, 1}, rng), ms = input({1, 4, 4, 4}, rng);
    auto probes = probes_of(model->parameters());
    probes.push_back({"pan", pan});
    probes.push_back({"ms", ms});
    run("full_forward_" + to_string(v), probes, [=] { return model->forward(pan, ms); });
  }

  report.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return report;
}

}  // namespace panformer
