#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "panformer/autograd.hpp"

namespace panformer {

struct GradCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  /// Relative error is |a - n| / max(|a|, |n|, floor) with
  /// floor = max(min_floor, resolution / tolerance), where resolution =
  /// resolution_ulps * 2^-52 * sum|f_i R_i| / (2h) is the smallest derivative
  /// central differences can resolve for this loss.
  double min_floor = 1e-6;
  double resolution_ulps = 2;
  std::size_t samples = 200;
};

struct GradCheckCase {
  std::string name;
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t tensors = 0;
  double max_rel_error = 0;
  double floor = 0;
  std::size_t kinks = 0;
  std::string worst;  // "<tensor>[<flat index>]"
  std::vector<std::string> failures;
  double seconds = 0;

  bool passed() const { return failed == 0 && checked > 0; }
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double seconds = 0;

  bool passed() const;
  nlohmann::json to_json() const;
};

struct Probe {
  std::string name;
  Var<double> var;
};

/// Compares reverse-mode gradients of L = sum(f() * R) (R fixed random) with
/// central differences for every element when the probes hold at most
/// opt.samples values, otherwise for opt.samples random elements of which at
/// least one lies in each probe. A mismatch whose one-sided slopes differ by
/// at least the mismatch is a ReLU / |x| kink crossing; such elements are
/// counted and replaced by another sample.
GradCheckCase check_gradients(const std::string& name, const std::vector<Probe>& probes,
                              const std::function<Var<double>()>& f, std::mt19937_64& rng,
                              const GradCheckOptions& opt = {});

/// Full suite: every tensor op plus every composite block and a small full
/// forward pass. Cases run in a fixed order; `on_case` sees each result.
GradCheckReport run_grad_check(std::uint64_t seed, const GradCheckOptions& opt = {},
                               const std::function<void(const GradCheckCase&)>& on_case = {});

}  // namespace panformer
