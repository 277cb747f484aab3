#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "panformer/ops.hpp"

namespace panformer {

/// Seeded weight initializer. Draws are consumed in parameter construction
/// order, so a fixed seed and config reproduce the same weights.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, std) resampled until inside +-2 std.
  template <typename T>
  Tensor<T> trunc_normal(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& e : t.data()) {
      double z;
      do z = dist(rng_);
      while (std::abs(z) > 2.0);
      e = static_cast<T>(z * stddev);
    }
    return t;
  }

  template <typename T>
  Tensor<T> uniform(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& e : t.data()) e = static_cast<T>(dist(rng_));
    return t;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out]

  Linear() = default;
  Linear(ParameterSet<T>& params, const std::string& name, std::int64_t in, std::int64_t out, Initializer& init)
      : weight(params.add(name + ".weight", init.trunc_normal<T>({in, out}, 0.02))),
        bias(params.add(name + ".bias", Tensor<T>::zeros({out}))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& params, const std::string& name, std::int64_t dim)
      : gamma(params.add(name + ".weight", Tensor<T>::ones({dim}))),
        beta(params.add(name + ".bias", Tensor<T>::zeros({dim}))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta, eps); }
};

/// 3x3 "same" convolution; weights uniform in +-1/sqrt(fan_in).
template <typename T>
struct Conv3x3 {
  Var<T> weight;  // [3,3,in,out]
  Var<T> bias;    // [out]

  Conv3x3() = default;
  Conv3x3(ParameterSet<T>& params, const std::string& name, std::int64_t in, std::int64_t out, Initializer& init)
      : weight(params.add(name + ".weight", init.uniform<T>({3, 3, in, out}, 1.0 / std::sqrt(9.0 * in)))),
        bias(params.add(name + ".bias", Tensor<T>::zeros({out}))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d_3x3(x, weight, bias); }
};

}  // namespace panformer
