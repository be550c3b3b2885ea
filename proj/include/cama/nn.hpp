#pragma once

// Parameter containers shared by the encoder and decoders. Every container exposes
// visit(prefix, fn) which calls fn(name, tensor&) for each trainable tensor in a
// fixed order; checkpoints and optimizers are built on that traversal.

#include <cmath>
#include <string>

#include "cama/ops.hpp"
#include "cama/rng.hpp"
#include "cama/tensor.hpp"

namespace cama {

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.raw()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <typename Scalar>
Tensor<Scalar> parameter(Shape shape, Scalar fill) {
  Tensor<Scalar> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

/// y = x W + b with W stored [in, out].
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;  // empty (numel 0) when the layer has no bias
  bool has_bias = true;

  static Linear init(Index in, Index out, Rng& rng, bool with_bias = true) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    Linear l;
    l.weight = uniform_tensor<Scalar>({in, out}, bound, rng);
    l.has_bias = with_bias;
    l.bias = with_bias ? uniform_tensor<Scalar>({out}, bound, rng) : Tensor<Scalar>(Shape{0});
    return l;
  }

  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    auto y = matmul(x, weight);
    return has_bias ? add(y, bias) : y;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (has_bias) f(prefix + ".bias", bias);
  }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;

  static LayerNorm init(Index d) {
    return {parameter<Scalar>({d}, Scalar(1)), parameter<Scalar>({d}, Scalar(0))};
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gamma, beta); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

/// Depthwise conv kernel [k, D], initialized uniform in +-sqrt(1/k).
template <typename Scalar>
Tensor<Scalar> conv_kernel(Index k, Index d, Rng& rng) {
  return uniform_tensor<Scalar>({k, d}, std::sqrt(1.0 / static_cast<double>(k)), rng);
}

}  // namespace cama
