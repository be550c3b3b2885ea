#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "cama/nn.hpp"
#include "cama/rng.hpp"
#include "cama/tensor.hpp"

namespace cama::testing {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.raw()) v = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

template <typename Scalar>
double max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(Scalar)) == 0;
}

/// Rows [begin, end) of the second-to-last axis of a [..., T, V] tensor compare bitwise.
template <typename Scalar>
bool rows_bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Index begin, Index end) {
  const Index steps = a.dim(-2);
  const Index width = a.dim(-1);
  const Index outer = a.numel() / (steps * width);
  for (Index o = 0; o < outer; ++o) {
    const auto off = static_cast<std::size_t>((o * steps + begin) * width);
    const auto n = static_cast<std::size_t>((end - begin) * width);
    if (std::memcmp(a.data().data() + off, b.data().data() + off, n * sizeof(Scalar)) != 0) return false;
  }
  return true;
}

}  // namespace cama::testing
