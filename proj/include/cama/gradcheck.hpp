#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cama/tensor.hpp"

namespace cama {

struct GradCheckResult {
  double max_rel_err = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;  // values at worst_index
  double numeric = 0.0;
  bool finite = true;
  std::string failure;  // set when f produced a non-finite value
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace detail {

/// Compares tape gradients of `loss_fn` w.r.t. `x` against central differences on the
/// coordinates in `coords`. The analytic gradient must already be in x.grad().
inline GradCheckResult compare_coordinates(const std::function<Tensor<double>()>& loss_fn,
                                           Tensor<double>& x, const std::vector<Index>& coords,
                                           double h) {
  GradCheckResult res;
  auto analytic = x.grad_tensor();
  NoTapeScope<double> off;
  auto values = x.mutable_data();
  for (Index i : coords) {
    const double keep = values[static_cast<std::size_t>(i)];
    values[static_cast<std::size_t>(i)] = keep + h;
    const double up = loss_fn().item();
    values[static_cast<std::size_t>(i)] = keep - h;
    const double down = loss_fn().item();
    values[static_cast<std::size_t>(i)] = keep;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      res.finite = false;
      res.failure = "non-finite function value at coordinate " + std::to_string(i);
      res.worst_index = i;
      res.max_rel_err = std::numeric_limits<double>::infinity();
      return res;
    }
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[static_cast<std::size_t>(i)];
    const double err = relative_error(a, numeric);
    if (err > res.max_rel_err || res.worst_index < 0) {
      res.max_rel_err = err;
      res.worst_index = i;
      res.analytic = a;
      res.numeric = numeric;
    }
  }
  return res;
}

inline std::vector<Index> sample_coordinates(Index n, Index max_coords) {
  std::vector<Index> coords;
  if (max_coords <= 0 || n <= max_coords) {
    coords.resize(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    return coords;
  }
  // evenly strided, always including both ends
  for (Index j = 0; j < max_coords; ++j) coords.push_back(j * (n - 1) / (max_coords - 1));
  return coords;
}

}  // namespace detail

/// Max relative error between the tape gradient of scalar f at x and central finite
/// differences (f(x + h e_i) - f(x - h e_i)) / 2h, with denominator max(|a|, |b|, 1e-8).
template <typename F>
GradCheckResult finite_difference_check(F&& f, Tensor<double> x, double h = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = f(x);
    if (!std::isfinite(y.item())) {
      GradCheckResult res;
      res.finite = false;
      res.failure = "non-finite function value at the base point";
      res.max_rel_err = std::numeric_limits<double>::infinity();
      return res;
    }
    tape.backward(y);
  }
  std::function<Tensor<double>()> loss_fn = [&]() { return f(x); };
  return detail::compare_coordinates(loss_fn, x, detail::sample_coordinates(x.numel(), 0), h);
}

struct NamedGradCheck {
  std::string name;
  GradCheckResult result;
};

/// Gradient check of one scalar loss against several named parameter tensors.
/// At most `max_coords` coordinates per tensor are probed (0 = all).
inline std::vector<NamedGradCheck> check_parameters(
    const std::function<Tensor<double>()>& loss_fn,
    std::vector<std::pair<std::string, Tensor<double>>> params, double h = 1e-5,
    Index max_coords = 0) {
  for (auto& [name, t] : params) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss_fn());
  }
  std::vector<NamedGradCheck> out;
  for (auto& [name, t] : params) {
    out.push_back({name, detail::compare_coordinates(
                             loss_fn, t, detail::sample_coordinates(t.numel(), max_coords), h)});
  }
  return out;
}

}  // namespace cama
