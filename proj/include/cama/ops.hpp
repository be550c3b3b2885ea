#pragma once

// Differentiable primitives over Tensor<Scalar>. Every function computes its result
// eagerly and, when an input requires a gradient and a tape is active, records the
// vector-Jacobian product for the reverse pass.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cama/errors.hpp"
#include "cama/tensor.hpp"

namespace cama {

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMat<Scalar>>;
template <typename Scalar>
using ArrMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstArrMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

inline int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

/// Trailing-dimension broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(what) + ": shapes " + to_string(a) + " and " + to_string(b) +
                       " are not broadcast-compatible");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// Strides of `in` viewed in the frame of `out` (0 along broadcast axes).
inline std::vector<Index> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

/// Calls fn(out_index, a_index, b_index) for every element of the broadcast result.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const Index n = numel_of(out);
  if (n == 0) return;
  if (out.empty()) {
    fn(0, 0, 0);
    return;
  }
  const std::size_t r = out.size();
  const Index inner = out[r - 1];
  const Index ia_step = sa[r - 1];
  const Index ib_step = sb[r - 1];
  std::vector<Index> counter(r, 0);
  Index oa = 0;
  Index ob = 0;
  for (Index base = 0; base < n; base += inner) {
    for (Index j = 0; j < inner; ++j) fn(base + j, oa + j * ia_step, ob + j * ib_step);
    // advance odometer over the outer axes
    for (int k = static_cast<int>(r) - 2; k >= 0; --k) {
      const auto uk = static_cast<std::size_t>(k);
      ++counter[uk];
      oa += sa[uk];
      ob += sb[uk];
      if (counter[uk] < out[uk]) break;
      oa -= sa[uk] * out[uk];
      ob -= sb[uk] * out[uk];
      counter[uk] = 0;
    }
  }
}

inline Index outer_count(const Shape& s, int trailing) {
  Index n = 1;
  for (std::size_t i = 0; i + static_cast<std::size_t>(trailing) < s.size(); ++i) n *= s[i];
  return n;
}

template <typename Scalar>
Scalar sigmoid_scalar(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar softplus_scalar(Scalar x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, Scalar(0));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class ElementwiseOp { add, sub, mul, div, exp, log, neg, softplus, sigmoid, silu };

namespace detail {

template <typename Scalar, typename Fwd, typename Bwd>
Tensor<Scalar> unary(const Tensor<Scalar>& x, Fwd fwd, Bwd bwd) {
  Tensor<Scalar> out(x.shape());
  auto xs = x.data();
  auto& ys = out.raw();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = fwd(xs[i]);
  if (auto* tape = recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out, bwd]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gx = x.mutable_grad();
      auto xs = x.data();
      auto ys = out.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += bwd(xs[i], ys[i], g[i]);
    });
  }
  return out;
}

template <typename Scalar, typename Fwd, typename Bwd>
Tensor<Scalar> binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* name, Fwd fwd,
                      Bwd bwd) {
  const bool same = a.shape() == b.shape();
  const Shape shape = same ? a.shape() : broadcast_shape(a.shape(), b.shape(), name);
  Tensor<Scalar> out(shape);
  auto as = a.data();
  auto bs = b.data();
  auto& ys = out.raw();
  if (same) {
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = fwd(as[i], bs[i]);
  } else {
    for_each_broadcast(shape, a.shape(), b.shape(),
                       [&](Index o, Index ia, Index ib) { ys[o] = fwd(as[ia], bs[ib]); });
  }
  if (auto* tape = recording_tape<Scalar>(a, b)) {
    out.mark_recorded();
    tape->record([a, b, out, bwd, same]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto as = a.data();
      auto bs = b.data();
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      std::span<Scalar> ga;
      std::span<Scalar> gb;
      if (need_a) ga = a.mutable_grad();
      if (need_b) gb = b.mutable_grad();
      auto step = [&](Index o, Index ia, Index ib) {
        Scalar da;
        Scalar db;
        bwd(as[ia], bs[ib], g[o], da, db);
        if (need_a) ga[ia] += da;
        if (need_b) gb[ib] += db;
      };
      if (same) {
        for (Index i = 0; i < static_cast<Index>(g.size()); ++i) step(i, i, i);
      } else {
        for_each_broadcast(out.shape(), a.shape(), b.shape(), step);
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(
      a, b, "add", [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar, Scalar g, Scalar& da, Scalar& db) {
        da = g;
        db = g;
      });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(
      a, b, "sub", [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar, Scalar g, Scalar& da, Scalar& db) {
        da = g;
        db = -g;
      });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(
      a, b, "mul", [](Scalar x, Scalar y) { return x * y; },
      [](Scalar x, Scalar y, Scalar g, Scalar& da, Scalar& db) {
        da = g * y;
        db = g * x;
      });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary(
      a, b, "div", [](Scalar x, Scalar y) { return x / y; },
      [](Scalar x, Scalar y, Scalar g, Scalar& da, Scalar& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y, Scalar g) { return g * y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar, Scalar g) { return g / v; });
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return -v; }, [](Scalar, Scalar, Scalar g) { return -g; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return detail::sigmoid_scalar(v); },
      [](Scalar, Scalar y, Scalar g) { return g * y * (Scalar(1) - y); });
}

/// log(1 + e^x), evaluated as log1p(e^-|x|) + max(x, 0).
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return detail::softplus_scalar(v); },
      [](Scalar v, Scalar, Scalar g) { return g * detail::sigmoid_scalar(v); });
}

/// x * sigmoid(x)
template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v * detail::sigmoid_scalar(v); },
      [](Scalar v, Scalar, Scalar g) {
        const Scalar s = detail::sigmoid_scalar(v);
        return g * (s + v * s * (Scalar(1) - s));
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar c) {
  return detail::unary(
      x, [c](Scalar v) { return c * v; }, [c](Scalar, Scalar, Scalar g) { return c * g; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar c) {
  return detail::unary(
      x, [c](Scalar v) { return v + c; }, [](Scalar, Scalar, Scalar g) { return g; });
}

/// Dispatching form over the named primitives; `b` is required for binary ops.
template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a,
                           const std::optional<Tensor<Scalar>>& b = std::nullopt) {
  auto rhs = [&]() -> const Tensor<Scalar>& {
    if (!b) throw ContractError("binary elementwise op without second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::add: return add(a, rhs());
    case ElementwiseOp::sub: return sub(a, rhs());
    case ElementwiseOp::mul: return mul(a, rhs());
    case ElementwiseOp::div: return div(a, rhs());
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::log: return log(a);
    case ElementwiseOp::neg: return neg(a);
    case ElementwiseOp::softplus: return softplus(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::silu: return silu(a);
  }
  throw ContractError("unknown elementwise op");
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return div(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) {
  return neg(a);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Scalar acc = 0;
  for (Scalar v : x.data()) acc += v;
  auto out = Tensor<Scalar>::scalar(acc);
  if (auto* tape = detail::recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      for (auto& v : x.mutable_grad()) v += g[0];
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Batched matrix product a[..., M, K] · b[..., K, P] with broadcast batch axes.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Index m = a.dim(-2);
  const Index k = a.dim(-1);
  const Index p = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }

  if (b.rank() == 2) {
    // Fold every leading axis of `a` into the row count: one GEMM.
    const Index rows = numel_of(a.shape()) / std::max<Index>(k, 1);
    Shape shape = a.shape();
    shape.back() = p;
    Tensor<Scalar> out(shape);
    if (rows > 0 && p > 0) {
      MatMap<Scalar>(out.raw().data(), rows, p).noalias() =
          ConstMatMap<Scalar>(a.data().data(), rows, k) * ConstMatMap<Scalar>(b.data().data(), k, p);
    }
    if (auto* tape = detail::recording_tape<Scalar>(a, b)) {
      out.mark_recorded();
      tape->record([a, b, out, rows, k, p]() mutable {
        auto g = out.grad();
        if (g.empty()) return;
        ConstMatMap<Scalar> dy(g.data(), rows, p);
        if (a.requires_grad()) {
          MatMap<Scalar>(a.mutable_grad().data(), rows, k).noalias() +=
              dy * ConstMatMap<Scalar>(b.data().data(), k, p).transpose();
        }
        if (b.requires_grad()) {
          MatMap<Scalar>(b.mutable_grad().data(), k, p).noalias() +=
              ConstMatMap<Scalar>(a.data().data(), rows, k).transpose() * dy;
        }
      });
    }
    return out;
  }

  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shape(a_batch, b_batch, "matmul");
  // Per-batch offsets, computed once and shared with the reverse pass.
  auto offsets = std::make_shared<std::vector<std::pair<Index, Index>>>();
  offsets->reserve(static_cast<std::size_t>(numel_of(batch)));
  detail::for_each_broadcast(batch, a_batch, b_batch,
                             [&](Index, Index ia, Index ib) { offsets->emplace_back(ia, ib); });
  Shape shape = batch;
  shape.push_back(m);
  shape.push_back(p);
  Tensor<Scalar> out(shape);
  const Index sa = m * k;
  const Index sb = k * p;
  const Index so = m * p;
  for (std::size_t i = 0; i < offsets->size(); ++i) {
    const auto [ia, ib] = (*offsets)[i];
    MatMap<Scalar>(out.raw().data() + static_cast<Index>(i) * so, m, p).noalias() =
        ConstMatMap<Scalar>(a.data().data() + ia * sa, m, k) *
        ConstMatMap<Scalar>(b.data().data() + ib * sb, k, p);
  }
  if (auto* tape = detail::recording_tape<Scalar>(a, b)) {
    out.mark_recorded();
    tape->record([a, b, out, offsets, m, k, p, sa, sb, so]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      std::span<Scalar> ga;
      std::span<Scalar> gb;
      if (need_a) ga = a.mutable_grad();
      if (need_b) gb = b.mutable_grad();
      for (std::size_t i = 0; i < offsets->size(); ++i) {
        const auto [ia, ib] = (*offsets)[i];
        ConstMatMap<Scalar> dy(g.data() + static_cast<Index>(i) * so, m, p);
        if (need_a) {
          MatMap<Scalar>(ga.data() + ia * sa, m, k).noalias() +=
              dy * ConstMatMap<Scalar>(b.data().data() + ib * sb, k, p).transpose();
        }
        if (need_b) {
          MatMap<Scalar>(gb.data() + ib * sb, k, p).noalias() +=
              ConstMatMap<Scalar>(a.data().data() + ia * sa, m, k).transpose() * dy;
        }
      }
    });
  }
  return out;
}

/// Normalizes over the last axis, then applies gamma * xhat + beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm on a rank-0 tensor");
  const Index d = x.dim(-1);
  if (d < 1) throw ShapeError("layer_norm needs D >= 1");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm affine shapes " + to_string(gamma.shape()) + ", " +
                     to_string(beta.shape()) + " do not match D=" + std::to_string(d));
  }
  if (!(eps > 0)) throw DomainError("layer_norm eps must be positive");
  const Index rows = x.numel() / d;
  Tensor<Scalar> out(x.shape());
  auto xhat = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(rows));
  auto xs = x.data();
  auto gs = gamma.data();
  auto bs = beta.data();
  auto& ys = out.raw();
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = xs.data() + r * d;
    Scalar mu = 0;
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<Scalar>(d);
    Scalar var = 0;
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Scalar>(d);
    const Scalar rs = Scalar(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (Index j = 0; j < d; ++j) {
      const Scalar h = (row[j] - mu) * rs;
      (*xhat)[static_cast<std::size_t>(r * d + j)] = h;
      ys[static_cast<std::size_t>(r * d + j)] = gs[static_cast<std::size_t>(j)] * h + bs[static_cast<std::size_t>(j)];
    }
  }
  if (auto* tape = detail::recording_tape<Scalar>(x, gamma, beta)) {
    out.mark_recorded();
    tape->record([x, gamma, beta, out, xhat, rstd, rows, d]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gs = gamma.data();
      const bool need_x = x.requires_grad();
      std::span<Scalar> gx;
      std::span<Scalar> ggamma;
      std::span<Scalar> gbeta;
      if (need_x) gx = x.mutable_grad();
      if (gamma.requires_grad()) ggamma = gamma.mutable_grad();
      if (beta.requires_grad()) gbeta = beta.mutable_grad();
      for (Index r = 0; r < rows; ++r) {
        const Scalar* h = xhat->data() + r * d;
        const Scalar* gr = g.data() + r * d;
        Scalar mean_dh = 0;
        Scalar mean_dh_h = 0;
        for (Index j = 0; j < d; ++j) {
          const Scalar dh = gr[j] * gs[static_cast<std::size_t>(j)];
          mean_dh += dh;
          mean_dh_h += dh * h[j];
          if (!ggamma.empty()) ggamma[static_cast<std::size_t>(j)] += gr[j] * h[j];
          if (!gbeta.empty()) gbeta[static_cast<std::size_t>(j)] += gr[j];
        }
        if (!need_x) continue;
        mean_dh /= static_cast<Scalar>(d);
        mean_dh_h /= static_cast<Scalar>(d);
        const Scalar rs = (*rstd)[static_cast<std::size_t>(r)];
        Scalar* gxr = gx.data() + r * d;
        for (Index j = 0; j < d; ++j) {
          const Scalar dh = gr[j] * gs[static_cast<std::size_t>(j)];
          gxr[j] += rs * (dh - mean_dh - h[j] * mean_dh_h);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence ops over x[..., L, D]
// ---------------------------------------------------------------------------

enum class ConvPadding { same, causal };

/// Per-channel 1-D convolution along the sequence axis with zero padding.
/// `same`: symmetric padding, odd k; `causal`: k-1 zeros on the left only.
template <typename Scalar>
Tensor<Scalar> depthwise_conv1d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                                ConvPadding padding = ConvPadding::same) {
  if (x.rank() < 2 || kernel.rank() != 2 || kernel.dim(1) != x.dim(-1)) {
    throw ShapeError("depthwise_conv1d: input " + to_string(x.shape()) + " vs kernel " +
                     to_string(kernel.shape()));
  }
  const Index len = x.dim(-2);
  const Index d = x.dim(-1);
  const Index k = kernel.dim(0);
  if (k < 1) throw ConfigError("depthwise_conv1d: empty kernel");
  Index left = k - 1;
  if (padding == ConvPadding::same) {
    if (k % 2 == 0) throw ConfigError("depthwise_conv1d: same padding needs an odd kernel");
    if (k > 2 * len + 1) {
      throw ConfigError("depthwise_conv1d: kernel " + std::to_string(k) + " exceeds 2L+1 = " +
                        std::to_string(2 * len + 1));
    }
    left = (k - 1) / 2;
  }
  const Index batches = detail::outer_count(x.shape(), 2);
  Tensor<Scalar> out(x.shape());
  auto xs = x.data();
  auto ks = kernel.data();
  auto& ys = out.raw();
  for (Index bi = 0; bi < batches; ++bi) {
    const Scalar* xb = xs.data() + bi * len * d;
    Scalar* yb = ys.data() + bi * len * d;
    for (Index l = 0; l < len; ++l) {
      for (Index j = 0; j < k; ++j) {
        const Index src = l + j - left;
        if (src < 0 || src >= len) continue;
        const Scalar* kr = ks.data() + j * d;
        const Scalar* xr = xb + src * d;
        Scalar* yr = yb + l * d;
        for (Index c = 0; c < d; ++c) yr[c] += kr[c] * xr[c];
      }
    }
  }
  if (auto* tape = detail::recording_tape<Scalar>(x, kernel)) {
    out.mark_recorded();
    tape->record([x, kernel, out, batches, len, d, k, left]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto xs = x.data();
      auto ks = kernel.data();
      std::span<Scalar> gx;
      std::span<Scalar> gk;
      if (x.requires_grad()) gx = x.mutable_grad();
      if (kernel.requires_grad()) gk = kernel.mutable_grad();
      for (Index bi = 0; bi < batches; ++bi) {
        for (Index l = 0; l < len; ++l) {
          const Scalar* gr = g.data() + (bi * len + l) * d;
          for (Index j = 0; j < k; ++j) {
            const Index src = l + j - left;
            if (src < 0 || src >= len) continue;
            const Index xo = (bi * len + src) * d;
            if (!gx.empty()) {
              const Scalar* kr = ks.data() + j * d;
              for (Index c = 0; c < d; ++c) gx[static_cast<std::size_t>(xo + c)] += kr[c] * gr[c];
            }
            if (!gk.empty()) {
              for (Index c = 0; c < d; ++c) {
                gk[static_cast<std::size_t>(j * d + c)] += xs[static_cast<std::size_t>(xo + c)] * gr[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

/// Row-gather along axis -2: out[..., i, :] = x[..., index[i], :]. Backward scatters.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::shared_ptr<const std::vector<Index>> index) {
  if (x.rank() < 2) throw ShapeError("row gather needs rank >= 2, got " + to_string(x.shape()));
  const Index len = x.dim(-2);
  const Index d = x.dim(-1);
  const Index batches = outer_count(x.shape(), 2);
  const Index out_len = static_cast<Index>(index->size());
  for (Index src : *index) {
    if (src < 0 || src >= len) throw IndexError("row gather index out of range");
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_len;
  Tensor<Scalar> out(shape);
  auto xs = x.data();
  auto& ys = out.raw();
  for (Index b = 0; b < batches; ++b) {
    for (Index i = 0; i < out_len; ++i) {
      const Scalar* src = xs.data() + (b * len + (*index)[static_cast<std::size_t>(i)]) * d;
      std::copy(src, src + d, ys.data() + (b * out_len + i) * d);
    }
  }
  if (auto* tape = recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out, index, batches, len, out_len, d]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gx = x.mutable_grad();
      for (Index b = 0; b < batches; ++b) {
        for (Index i = 0; i < out_len; ++i) {
          const Scalar* gr = g.data() + (b * out_len + i) * d;
          Scalar* dst = gx.data() + (b * len + (*index)[static_cast<std::size_t>(i)]) * d;
          for (Index c = 0; c < d; ++c) dst[c] += gr[c];
        }
      }
    });
  }
  return out;
}

}  // namespace detail

/// Reverses the sequence axis (-2): row i of the result is row L-1-i of x.
template <typename Scalar>
Tensor<Scalar> flip_seq(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ShapeError("flip_seq needs rank >= 2, got " + to_string(x.shape()));
  const Index len = x.dim(-2);
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(len));
  for (Index i = 0; i < len; ++i) (*index)[static_cast<std::size_t>(i)] = len - 1 - i;
  return detail::gather_rows(x, std::move(index));
}

/// Selects rows of axis -2 by index (rows may repeat; gradients accumulate).
template <typename Scalar>
Tensor<Scalar> select_rows(const Tensor<Scalar>& x, std::vector<Index> index) {
  return detail::gather_rows(x, std::make_shared<const std::vector<Index>>(std::move(index)));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<Scalar> out(std::move(shape), std::vector<Scalar>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) throw ShapeError("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  std::vector<Index> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * x.shape()[static_cast<std::size_t>(i + 1)];
  }
  Shape shape(static_cast<std::size_t>(r));
  std::vector<Index> src_strides(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    src_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  // src index of every output element, shared with the reverse pass
  auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
  {
    std::vector<Index> counter(static_cast<std::size_t>(r), 0);
    Index off = 0;
    for (Index o = 0; o < x.numel(); ++o) {
      (*src)[static_cast<std::size_t>(o)] = off;
      for (int k = r - 1; k >= 0; --k) {
        const auto uk = static_cast<std::size_t>(k);
        ++counter[uk];
        off += src_strides[uk];
        if (counter[uk] < shape[uk]) break;
        off -= src_strides[uk] * shape[uk];
        counter[uk] = 0;
      }
    }
  }
  Tensor<Scalar> out(shape);
  auto xs = x.data();
  auto& ys = out.raw();
  for (std::size_t o = 0; o < ys.size(); ++o) ys[o] = xs[static_cast<std::size_t>((*src)[o])];
  if (auto* tape = detail::recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out, src]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < g.size(); ++o) gx[static_cast<std::size_t>((*src)[o])] += g[o];
    });
  }
  return out;
}

/// Swaps the last two axes.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  std::vector<int> perm(static_cast<std::size_t>(x.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

/// Concatenates along `axis`; all other extents must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const int r = parts.front().rank();
  const int ax = detail::normalize_axis(axis, r);
  Shape shape = parts.front().shape();
  shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& t : parts) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != ax && t.shape()[static_cast<std::size_t>(i)] != parts.front().shape()[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: shapes " + to_string(parts.front().shape()) + " and " +
                         to_string(t.shape()) + " differ off-axis");
      }
    }
    shape[static_cast<std::size_t>(ax)] += t.dim(ax);
  }
  Index outer = 1;
  for (int i = 0; i < ax; ++i) outer *= shape[static_cast<std::size_t>(i)];
  Index inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= shape[static_cast<std::size_t>(i)];
  const Index out_block = shape[static_cast<std::size_t>(ax)] * inner;
  Tensor<Scalar> out(shape);
  auto& ys = out.raw();
  Index col = 0;
  for (const auto& t : parts) {
    const Index blk = t.dim(ax) * inner;
    auto ts = t.data();
    for (Index o = 0; o < outer; ++o) {
      std::copy(ts.begin() + o * blk, ts.begin() + (o + 1) * blk, ys.begin() + o * out_block + col);
    }
    col += blk;
  }
  bool any = false;
  for (const auto& t : parts) any = any || t.requires_grad();
  auto* tape = Tape<Scalar>::active();
  if (tape != nullptr && any) {
    out.mark_recorded();
    tape->record([parts, out, outer, inner, out_block, ax]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      Index col = 0;
      for (auto& t : parts) {
        const Index blk = t.dim(ax) * inner;
        if (t.requires_grad()) {
          auto gt = t.mutable_grad();
          for (Index o = 0; o < outer; ++o) {
            for (Index j = 0; j < blk; ++j) gt[static_cast<std::size_t>(o * blk + j)] += g[static_cast<std::size_t>(o * out_block + col + j)];
          }
        }
        col += blk;
      }
    });
  }
  return out;
}

/// Contiguous sub-range [start, start+length) of `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start, Index length) {
  const int ax = detail::normalize_axis(axis, x.rank());
  const Index extent = x.dim(ax);
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of extent " + std::to_string(extent));
  }
  Index outer = 1;
  for (int i = 0; i < ax; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  Index inner = 1;
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(ax)] = length;
  Tensor<Scalar> out(shape);
  auto xs = x.data();
  auto& ys = out.raw();
  const Index in_blk = extent * inner;
  const Index blk = length * inner;
  for (Index o = 0; o < outer; ++o) {
    std::copy(xs.begin() + o * in_blk + start * inner, xs.begin() + o * in_blk + start * inner + blk,
              ys.begin() + o * blk);
  }
  if (auto* tape = detail::recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out, outer, in_blk, blk, start, inner]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gx = x.mutable_grad();
      for (Index o = 0; o < outer; ++o) {
        for (Index j = 0; j < blk; ++j) gx[static_cast<std::size_t>(o * in_blk + start * inner + j)] += g[static_cast<std::size_t>(o * blk + j)];
      }
    });
  }
  return out;
}

/// Row lookup table[ids[i]] -> out[..., D], with out shape = id_shape + [D].
template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, std::span<const int> ids, Shape id_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, D]");
  if (numel_of(id_shape) != static_cast<Index>(ids.size())) throw ShapeError("embedding: id shape mismatch");
  const Index v = table.dim(0);
  const Index d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw IndexError("embedding id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(v) + ")");
    }
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  id_shape.push_back(d);
  Tensor<Scalar> out(id_shape);
  auto ts = table.data();
  auto& ys = out.raw();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    std::copy(ts.begin() + (*idx)[i] * d, ts.begin() + ((*idx)[i] + 1) * d, ys.begin() + static_cast<Index>(i) * d);
  }
  if (auto* tape = detail::recording_tape<Scalar>(table)) {
    out.mark_recorded();
    tape->record([table, out, idx, d]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < idx->size(); ++i) {
        for (Index c = 0; c < d; ++c) gt[static_cast<std::size_t>((*idx)[i] * d + c)] += g[static_cast<std::size_t>(static_cast<Index>(i) * d + c)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Softmax over the last axis with max subtraction. Entries equal to -inf get
/// probability exactly zero.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  const Index v = x.dim(-1);
  const Index rows = v == 0 ? 0 : x.numel() / v;
  Tensor<Scalar> out(x.shape());
  auto xs = x.data();
  auto& ys = out.raw();
  for (Index r = 0; r < rows; ++r) {
    const Scalar* xr = xs.data() + r * v;
    Scalar* yr = ys.data() + r * v;
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < v; ++j) mx = std::max(mx, xr[j]);
    Scalar z = 0;
    for (Index j = 0; j < v; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (Index j = 0; j < v; ++j) yr[j] /= z;
  }
  if (auto* tape = detail::recording_tape<Scalar>(x)) {
    out.mark_recorded();
    tape->record([x, out, rows, v]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto ys = out.data();
      auto gx = x.mutable_grad();
      for (Index r = 0; r < rows; ++r) {
        const Scalar* yr = ys.data() + r * v;
        const Scalar* gr = g.data() + r * v;
        Scalar dot = 0;
        for (Index j = 0; j < v; ++j) dot += yr[j] * gr[j];
        for (Index j = 0; j < v; ++j) gx[static_cast<std::size_t>(r * v + j)] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood -(1/N) sum_n log p_n[target_n] over rows of logits[N, V].
/// Rows whose target equals `ignore_index` are excluded from both the sum and N.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets,
                                     int ignore_index = -1) {
  if (logits.rank() != 2) throw ShapeError("cross entropy expects logits [N, V], got " + to_string(logits.shape()));
  const Index n = logits.dim(0);
  const Index v = logits.dim(1);
  if (n < 1) throw ContractError("cross entropy over zero rows");
  if (static_cast<Index>(targets.size()) != n) {
    throw ShapeError("cross entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  Index counted = 0;
  for (Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= v) {
      throw IndexError("target " + std::to_string(t) + " at position " + std::to_string(i) +
                       " outside [0, " + std::to_string(v) + ")");
    }
    ++counted;
  }
  if (counted == 0) throw ContractError("cross entropy with every target ignored");
  auto probs = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(n * v));
  auto xs = logits.data();
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == ignore_index) continue;
    const Scalar* xr = xs.data() + i * v;
    Scalar* pr = probs->data() + i * v;
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < v; ++j) mx = std::max(mx, xr[j]);
    Scalar z = 0;
    for (Index j = 0; j < v; ++j) z += std::exp(xr[j] - mx);
    const Scalar log_z = std::log(z) + mx;
    for (Index j = 0; j < v; ++j) pr[j] = std::exp(xr[j] - log_z);
    total += log_z - xr[t];
  }
  auto out = Tensor<Scalar>::scalar(total / static_cast<Scalar>(counted));
  if (auto* tape = detail::recording_tape<Scalar>(logits)) {
    out.mark_recorded();
    auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    tape->record([logits, out, probs, tgt, n, v, counted, ignore_index]() mutable {
      auto g = out.grad();
      if (g.empty()) return;
      auto gx = logits.mutable_grad();
      const Scalar s = g[0] / static_cast<Scalar>(counted);
      for (Index i = 0; i < n; ++i) {
        const int t = (*tgt)[static_cast<std::size_t>(i)];
        if (t == ignore_index) continue;
        const Scalar* pr = probs->data() + i * v;
        Scalar* gr = gx.data() + i * v;
        for (Index j = 0; j < v; ++j) gr[j] += s * pr[j];
        gr[t] -= s;
      }
    });
  }
  return out;
}

}  // namespace cama
