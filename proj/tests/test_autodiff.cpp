#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "cama/gradcheck.hpp"
#include "cama/ops.hpp"
#include "cama/serialize.hpp"
#include "test_util.hpp"

using namespace cama;
using cama::testing::bitwise_equal;
using cama::testing::max_abs_diff;
using cama::testing::random_tensor;

using T = Tensor<double>;

namespace {

/// Runs f under a fresh tape and returns the gradient of sum-probe(f(x)) w.r.t. x.
template <typename F>
T grad_of(F&& f, T x) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(f(x));
  return x.grad_tensor();
}

}  // namespace

TEST_CASE("elementwise fixed points") {
  CHECK(silu(T::from({1}, {0.0})).item() == 0.0);
  CHECK(exp(T::from({1}, {0.0})).item() == 1.0);
  Rng rng(1, "t");
  auto a = random_tensor({3, 4}, rng);
  auto z = sub(a, a);
  CHECK(z.shape() == a.shape());
  for (double v : z.data()) CHECK(v == 0.0);
  CHECK(elementwise(ElementwiseOp::silu, T::from({1}, {2.0})).item() ==
        doctest::Approx(2.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
  CHECK_THROWS_AS(elementwise(ElementwiseOp::add, a), ContractError);
}

TEST_CASE("broadcast mismatch names both shapes") {
  T a({2, 3});
  T b({4});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
}

TEST_CASE("broadcasting equals explicit tiling") {
  Rng rng(2, "broadcast");
  for (int trial = 0; trial < 30; ++trial) {
    const Index r = 1 + static_cast<Index>(rng.below(3));
    const Index c = 1 + static_cast<Index>(rng.below(4));
    const Index o = 1 + static_cast<Index>(rng.below(3));
    auto a = random_tensor({o, r, c}, rng);
    // b drops leading axes and may have unit extents
    Shape bs = rng.bernoulli(0.5) ? Shape{r, c} : Shape{1, c};
    if (rng.bernoulli(0.3)) bs = Shape{c};
    auto b = random_tensor(bs, rng);
    auto y = mul(add(a, b), b);
    T ref({o, r, c});
    for (Index i = 0; i < o; ++i) {
      for (Index j = 0; j < r; ++j) {
        for (Index k = 0; k < c; ++k) {
          double bv;
          if (bs.size() == 1) {
            bv = b.at({k});
          } else {
            bv = b.at({bs[0] == 1 ? 0 : j, k});
          }
          ref.raw()[static_cast<std::size_t>((i * r + j) * c + k)] = (a.at({i, j, k}) + bv) * bv;
        }
      }
    }
    CHECK(bitwise_equal(y, ref));
  }
}

TEST_CASE("matmul values and errors") {
  auto eye = T::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto v = T::from({3, 1}, {4, -5, 6});
  CHECK(bitwise_equal(matmul(eye, v), v));
  auto y = matmul(T::from({2, 2}, {1, 2, 3, 4}), T::from({2, 1}, {1, 1}));
  CHECK(bitwise_equal(y, T::from({2, 1}, {3, 7})));
  CHECK_THROWS_AS(matmul(T({2, 3}), T({2, 3})), ShapeError);
}

TEST_CASE("gradient of sum(A B) w.r.t. A is the row sums of B, broadcast over rows of A") {
  Rng rng(3, "mm");
  auto b = random_tensor({4, 5}, rng);
  auto g = grad_of([&](const T& a) { return sum(matmul(a, b)); }, random_tensor({3, 4}, rng));
  for (Index i = 0; i < 3; ++i) {
    for (Index k = 0; k < 4; ++k) {
      double s = 0;
      for (Index p = 0; p < 5; ++p) s += b.at({k, p});
      CHECK(g.at({i, k}) == doctest::Approx(s).epsilon(1e-14));
    }
  }
  auto res = finite_difference_check([&](const T& a) { return sum(matmul(a, b)); }, random_tensor({3, 4}, rng));
  CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("layer norm") {
  auto gamma = T::ones({5});
  auto beta = T::zeros({5});
  auto y = layer_norm(T::full({2, 5}, 3.25), gamma, beta);
  for (double v : y.data()) CHECK(v == 0.0);

  Rng rng(4, "ln");
  auto x = random_tensor({4, 5}, rng, -3, 3);
  auto b2 = random_tensor({5}, rng);
  auto z = layer_norm(x, gamma, b2);
  double bmean = 0;
  for (double v : b2.data()) bmean += v / 5;
  for (Index r = 0; r < 4; ++r) {
    double m = 0;
    for (Index c = 0; c < 5; ++c) m += z.at({r, c}) / 5;
    CHECK(m == doctest::Approx(bmean).epsilon(1e-12));
  }
  auto g = random_tensor({5}, rng);
  CHECK(finite_difference_check([&](const T& v) { return sum(mul(layer_norm(v, g, b2), x)); }, x).max_rel_err <= 1e-6);
  CHECK(finite_difference_check([&](const T& v) { return sum(mul(layer_norm(x, v, b2), x)); }, g).max_rel_err <= 1e-6);
}

TEST_CASE("depthwise conv1d") {
  Rng rng(5, "conv");
  auto x = random_tensor({6, 3}, rng);
  auto impulse = T::from({3, 3}, {0, 0, 0, 1, 1, 1, 0, 0, 0});
  CHECK(bitwise_equal(depthwise_conv1d(x, impulse), x));

  auto y = depthwise_conv1d(T::from({3, 1}, {1, 1, 1}), T::ones({3, 1}));
  CHECK(bitwise_equal(y, T::from({3, 1}, {2, 3, 2})));

  // perturbing channel 1 leaves channels 0 and 2 unchanged
  auto k = random_tensor({3, 3}, rng);
  auto base = depthwise_conv1d(x, k);
  auto xp = x.clone();
  for (Index l = 0; l < 6; ++l) xp.raw()[static_cast<std::size_t>(l * 3 + 1)] += 0.5;
  auto pert = depthwise_conv1d(xp, k);
  for (Index l = 0; l < 6; ++l) {
    CHECK(pert.at({l, 0}) == base.at({l, 0}));
    CHECK(pert.at({l, 2}) == base.at({l, 2}));
  }

  CHECK_THROWS_AS(depthwise_conv1d(T({2, 1}), T({7, 1})), ConfigError);
  CHECK_NOTHROW(depthwise_conv1d(T({2, 1}), T({5, 1})));
  CHECK_THROWS_AS(depthwise_conv1d(T({4, 1}), T({2, 1})), ConfigError);
}

TEST_CASE("causal conv only looks back") {
  Rng rng(6, "cconv");
  auto x = random_tensor({7, 2}, rng);
  auto k = random_tensor({4, 2}, rng);
  auto base = depthwise_conv1d(x, k, ConvPadding::causal);
  auto xp = x.clone();
  xp.raw()[4 * 2] += 1.0;
  auto pert = depthwise_conv1d(xp, k, ConvPadding::causal);
  CHECK(cama::testing::rows_bitwise_equal(base, pert, 0, 4));
  CHECK(pert.at({4, 0}) != base.at({4, 0}));
}

TEST_CASE("flip_seq") {
  Rng rng(7, "flip");
  auto x = random_tensor({5, 3}, rng);
  CHECK(bitwise_equal(flip_seq(flip_seq(x)), x));
  auto one = random_tensor({1, 3}, rng);
  CHECK(bitwise_equal(flip_seq(one), one));
  auto r = T::from({3, 2}, {0, 1, 10, 11, 20, 21});
  CHECK(bitwise_equal(flip_seq(r), T::from({3, 2}, {20, 21, 10, 11, 0, 1})));
  auto probe = random_tensor({5, 3}, rng);
  auto g = grad_of([&](const T& v) { return sum(mul(flip_seq(v), probe)); }, x);
  CHECK(bitwise_equal(g, flip_seq(probe)));
}

TEST_CASE("softmax cross entropy") {
  const std::vector<int> t{3};
  CHECK(softmax_cross_entropy(T::zeros({1, 16}), t).item() == doctest::Approx(std::log(16.0)).epsilon(1e-15));
  CHECK(std::log(16.0) == doctest::Approx(2.772589).epsilon(1e-6));

  double prev = INFINITY;
  for (double margin : {1.0, 5.0, 20.0, 60.0}) {
    T logits = T::zeros({1, 4});
    logits.raw()[3] = margin;
    const double loss = softmax_cross_entropy(logits, t).item();
    CHECK(loss < prev);
    prev = loss;
  }
  CHECK(prev < 1e-20);

  Rng rng(8, "ce");
  auto logits = random_tensor({4, 6}, rng, -2, 2);
  const std::vector<int> targets{0, 5, 2, 2};
  auto g = grad_of([&](const T& l) { return softmax_cross_entropy(l, targets); }, logits);
  for (Index n = 0; n < 4; ++n) {
    double z = 0;
    for (Index v = 0; v < 6; ++v) z += std::exp(logits.at({n, v}));
    for (Index v = 0; v < 6; ++v) {
      const double expect = (std::exp(logits.at({n, v})) / z - (targets[static_cast<std::size_t>(n)] == v)) / 4;
      CHECK(g.at({n, v}) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK(finite_difference_check([&](const T& l) { return softmax_cross_entropy(l, targets); }, logits).max_rel_err <= 1e-6);

  // row shift invariance
  auto shifted = logits.clone();
  for (Index v = 0; v < 6; ++v) shifted.raw()[static_cast<std::size_t>(6 + v)] += 123.5;
  CHECK(std::abs(softmax_cross_entropy(logits, targets).item() - softmax_cross_entropy(shifted, targets).item()) <= 1e-12);

  const std::vector<int> bad{0, 6, 1, 1};
  try {
    softmax_cross_entropy(logits, bad);
    FAIL("expected IndexError");
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find("position 1") != std::string::npos);
  }
}

TEST_CASE("backward fan-out and contracts") {
  auto ones = grad_of([](const T& x) { return sum(x); }, T::from({3}, {0.3, -2, 7}));
  CHECK(bitwise_equal(ones, T::ones({3})));
  auto sq = grad_of([](const T& x) { return sum(mul(x, x)); }, T::from({2}, {1, 2}));
  CHECK(bitwise_equal(sq, T::from({2}, {2, 4})));
  auto twice = grad_of([](const T& x) { return add(sum(x), sum(x)); }, T::from({2}, {1, 2}));
  CHECK(bitwise_equal(twice, T::from({2}, {2, 2})));

  T x = T::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  CHECK_THROWS_AS(tape.backward(T::scalar(1.0)), ContractError);
}

TEST_CASE("detached tensors receive no gradient") {
  T x = T::from({2}, {1, 2});
  T c = T::from({2}, {3, 4});  // no requires_grad
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(mul(x, c)));
  CHECK(x.has_grad());
  CHECK_FALSE(c.has_grad());
  auto d = x.detach();
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("recorded tensors are immutable") {
  T x = T::from({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = exp(x);
  CHECK_THROWS_AS(y.mutable_data(), ContractError);
}

TEST_CASE("finite difference oracle") {
  Rng rng(9, "fd");
  auto x = random_tensor({7}, rng);
  CHECK(finite_difference_check([](const T& v) { return sum(v); }, x).max_rel_err <= 1e-10);
  CHECK(finite_difference_check([](const T& v) { return sum(silu(v)); }, x).max_rel_err <= 1e-6);
  auto res = finite_difference_check([](const T& v) { return sum(log(v)); }, T::from({2}, {1e-6, -1}));
  CHECK_FALSE(res.finite);
}

TEST_CASE("every primitive matches finite differences over 50 random trials") {
  Rng rng(10, "primitives");
  using Fn = std::function<T(const T&, const T&)>;
  const std::vector<std::pair<std::string, Fn>> ops{
      {"add", [](const T& a, const T& b) { return add(a, b); }},
      {"sub", [](const T& a, const T& b) { return sub(a, b); }},
      {"mul", [](const T& a, const T& b) { return mul(a, b); }},
      {"div", [](const T& a, const T& b) { return div(a, add_scalar(mul(b, b), 0.5)); }},
      {"exp", [](const T& a, const T&) { return exp(a); }},
      {"log", [](const T& a, const T&) { return log(add_scalar(mul(a, a), 0.5)); }},
      {"softplus", [](const T& a, const T&) { return softplus(scale(a, 4.0)); }},
      {"sigmoid", [](const T& a, const T&) { return sigmoid(scale(a, 3.0)); }},
      {"silu", [](const T& a, const T&) { return silu(scale(a, 3.0)); }},
      {"softmax", [](const T& a, const T&) { return softmax(a); }},
      {"matmul", [](const T& a, const T& b) { return matmul(a, transpose(b)); }},
      {"flip", [](const T& a, const T&) { return flip_seq(a); }},
      {"conv", [](const T& a, const T& b) { return depthwise_conv1d(a, slice(b, 0, 0, 3)); }},
  };
  for (const auto& [name, op] : ops) {
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const Index rows = 3 + static_cast<Index>(rng.below(3));
      const Index cols = 1 + static_cast<Index>(rng.below(4));
      auto a = random_tensor({rows, cols}, rng);
      auto b = random_tensor({rows, cols}, rng);
      auto probe = random_tensor(op(a, b).shape(), rng);
      worst = std::max(worst, finite_difference_check([&](const T& v) { return sum(mul(op(v, b), probe)); }, a).max_rel_err);
      worst = std::max(worst, finite_difference_check([&](const T& v) { return sum(mul(op(a, v), probe)); }, b).max_rel_err);
    }
    INFO(name);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("CAMT round trip and layout") {
  Rng rng(11, "camt");
  auto t = random_tensor({2, 3}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "CAMT");
  CHECK(static_cast<int>(bytes[4]) == 1);  // f64
  CHECK(static_cast<int>(bytes[5]) == 2);  // rank
  CHECK(bytes.size() == 4 + 2 + 2 * 8 + 6 * 8);
  auto back = read_tensor<double>(ss);
  CHECK(bitwise_equal(back, t));
  std::stringstream bad("CAMX");
  CHECK_THROWS_AS(read_tensor<double>(bad), FormatError);
}
