#include "cama/gradcheck_suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <utility>

#include "cama/decoders.hpp"
#include "cama/encoder.hpp"
#include "cama/errors.hpp"
#include "cama/gradcheck.hpp"
#include "cama/model.hpp"
#include "cama/ops.hpp"
#include "cama/rng.hpp"
#include "cama/ssm.hpp"

namespace cama {

namespace {

using T = Tensor<double>;
using Params = std::vector<std::pair<std::string, T>>;

constexpr double kStep = 1e-5;
constexpr Index kCoordsPerTensor = 0;  // every coordinate

T random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T t(std::move(shape));
  for (auto& v : t.raw()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(y * r) with a fixed random r: keeps the loss O(1) and every output coordinate
/// contributing with a distinct weight.
struct Probe {
  T weights;
  T operator()(const T& y) {
    if (weights.shape() != y.shape()) {
      Rng rng(99, "gradcheck/probe");
      weights = random(y.shape(), rng);
    }
    return sum(mul(y, weights));
  }
};

class Runner {
 public:
  Runner(std::string scope, double threshold) : scope_(std::move(scope)), threshold_(threshold) {}

  void check(const std::string& name, Params params, const std::function<T()>& loss) {
    SuiteCheck out{scope_, name, 0.0, threshold_, {}};
    for (const auto& r : check_parameters(loss, std::move(params), kStep, kCoordsPerTensor)) {
      out.max_rel_err = std::max(out.max_rel_err, r.result.max_rel_err);
      if (!r.result.finite || r.result.max_rel_err > threshold_) out.failing.push_back(name + "/" + r.name);
    }
    results_.push_back(std::move(out));
  }

  std::vector<SuiteCheck> take() { return std::move(results_); }

 private:
  std::string scope_;
  double threshold_;
  std::vector<SuiteCheck> results_;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Parameters of a module, with the SSM moved away from its initial regime: there the
/// step sizes are ~1e-2 and B/C are small, so A and the step projection get gradients
/// near 1e-8, below the ~1e-10 round-off of central differences. Step sizes and B/C
/// weights are redrawn at O(1) so every parameter is checked where it has an effect.
template <typename Module>
Params collect(Module& m, const std::string& prefix) {
  Params p;
  Rng rng(17, "gradcheck/condition/" + prefix);
  m.visit(prefix, [&](const std::string& name, T& t) {
    if (ends_with(name, ".delta_bias")) {
      for (auto& v : t.raw()) v = rng.uniform(-0.5, 0.5);
    } else if (ends_with(name, ".a_log")) {
      for (auto& v : t.raw()) v = rng.uniform(-0.7, 0.7);
    } else if (ends_with(name, ".w_b") || ends_with(name, ".w_c")) {
      for (auto& v : t.raw()) v = rng.uniform(-1.0, 1.0);
    }
    p.emplace_back(name, t);
  });
  return p;
}

/// silu forward with a reverse pass that drops the sigmoid-derivative term.
T faulty_silu(const T& x) {
  T out;
  {
    NoTapeScope<double> off;
    out = silu(x.detach());
  }
  if (auto* tape = detail::recording_tape<double>(x)) {
    T y = out;
    y.mark_recorded();
    tape->record([x, y]() {
      auto g = y.grad();
      if (g.empty()) return;
      auto gx = x.mutable_grad();
      auto xs = x.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * detail::sigmoid_scalar(xs[i]);
    });
    return y;
  }
  return out;
}

std::vector<SuiteCheck> ops_suite(bool inject_fault) {
  Runner run("ops", gradcheck_threshold("ops"));
  Rng rng(11, "gradcheck/ops");
  Probe probe;
  auto unary_check = [&](const std::string& name, T x, std::function<T(const T&)> f) {
    run.check(name, {{"x", x}}, [=, &probe]() { return probe(f(x)); });
  };
  {
    T a = random({3, 4}, rng), b = random({4}, rng);
    run.check("add_broadcast", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(add(a, b)); });
  }
  {
    T a = random({2, 3, 4}, rng), b = random({3, 1}, rng);
    run.check("sub_broadcast", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(sub(a, b)); });
  }
  {
    T a = random({3, 4}, rng), b = random({3, 4}, rng);
    run.check("mul", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(mul(a, b)); });
  }
  {
    T a = random({3, 4}, rng), b = random({1, 4}, rng, 0.5, 2.0);
    run.check("div", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(div(a, b)); });
  }
  unary_check("exp", random({3, 4}, rng), [](const T& x) { return exp(x); });
  unary_check("log", random({3, 4}, rng, 0.5, 2.0), [](const T& x) { return log(x); });
  unary_check("neg", random({5}, rng), [](const T& x) { return neg(x); });
  unary_check("sigmoid", random({3, 4}, rng, -3, 3), [](const T& x) { return sigmoid(x); });
  unary_check("softplus", random({3, 4}, rng, -3, 3), [](const T& x) { return softplus(x); });
  unary_check("silu", random({3, 4}, rng, -3, 3), [](const T& x) { return silu(x); });
  unary_check("scale", random({4}, rng), [](const T& x) { return scale(x, 2.5); });
  unary_check("add_scalar", random({4}, rng), [](const T& x) { return add_scalar(x, -0.75); });
  unary_check("sum", random({2, 3}, rng), [](const T& x) { return scale(sum(x), 0.7); });
  unary_check("mean", random({2, 3}, rng), [](const T& x) { return scale(mean(x), 1.3); });
  {
    T a = random({3, 4}, rng), b = random({4, 5}, rng);
    run.check("matmul", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(matmul(a, b)); });
  }
  {
    T a = random({2, 3, 4}, rng), b = random({2, 4, 5}, rng);
    run.check("matmul_batched", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(matmul(a, b)); });
  }
  {
    T a = random({2, 1, 3, 4}, rng), b = random({3, 4, 2}, rng);
    run.check("matmul_broadcast", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(matmul(a, b)); });
  }
  {
    T x = random({3, 6}, rng), g = random({6}, rng, 0.5, 1.5), b = random({6}, rng);
    run.check("layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}},
              [=, &probe]() { return probe(layer_norm(x, g, b)); });
  }
  {
    T x = random({2, 5, 3}, rng), k = random({3, 3}, rng);
    run.check("conv_same", {{"x", x}, {"kernel", k}},
              [=, &probe]() { return probe(depthwise_conv1d(x, k, ConvPadding::same)); });
  }
  {
    T x = random({2, 5, 3}, rng), k = random({4, 3}, rng);
    run.check("conv_causal", {{"x", x}, {"kernel", k}},
              [=, &probe]() { return probe(depthwise_conv1d(x, k, ConvPadding::causal)); });
  }
  unary_check("flip_seq", random({2, 4, 3}, rng), [](const T& x) { return flip_seq(x); });
  unary_check("select_rows", random({5, 3}, rng), [](const T& x) { return select_rows(x, {4, 0, 0, 2}); });
  unary_check("reshape", random({2, 6}, rng), [](const T& x) { return reshape(x, {3, 4}); });
  unary_check("permute", random({2, 3, 4}, rng), [](const T& x) { return permute(x, {2, 0, 1}); });
  unary_check("transpose", random({2, 3, 4}, rng), [](const T& x) { return transpose(x); });
  {
    T a = random({2, 3}, rng), b = random({4, 3}, rng);
    run.check("concat", {{"a", a}, {"b", b}}, [=, &probe]() { return probe(concat<double>({a, b}, 0)); });
  }
  unary_check("slice", random({3, 6}, rng), [](const T& x) { return slice(x, -1, 2, 3); });
  {
    T table = random({6, 4}, rng);
    const std::vector<int> ids = {1, 5, 1, 0};
    run.check("embedding", {{"table", table}}, [=, &probe]() { return probe(embedding(table, ids, {2, 2})); });
  }
  unary_check("softmax", random({3, 5}, rng, -2, 2), [](const T& x) { return softmax(x); });
  {
    T mask = causal_mask<double>(4, 4);
    unary_check("softmax_masked", random({4, 4}, rng, -2, 2), [mask](const T& x) { return softmax(add(x, mask)); });
  }
  {
    T logits = random({4, 6}, rng, -2, 2);
    const std::vector<int> targets = {2, 0, 5, 1};
    run.check("softmax_cross_entropy", {{"logits", logits}},
              [=]() { return softmax_cross_entropy(logits, targets, 0); });
  }
  if (inject_fault) {
    unary_check("faulty_silu", random({3, 4}, rng, -3, 3), [](const T& x) { return faulty_silu(x); });
  }
  return run.take();
}

std::vector<SuiteCheck> ssm_suite() {
  Runner run("ssm", gradcheck_threshold("ssm"));
  Rng rng(12, "gradcheck/ssm");
  Probe probe;
  const Index len = 5, d = 3, n = 2;
  auto scan_inputs = [&]() {
    return std::make_tuple(random({2, len, d}, rng), random({2, len, d, n}, rng, 0.3, 0.95),
                           random({2, len, d, n}, rng), random({2, len, n}, rng), random({d}, rng));
  };
  {
    auto [x, ab, bb, c, sk] = scan_inputs();
    run.check("scan_sequential", {{"x", x}, {"a_bar", ab}, {"b_bar", bb}, {"c", c}, {"skip", sk}},
              [=, &probe]() { return probe(scan_sequential(x, ab, bb, c, sk)); });
  }
  {
    auto [x, ab, bb, c, sk] = scan_inputs();
    run.check("scan_parallel", {{"x", x}, {"a_bar", ab}, {"b_bar", bb}, {"c", c}, {"skip", sk}},
              [=, &probe]() { return probe(scan_parallel(x, ab, bb, c, sk)); });
  }
  for (auto mode : {ZohMode::euler, ZohMode::exact}) {
    const std::string tag = mode == ZohMode::euler ? "euler" : "exact";
    {
      T a = random({d, n}, rng, -2.0, -0.3), b = random({len, n}, rng), delta = random({len, d}, rng, 0.05, 0.8);
      run.check("discretize_zoh_" + tag, {{"a", a}, {"b", b}, {"delta", delta}}, [=, &probe]() {
        auto z = discretize_zoh(a, b, delta, mode);
        return add(probe(z.a_bar), scale(sum(mul(z.b_bar, z.b_bar)), 0.5));
      });
    }
    {
      T x = random({2, len, d}, rng), delta = random({2, len, d}, rng, 0.05, 0.8), a = random({d, n}, rng, -2.0, -0.3);
      T b = random({2, len, n}, rng), c = random({2, len, n}, rng), sk = random({d}, rng);
      run.check("selective_scan_" + tag,
                {{"x", x}, {"delta", delta}, {"a", a}, {"b", b}, {"c", c}, {"skip", sk}},
                [=, &probe]() { return probe(selective_scan(x, delta, a, b, c, sk, mode)); });
    }
  }
  {
    Rng init = rng.split("params");
    auto p = SelectiveSsmParams<double>::init(4, 3, init);
    T x = random({2, len, 4}, rng);
    auto params = collect(p, "ssm");
    params.emplace_back("x", x);
    run.check("selective_ssm", params, [=, &probe]() { return probe(run_selective_ssm(x, p)); });
  }
  return run.take();
}

std::vector<SuiteCheck> sdssm_suite() {
  Runner run("sdssm", gradcheck_threshold("sdssm"));
  Rng rng(13, "gradcheck/sdssm");
  Probe probe;
  for (auto variant : {GateVariant::differential, GateVariant::self}) {
    Rng init = rng.split(variant == GateVariant::differential ? "diff" : "self");
    auto p = SdSsmParams<double>::init(8, 4, init);
    T t1 = random({6, 8}, rng), t2 = random({6, 8}, rng);
    auto params = collect(p, "sd");
    params.emplace_back("t1", t1);
    params.emplace_back("t2", t2);
    run.check(variant == GateVariant::differential ? "sd_ssm_differential" : "sd_ssm_self", params,
              [=, &probe]() {
                auto out = sd_ssm(BiTemporalPair<double>(t1, t2), p, variant);
                return add(probe(out.t1), scale(probe(out.t2), -0.5));
              });
  }
  return run.take();
}

std::vector<SuiteCheck> ttssm_suite() {
  Runner run("ttssm", gradcheck_threshold("ttssm"));
  Rng rng(14, "gradcheck/ttssm");
  Probe probe;
  for (auto variant : {TemporalVariant::interleave, TemporalVariant::length_concat}) {
    const std::string tag = variant == TemporalVariant::interleave ? "interleave" : "length_concat";
    Rng init = rng.split(tag);
    auto p = TtSsmParams<double>::init(8, 4, init);
    T t1 = random({6, 8}, rng), t2 = random({6, 8}, rng);
    auto params = collect(p, "tt");
    params.emplace_back("t1", t1);
    params.emplace_back("t2", t2);
    run.check("tt_ssm_" + tag, params, [=, &probe]() {
      auto out = tt_ssm(BiTemporalPair<double>(t1, t2), p, variant);
      return add(probe(out.t1), scale(probe(out.t2), -0.5));
    });
  }
  return run.take();
}

std::vector<SuiteCheck> decoders_suite() {
  Runner run("decoders", gradcheck_threshold("decoders"));
  Rng rng(15, "gradcheck/decoders");
  Probe probe;
  DecoderConfig cfg;
  cfg.width = 8;
  cfg.vocab_size = 12;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.max_positions = 8;
  cfg.state_size = 4;
  {
    Rng init = rng.split("mamba_block");
    auto blk = MambaLmBlock<double>::init(cfg, init);
    T x = random({5, 8}, rng);
    auto params = collect(blk, "block");
    params.emplace_back("x", x);
    run.check("mamba_lm_block", params, [=, &probe]() { return probe(mamba_lm_block(x, blk)); });
  }
  const std::vector<int> tokens = {Vocabulary::kBos, 5, 7, 4, 9};
  const std::vector<int> targets = {5, 7, 4, 9, Vocabulary::kEos};
  for (auto kind : {DecoderKind::mamba, DecoderKind::gpt_style, DecoderKind::cross_attention}) {
    const std::string tag = kind == DecoderKind::mamba ? "mamba" : kind == DecoderKind::gpt_style ? "gpt_style"
                                                                                                 : "cross_attention";
    cfg.kind = kind;
    Rng init = rng.split(tag);
    auto dec = CaptionDecoder<double>::init(cfg, init);
    T visual = random({4, 8}, rng);
    auto params = collect(dec, "decoder");
    params.emplace_back("visual", visual);
    run.check("decoder_" + tag, params,
              [=]() { return caption_loss(dec.teacher_forced_logits(visual, tokens), targets); });
  }
  return run.take();
}

std::vector<SuiteCheck> stack_suite() {
  Runner run("stack", gradcheck_threshold("stack"));
  Rng rng(16, "gradcheck/stack");
  Probe probe;
  CaMaStackConfig cfg;
  cfg.num_layers = 2;
  cfg.width = 8;
  cfg.state_size = 4;
  cfg.num_tokens = 4;
  Rng init = rng.split("encoder");
  auto enc = CaMaEncoder<double>::init(cfg, init);
  T t1 = random({4, 8}, rng), t2 = random({4, 8}, rng);
  auto params = collect(enc, "encoder");
  params.emplace_back("t1", t1);
  params.emplace_back("t2", t2);
  run.check("cama_stack_2_layers", params, [=, &probe]() { return probe(enc.encode(BiTemporalPair<double>(t1, t2))); });
  return run.take();
}

}  // namespace

const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> scopes = {"ops", "ssm", "sdssm", "ttssm", "decoders", "stack"};
  return scopes;
}

double gradcheck_threshold(const std::string& scope) {
  static const std::map<std::string, double> thresholds = {{"ops", 1e-6},      {"ssm", 1e-5},   {"sdssm", 1e-4},
                                                           {"ttssm", 1e-4},    {"decoders", 1e-4}, {"stack", 1e-3}};
  auto it = thresholds.find(scope);
  if (it == thresholds.end()) throw ConfigError("unknown gradcheck scope '" + scope + "'");
  return it->second;
}

std::vector<SuiteCheck> run_gradcheck(const std::string& scope, bool inject_fault) {
  if (scope == "all") {
    std::vector<SuiteCheck> all;
    for (const auto& s : gradcheck_scopes()) {
      auto part = run_gradcheck(s, inject_fault);
      all.insert(all.end(), part.begin(), part.end());
    }
    return all;
  }
  if (scope == "ops") return ops_suite(inject_fault);
  if (scope == "ssm") return ssm_suite();
  if (scope == "sdssm") return sdssm_suite();
  if (scope == "ttssm") return ttssm_suite();
  if (scope == "decoders") return decoders_suite();
  if (scope == "stack") return stack_suite();
  throw ConfigError("unknown gradcheck scope '" + scope + "' (expected ops, ssm, sdssm, ttssm, stack, decoders or all)");
}

}  // namespace cama
