#pragma once

// Bi-temporal encoder: shared positional embedding, a stack of CaMa layers
// (SD-SSM followed by TT-SSM), channel concatenation and the projection head.
//
// All functions accept tokens shaped [..., L, D]; leading axes are batch axes.

#include <string>
#include <vector>

#include "cama/errors.hpp"
#include "cama/nn.hpp"
#include "cama/ops.hpp"
#include "cama/ssm.hpp"
#include "cama/tensor.hpp"

namespace cama {

enum class GateVariant { differential, self };
enum class TemporalVariant { interleave, length_concat, off };
enum class DecoderKind { mamba, gpt_style, cross_attention };

struct CaMaStackConfig {
  int num_layers = 3;
  Index width = 128;
  Index state_size = 16;
  Index num_tokens = 16;  // L
  GateVariant gate_variant = GateVariant::differential;
  TemporalVariant temporal_variant = TemporalVariant::interleave;
  DecoderKind decoder_kind = DecoderKind::cross_attention;
  bool tie_directions = false;  // backward scan reuses forward SSM parameters
  bool tt_conv = true;          // depthwise conv on the TT-SSM input path

  void validate() const {
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (width < 1 || state_size < 1 || num_tokens < 1) throw ConfigError("width, state_size and L must be >= 1");
  }
};

template <typename Scalar>
struct BiTemporalPair {
  Tensor<Scalar> t1;
  Tensor<Scalar> t2;

  BiTemporalPair(Tensor<Scalar> first, Tensor<Scalar> second)
      : t1(std::move(first)), t2(std::move(second)) {
    if (t1.shape() != t2.shape()) {
      throw ShapeError("bi-temporal branches differ: " + to_string(t1.shape()) + " vs " +
                       to_string(t2.shape()));
    }
    if (t1.rank() < 2) throw ShapeError("bi-temporal branches must be [..., L, D]");
  }
};

/// Adds one positional table [L, D] to both branches.
template <typename Scalar>
BiTemporalPair<Scalar> add_positional(const BiTemporalPair<Scalar>& pair, const Tensor<Scalar>& pos) {
  if (pos.shape() != Shape{pair.t1.dim(-2), pair.t1.dim(-1)}) {
    throw ShapeError("positional table " + to_string(pos.shape()) + " does not match tokens " +
                     to_string(pair.t1.shape()));
  }
  return {add(pair.t1, pos), add(pair.t2, pos)};
}

namespace detail {

/// Stacks the branches on a new leading axis so shared-weight work runs once.
template <typename Scalar>
Tensor<Scalar> pack(const BiTemporalPair<Scalar>& pair) {
  Shape s = pair.t1.shape();
  s.insert(s.begin(), 1);
  return concat<Scalar>({reshape(pair.t1, s), reshape(pair.t2, s)}, 0);
}

template <typename Scalar>
BiTemporalPair<Scalar> unpack(const Tensor<Scalar>& packed) {
  Shape s(packed.shape().begin() + 1, packed.shape().end());
  return {reshape(slice(packed, 0, 0, 1), s), reshape(slice(packed, 0, 1, 1), s)};
}

}  // namespace detail

/// Token-wise interleave: [t1[0], t2[0], t1[1], t2[1], ...] along the sequence axis.
template <typename Scalar>
Tensor<Scalar> interleave(const BiTemporalPair<Scalar>& pair) {
  const Index len = pair.t1.dim(-2);
  std::vector<Index> index(static_cast<std::size_t>(2 * len));
  for (Index i = 0; i < len; ++i) {
    index[static_cast<std::size_t>(2 * i)] = i;
    index[static_cast<std::size_t>(2 * i + 1)] = len + i;
  }
  return select_rows(concat<Scalar>({pair.t1, pair.t2}, -2), std::move(index));
}

/// Inverse of interleave: even rows to t1, odd rows to t2.
template <typename Scalar>
BiTemporalPair<Scalar> deinterleave(const Tensor<Scalar>& s) {
  if (s.rank() < 2) throw ShapeError("deinterleave needs [..., 2L, D]");
  const Index total = s.dim(-2);
  if (total % 2 != 0) {
    throw ShapeError("deinterleave needs an even sequence length, got " + std::to_string(total));
  }
  std::vector<Index> even;
  std::vector<Index> odd;
  for (Index i = 0; i < total; i += 2) {
    even.push_back(i);
    odd.push_back(i + 1);
  }
  return {select_rows(s, std::move(even)), select_rows(s, std::move(odd))};
}

/// Spatial difference-aware block. Both branches share every weight.
template <typename Scalar>
struct SdSsmParams {
  LayerNorm<Scalar> norm;
  Linear<Scalar> in_proj;
  Tensor<Scalar> conv;  // [3, D]
  BidirectionalSsm<Scalar> ssm;
  Linear<Scalar> gate;
  Linear<Scalar> out_proj;

  static SdSsmParams init(Index d, Index n, Rng& rng, bool tie = false) {
    SdSsmParams p;
    p.norm = LayerNorm<Scalar>::init(d);
    p.in_proj = Linear<Scalar>::init(d, d, rng);
    p.conv = conv_kernel<Scalar>(3, d, rng);
    p.ssm = BidirectionalSsm<Scalar>::init(d, n, rng, tie);
    p.gate = Linear<Scalar>::init(d, d, rng);
    for (auto& v : p.gate.bias.raw()) v = Scalar(0);  // initial gate ~ 0.5
    p.out_proj = Linear<Scalar>::init(d, d, rng);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + ".norm", f);
    in_proj.visit(prefix + ".in_proj", f);
    f(prefix + ".conv", conv);
    ssm.visit(prefix + ".ssm", f);
    gate.visit(prefix + ".gate", f);
    out_proj.visit(prefix + ".out_proj", f);
  }
};

/// The multiplicative gate. Differential: one gate from t2 - t1 shared by both
/// branches, shape [..., L, D]. Self: per-branch gate from each branch's own
/// tokens, shape [2, ..., L, D].
template <typename Scalar>
Tensor<Scalar> sd_gate(const BiTemporalPair<Scalar>& pair, const Tensor<Scalar>& packed,
                       const SdSsmParams<Scalar>& p, GateVariant variant) {
  if (variant == GateVariant::differential) return sigmoid(p.gate(sub(pair.t2, pair.t1)));
  return sigmoid(p.gate(packed));
}

template <typename Scalar>
BiTemporalPair<Scalar> sd_ssm(const BiTemporalPair<Scalar>& pair, const SdSsmParams<Scalar>& p,
                              GateVariant variant) {
  auto packed = detail::pack(pair);
  auto inner = silu(depthwise_conv1d(p.in_proj(p.norm(packed)), p.conv));
  auto fwd = p.ssm.scan_forward(inner);
  auto bwd = p.ssm.scan_backward(inner);
  auto gate = sd_gate(pair, packed, p, variant);
  auto mixed = add(mul(fwd, gate), mul(bwd, gate));
  return detail::unpack(add(p.out_proj(mixed), packed));
}

/// Temporal-traversing block: a bidirectional SSM block over one joint sequence.
template <typename Scalar>
struct TtSsmParams {
  LayerNorm<Scalar> norm;
  Linear<Scalar> in_proj;
  Tensor<Scalar> conv;  // [3, D]; unused when the conv path is disabled
  bool use_conv = true;
  BidirectionalSsm<Scalar> ssm;
  Linear<Scalar> out_proj;

  static TtSsmParams init(Index d, Index n, Rng& rng, bool tie = false, bool with_conv = true) {
    TtSsmParams p;
    p.norm = LayerNorm<Scalar>::init(d);
    p.in_proj = Linear<Scalar>::init(d, d, rng);
    p.use_conv = with_conv;
    p.conv = with_conv ? conv_kernel<Scalar>(3, d, rng) : Tensor<Scalar>(Shape{0});
    p.ssm = BidirectionalSsm<Scalar>::init(d, n, rng, tie);
    p.out_proj = Linear<Scalar>::init(d, d, rng);
    return p;
  }

  /// Norm -> Linear -> (Dwc) -> SiLU -> forward + backward SSM -> Linear, plus residual.
  Tensor<Scalar> block(const Tensor<Scalar>& s) const {
    auto inner = in_proj(norm(s));
    if (use_conv) inner = depthwise_conv1d(inner, conv);
    inner = silu(inner);
    auto both = add(ssm.scan_forward(inner), ssm.scan_backward(inner));
    return add(out_proj(both), s);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + ".norm", f);
    in_proj.visit(prefix + ".in_proj", f);
    if (use_conv) f(prefix + ".conv", conv);
    ssm.visit(prefix + ".ssm", f);
    out_proj.visit(prefix + ".out_proj", f);
  }
};

template <typename Scalar>
BiTemporalPair<Scalar> tt_ssm(const BiTemporalPair<Scalar>& pair, const TtSsmParams<Scalar>& p,
                              TemporalVariant variant) {
  switch (variant) {
    case TemporalVariant::off:
      return pair;
    case TemporalVariant::interleave:
      return deinterleave(p.block(interleave(pair)));
    case TemporalVariant::length_concat: {
      const Index len = pair.t1.dim(-2);
      auto joint = p.block(concat<Scalar>({pair.t1, pair.t2}, -2));
      return {slice(joint, -2, 0, len), slice(joint, -2, len, len)};
    }
  }
  throw ContractError("unknown temporal variant");
}

/// Linear 2D -> D followed by a residual depthwise-conv + pointwise block.
template <typename Scalar>
struct ProjectionHead {
  Linear<Scalar> linear;
  Tensor<Scalar> conv;  // [3, D]
  Linear<Scalar> pointwise;

  static ProjectionHead init(Index d, Rng& rng) {
    return {Linear<Scalar>::init(2 * d, d, rng), conv_kernel<Scalar>(3, d, rng),
            Linear<Scalar>::init(d, d, rng)};
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& joint) const {
    auto z = linear(joint);
    return add(z, pointwise(depthwise_conv1d(z, conv)));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    linear.visit(prefix + ".linear", f);
    f(prefix + ".conv", conv);
    pointwise.visit(prefix + ".pointwise", f);
  }
};

template <typename Scalar>
struct CaMaLayer {
  SdSsmParams<Scalar> sd;
  TtSsmParams<Scalar> tt;
};

template <typename Scalar>
struct CaMaEncoder {
  CaMaStackConfig config;
  Tensor<Scalar> pos;  // [L, D], shared by both branches
  std::vector<CaMaLayer<Scalar>> layers;
  ProjectionHead<Scalar> head;

  static CaMaEncoder init(const CaMaStackConfig& cfg, Rng& rng) {
    cfg.validate();
    return init_unchecked(cfg, rng);
  }

  /// Like init() but allows num_layers = 0 (projection of the embedded tokens only).
  static CaMaEncoder init_unchecked(const CaMaStackConfig& cfg, Rng& rng) {
    CaMaEncoder e;
    e.config = cfg;
    e.pos = uniform_tensor<Scalar>({cfg.num_tokens, cfg.width}, 0.02, rng);
    for (int l = 0; l < cfg.num_layers; ++l) {
      e.layers.push_back({SdSsmParams<Scalar>::init(cfg.width, cfg.state_size, rng, cfg.tie_directions),
                          TtSsmParams<Scalar>::init(cfg.width, cfg.state_size, rng,
                                                    cfg.tie_directions, cfg.tt_conv)});
    }
    e.head = ProjectionHead<Scalar>::init(cfg.width, rng);
    return e;
  }

  /// Token features of both acquisitions after the CaMa stack, before projection.
  BiTemporalPair<Scalar> refine(const BiTemporalPair<Scalar>& pair) const {
    auto cur = add_positional(pair, pos);
    for (const auto& layer : layers) {
      cur = sd_ssm(cur, layer.sd, config.gate_variant);
      cur = tt_ssm(cur, layer.tt, config.temporal_variant);
    }
    return cur;
  }

  /// Visual embeddings [..., L, D] for the decoder.
  Tensor<Scalar> encode(const BiTemporalPair<Scalar>& pair) const {
    auto cur = refine(pair);
    return head(concat<Scalar>({cur.t1, cur.t2}, -1));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".pos", pos);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      layers[l].sd.visit(base + ".sd", f);
      layers[l].tt.visit(base + ".tt", f);
    }
    head.visit(prefix + ".head", f);
  }
};

}  // namespace cama
