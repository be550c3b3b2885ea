#pragma once

// Language decoders turning visual embeddings [B, L, D] into caption logits.
//
//   mamba            [visual ; words] through causal selective-scan blocks
//   gpt_style        [visual ; words] through causal self-attention blocks
//   cross_attention  words through causal self-attention + cross-attention on visual
//
// For every kind, logits at word position t depend only on the visual rows and on
// words 0..t.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cama/encoder.hpp"
#include "cama/errors.hpp"
#include "cama/nn.hpp"
#include "cama/ops.hpp"
#include "cama/ssm.hpp"
#include "cama/tensor.hpp"
#include "cama/vocab.hpp"

namespace cama {

struct DecoderConfig {
  DecoderKind kind = DecoderKind::cross_attention;
  Index width = 128;
  Index vocab_size = 0;
  int blocks = 2;
  int heads = 4;
  Index max_positions = 32;
  Index state_size = 16;
  int expand = 2;
  Index mamba_conv = 4;
  int ffn_mult = 4;

  void validate() const {
    if (vocab_size < 4) throw ConfigError("decoder vocabulary must include the 4 specials");
    if (blocks < 1 || heads < 1 || width % heads != 0) {
      throw ConfigError("decoder needs >= 1 block and width divisible by heads");
    }
    if (max_positions < 1 || expand < 1 || mamba_conv < 1) throw ConfigError("invalid decoder sizes");
  }
};

/// Additive mask [T, S]: 0 where key j is visible from query i (j <= i + offset), -inf otherwise.
template <typename Scalar>
Tensor<Scalar> causal_mask(Index queries, Index keys, Index offset = 0) {
  Tensor<Scalar> m({queries, keys});
  for (Index i = 0; i < queries; ++i) {
    for (Index j = 0; j < keys; ++j) {
      if (j > i + offset) m.raw()[static_cast<std::size_t>(i * keys + j)] = -std::numeric_limits<Scalar>::infinity();
    }
  }
  return m;
}

template <typename Scalar>
struct MultiHeadAttention {
  Linear<Scalar> q, k, v, o;
  int heads = 1;

  static MultiHeadAttention init(Index d, int h, Rng& rng) {
    // no key bias: it shifts every score of a query equally and cancels in the softmax
    return {Linear<Scalar>::init(d, d, rng), Linear<Scalar>::init(d, d, rng, false),
            Linear<Scalar>::init(d, d, rng), Linear<Scalar>::init(d, d, rng), h};
  }

  /// query [B, T, D] attends over memory [B, S, D]; mask is [T, S] additive or null.
  Tensor<Scalar> operator()(const Tensor<Scalar>& query, const Tensor<Scalar>& memory,
                            const Tensor<Scalar>* mask) const {
    const Index b = query.dim(0);
    const Index t = query.dim(1);
    const Index s = memory.dim(1);
    const Index d = query.dim(2);
    const Index dh = d / heads;
    auto split = [&](const Tensor<Scalar>& x, Index len) {
      return permute(reshape(x, {b, len, heads, dh}), {0, 2, 1, 3});  // [B, H, len, dh]
    };
    auto qh = split(q(query), t);
    auto kh = split(k(memory), s);
    auto vh = split(v(memory), s);
    auto scores = scale(matmul(qh, transpose(kh)), Scalar(1) / std::sqrt(static_cast<Scalar>(dh)));
    if (mask != nullptr) scores = add(scores, *mask);
    auto ctx = matmul(softmax(scores), vh);  // [B, H, T, dh]
    return o(reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d}));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    q.visit(prefix + ".q", f);
    k.visit(prefix + ".k", f);
    v.visit(prefix + ".v", f);
    o.visit(prefix + ".o", f);
  }
};

/// Pre-norm attention block; the cross-attention sublayer is present only for the
/// cross_attention decoder.
template <typename Scalar>
struct AttentionBlock {
  LayerNorm<Scalar> ln_self;
  MultiHeadAttention<Scalar> self_attn;
  bool has_cross = false;
  LayerNorm<Scalar> ln_cross;
  MultiHeadAttention<Scalar> cross_attn;
  LayerNorm<Scalar> ln_ff;
  Linear<Scalar> ff_in;
  Linear<Scalar> ff_out;

  static AttentionBlock init(const DecoderConfig& cfg, bool cross, Rng& rng) {
    AttentionBlock blk;
    blk.ln_self = LayerNorm<Scalar>::init(cfg.width);
    blk.self_attn = MultiHeadAttention<Scalar>::init(cfg.width, cfg.heads, rng);
    blk.has_cross = cross;
    if (cross) {
      blk.ln_cross = LayerNorm<Scalar>::init(cfg.width);
      blk.cross_attn = MultiHeadAttention<Scalar>::init(cfg.width, cfg.heads, rng);
    }
    blk.ln_ff = LayerNorm<Scalar>::init(cfg.width);
    blk.ff_in = Linear<Scalar>::init(cfg.width, cfg.ffn_mult * cfg.width, rng);
    blk.ff_out = Linear<Scalar>::init(cfg.ffn_mult * cfg.width, cfg.width, rng);
    return blk;
  }

  Tensor<Scalar> operator()(Tensor<Scalar> x, const Tensor<Scalar>* visual,
                            const Tensor<Scalar>& mask) const {
    auto n = ln_self(x);
    x = add(x, self_attn(n, n, &mask));
    if (has_cross) x = add(x, cross_attn(ln_cross(x), *visual, nullptr));
    return add(x, ff_out(silu(ff_in(ln_ff(x)))));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ln_self.visit(prefix + ".ln_self", f);
    self_attn.visit(prefix + ".self_attn", f);
    if (has_cross) {
      ln_cross.visit(prefix + ".ln_cross", f);
      cross_attn.visit(prefix + ".cross_attn", f);
    }
    ln_ff.visit(prefix + ".ln_ff", f);
    ff_in.visit(prefix + ".ff_in", f);
    ff_out.visit(prefix + ".ff_out", f);
  }
};

/// Causal selective-scan LM block:
/// Norm -> Linear(D -> 2E) split main/gate -> causal Dwc(main) -> SiLU -> scan
///      -> * SiLU(gate) -> Linear(E -> D) -> + residual
template <typename Scalar>
struct MambaLmBlock {
  LayerNorm<Scalar> norm;
  Linear<Scalar> in_proj;
  Tensor<Scalar> conv;  // [k, E]
  SelectiveSsmParams<Scalar> ssm;
  Linear<Scalar> out_proj;

  static MambaLmBlock init(const DecoderConfig& cfg, Rng& rng) {
    const Index inner = cfg.expand * cfg.width;
    MambaLmBlock blk;
    blk.norm = LayerNorm<Scalar>::init(cfg.width);
    blk.in_proj = Linear<Scalar>::init(cfg.width, 2 * inner, rng);
    blk.conv = conv_kernel<Scalar>(cfg.mamba_conv, inner, rng);
    blk.ssm = SelectiveSsmParams<Scalar>::init(inner, cfg.state_size, rng);
    blk.out_proj = Linear<Scalar>::init(inner, cfg.width, rng);
    return blk;
  }

  Index inner() const { return conv.dim(1); }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    auto both = in_proj(norm(x));
    auto main = slice(both, -1, 0, inner());
    auto gate = slice(both, -1, inner(), inner());
    auto u = silu(depthwise_conv1d(main, conv, ConvPadding::causal));
    auto y = mul(run_selective_ssm(u, ssm), silu(gate));
    return add(x, out_proj(y));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + ".norm", f);
    in_proj.visit(prefix + ".in_proj", f);
    f(prefix + ".conv", conv);
    ssm.visit(prefix + ".ssm", f);
    out_proj.visit(prefix + ".out_proj", f);
  }
};

template <typename Scalar>
Tensor<Scalar> mamba_lm_block(const Tensor<Scalar>& x, const MambaLmBlock<Scalar>& params) {
  return params(x);
}

template <typename Scalar>
struct CaptionDecoder {
  DecoderConfig config;
  Tensor<Scalar> word_embed;  // [V, D]
  Tensor<Scalar> pos_embed;   // [max_positions, D]; attention decoders only
  std::vector<AttentionBlock<Scalar>> attn_blocks;
  std::vector<MambaLmBlock<Scalar>> mamba_blocks;
  LayerNorm<Scalar> final_norm;
  Linear<Scalar> out_proj;

  static CaptionDecoder init(const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    CaptionDecoder dec;
    dec.config = cfg;
    dec.word_embed = uniform_tensor<Scalar>({cfg.vocab_size, cfg.width}, 1.0, rng);
    if (cfg.kind == DecoderKind::mamba) {
      for (int i = 0; i < cfg.blocks; ++i) dec.mamba_blocks.push_back(MambaLmBlock<Scalar>::init(cfg, rng));
    } else {
      dec.pos_embed = uniform_tensor<Scalar>({cfg.max_positions, cfg.width}, 0.02, rng);
      const bool cross = cfg.kind == DecoderKind::cross_attention;
      for (int i = 0; i < cfg.blocks; ++i) dec.attn_blocks.push_back(AttentionBlock<Scalar>::init(cfg, cross, rng));
    }
    dec.final_norm = LayerNorm<Scalar>::init(cfg.width);
    dec.out_proj = Linear<Scalar>::init(cfg.width, cfg.vocab_size, rng);
    return dec;
  }

  /// Logits [B, T, V] for word ids [B, T] (row-major), each row starting with BOS.
  /// A rank-2 visual [L, D] is treated as B = 1 and yields [T, V].
  Tensor<Scalar> teacher_forced_logits(const Tensor<Scalar>& visual, std::span<const int> tokens,
                                       Index batch = 1) const {
    if (tokens.empty()) throw ContractError("teacher forcing needs at least one token");
    if (batch < 1 || static_cast<Index>(tokens.size()) % batch != 0) {
      throw ShapeError("token buffer does not split into " + std::to_string(batch) + " rows");
    }
    const Index steps = static_cast<Index>(tokens.size()) / batch;
    for (Index b = 0; b < batch; ++b) {
      if (tokens[static_cast<std::size_t>(b * steps)] != Vocabulary::kBos) {
        throw ContractError("token row " + std::to_string(b) + " does not start with BOS");
      }
    }
    const bool single = visual.rank() == 2;
    Tensor<Scalar> vis = single ? reshape(visual, {1, visual.dim(0), visual.dim(1)}) : visual;
    if (vis.rank() != 3 || vis.dim(0) != batch || vis.dim(2) != config.width) {
      throw ShapeError("visual embeddings " + to_string(visual.shape()) + " do not match batch " +
                       std::to_string(batch) + " and width " + std::to_string(config.width));
    }
    const Index vis_len = vis.dim(1);
    auto words = embedding(word_embed, tokens, {batch, steps});
    Tensor<Scalar> h;
    Index offset = 0;  // index of the first word position in h
    switch (config.kind) {
      case DecoderKind::cross_attention: {
        h = add(words, positions(steps));
        const auto mask = causal_mask<Scalar>(steps, steps);
        for (const auto& blk : attn_blocks) h = blk(h, &vis, mask);
        break;
      }
      case DecoderKind::gpt_style: {
        h = concat<Scalar>({vis, add(words, positions(steps))}, -2);
        const auto mask = causal_mask<Scalar>(vis_len + steps, vis_len + steps);
        for (const auto& blk : attn_blocks) h = blk(h, nullptr, mask);
        offset = vis_len;
        break;
      }
      case DecoderKind::mamba: {
        h = concat<Scalar>({vis, words}, -2);
        for (const auto& blk : mamba_blocks) h = blk(h);
        offset = vis_len;
        break;
      }
    }
    if (offset > 0) h = slice(h, -2, offset, steps);
    auto logits = out_proj(final_norm(h));
    return single ? reshape(logits, {steps, config.vocab_size}) : logits;
  }

  Tensor<Scalar> teacher_forced_logits(const Tensor<Scalar>& visual, const std::vector<int>& tokens) const {
    return teacher_forced_logits(visual, std::span<const int>(tokens), 1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".word_embed", word_embed);
    if (config.kind != DecoderKind::mamba) f(prefix + ".pos_embed", pos_embed);
    for (std::size_t i = 0; i < attn_blocks.size(); ++i) attn_blocks[i].visit(prefix + ".block" + std::to_string(i), f);
    for (std::size_t i = 0; i < mamba_blocks.size(); ++i) mamba_blocks[i].visit(prefix + ".block" + std::to_string(i), f);
    final_norm.visit(prefix + ".final_norm", f);
    out_proj.visit(prefix + ".out_proj", f);
  }

 private:
  Tensor<Scalar> positions(Index steps) const {
    if (steps > config.max_positions) {
      throw ConfigError("caption of " + std::to_string(steps) + " tokens exceeds " +
                        std::to_string(config.max_positions) + " decoder positions");
    }
    return slice(pos_embed, 0, 0, steps);
  }
};

/// Mean NLL over non-PAD targets; logits [..., T, V], targets flattened to match.
template <typename Scalar>
Tensor<Scalar> caption_loss(const Tensor<Scalar>& logits, std::span<const int> targets) {
  const Index v = logits.dim(-1);
  return softmax_cross_entropy(reshape(logits, {logits.numel() / v, v}), targets, Vocabulary::kPad);
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Scalar>
int argmax(std::span<const Scalar> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

/// Greedy decoding of a batch of visual embeddings [B, L, D]. Each output starts with
/// BOS and holds at most max_len generated ids, ending at the first EOS.
template <typename Scalar>
std::vector<std::vector<int>> greedy_decode_batch(const CaptionDecoder<Scalar>& dec,
                                                  const Tensor<Scalar>& visual, Index max_len) {
  if (max_len < 1) throw ContractError("greedy decoding needs max_len >= 1");
  NoTapeScope<Scalar> no_tape;
  const Index batch = visual.dim(0);
  const Index vocab = dec.config.vocab_size;
  std::vector<std::vector<int>> seqs(static_cast<std::size_t>(batch), std::vector<int>{Vocabulary::kBos});
  std::vector<bool> done(static_cast<std::size_t>(batch), false);
  for (Index step = 0; step < max_len; ++step) {
    // finished rows are padded so the batch stays rectangular; causality keeps them inert
    std::vector<int> tokens;
    tokens.reserve(static_cast<std::size_t>(batch * (step + 1)));
    for (const auto& s : seqs) {
      tokens.insert(tokens.end(), s.begin(), s.end());
      tokens.insert(tokens.end(), static_cast<std::size_t>(step + 1) - s.size(), Vocabulary::kPad);
    }
    auto logits = dec.teacher_forced_logits(visual, tokens, batch);
    bool all_done = true;
    for (Index b = 0; b < batch; ++b) {
      if (done[static_cast<std::size_t>(b)]) continue;
      auto row = logits.data().subspan(static_cast<std::size_t>((b * (step + 1) + step) * vocab),
                                       static_cast<std::size_t>(vocab));
      const int next = argmax<Scalar>(row);
      seqs[static_cast<std::size_t>(b)].push_back(next);
      if (next == Vocabulary::kEos) {
        done[static_cast<std::size_t>(b)] = true;
      } else {
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return seqs;
}

template <typename Scalar>
std::vector<int> greedy_decode(const CaptionDecoder<Scalar>& dec, const Tensor<Scalar>& visual,
                               Index max_len) {
  const Tensor<Scalar> vis = visual.rank() == 2 ? reshape(visual, {1, visual.dim(0), visual.dim(1)}) : visual;
  return greedy_decode_batch(dec, vis, max_len).front();
}

}  // namespace cama
