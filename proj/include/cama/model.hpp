#pragma once

// Full captioner: patch embedding -> CaMa encoder -> caption decoder.

#include <string>
#include <vector>

#include "cama/decoders.hpp"
#include "cama/encoder.hpp"
#include "cama/errors.hpp"
#include "cama/nn.hpp"
#include "cama/ops.hpp"
#include "cama/tensor.hpp"

namespace cama {

/// Non-overlapping P x P patches of images [..., H, W, 1] flattened to [..., L, P*P],
/// row-major over the patch grid.
template <typename Scalar>
Tensor<Scalar> extract_patches(const Tensor<Scalar>& image, Index patch) {
  if (image.rank() < 3 || image.dim(-1) != 1) {
    throw ShapeError("expected single-channel images [..., H, W, 1], got " + to_string(image.shape()));
  }
  const Index h = image.dim(-3);
  const Index w = image.dim(-2);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by patch size " + std::to_string(patch));
  }
  Shape lead(image.shape().begin(), image.shape().end() - 3);
  const Index batch = numel_of(lead);
  auto grid = reshape(image, {batch, h / patch, patch, w / patch, patch});
  auto tiles = permute(grid, {0, 1, 3, 2, 4});
  Shape out = lead;
  out.push_back((h / patch) * (w / patch));
  out.push_back(patch * patch);
  return reshape(tiles, out);
}

template <typename Scalar>
struct PatchEmbed {
  Index patch = 8;
  Linear<Scalar> proj;  // P*P -> D

  static PatchEmbed init(Index patch_size, Index d, Rng& rng) {
    return {patch_size, Linear<Scalar>::init(patch_size * patch_size, d, rng)};
  }

  /// [..., H, W, 1] -> [..., L, D]
  Tensor<Scalar> operator()(const Tensor<Scalar>& image) const { return proj(extract_patches(image, patch)); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    proj.visit(prefix + ".proj", f);
  }
};

template <typename Scalar>
Tensor<Scalar> patch_embed(const Tensor<Scalar>& image, const PatchEmbed<Scalar>& params) {
  return params(image);
}

struct ModelConfig {
  CaMaStackConfig encoder;
  DecoderConfig decoder;
  Index image_size = 32;
  Index patch = 8;

  void validate() const {
    if (patch < 1 || image_size % patch != 0) throw ConfigError("image size must be divisible by patch size");
    if (encoder.num_tokens != (image_size / patch) * (image_size / patch)) {
      throw ConfigError("token count does not match the patch grid");
    }
    if (decoder.width != encoder.width) throw ConfigError("decoder width must equal encoder width");
    if (decoder.kind != encoder.decoder_kind) throw ConfigError("decoder kind mismatch");
    encoder.validate();
    decoder.validate();
  }
};

template <typename Scalar>
struct CaptionModel {
  ModelConfig config;
  PatchEmbed<Scalar> embed;
  CaMaEncoder<Scalar> encoder;
  CaptionDecoder<Scalar> decoder;

  static CaptionModel init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    CaptionModel m;
    m.config = cfg;
    auto r_embed = rng.split("patch_embed");
    auto r_enc = rng.split("encoder");
    auto r_dec = rng.split("decoder");
    m.embed = PatchEmbed<Scalar>::init(cfg.patch, cfg.encoder.width, r_embed);
    m.encoder = CaMaEncoder<Scalar>::init(cfg.encoder, r_enc);
    m.decoder = CaptionDecoder<Scalar>::init(cfg.decoder, r_dec);
    return m;
  }

  /// Images [B, H, W, 1] per acquisition -> visual embeddings [B, L, D].
  Tensor<Scalar> visual(const Tensor<Scalar>& t1, const Tensor<Scalar>& t2) const {
    return encoder.encode(BiTemporalPair<Scalar>(embed(t1), embed(t2)));
  }

  /// Logits [B, T, V] for token rows [B, T].
  Tensor<Scalar> logits(const Tensor<Scalar>& t1, const Tensor<Scalar>& t2, std::span<const int> tokens,
                        Index batch) const {
    return decoder.teacher_forced_logits(visual(t1, t2), tokens, batch);
  }

  std::vector<std::vector<int>> caption(const Tensor<Scalar>& t1, const Tensor<Scalar>& t2, Index max_len) const {
    NoTapeScope<Scalar> off;
    return greedy_decode_batch(decoder, visual(t1, t2), max_len);
  }

  template <typename F>
  void visit(F&& f) {
    embed.visit("embed", f);
    encoder.visit("encoder", f);
    decoder.visit("decoder", f);
  }
};

}  // namespace cama
