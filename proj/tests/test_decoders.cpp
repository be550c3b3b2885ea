#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cama/decoders.hpp"
#include "cama/gradcheck.hpp"
#include "test_util.hpp"

using namespace cama;
using cama::testing::bitwise_equal;
using cama::testing::random_tensor;
using cama::testing::rows_bitwise_equal;

using T = Tensor<double>;

namespace {

const DecoderKind kKinds[] = {DecoderKind::mamba, DecoderKind::gpt_style, DecoderKind::cross_attention};

DecoderConfig small_config(DecoderKind kind, Index vocab = 12) {
  DecoderConfig cfg;
  cfg.kind = kind;
  cfg.width = 8;
  cfg.vocab_size = vocab;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.state_size = 4;
  cfg.max_positions = 16;
  return cfg;
}

}  // namespace

TEST_CASE("token causality is bitwise for every decoder kind") {
  Rng rng(1, "causal");
  for (auto kind : kKinds) {
    INFO(static_cast<int>(kind));
    auto dec = CaptionDecoder<double>::init(small_config(kind), rng);
    auto visual = random_tensor({5, 8}, rng);
    const std::vector<int> tokens{1, 4, 7, 9, 5, 6};
    auto base = dec.teacher_forced_logits(visual, tokens);
    CHECK(base.shape() == Shape{6, 12});
    for (std::size_t j = 1; j < tokens.size(); ++j) {
      auto changed = tokens;
      changed[j] = (changed[j] + 3) % 12;
      auto other = dec.teacher_forced_logits(visual, changed);
      CHECK(rows_bitwise_equal(base, other, 0, static_cast<Index>(j)));
      CHECK_FALSE(rows_bitwise_equal(base, other, static_cast<Index>(j), static_cast<Index>(j) + 1));
    }
    // every logit row depends on the visual input
    auto vis2 = visual.clone();
    vis2.raw()[3] += 0.5;
    auto moved = dec.teacher_forced_logits(vis2, tokens);
    for (Index r = 0; r < 6; ++r) CHECK_FALSE(rows_bitwise_equal(base, moved, r, r + 1));
  }
}

TEST_CASE("batched logits equal per-row logits") {
  Rng rng(2, "batch");
  for (auto kind : kKinds) {
    auto dec = CaptionDecoder<double>::init(small_config(kind), rng);
    auto visual = random_tensor({2, 5, 8}, rng);
    const std::vector<int> tokens{1, 4, 7, 1, 5, 0};
    auto batched = dec.teacher_forced_logits(visual, tokens, 2);
    CHECK(batched.shape() == Shape{2, 3, 12});
    for (Index b = 0; b < 2; ++b) {
      auto vis_b = reshape(slice(visual, 0, b, 1), {5, 8});
      const std::vector<int> row(tokens.begin() + b * 3, tokens.begin() + b * 3 + 3);
      auto single = dec.teacher_forced_logits(vis_b, row);
      CHECK(cama::testing::max_abs_diff(reshape(slice(batched, 0, b, 1), {3, 12}), single) <= 1e-12);
    }
  }
}

TEST_CASE("teacher forcing contracts") {
  Rng rng(3, "contract");
  auto dec = CaptionDecoder<double>::init(small_config(DecoderKind::cross_attention), rng);
  auto visual = random_tensor({4, 8}, rng);
  CHECK_THROWS_AS(dec.teacher_forced_logits(visual, std::vector<int>{}), ContractError);
  CHECK_THROWS_AS(dec.teacher_forced_logits(visual, std::vector<int>{5, 1}), ContractError);
  CHECK_THROWS_AS(dec.teacher_forced_logits(visual, std::vector<int>(17, 1)), ConfigError);
  DecoderConfig bad = small_config(DecoderKind::gpt_style);
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("cross-attention is invariant to permuting visual rows") {
  Rng rng(4, "perm");
  auto dec = CaptionDecoder<double>::init(small_config(DecoderKind::cross_attention), rng);
  auto visual = random_tensor({5, 8}, rng);
  auto perm = select_rows(visual, {3, 0, 4, 1, 2});
  const std::vector<int> tokens{1, 2, 9};
  CHECK(cama::testing::max_abs_diff(dec.teacher_forced_logits(visual, tokens), dec.teacher_forced_logits(perm, tokens)) <= 1e-12);
}

TEST_CASE("caption loss") {
  const std::vector<int> targets{4, 7, 2};
  auto logits = T::zeros({3, 40});
  CHECK(caption_loss(logits, targets).item() == doctest::Approx(std::log(40.0)).epsilon(1e-14));
  CHECK(std::log(40.0) == doctest::Approx(3.6889).epsilon(1e-4));

  auto sharp = T::zeros({3, 40});
  for (Index i = 0; i < 3; ++i) sharp.raw()[static_cast<std::size_t>(i * 40 + targets[static_cast<std::size_t>(i)])] = 80;
  CHECK(caption_loss(sharp, targets).item() < 1e-30);

  Rng rng(5, "loss");
  auto l3 = random_tensor({3, 40}, rng);
  auto l5 = concat<double>({l3, random_tensor({2, 40}, rng)}, 0);
  const std::vector<int> padded{4, 7, 2, Vocabulary::kPad, Vocabulary::kPad};
  CHECK(caption_loss(l5, padded).item() == caption_loss(l3, targets).item());
  CHECK(caption_loss(l3, targets).item() == softmax_cross_entropy(l3, targets).item());
  CHECK_THROWS_AS(caption_loss(l3, std::vector<int>(3, Vocabulary::kPad)), ContractError);
}

TEST_CASE("greedy decoding") {
  Rng rng(6, "greedy");
  for (auto kind : kKinds) {
    auto dec = CaptionDecoder<double>::init(small_config(kind), rng);
    auto visual = random_tensor({4, 8}, rng);
    auto a = greedy_decode(dec, visual, 6);
    auto b = greedy_decode(dec, visual, 6);
    CHECK(a == b);
    CHECK(a.front() == Vocabulary::kBos);
    CHECK(a.size() <= 7);

    // recompute-from-scratch oracle
    std::vector<int> chain{Vocabulary::kBos};
    for (int step = 0; step < 6; ++step) {
      auto logits = dec.teacher_forced_logits(visual, chain);
      auto row = logits.data().subspan(static_cast<std::size_t>(step * 12), 12);
      chain.push_back(argmax<double>(row));
      if (chain.back() == Vocabulary::kEos) break;
    }
    CHECK(chain == a);

    auto one = greedy_decode(dec, visual, 1);
    CHECK(one.size() == 2);
    CHECK(one[1] == a[1]);

    // an output bias that always prefers EOS stops after one step
    auto eos = dec;
    eos.out_proj.bias = T::zeros({12});
    eos.out_proj.bias.raw()[Vocabulary::kEos] = 1e6;
    CHECK(greedy_decode(eos, visual, 6) == std::vector<int>{Vocabulary::kBos, Vocabulary::kEos});
  }
  CHECK_THROWS_AS(greedy_decode(CaptionDecoder<double>::init(small_config(DecoderKind::mamba), rng), random_tensor({4, 8}, rng), 0), ContractError);
}

TEST_CASE("batched greedy decoding matches per-sample decoding") {
  Rng rng(7, "greedy-batch");
  for (auto kind : kKinds) {
    auto dec = CaptionDecoder<double>::init(small_config(kind), rng);
    auto visual = random_tensor({3, 4, 8}, rng);
    auto batch = greedy_decode_batch(dec, visual, 8);
    for (Index b = 0; b < 3; ++b) CHECK(batch[static_cast<std::size_t>(b)] == greedy_decode(dec, reshape(slice(visual, 0, b, 1), {4, 8}), 8));
  }
}

TEST_CASE("argmax ties go to the lowest id") {
  const std::vector<double> row{0.1, 0.9, 0.9, 0.2};
  CHECK(argmax<double>(row) == 1);
  const std::vector<double> flat(5, 0.0);
  CHECK(argmax<double>(flat) == 0);
}

TEST_CASE("Mamba LM block") {
  Rng rng(8, "mamba");
  auto cfg = small_config(DecoderKind::mamba);
  auto blk = MambaLmBlock<double>::init(cfg, rng);
  auto x = random_tensor({7, 8}, rng);
  auto base = mamba_lm_block(x, blk);
  for (Index j = 0; j < 7; ++j) {
    auto xp = x.clone();
    xp.raw()[static_cast<std::size_t>(j * 8 + 2)] += 0.3;
    CHECK(rows_bitwise_equal(base, mamba_lm_block(xp, blk), 0, j));
  }
  // zero input with zero biases leaves only the residual
  blk.visit("m", [](const std::string& name, T& t) {
    if (name.ends_with(".bias") || name.ends_with(".beta")) {
      for (auto& v : t.raw()) v = 0;
    }
  });
  auto zero = T::zeros({5, 8});
  CHECK(bitwise_equal(mamba_lm_block(zero, blk), zero));
}

TEST_CASE("one-block decoders match finite differences") {
  Rng rng(9, "dec-grad");
  for (auto kind : kKinds) {
    auto cfg = small_config(kind);
    cfg.blocks = 1;
    auto dec = CaptionDecoder<double>::init(cfg, rng);
    for (auto& blk : dec.mamba_blocks) {
      blk.ssm.delta_bias = random_tensor({blk.inner()}, rng, -0.5, 0.5);
      blk.ssm.a_log = random_tensor(blk.ssm.a_log.shape(), rng, -0.7, 0.7);
      blk.ssm.w_b = random_tensor(blk.ssm.w_b.shape(), rng);
      blk.ssm.w_c = random_tensor(blk.ssm.w_c.shape(), rng);
    }
    auto visual = random_tensor({3, 8}, rng);
    const std::vector<int> tokens{1, 5, 9, 3};
    const std::vector<int> targets{5, 9, 3, 2};
    std::vector<std::pair<std::string, T>> params{{"visual", visual}};
    dec.visit("dec", [&](const std::string& n, T& t) { params.emplace_back(n, t); });
    auto res = check_parameters([&]() { return caption_loss(dec.teacher_forced_logits(visual, tokens), targets); }, params);
    for (const auto& r : res) {
      INFO(r.name);
      CHECK(r.result.max_rel_err <= 1e-4);
    }
  }
}
