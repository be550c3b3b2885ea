#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cama/errors.hpp"
#include "cama/metrics.hpp"
#include "cama/rng.hpp"
#include "cama/vocab.hpp"
#include "cider_oracle.hpp"
#include "s_star_rows.hpp"

using namespace cama;

TEST_CASE("BLEU fixtures") {
  auto same = bleu({"the cat sat on the mat"}, {{"the cat sat on the mat"}});
  for (double b : same) CHECK(b == doctest::Approx(100.0).epsilon(1e-12));
  auto rep = bleu({"a a a"}, {{"a b"}});
  CHECK(rep[0] == doctest::Approx(33.33).epsilon(1e-4));
  // zero matched n-grams at some order gives 0 without smoothing
  CHECK(rep[1] == 0.0);

  // corpus aggregation differs from the mean of sentence scores
  const Corpus hyps{"a b c d", "x y"};
  const ReferenceSets refs{{"a b c d"}, {"x z"}};
  const double corpus = bleu(hyps, refs)[1];
  const double mean = 0.5 * (bleu({hyps[0]}, {refs[0]})[1] + bleu({hyps[1]}, {refs[1]})[1]);
  CHECK(std::abs(corpus - mean) > 1.0);
  // hand value: bigram matches 3 of 4 over 3 + 1 candidate bigrams, unigrams 5 of 6, BP 1
  CHECK(corpus == doctest::Approx(100.0 * std::sqrt(5.0 / 6.0 * 3.0 / 4.0)).epsilon(1e-12));

  // brevity penalty against the closest reference length
  auto short_hyp = bleu({"a b"}, {{"a b c d", "a b c d e f g"}});
  CHECK(short_hyp[0] == doctest::Approx(100.0 * std::exp(1.0 - 4.0 / 2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(bleu({}, {}), ContractError);
}

TEST_CASE("ROUGE-L fixtures") {
  CHECK(rouge_l({"a b c"}, {{"a b c"}}) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(rouge_l({"a b"}, {{"c d"}}) == 0.0);
  // LCS 2, P = 2/3, R = 1, beta = 1.2
  const double p = 2.0 / 3.0, r = 1.0, b2 = 1.44;
  const double f = (1 + b2) * p * r / (r + b2 * p);
  CHECK(100 * f == doctest::Approx(82.99).epsilon(1e-4));
  CHECK(rouge_l({"a b c"}, {{"a c"}}) == doctest::Approx(100 * f).epsilon(1e-12));
  CHECK(rouge_l({"a b c"}, {{"x", "a c"}}) == doctest::Approx(100 * f).epsilon(1e-12));
}

TEST_CASE("METEOR (exact-match simplification)") {
  CHECK(meteor_simplified({"a b c d"}, {{"a b c d"}}) == doctest::Approx(99.21875).epsilon(1e-12));
  CHECK(meteor_simplified({"a b c d"}, {{"e f g h"}}) == 0.0);
  const double ordered = meteor_simplified({"the red house is new"}, {{"the red house is new"}});
  const double scrambled = meteor_simplified({"new is house red the"}, {{"the red house is new"}});
  CHECK(scrambled < ordered);
}

TEST_CASE("CIDEr-D matches a brute-force implementation on small corpora") {
  const Corpus words{"a", "house", "road", "two", "new", "the", "in", "center", "trees", "added"};
  Rng rng(5, "cider");
  auto sentence = [&]() {
    std::string s;
    const auto len = 1 + rng.below(7);
    for (std::uint64_t i = 0; i < len; ++i) s += (i ? " " : "") + words[rng.below(words.size())];
    return s;
  };
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.below(4);
    Corpus hyps;
    ReferenceSets refs;
    for (std::size_t i = 0; i < n; ++i) {
      hyps.push_back(sentence());
      refs.emplace_back();
      for (std::uint64_t k = 0; k < 1 + rng.below(4); ++k) refs.back().push_back(sentence());
    }
    CHECK(std::abs(cider_d(hyps, refs) - cama::testing::brute_force_cider(hyps, refs)) <= 1e-9);
  }
  // two-sample hand-sized corpus
  const Corpus hyps{"two houses added", "the scene is the same"};
  const ReferenceSets refs{{"two houses added", "two new houses"}, {"the scene is the same", "nothing changed"}};
  CHECK(std::abs(cider_d(hyps, refs) - cama::testing::brute_force_cider(hyps, refs)) <= 1e-9);
  CHECK_THROWS_AS(cider_d({"a"}, {{"a"}}), ContractError);
}

TEST_CASE("CIDEr-D self-consistency") {
  const ReferenceSets refs{{"a red house", "a red house"}, {"two roads", "two roads"}, {"no change", "no change"}};
  const Corpus perfect{"a red house", "two roads", "no change"};
  const double best = cider_d(perfect, refs);
  CHECK(best > 0);
  CHECK(cider_d({"a red road", "two roads", "no change"}, refs) < best);
}

TEST_CASE("metric ranges and order invariance") {
  Corpus hyps{"a b c", "d e", "f g h i", "a a"};
  ReferenceSets refs{{"a b", "c b a"}, {"d e f"}, {"f g h i"}, {"b", "a c"}};
  const auto r1 = evaluate_captions(hyps, refs);
  std::reverse(hyps.begin(), hyps.end());
  std::reverse(refs.begin(), refs.end());
  const auto r2 = evaluate_captions(hyps, refs);
  for (int n = 0; n < 4; ++n) CHECK(r1.bleu[static_cast<std::size_t>(n)] == doctest::Approx(r2.bleu[static_cast<std::size_t>(n)]).epsilon(1e-12));
  CHECK(r1.rouge_l == doctest::Approx(r2.rouge_l).epsilon(1e-12));
  CHECK(r1.meteor_simplified == doctest::Approx(r2.meteor_simplified).epsilon(1e-12));
  CHECK(r1.cider_d == doctest::Approx(r2.cider_d).epsilon(1e-12));
  for (double v : {r1.bleu[0], r1.bleu[3], r1.rouge_l, r1.meteor_simplified}) {
    CHECK(v >= 0);
    CHECK(v <= 100);
  }
  CHECK(r1.cider_d >= 0);
  CHECK(r1.cider_d <= 1000);
  CHECK(r1.exact_match == doctest::Approx(25.0));
  CHECK(r1.s_star_m == doctest::Approx(s_star_m(r1.bleu[3], r1.meteor_simplified, r1.rouge_l, r1.cider_d)).epsilon(1e-15));
}

TEST_CASE("corpus contracts") {
  CHECK_THROWS_AS(rouge_l({"a"}, {}), ContractError);
  CHECK_THROWS_AS(meteor_simplified({"a"}, {{}}), ContractError);
}

TEST_CASE("tokenization lowercases and strips terminal punctuation") {
  CHECK(tokenize("Two Houses,  added.") == std::vector<std::string>{"two", "houses", "added"});
  CHECK(bleu({"Two houses."}, {{"two houses"}})[1] == doctest::Approx(100.0));
}

TEST_CASE("S*_m reproduces every published table row") {
  CHECK(s_star_m(0, 0, 0, 0) == 0.0);
  for (const auto& row : kPublishedRows) {
    INFO(row.label);
    const double got = s_star_m(row.bleu4, row.meteor, row.rouge_l, row.cider_d);
    CHECK(std::abs(got - row.published) <= kSStarTolerance);
  }
}

TEST_CASE("report serialization") {
  const auto r = evaluate_captions({"a b", "c d"}, {{"a b"}, {"c e"}});
  const auto j = nlohmann::json::parse(r.to_json());
  for (const char* k : {"bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor_simplified", "cider_d", "s_star_m"}) {
    CHECK(j.contains(k));
  }
  CHECK(j["samples"] == 2);
  const auto header = EvalReport::csv_header();
  const auto row = r.csv_row();
  CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
}
