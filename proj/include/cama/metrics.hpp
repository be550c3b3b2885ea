#pragma once

// Caption metrics on the table scale (x100). Sentences are tokenized with tokenize():
// lowercase, whitespace split, terminal punctuation stripped.

#include <array>
#include <string>
#include <vector>

namespace cama {

using Corpus = std::vector<std::string>;
using ReferenceSets = std::vector<std::vector<std::string>>;

/// Corpus BLEU-1..4: clipped n-gram precision, geometric mean, brevity penalty with the
/// closest reference length (ties -> shorter). No smoothing.
std::array<double, 4> bleu(const Corpus& hyps, const ReferenceSets& refs, int max_n = 4);

/// LCS F-measure (1 + b^2) P R / (R + b^2 P), best reference, corpus mean.
double rouge_l(const Corpus& hyps, const ReferenceSets& refs, double beta = 1.2);

/// CIDEr-D with document frequencies over the reference sets, Gaussian length penalty
/// (sigma 6), clipped tf-idf weights and the x10 factor; reported x100. Needs >= 2 samples.
double cider_d(const Corpus& hyps, const ReferenceSets& refs);

/// Exact-unigram METEOR: Fmean = 10PR / (R + 9P), penalty 0.5 (chunks / matches)^3,
/// best reference, corpus mean.
double meteor_simplified(const Corpus& hyps, const ReferenceSets& refs);

/// Mean of BLEU-4, METEOR, ROUGE_L and CIDEr-D.
double s_star_m(double bleu4, double meteor, double rouge, double cider);

/// Percentage of hypotheses equal (as token lists) to at least one of their references.
double exact_match_rate(const Corpus& hyps, const ReferenceSets& refs);

struct EvalReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0;
  double meteor_simplified = 0;
  double cider_d = 0;
  double s_star_m = 0;
  double exact_match = 0;
  std::size_t samples = 0;

  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

EvalReport evaluate_captions(const Corpus& hyps, const ReferenceSets& refs);

}  // namespace cama
