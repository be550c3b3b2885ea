#include "cama/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cama/errors.hpp"
#include "cama/vocab.hpp"

namespace cama {

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<Tokens, int>;

void check_corpus(const Corpus& hyps, const ReferenceSets& refs) {
  if (hyps.empty()) throw ContractError("metric over an empty hypothesis list");
  if (hyps.size() != refs.size()) {
    throw ContractError("got " + std::to_string(hyps.size()) + " hypotheses but " +
                        std::to_string(refs.size()) + " reference sets");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty()) throw ContractError("hypothesis " + std::to_string(i) + " has no reference");
  }
}

NgramCounts ngrams(const Tokens& t, int n) {
  NgramCounts out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
    ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return out;
}

std::vector<Tokens> tokenize_all(const std::vector<std::string>& v) {
  std::vector<Tokens> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(tokenize(s));
  return out;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double meteor_pair(const Tokens& hyp, const Tokens& ref) {
  // greedy left-to-right exact alignment; (hyp position, ref position) per match
  std::vector<bool> used(ref.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> align;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == hyp[i]) {
        used[j] = true;
        align.emplace_back(i, j);
        break;
      }
    }
  }
  const double m = static_cast<double>(align.size());
  if (m == 0) return 0.0;
  // a chunk is a run of matches adjacent in both sentences
  double chunks = 1;
  for (std::size_t k = 1; k < align.size(); ++k) {
    if (align[k].first != align[k - 1].first + 1 || align[k].second != align[k - 1].second + 1) chunks += 1;
  }
  const double p = m / static_cast<double>(hyp.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = 10 * p * r / (r + 9 * p);
  return fmean * (1 - 0.5 * std::pow(chunks / m, 3));
}

}  // namespace

std::array<double, 4> bleu(const Corpus& hyps, const ReferenceSets& refs, int max_n) {
  check_corpus(hyps, refs);
  if (max_n < 1 || max_n > 4) throw ContractError("bleu supports n = 1..4");
  std::array<double, 4> clipped{}, total{};
  double hyp_len = 0;
  double ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const Tokens h = tokenize(hyps[i]);
    const auto rs = tokenize_all(refs[i]);
    hyp_len += static_cast<double>(h.size());
    std::size_t best = rs.front().size();
    for (const auto& r : rs) {
      const auto d = std::llabs(static_cast<long long>(r.size()) - static_cast<long long>(h.size()));
      const auto db = std::llabs(static_cast<long long>(best) - static_cast<long long>(h.size()));
      if (d < db || (d == db && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (int n = 1; n <= max_n; ++n) {
      const auto hc = ngrams(h, n);
      std::map<Tokens, int> max_ref;
      for (const auto& r : rs) {
        for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : hc) {
        auto it = max_ref.find(g);
        clipped[static_cast<std::size_t>(n - 1)] += std::min(c, it == max_ref.end() ? 0 : it->second);
        total[static_cast<std::size_t>(n - 1)] += c;
      }
    }
  }
  const double bp = hyp_len == 0 ? 0.0 : hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  std::array<double, 4> out{};
  double log_sum = 0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const auto k = static_cast<std::size_t>(n - 1);
    if (clipped[k] == 0 || total[k] == 0) zero = true;
    if (!zero) log_sum += std::log(clipped[k] / total[k]);
    out[k] = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / n);
  }
  return out;
}

double rouge_l(const Corpus& hyps, const ReferenceSets& refs, double beta) {
  check_corpus(hyps, refs);
  const double b2 = beta * beta;
  double sum = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const Tokens h = tokenize(hyps[i]);
    double best = 0;
    for (const auto& r : tokenize_all(refs[i])) {
      const double lcs = static_cast<double>(lcs_length(h, r));
      if (lcs == 0) continue;
      const double p = lcs / static_cast<double>(h.size());
      const double rec = lcs / static_cast<double>(r.size());
      best = std::max(best, (1 + b2) * p * rec / (rec + b2 * p));
    }
    sum += best;
  }
  return 100.0 * sum / static_cast<double>(hyps.size());
}

double cider_d(const Corpus& hyps, const ReferenceSets& refs) {
  check_corpus(hyps, refs);
  if (hyps.size() < 2) throw ContractError("CIDEr-D needs a corpus of at least 2 samples");
  constexpr int kMaxN = 4;
  constexpr double kSigma = 6.0;
  struct Doc {
    std::array<NgramCounts, kMaxN> counts;
    double length = 0;
  };
  auto doc_of = [](const Tokens& t) {
    Doc d;
    for (int n = 1; n <= kMaxN; ++n) d.counts[static_cast<std::size_t>(n - 1)] = ngrams(t, n);
    d.length = static_cast<double>(t.size());
    return d;
  };
  std::vector<Doc> hyp_docs;
  std::vector<std::vector<Doc>> ref_docs;
  std::map<Tokens, double> df;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    hyp_docs.push_back(doc_of(tokenize(hyps[i])));
    std::set<Tokens> seen;
    std::vector<Doc> rd;
    for (const auto& r : tokenize_all(refs[i])) {
      rd.push_back(doc_of(r));
      for (const auto& c : rd.back().counts) {
        for (const auto& [g, _] : c) seen.insert(g);
      }
    }
    for (const auto& g : seen) df[g] += 1;
    ref_docs.push_back(std::move(rd));
  }
  const double log_n = std::log(static_cast<double>(hyps.size()));
  using Vec = std::array<std::map<Tokens, double>, kMaxN>;
  auto weigh = [&](const Doc& d, std::array<double, kMaxN>& norms) {
    Vec v;
    for (int n = 0; n < kMaxN; ++n) {
      norms[static_cast<std::size_t>(n)] = 0;
      for (const auto& [g, tf] : d.counts[static_cast<std::size_t>(n)]) {
        auto it = df.find(g);
        const double w = tf * (log_n - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second)));
        v[static_cast<std::size_t>(n)][g] = w;
        norms[static_cast<std::size_t>(n)] += w * w;
      }
      norms[static_cast<std::size_t>(n)] = std::sqrt(norms[static_cast<std::size_t>(n)]);
    }
    return v;
  };
  double total = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    std::array<double, kMaxN> hn{};
    const Vec hv = weigh(hyp_docs[i], hn);
    double score = 0;
    for (const auto& rdoc : ref_docs[i]) {
      std::array<double, kMaxN> rn{};
      const Vec rv = weigh(rdoc, rn);
      const double delta = hyp_docs[i].length - rdoc.length;
      const double penalty = std::exp(-delta * delta / (2 * kSigma * kSigma));
      for (int n = 0; n < kMaxN; ++n) {
        const auto k = static_cast<std::size_t>(n);
        double val = 0;
        for (const auto& [g, w] : hv[k]) {
          auto it = rv[k].find(g);
          if (it != rv[k].end()) val += std::min(w, it->second) * it->second;
        }
        if (hn[k] != 0 && rn[k] != 0) val /= hn[k] * rn[k];
        score += val * penalty / kMaxN;
      }
    }
    total += 10.0 * score / static_cast<double>(ref_docs[i].size());
  }
  return 100.0 * total / static_cast<double>(hyps.size());
}

double meteor_simplified(const Corpus& hyps, const ReferenceSets& refs) {
  check_corpus(hyps, refs);
  double sum = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const Tokens h = tokenize(hyps[i]);
    double best = 0;
    for (const auto& r : tokenize_all(refs[i])) best = std::max(best, meteor_pair(h, r));
    sum += best;
  }
  return 100.0 * sum / static_cast<double>(hyps.size());
}

double s_star_m(double bleu4, double meteor, double rouge, double cider) {
  return (bleu4 + meteor + rouge + cider) / 4.0;
}

double exact_match_rate(const Corpus& hyps, const ReferenceSets& refs) {
  check_corpus(hyps, refs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const Tokens h = tokenize(hyps[i]);
    const auto rs = tokenize_all(refs[i]);
    if (std::find(rs.begin(), rs.end(), h) != rs.end()) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(hyps.size());
}

EvalReport evaluate_captions(const Corpus& hyps, const ReferenceSets& refs) {
  EvalReport r;
  r.bleu = bleu(hyps, refs);
  r.rouge_l = rouge_l(hyps, refs);
  r.meteor_simplified = meteor_simplified(hyps, refs);
  r.cider_d = cider_d(hyps, refs);
  r.s_star_m = s_star_m(r.bleu[3], r.meteor_simplified, r.rouge_l, r.cider_d);
  r.exact_match = exact_match_rate(hyps, refs);
  r.samples = hyps.size();
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["bleu_1"] = bleu[0];
  j["bleu_2"] = bleu[1];
  j["bleu_3"] = bleu[2];
  j["bleu_4"] = bleu[3];
  j["rouge_l"] = rouge_l;
  j["meteor_simplified"] = meteor_simplified;
  j["cider_d"] = cider_d;
  j["s_star_m"] = s_star_m;
  j["exact_match"] = exact_match;
  j["samples"] = samples;
  return j.dump(2);
}

std::string EvalReport::csv_header() {
  return "bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,meteor_simplified,cider_d,s_star_m,exact_match,samples";
}

std::string EvalReport::csv_row() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << bleu[0] << ',' << bleu[1] << ',' << bleu[2] << ',' << bleu[3] << ',' << rouge_l << ','
     << meteor_simplified << ',' << cider_d << ',' << s_star_m << ',' << exact_match << ',' << samples;
  return os.str();
}

}  // namespace cama
