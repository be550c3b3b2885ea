// Acceptance suite: one PASS/WARN/FAIL line per criterion. Exit status 1 if any criterion fails.
//
//   acceptance [--only 1,4,9] [--work DIR] [--keep]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

#include <CLI11.hpp>

#include "cama/decoders.hpp"
#include "cama/encoder.hpp"
#include "cama/experiments.hpp"
#include "cama/fsutil.hpp"
#include "cama/gradcheck_suites.hpp"
#include "cama/metrics.hpp"
#include "cama/ssm.hpp"
#include "cama/training.hpp"
#include "cider_oracle.hpp"
#include "s_star_rows.hpp"
#include "test_util.hpp"

using namespace cama;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

enum class Verdict { pass, warn, fail };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

Outcome judge(bool ok, std::string detail) { return {ok ? Verdict::pass : Verdict::fail, std::move(detail)}; }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double wall_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Reduced training budget for the ablation runs (see the README).
constexpr int kAblationTrain = 600;
constexpr int kAblationEpochs = 12;

struct Context {
  fs::path work;

  // Dataset of the end-to-end criterion, generated once.
  fs::path full_data() {
    const auto dir = work / "data-2000";
    if (!fs::exists(dir / "vocab.txt")) save_dataset(build_dataset(2000, 200, 200, 7), dir);
    return dir;
  }
  fs::path ablation_data() {
    const auto dir = work / "data-ablation";
    if (!fs::exists(dir / "vocab.txt")) save_dataset(build_dataset(kAblationTrain, 200, 200, 7), dir);
    return dir;
  }
};

Outcome gradient_correctness(Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream os;
  bool ok = true;
  for (const auto& scope : gradcheck_scopes()) {
    double worst = 0;
    for (const auto& c : run_gradcheck(scope)) {
      worst = std::max(worst, c.max_rel_err);
      ok = ok && c.passed();
    }
    os << scope << " " << fmt(worst, 2) << " (<= " << fmt(gradcheck_threshold(scope), 1) << "), ";
  }
  const double wall = wall_since(t0);
  os << "runtime " << fmt(wall, 3) << " s";
  return judge(ok && wall < 300, os.str());
}

Outcome scan_equivalence(Context&) {
  double worst = 0;
  for (Index len : {1, 2, 63, 64, 1024}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) worst = std::max(worst, scan_equivalence_error(len, 1000 * static_cast<std::uint64_t>(len) + seed));
  }
  Rng rng(3, "acceptance/assoc");
  double assoc = 0;
  for (int i = 0; i < 10000; ++i) {
    auto draw = [&]() { return ScanElement<double>{rng.uniform(-1.5, 1.5), rng.uniform(-2, 2)}; };
    const auto x = draw(), y = draw(), z = draw();
    const auto l = combine(combine(x, y), z);
    const auto r = combine(x, combine(y, z));
    assoc = std::max({assoc, std::abs(l.a - r.a), std::abs(l.b - r.b)});
  }
  return judge(worst <= 1e-10 && assoc <= 1e-12,
               "max |par - seq| " + fmt(worst, 3) + " over 100 instances; associativity " + fmt(assoc, 3));
}

Outcome zoh_sanity(Context&) {
  const auto a = T::from({1, 1}, {-1.0});
  const auto b = T::from({1, 1}, {1.0});
  const auto delta = T::from({1, 1}, {std::log(2.0)});
  const auto exact = discretize_zoh(a, b, delta, ZohMode::exact);
  const auto euler = discretize_zoh(a, b, delta, ZohMode::euler);
  const double e1 = std::abs(exact.a_bar.item() - 0.5);
  const double e2 = std::abs(exact.b_bar.item() - 0.5);
  const double e3 = std::abs(euler.b_bar.item() - std::log(2.0));
  // halving delta should divide the exact/euler gap by ~4
  auto gap = [&](double dt) {
    const auto d = T::from({1, 1}, {dt});
    return std::abs(discretize_zoh(a, b, d, ZohMode::exact).b_bar.item() -
                    discretize_zoh(a, b, d, ZohMode::euler).b_bar.item());
  };
  double lo = 1e9, hi = 0;
  for (double dt = 0.2; dt > 1e-3; dt /= 2) {
    const double ratio = gap(dt) / gap(dt / 2);
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
  }
  const bool ok = e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-12 && lo > 3.5 && hi < 4.5;
  return judge(ok, "a_bar err " + fmt(e1, 2) + ", exact b_bar err " + fmt(e2, 2) + ", euler b_bar err " + fmt(e3, 2) +
                       ", gap ratio on halving in [" + fmt(lo) + ", " + fmt(hi) + "]");
}

Outcome s_star_rows(Context&) {
  double worst = 0;
  int bad = 0;
  for (const auto& row : kPublishedRows) {
    const double err = std::abs(s_star_m(row.bleu4, row.meteor, row.rouge_l, row.cider_d) - row.published);
    worst = std::max(worst, err);
    bad += err > kSStarTolerance;
  }
  const double full_model = s_star_m(65.24, 39.91, 75.24, 136.56);
  const double mamba = s_star_m(63.13, 37.83, 72.61, 127.26);
  return judge(bad == 0 && std::abs(full_model - 79.24) <= kSStarTolerance && std::abs(mamba - 75.21) <= kSStarTolerance,
               std::to_string(kPublishedRows.size()) + " rows, worst |err| " + fmt(worst, 3) + "; examples " +
                   fmt(full_model, 6) + ", " + fmt(mamba, 6));
}

Outcome structural_invariants(Context&) {
  Rng rng(5, "acceptance/structure");
  using cama::testing::bitwise_equal;
  using cama::testing::random_tensor;
  using cama::testing::rows_bitwise_equal;
  int failures = 0;
  for (int i = 0; i < 20; ++i) {
    const Index len = 1 + static_cast<Index>(rng.below(40));
    BiTemporalPair<double> p(random_tensor({len, 6}, rng), random_tensor({len, 6}, rng));
    const auto back = deinterleave(interleave(p));
    failures += !(bitwise_equal(back.t1, p.t1) && bitwise_equal(back.t2, p.t2));
    const auto x = random_tensor({2, len, 3}, rng);
    failures += !bitwise_equal(flip_seq(flip_seq(x)), x);
  }
  const int roundtrip_failures = failures;

  int causal_failures = 0;
  for (auto kind : {DecoderKind::mamba, DecoderKind::gpt_style, DecoderKind::cross_attention}) {
    DecoderConfig cfg;
    cfg.kind = kind;
    cfg.width = 16;
    cfg.vocab_size = 20;
    cfg.heads = 4;
    cfg.state_size = 4;
    auto dec = CaptionDecoder<double>::init(cfg, rng);
    const auto visual = random_tensor({6, 16}, rng);
    const std::vector<int> tokens{Vocabulary::kBos, 7, 12, 5, 9, 14, 6, 8};
    const auto base = dec.teacher_forced_logits(visual, tokens);
    for (std::size_t j = 1; j < tokens.size(); ++j) {
      auto changed = tokens;
      changed[j] = 4 + (changed[j] + 5) % 16;
      causal_failures += !rows_bitwise_equal(base, dec.teacher_forced_logits(visual, changed), 0, static_cast<Index>(j));
    }
  }

  auto sd = SdSsmParams<double>::init(8, 4, rng);
  const auto x = random_tensor({9, 8}, rng);
  BiTemporalPair<double> same(x, x.clone());
  const auto gate = sd_gate(same, detail::pack(same), sd, GateVariant::differential);
  int gate_failures = 0;
  for (Index l = 1; l < 9; ++l) gate_failures += !rows_bitwise_equal(slice(gate, 0, 0, 1), slice(gate, 0, l, 1), 0, 1);

  return judge(roundtrip_failures + causal_failures + gate_failures == 0,
               "roundtrip/flip failures " + std::to_string(roundtrip_failures) + ", causality failures " +
                   std::to_string(causal_failures) + ", gate constancy failures " + std::to_string(gate_failures));
}

Outcome end_to_end(Context& ctx) {
  const auto data = ctx.full_data();
  RunConfig cfg;  // defaults: 3 layers, differential gate, interleave, cross-attention, seed 7
  cfg.data_dir = data.string();
  cfg.out_dir = (ctx.work / "run-default").string();
  const double cpu0 = cpu_seconds();
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opts;
  opts.log = [](const std::string& line) { std::cout << "    " << line << std::endl; };
  train(cfg, opts);
  const TrainState best = load_checkpoint(fs::path(cfg.out_dir) / "best.camc");
  const auto preds = predict(best.model, best.vocab, load_split(data, "test"));
  const EvalReport r = score(preds);
  const double cpu = cpu_seconds() - cpu0;
  const bool ok = r.bleu[3] >= 85.0 && r.exact_match >= 60.0 && cpu <= 1800.0;
  return judge(ok, "BLEU-4 " + fmt(r.bleu[3]) + " (>= 85), exact match " + fmt(r.exact_match) + "% (>= 60), CPU " +
                       fmt(cpu / 60, 3) + " min (<= 30), wall " + fmt(wall_since(t0) / 60, 3) + " min");
}

Outcome ablation_direction(Context& ctx) {
  const auto data = ctx.ablation_data();
  RunConfig base;
  base.data_dir = data.string();
  base.epochs = kAblationEpochs;
  auto config_of = [&](const std::string& table, const std::string& label) {
    for (const auto& row : ablation_matrix(table)) {
      if (row.label == label) {
        RunConfig c = base;
        row.apply(c);
        return c;
      }
    }
    throw ConfigError("no ablation row " + label);
  };
  const std::map<std::string, RunConfig> variants{
      {"self-gate baseline", config_of("table2", "Baseline (self-gate)")},
      {"differential + interleave", config_of("table2", "+ SD-SSM + TT-SSM")},
      {"mamba decoder", config_of("table4", "Mamba")},
      {"gpt-style decoder", config_of("table4", "GPT-style")},
  };
  std::map<std::string, double> median_bleu;
  for (const auto& [name, cfg0] : variants) {
    std::vector<double> bleu4;
    for (int k = 0; k < 3; ++k) {
      RunConfig cfg = cfg0;
      cfg.seed = base.seed + static_cast<std::uint64_t>(k);
      std::string slug = name;
      std::replace(slug.begin(), slug.end(), ' ', '-');
      cfg.out_dir = (ctx.work / "ablation" / slug / ("seed" + std::to_string(cfg.seed))).string();
      train(cfg);
      const TrainState best = load_checkpoint(fs::path(cfg.out_dir) / "best.camc");
      bleu4.push_back(score(predict(best.model, best.vocab, load_split(data, "test"))).bleu[3]);
    }
    std::sort(bleu4.begin(), bleu4.end());
    median_bleu[name] = bleu4[1];
    std::cout << "    " << name << ": BLEU-4 " << fmt(bleu4[0]) << " / " << fmt(bleu4[1]) << " / " << fmt(bleu4[2])
              << std::endl;
  }
  const double full = median_bleu["differential + interleave"];
  const double margins[] = {full - median_bleu["self-gate baseline"], full - median_bleu["mamba decoder"],
                            full - median_bleu["gpt-style decoder"]};
  const double worst = *std::min_element(std::begin(margins), std::end(margins));
  std::ostringstream os;
  os << "median BLEU-4 full " << fmt(full) << ", self-gate " << fmt(median_bleu["self-gate baseline"]) << ", mamba "
     << fmt(median_bleu["mamba decoder"]) << ", gpt-style " << fmt(median_bleu["gpt-style decoder"]) << " ("
     << kAblationTrain << " training samples, " << kAblationEpochs << " epochs)";
  if (worst >= 0) return {Verdict::pass, os.str()};
  if (worst >= -1.0) return {Verdict::warn, os.str() + "; inversion " + fmt(-worst, 3) + " BLEU within 1.0"};
  return {Verdict::fail, os.str() + "; inversion " + fmt(-worst, 3) + " BLEU"};
}

Outcome linear_time(Context&) {
  BenchOptions opt;
  opt.lengths = {2048, 4096};
  opt.impls = {ScanImpl::sequential};
  opt.repeats = 5;
  const auto rows = bench_scan(opt);
  const double ratio = timing_ratio(rows, ScanImpl::sequential, 4096, 2048);
  return judge(ratio >= 1.6 && ratio <= 2.6, "t(4096)/t(2048) = " + fmt(ratio) + " (median of 5)");
}

Outcome metric_oracles(Context&) {
  const Corpus words{"a", "house", "road", "two", "new", "the", "in", "center", "trees", "added"};
  Rng rng(9, "acceptance/cider");
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(4);
    Corpus hyps;
    ReferenceSets refs(n);
    auto sentence = [&]() {
      std::string s;
      const auto len = 1 + rng.below(8);
      for (std::uint64_t i = 0; i < len; ++i) s += (i ? " " : "") + words[rng.below(words.size())];
      return s;
    };
    for (std::size_t i = 0; i < n; ++i) {
      hyps.push_back(sentence());
      for (std::uint64_t k = 0; k < 1 + rng.below(5); ++k) refs[i].push_back(sentence());
    }
    worst = std::max(worst, std::abs(cider_d(hyps, refs) - cama::testing::brute_force_cider(hyps, refs)));
  }
  const double b1 = bleu({"a a a"}, {{"a b"}})[0];
  const double same = bleu({"the cat sat on the mat"}, {{"the cat sat on the mat"}})[3];
  const double rl = rouge_l({"a b c"}, {{"a c"}});
  const double rl_same = rouge_l({"a b c"}, {{"a b c"}});
  const bool fixtures = std::abs(b1 - 33.33) <= 0.01 && std::abs(same - 100) <= 0.01 && std::abs(rl - 82.99) <= 0.01 &&
                        std::abs(rl_same - 100) <= 0.01;
  return judge(worst <= 1e-9 && fixtures, "CIDEr-D max |err| " + fmt(worst, 2) + " over 200 corpora; B1 " + fmt(b1) +
                                              ", ROUGE-L " + fmt(rl) + ", identical BLEU-4 " + fmt(same));
}

Outcome reproducibility(Context& ctx) {
  const auto data = ctx.work / "repro-a";
  const auto again = ctx.work / "repro-b";
  save_dataset(build_dataset(64, 16, 16, 7), data);
  save_dataset(build_dataset(64, 16, 16, 7), again);
  bool same_files = true;
  for (const char* f : {"vocab.txt", "train/scenes.bin", "train/captions.jsonl", "val/scenes.bin", "test/scenes.bin",
                        "test/captions.jsonl"}) {
    same_files = same_files && read_file(data / f) == read_file(again / f);
  }

  RunConfig cfg;
  cfg.layers = 2;
  cfg.width = 32;
  cfg.epochs = 1;
  cfg.data_dir = data.string();
  cfg.out_dir = (ctx.work / "repro-run").string();
  train(cfg);
  const auto path = fs::path(cfg.out_dir) / "last.camc";
  const TrainState a = load_checkpoint(path);
  save_checkpoint(a, ctx.work / "repro-copy.camc");
  const TrainState b = load_checkpoint(ctx.work / "repro-copy.camc");
  const bool same_bytes = read_file(path) == read_file(ctx.work / "repro-copy.camc");
  const PreparedSplit prep = PreparedSplit::from(load_split(data, "test"), a.vocab);
  std::vector<std::size_t> rows(prep.size());
  std::iota(rows.begin(), rows.end(), 0);
  const Batch batch = make_batch(prep, rows, [](std::size_t) { return 0; });
  NoTapeScope<float> off;
  const bool same_forward = cama::testing::bitwise_equal(a.model.logits(batch.t1, batch.t2, batch.inputs, batch.size),
                                                         b.model.logits(batch.t1, batch.t2, batch.inputs, batch.size));
  return judge(same_files && same_bytes && same_forward,
               std::string("dataset files ") + (same_files ? "identical" : "DIFFER") + ", checkpoint re-save " +
                   (same_bytes ? "identical" : "DIFFERS") + ", forward " + (same_forward ? "bitwise equal" : "DIFFERS"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string work_arg;
  bool keep = false;
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  app.add_option("--work", work_arg, "Scratch directory");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.work = work_arg.empty() ? fs::temp_directory_path() / ("cama-acceptance-" + std::to_string(::getpid())) : fs::path(work_arg);
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"scan equivalence", scan_equivalence},
      {"ZOH sanity", zoh_sanity},
      {"S*_m arithmetic", s_star_rows},
      {"structural invariants", structural_invariants},
      {"end-to-end toy training", end_to_end},
      {"ablation direction", ablation_direction},
      {"linear-time scan", linear_time},
      {"metric oracles", metric_oracles},
      {"reproducibility", reproducibility},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::warn ? "WARN" : "FAIL";
    failed += o.verdict == Verdict::fail;
    std::cout << tag << "  " << id << ". " << criteria[i].first << ": " << o.detail << "  [" << fmt(wall_since(t0), 3)
              << " s]" << std::endl;
  }
  if (!keep && work_arg.empty()) fs::remove_all(ctx.work);
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria met")) << std::endl;
  return failed ? 1 : 0;
}
