#include "cama/experiments.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <cmath>
#include <sstream>

#include "cama/errors.hpp"
#include "cama/rng.hpp"
#include "cama/ssm.hpp"
#include "cama/training.hpp"

namespace cama {

std::string to_string(ScanImpl impl) { return impl == ScanImpl::sequential ? "seq" : "par"; }

ScanImpl parse_scan_impl(const std::string& s) {
  if (s == "seq" || s == "sequential") return ScanImpl::sequential;
  if (s == "par" || s == "parallel") return ScanImpl::parallel;
  throw ConfigError("unknown scan implementation '" + s + "' (expected seq or par)");
}

namespace {

struct ScanInputs {
  Tensor<double> x, a_bar, b_bar, c, skip;
};

ScanInputs random_scan(Index len, Index width, Index state, std::uint64_t seed) {
  Rng rng(seed, "bench/scan");
  auto fill = [&](Shape shape, double lo, double hi) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.raw()) v = rng.uniform(lo, hi);
    return t;
  };
  ScanInputs in;
  in.x = fill({1, len, width}, -1, 1);
  in.a_bar = fill({1, len, width, state}, 0.5, 0.999);
  in.b_bar = fill({1, len, width, state}, -0.5, 0.5);
  in.c = fill({1, len, state}, -1, 1);
  in.skip = fill({width}, -1, 1);
  return in;
}

Tensor<double> run_scan(ScanImpl impl, const ScanInputs& in) {
  return impl == ScanImpl::sequential ? scan_sequential(in.x, in.a_bar, in.b_bar, in.c, in.skip)
                                      : scan_parallel(in.x, in.a_bar, in.b_bar, in.c, in.skip);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double scan_equivalence_error(Index len, std::uint64_t seed, Index width, Index state) {
  NoTapeScope<double> off;
  const auto in = random_scan(len, width, state, seed);
  const auto seq = run_scan(ScanImpl::sequential, in);
  const auto par = run_scan(ScanImpl::parallel, in);
  double err = 0;
  for (Index i = 0; i < seq.numel(); ++i) err = std::max(err, std::abs(seq.data()[i] - par.data()[i]));
  return err;
}

std::vector<ScanTiming> bench_scan(const BenchOptions& options) {
  if (options.repeats < 1 || options.lengths.empty() || options.impls.empty()) {
    throw ConfigError("bench-scan needs at least one length, one implementation and one repeat");
  }
  NoTapeScope<double> off;
  std::vector<ScanTiming> rows;
  for (auto impl : options.impls) {
    for (Index len : options.lengths) {
      if (len < 1) throw ConfigError("scan lengths must be >= 1");
      const auto in = random_scan(len, options.width, options.state, 1);
      run_scan(impl, in);  // warm-up
      std::vector<double> ms;
      for (int r = 0; r < options.repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto y = run_scan(impl, in);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        if (y.numel() == 0) throw ContractError("empty scan output");
      }
      rows.push_back({impl, len, median(ms)});
    }
  }
  return rows;
}

std::string timings_csv(const std::vector<ScanTiming>& rows) {
  std::ostringstream os;
  os << "impl,L,median_ms\n";
  os.precision(6);
  for (const auto& r : rows) os << to_string(r.impl) << ',' << r.length << ',' << std::fixed << r.median_ms << '\n';
  return os.str();
}

double timing_ratio(const std::vector<ScanTiming>& rows, ScanImpl impl, Index long_len, Index short_len) {
  auto find = [&](Index len) {
    for (const auto& r : rows) {
      if (r.impl == impl && r.length == len) return r.median_ms;
    }
    throw ContractError("no " + to_string(impl) + " timing for L=" + std::to_string(len));
  };
  return find(long_len) / find(short_len);
}

std::vector<AblationRow> ablation_matrix(const std::string& table) {
  using C = RunConfig&;
  if (table == "table2") {
    return {
        {"Baseline (self-gate)",
         [](C c) {
           c.gate_variant = GateVariant::self;
           c.temporal_variant = TemporalVariant::off;
         }},
        {"+ SD-SSM",
         [](C c) {
           c.gate_variant = GateVariant::differential;
           c.temporal_variant = TemporalVariant::off;
         }},
        {"+ SD-SSM + TT-SSM",
         [](C c) {
           c.gate_variant = GateVariant::differential;
           c.temporal_variant = TemporalVariant::interleave;
         }},
        {"+ SD-SSM + TT-SSM*",
         [](C c) {
           c.gate_variant = GateVariant::differential;
           c.temporal_variant = TemporalVariant::length_concat;
         }},
    };
  }
  if (table == "table3") {
    std::vector<AblationRow> rows;
    for (int n : {2, 3, 4}) rows.push_back({"Num. " + std::to_string(n), [n](C c) { c.layers = n; }});
    return rows;
  }
  if (table == "table4") {
    return {
        {"Mamba", [](C c) { c.decoder = DecoderKind::mamba; }},
        {"GPT-style", [](C c) { c.decoder = DecoderKind::gpt_style; }},
        {"Trans-Dec", [](C c) { c.decoder = DecoderKind::cross_attention; }},
    };
  }
  throw ConfigError("unknown ablation matrix '" + table + "' (expected table2, table3 or table4)");
}

EvalReport median_report(const std::vector<EvalReport>& runs) {
  if (runs.empty()) throw ContractError("median of no reports");
  auto med = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(get(r));
    return median(std::move(v));
  };
  EvalReport m;
  for (std::size_t n = 0; n < 4; ++n) m.bleu[n] = med([n](const EvalReport& r) { return r.bleu[n]; });
  m.rouge_l = med([](const EvalReport& r) { return r.rouge_l; });
  m.meteor_simplified = med([](const EvalReport& r) { return r.meteor_simplified; });
  m.cider_d = med([](const EvalReport& r) { return r.cider_d; });
  m.s_star_m = med([](const EvalReport& r) { return r.s_star_m; });
  m.exact_match = med([](const EvalReport& r) { return r.exact_match; });
  m.samples = runs.front().samples;
  return m;
}

namespace {

std::string slug(const std::string& label) {
  std::string out;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else if (ch == '*') {
      out += "star";
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

}  // namespace

std::vector<AblationResult> run_ablation(const std::string& table, const RunConfig& base,
                                         const AblationOptions& options) {
  const auto rows = ablation_matrix(table);
  if (options.seeds < 1) throw ConfigError("ablation needs at least one seed");
  base.validate();
  const ToyDataset data = load_dataset(base.data_dir);
  const ToySplit& split = data.split(options.split);
  std::vector<AblationResult> results;
  for (const auto& row : rows) {
    AblationResult res{row.label, {}, {}};
    for (int k = 0; k < options.seeds; ++k) {
      RunConfig cfg = base;
      row.apply(cfg);
      cfg.seed = base.seed + static_cast<std::uint64_t>(k);
      cfg.out_dir = (std::filesystem::path(base.out_dir) / slug(row.label) / ("seed" + std::to_string(cfg.seed))).string();
      if (options.log) options.log("[" + table + "] " + row.label + " seed " + std::to_string(cfg.seed));
      train(cfg, {false, options.log});
      const TrainState state = load_checkpoint(std::filesystem::path(cfg.out_dir) / "best.camc");
      const EvalReport report = score(predict(state.model, state.vocab, split));
      if (options.log) options.log("  BLEU-4 " + std::to_string(report.bleu[3]) + "  S*m " + std::to_string(report.s_star_m));
      res.runs.push_back(report);
    }
    res.median = median_report(res.runs);
    results.push_back(std::move(res));
  }
  return results;
}

std::string ablation_markdown(const std::string& table, const std::vector<AblationResult>& rows) {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed;
  os << "| " << (table == "table3" ? "Layers" : table == "table4" ? "Decoder" : "Variant")
     << " | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | METEOR | ROUGE_L | CIDEr-D | S*_m | Exact |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto& m = r.median;
    os << "| " << r.label << " | " << m.bleu[0] << " | " << m.bleu[1] << " | " << m.bleu[2] << " | " << m.bleu[3]
       << " | " << m.meteor_simplified << " | " << m.rouge_l << " | " << m.cider_d << " | " << m.s_star_m << " | "
       << m.exact_match << " |\n";
  }
  return os.str();
}

}  // namespace cama
