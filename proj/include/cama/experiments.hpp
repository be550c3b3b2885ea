#pragma once

// Scan timing benchmark and the ablation matrices.

#include <functional>
#include <string>
#include <vector>

#include "cama/config.hpp"
#include "cama/metrics.hpp"

namespace cama {

enum class ScanImpl { sequential, parallel };

std::string to_string(ScanImpl impl);
ScanImpl parse_scan_impl(const std::string& s);

struct ScanTiming {
  ScanImpl impl;
  Index length;
  double median_ms;
};

struct BenchOptions {
  std::vector<Index> lengths{512, 1024, 2048, 4096};
  std::vector<ScanImpl> impls{ScanImpl::sequential, ScanImpl::parallel};
  Index width = 32;
  Index state = 16;
  int repeats = 5;
};

/// Largest |parallel - sequential| over the f64 outputs of a random instance of length `len`.
double scan_equivalence_error(Index len, std::uint64_t seed, Index width = 8, Index state = 4);

/// Median wall time of `repeats` forward scans per (impl, length), f64, no tape.
std::vector<ScanTiming> bench_scan(const BenchOptions& options);

std::string timings_csv(const std::vector<ScanTiming>& rows);

/// t(long) / t(short) for one implementation; throws ContractError if either length is absent.
double timing_ratio(const std::vector<ScanTiming>& rows, ScanImpl impl, Index long_len, Index short_len);

struct AblationRow {
  std::string label;
  std::function<void(RunConfig&)> apply;
};

/// Variant rows of "table2", "table3" or "table4"; unknown names throw ConfigError.
std::vector<AblationRow> ablation_matrix(const std::string& table);

struct AblationResult {
  std::string label;
  std::vector<EvalReport> runs;  // one per seed
  EvalReport median;
};

struct AblationOptions {
  int seeds = 3;
  std::string split = "test";
  std::function<void(const std::string&)> log;
};

/// Trains and evaluates every row of `table` under `base`, one run per seed
/// (base.seed, base.seed + 1, ...). Runs go to base.out_dir/<row>/seed<k>.
std::vector<AblationResult> run_ablation(const std::string& table, const RunConfig& base,
                                         const AblationOptions& options = {});

/// Element-wise median of the reports.
EvalReport median_report(const std::vector<EvalReport>& runs);

std::string ablation_markdown(const std::string& table, const std::vector<AblationResult>& rows);

}  // namespace cama
