// cama: data generation, training, evaluation and verification entry points.

#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cama/errors.hpp"
#include "cama/experiments.hpp"
#include "cama/fsutil.hpp"
#include "cama/gradcheck_suites.hpp"
#include "cama/training.hpp"

namespace fs = std::filesystem;
using namespace cama;

namespace {

constexpr int kOk = 0;
constexpr int kVerificationFailed = 1;
constexpr int kUsage = 2;

void print_line(const std::string& s) { std::cout << s << std::endl; }

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

int gen_data(const std::string& out, int n_train, int n_val, int n_test, std::uint64_t seed) {
  const ToyDataset data = build_dataset(n_train, n_val, n_test, seed);
  save_dataset(data, out);
  std::cout << "vocabulary " << data.vocab.size() << " tokens\n"
            << "train " << data.train.samples.size() << "  val " << data.val.samples.size() << "  test "
            << data.test.samples.size() << "\n"
            << "wrote " << out << "\n";
  return kOk;
}

int train_cmd(const RunConfig& cfg, bool resume) {
  if (!fs::exists(fs::path(cfg.data_dir) / "vocab.txt")) {
    throw ConfigError("no dataset at '" + cfg.data_dir + "' (run gen-data first)");
  }
  const auto r = train(cfg, {resume, print_line});
  std::cout << "done: " << r.epochs_completed << " epochs, best val loss " << r.best_val_loss << ", "
            << r.wall_s << " s\n";
  return kOk;
}

int eval_cmd(const std::string& checkpoint, const std::string& data_dir, const std::string& split_name,
             const std::string& out, bool oracle, int threads) {
  const ToyDataset data = load_dataset(data_dir);
  const ToySplit& split = data.split(split_name);
  std::vector<Prediction> preds;
  if (oracle) {
    preds = oracle_predictions(split);
  } else {
    if (checkpoint.empty()) throw ConfigError("--checkpoint is required unless --oracle is given");
    const TrainState state = load_checkpoint(checkpoint);
    if (!(state.vocab == data.vocab)) {
      throw ConfigError("checkpoint vocabulary (" + std::to_string(state.vocab.size()) +
                        " tokens) does not match the dataset at " + data_dir);
    }
    EvalOptions opts;
    opts.threads = threads;
    preds = predict(state.model, state.vocab, split, opts);
  }
  const EvalReport report = score(preds, oracle);
  const fs::path dir = out.empty() ? (checkpoint.empty() ? fs::path("eval") : fs::path(checkpoint).parent_path())
                                   : fs::path(out);
  fs::create_directories(dir);
  const std::string stem = split_name + (oracle ? "_oracle" : "");
  write_file_atomic(dir / (stem + "_predictions.jsonl"), predictions_jsonl(preds));
  write_file_atomic(dir / (stem + "_report.json"), report.to_json() + "\n");
  write_file_atomic(dir / (stem + "_report.csv"), EvalReport::csv_header() + "\n" + report.csv_row() + "\n");
  std::cout << report.to_json() << "\n";
  return kOk;
}

int gradcheck_cmd(const std::string& scope, bool inject_fault) {
  if (scope != "all") gradcheck_threshold(scope);  // validates the name
  const auto checks = run_gradcheck(scope, inject_fault);
  std::map<std::string, double> worst;
  std::vector<std::string> failing;
  for (const auto& c : checks) {
    worst[c.scope] = std::max(worst[c.scope], c.max_rel_err);
    for (const auto& f : c.failing) failing.push_back(c.scope + "/" + c.name + ":" + f);
  }
  for (const auto& s : gradcheck_scopes()) {
    if (!worst.count(s)) continue;
    std::cout << s << "  max_rel_err " << worst[s] << "  threshold " << gradcheck_threshold(s) << "\n";
  }
  if (failing.empty()) {
    std::cout << "gradcheck passed\n";
    return kOk;
  }
  std::cout << "gradcheck FAILED:\n";
  for (const auto& f : failing) std::cout << "  " << f << "\n";
  return kVerificationFailed;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int bench_cmd(const std::string& lengths, const std::string& impls, const std::string& out) {
  BenchOptions opts;
  opts.lengths.clear();
  opts.impls.clear();
  for (const auto& l : split_list(lengths)) {
    try {
      opts.lengths.push_back(std::stoll(l));
    } catch (const std::exception&) {
      throw ConfigError("bad length '" + l + "'");
    }
  }
  for (const auto& i : split_list(impls)) opts.impls.push_back(parse_scan_impl(i));

  for (Index len : {Index{1}, Index{2}, Index{63}, Index{64}, Index{1024}}) {
    const double err = scan_equivalence_error(len, 11);
    if (err > 1e-10) {
      std::cerr << "parallel scan differs from sequential by " << err << " at L=" << len << "\n";
      return kVerificationFailed;
    }
  }
  const auto rows = bench_scan(opts);
  const std::string csv = timings_csv(rows);
  std::cout << csv;
  if (!out.empty()) write_file_atomic(out, csv);

  const bool has_pair = std::any_of(rows.begin(), rows.end(), [](const ScanTiming& r) {
                          return r.impl == ScanImpl::sequential && r.length == 4096;
                        }) &&
                        std::any_of(rows.begin(), rows.end(), [](const ScanTiming& r) {
                          return r.impl == ScanImpl::sequential && r.length == 2048;
                        });
  if (has_pair) {
    const double ratio = timing_ratio(rows, ScanImpl::sequential, 4096, 2048);
    std::cout << "seq t(4096)/t(2048) = " << ratio << "\n";
    if (ratio < 1.6 || ratio > 2.6) {
      std::cerr << "sequential scan timing ratio outside [1.6, 2.6]\n";
      return kVerificationFailed;
    }
  }
  return kOk;
}

int ablate_cmd(const std::string& table, const RunConfig& base, int seeds, const std::string& split) {
  AblationOptions opts;
  opts.seeds = seeds;
  opts.split = split;
  opts.log = print_line;
  const auto rows = run_ablation(table, base, opts);
  const std::string md = ablation_markdown(table, rows);
  fs::create_directories(base.out_dir);
  write_file_atomic(fs::path(base.out_dir) / (table + ".md"), md);
  std::cout << "\n" << md;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Change captioning with bi-temporal selective state space encoders"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the toy bi-temporal change dataset");
  std::string gen_out = "data";
  int n_train = 2000, n_val = 200, n_test = 200;
  std::uint64_t gen_seed = 7;
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();
  gen->add_option("--train", n_train, "Training samples")->capture_default_str();
  gen->add_option("--val", n_val, "Validation samples")->capture_default_str();
  gen->add_option("--test", n_test, "Test samples")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train a captioner");
  std::string config_path;
  std::vector<std::string> overrides;
  bool resume = false;
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--set", overrides, "Config override key=value (repeatable)");
  tr->add_flag("--resume", resume, "Continue from out_dir/last.camc");

  auto* ev = app.add_subcommand("eval", "Greedy-decode a split and score it");
  std::string checkpoint, eval_data = "data", eval_split = "test", eval_out;
  bool oracle = false;
  int threads = 0;
  ev->add_option("--checkpoint", checkpoint, "CAMC checkpoint");
  ev->add_option("--data", eval_data, "Dataset directory")->capture_default_str();
  ev->add_option("--split", eval_split, "train, val or test")->capture_default_str();
  ev->add_option("--out", eval_out, "Output directory (default: checkpoint directory)");
  ev->add_flag("--oracle", oracle, "Score reference 0 against references 1-4");
  ev->add_option("--threads", threads, "Worker threads (0: all cores)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  std::string scope = "all";
  bool inject_fault = false;
  gc->add_option("--scope", scope, "ops, ssm, sdssm, ttssm, stack, decoders or all")->capture_default_str();
  gc->add_flag("--inject-fault", inject_fault)->group("");

  auto* bs = app.add_subcommand("bench-scan", "Time the sequential and parallel scans");
  std::string lengths = "512,1024,2048,4096", impls = "seq,par", bench_out;
  bs->add_option("--lengths", lengths, "Comma-separated sequence lengths")->capture_default_str();
  bs->add_option("--impl", impls, "Comma-separated implementations (seq, par)")->capture_default_str();
  bs->add_option("--out", bench_out, "Also write the CSV here");

  auto* ab = app.add_subcommand("ablate", "Run an ablation matrix over several seeds");
  std::string matrix, ab_config, ab_split = "test";
  std::vector<std::string> ab_overrides;
  int seeds = 3;
  ab->add_option("--matrix", matrix, "table2, table3 or table4")->required();
  ab->add_option("--config", ab_config, "Base key=value config file");
  ab->add_option("--set", ab_overrides, "Config override key=value (repeatable)");
  ab->add_option("--seeds", seeds, "Seeds per row")->capture_default_str();
  ab->add_option("--split", ab_split, "Evaluation split")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return gen_data(gen_out, n_train, n_val, n_test, gen_seed);
    if (*tr) return train_cmd(resolve_config(config_path, overrides), resume);
    if (*ev) return eval_cmd(checkpoint, eval_data, eval_split, eval_out, oracle, threads);
    if (*gc) return gradcheck_cmd(scope, inject_fault);
    if (*bs) return bench_cmd(lengths, impls, bench_out);
    if (*ab) {
      RunConfig base = resolve_config(ab_config, ab_overrides);
      if (ab_config.empty() && std::find_if(ab_overrides.begin(), ab_overrides.end(), [](const std::string& s) {
                                 return s.rfind("out_dir=", 0) == 0;
                               }) == ab_overrides.end()) {
        base.out_dir = "runs/ablate";
      }
      return ablate_cmd(matrix, base, seeds, ab_split);
    }
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kVerificationFailed;
  } catch (const VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kVerificationFailed;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
