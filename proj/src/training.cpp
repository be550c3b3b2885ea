#include "cama/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <Eigen/Core>
#include <json.hpp>

#include "cama/errors.hpp"
#include "cama/fsutil.hpp"
#include "cama/rng.hpp"
#include "cama/serialize.hpp"

namespace cama {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

using FloatArray = Eigen::Map<Eigen::ArrayXf>;

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

std::vector<NamedParam> parameters(CaptionModel<float>& model) {
  std::vector<NamedParam> out;
  model.visit([&](const std::string& name, Tensor<float>& t) { out.emplace_back(name, t); });
  return out;
}

void Adam::init(const std::vector<NamedParam>& params) {
  m.clear();
  v.clear();
  for (const auto& [name, p] : params) {
    m.emplace_back(p.shape());
    v.emplace_back(p.shape());
  }
  step = 0;
}

void Adam::update(const std::vector<NamedParam>& params) {
  if (m.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  ++step;
  const double t = static_cast<double>(step);
  const auto c1 = static_cast<float>(1.0 / (1.0 - std::pow(beta1, t)));
  const auto c2 = static_cast<float>(1.0 / (1.0 - std::pow(beta2, t)));
  const auto b1 = static_cast<float>(beta1);
  const auto b2 = static_cast<float>(beta2);
  const auto rate = static_cast<float>(lr);
  const auto e = static_cast<float>(eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> p = params[i].second;
    if (!p.has_grad()) continue;
    auto grad = p.mutable_grad();
    auto values = p.mutable_data();
    const auto n = static_cast<Eigen::Index>(values.size());
    FloatArray g(grad.data(), n);
    FloatArray mi(m[i].raw().data(), n);
    FloatArray vi(v[i].raw().data(), n);
    FloatArray w(values.data(), n);
    mi = b1 * mi + (1 - b1) * g;
    vi = b2 * vi + (1 - b2) * g.square();
    w -= rate * (mi * c1) / ((vi * c2).sqrt() + e);
    p.zero_grad();
  }
}

TrainState TrainState::fresh(const RunConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  Rng rng(cfg.seed, "model-init");
  TrainState s{cfg, vocab, CaptionModel<float>::init(cfg.model_config(vocab.size()), rng), {}, 0,
               std::numeric_limits<double>::infinity()};
  s.adam.lr = cfg.lr;
  s.adam.init(parameters(s.model));
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  auto& model = const_cast<CaptionModel<float>&>(state.model);
  const auto params = parameters(model);
  std::ostringstream os(std::ios::binary);
  os.write("CAMC", 4);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put_string(os, state.config.to_text());
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(state.vocab.size()));
  for (const auto& t : state.vocab.tokens()) io::put_string(os, t);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    io::put_string(os, name);
    write_tensor(os, t);
  }
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(state.adam.m.size()));
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    write_tensor(os, state.adam.m[i]);
    write_tensor(os, state.adam.v[i]);
  }
  io::put<std::uint64_t>(os, state.adam.step);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(state.epoch));
  io::put<double>(os, state.best_val);
  write_file_atomic(path, os.str());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "CAMC") throw FormatError(path.string() + " is not a CAMC checkpoint");
  const auto version = io::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const RunConfig cfg = parse_config(io::get_string(is));
  std::vector<std::string> words(io::get<std::uint32_t>(is));
  for (auto& w : words) w = io::get_string(is);
  TrainState s = TrainState::fresh(cfg, Vocabulary::from_words(words));
  if (s.vocab.tokens() != words) throw FormatError("checkpoint vocabulary is malformed");
  const auto params = parameters(s.model);
  const auto count = io::get<std::uint32_t>(is);
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (const auto& [name, t] : params) {
    const auto stored = io::get_string(is);
    if (stored != name) throw FormatError("checkpoint tensor '" + stored + "' where '" + name + "' was expected");
    const auto loaded = read_tensor<float>(is);
    if (loaded.shape() != t.shape()) throw FormatError("shape mismatch for " + name);
    Tensor<float> dst = t;
    std::copy(loaded.data().begin(), loaded.data().end(), dst.mutable_data().begin());
  }
  const auto moments = io::get<std::uint32_t>(is);
  if (moments != params.size()) throw FormatError("optimizer state does not match the parameters");
  for (std::size_t i = 0; i < moments; ++i) {
    s.adam.m[i] = read_tensor<float>(is);
    s.adam.v[i] = read_tensor<float>(is);
  }
  s.adam.step = io::get<std::uint64_t>(is);
  s.epoch = static_cast<int>(io::get<std::uint32_t>(is));
  s.best_val = io::get<double>(is);
  return s;
}

PreparedSplit PreparedSplit::from(const ToySplit& split, const Vocabulary& vocab) {
  PreparedSplit p;
  for (const auto& s : split.samples) {
    p.ids.push_back(s.id);
    p.height = s.t1.height;
    p.width = s.t1.width;
    const auto a = s.t1.render();
    const auto b = s.t2.render();
    p.t1.emplace_back(a.data().begin(), a.data().end());
    p.t2.emplace_back(b.data().begin(), b.data().end());
    std::array<std::vector<int>, kReferencesPerSample> toks;
    for (int r = 0; r < kReferencesPerSample; ++r) {
      toks[static_cast<std::size_t>(r)] = vocab.encode(s.references[static_cast<std::size_t>(r)]);
    }
    p.tokens.push_back(std::move(toks));
  }
  return p;
}

Batch make_batch(const PreparedSplit& data, std::span<const std::size_t> rows,
                 const std::function<int(std::size_t)>& pick) {
  Batch b;
  b.size = static_cast<Index>(rows.size());
  const Index pixels = data.height * data.width;
  b.t1 = Tensor<float>({b.size, data.height, data.width, 1});
  b.t2 = Tensor<float>({b.size, data.height, data.width, 1});
  std::vector<const std::vector<int>*> caps;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t row = rows[i];
    std::copy(data.t1[row].begin(), data.t1[row].end(), b.t1.raw().begin() + static_cast<Index>(i) * pixels);
    std::copy(data.t2[row].begin(), data.t2[row].end(), b.t2.raw().begin() + static_cast<Index>(i) * pixels);
    caps.push_back(&data.tokens[row][static_cast<std::size_t>(pick(row))]);
    b.steps = std::max(b.steps, static_cast<Index>(caps.back()->size()) - 1);
  }
  b.inputs.assign(static_cast<std::size_t>(b.size * b.steps), Vocabulary::kPad);
  b.targets.assign(static_cast<std::size_t>(b.size * b.steps), Vocabulary::kPad);
  for (std::size_t i = 0; i < caps.size(); ++i) {
    const auto& c = *caps[i];
    const auto base = static_cast<std::ptrdiff_t>(i) * b.steps;
    std::copy(c.begin(), c.end() - 1, b.inputs.begin() + base);
    std::copy(c.begin() + 1, c.end(), b.targets.begin() + base);
  }
  return b;
}

double evaluate_loss(const CaptionModel<float>& model, const PreparedSplit& data, int batch) {
  NoTapeScope<float> off;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0;
  double tokens = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
    const auto n = std::min(order.size() - start, static_cast<std::size_t>(batch));
    const auto rows = std::span<const std::size_t>(order).subspan(start, n);
    const Batch b = make_batch(data, rows, [&](std::size_t r) { return static_cast<int>(data.ids[r] % kReferencesPerSample); });
    const auto count = static_cast<double>(
        std::count_if(b.targets.begin(), b.targets.end(), [](int t) { return t != Vocabulary::kPad; }));
    total += count * caption_loss(model.logits(b.t1, b.t2, b.inputs, b.size), b.targets).item();
    tokens += count;
  }
  return total / tokens;
}

TrainResult train(const RunConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };
  const std::filesystem::path data_dir = cfg.data_dir;
  const std::filesystem::path out_dir = cfg.out_dir;
  const ToyDataset data = load_dataset(data_dir);
  std::filesystem::create_directories(out_dir);

  TrainState state = [&]() {
    if (!options.resume) return TrainState::fresh(cfg, data.vocab);
    auto s = load_checkpoint(out_dir / "last.camc");
    if (!(s.vocab == data.vocab)) throw ConfigError("checkpoint vocabulary does not match " + data_dir.string());
    // the run continues under the requested config for the remaining epochs
    s.config.epochs = cfg.epochs;
    return s;
  }();
  if (!(state.vocab == data.vocab)) throw ConfigError("vocabulary mismatch");
  write_file_atomic(out_dir / "config.txt", state.config.to_text());
  const auto log_path = out_dir / "train_log.csv";
  if (!options.resume || !std::filesystem::exists(log_path)) {
    write_file_atomic(log_path, "epoch,train_loss,val_loss,wall_s\n");
  }

  const PreparedSplit train_set = PreparedSplit::from(data.train, data.vocab);
  const PreparedSplit val_set = PreparedSplit::from(data.val, data.vocab);
  const auto params = parameters(state.model);
  const Rng shuffle_root(cfg.seed, "train/shuffle");
  TrainResult result;
  result.best_val_loss = state.best_val;
  for (int epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = shuffle_root.split("epoch/" + std::to_string(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    // every sample cycles through its five references across epochs
    auto pick = [&](std::size_t r) { return static_cast<int>((train_set.ids[r] + static_cast<std::uint64_t>(epoch)) % kReferencesPerSample); };
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const auto n = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch));
      const Batch b = make_batch(train_set, std::span<const std::size_t>(order).subspan(start, n), pick);
      Tape<float> tape;
      TapeScope<float> scope(tape);
      auto loss = caption_loss(state.model.logits(b.t1, b.t2, b.inputs, b.size), b.targets);
      if (!std::isfinite(loss.item())) {
        std::ostringstream ids;
        for (std::size_t i = start; i < start + n; ++i) ids << (i > start ? "," : "") << train_set.ids[order[i]];
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches) + " (sample ids " + ids.str() + ")");
      }
      tape.backward(loss);
      state.adam.update(params);
      loss_sum += loss.item();
      ++batches;
    }
    const double train_loss = loss_sum / batches;
    const double val_loss = evaluate_loss(state.model, val_set);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.epoch = epoch;
    append_line_atomic(log_path, std::to_string(epoch) + "," + format_double(train_loss) + "," +
                                     format_double(val_loss) + "," + format_double(wall));
    if (val_loss < state.best_val) {
      state.best_val = val_loss;
      save_checkpoint(state, out_dir / "best.camc");
    }
    save_checkpoint(state, out_dir / "last.camc");
    log("epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.epochs) + "  train " + format_double(train_loss) +
        "  val " + format_double(val_loss) + "  step " + std::to_string(state.adam.step) + "  " +
        format_double(wall) + "s");
    result.epochs_completed = epoch;
    result.last_train_loss = train_loss;
    result.last_val_loss = val_loss;
    result.best_val_loss = state.best_val;
  }
  result.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::vector<Prediction> predict(const CaptionModel<float>& model, const Vocabulary& vocab, const ToySplit& split,
                                const EvalOptions& options) {
  if (options.batch < 1 || options.max_len < 1) throw ConfigError("evaluation batch and max_len must be >= 1");
  const PreparedSplit data = PreparedSplit::from(split, vocab);
  std::vector<Prediction> preds(data.size());
  const std::size_t batch = static_cast<std::size_t>(options.batch);
  const std::size_t jobs = (data.size() + batch - 1) / batch;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t start = job * batch;
      std::vector<std::size_t> rows(std::min(batch, data.size() - start));
      std::iota(rows.begin(), rows.end(), start);
      const Batch b = make_batch(data, rows, [](std::size_t) { return 0; });
      const auto seqs = model.caption(b.t1, b.t2, options.max_len);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& p = preds[rows[i]];
        p.sample_id = split.samples[rows[i]].id;
        p.hypothesis = vocab.decode(seqs[i]);
        p.references = split.samples[rows[i]].references;
      }
    }
  };
  unsigned threads = options.threads > 0 ? static_cast<unsigned>(options.threads) : std::thread::hardware_concurrency();
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(jobs)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return preds;
}

std::vector<Prediction> oracle_predictions(const ToySplit& split) {
  std::vector<Prediction> preds;
  for (const auto& s : split.samples) preds.push_back({s.id, s.references[0], s.references});
  return preds;
}

EvalReport score(const std::vector<Prediction>& preds, bool oracle) {
  Corpus hyps;
  ReferenceSets refs;
  for (const auto& p : preds) {
    hyps.push_back(p.hypothesis);
    refs.emplace_back(p.references.begin() + (oracle ? 1 : 0), p.references.end());
  }
  return evaluate_captions(hyps, refs);
}

std::string predictions_jsonl(const std::vector<Prediction>& preds) {
  std::string out;
  for (const auto& p : preds) {
    nlohmann::ordered_json j;
    j["sample_id"] = p.sample_id;
    j["hypothesis"] = p.hypothesis;
    j["references"] = p.references;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace cama
