#pragma once

// Teacher-forced training, checkpoints and batched evaluation of the captioner.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cama/config.hpp"
#include "cama/metrics.hpp"
#include "cama/model.hpp"
#include "cama/toy_world.hpp"
#include "cama/vocab.hpp"

namespace cama {

using NamedParam = std::pair<std::string, Tensor<float>>;

/// Trainable tensors of a model in visit order (handles share storage with the model).
std::vector<NamedParam> parameters(CaptionModel<float>& model);

struct Adam {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;

  void init(const std::vector<NamedParam>& params);
  /// One bias-corrected update from the accumulated gradients, which are then cleared.
  void update(const std::vector<NamedParam>& params);
};

struct TrainState {
  RunConfig config;
  Vocabulary vocab;
  CaptionModel<float> model;
  Adam adam;
  int epoch = 0;  // completed epochs
  double best_val = std::numeric_limits<double>::infinity();

  static TrainState fresh(const RunConfig& cfg, const Vocabulary& vocab);
};

/// CAMC: "CAMC" | u32 version | config text | vocabulary | named CAMT parameters |
/// Adam moments | u64 step | u32 epoch | f64 best validation loss.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

/// Rendered scenes and encoded references of a split, prepared once.
struct PreparedSplit {
  std::vector<std::uint64_t> ids;
  std::vector<std::vector<float>> t1;
  std::vector<std::vector<float>> t2;
  std::vector<std::array<std::vector<int>, kReferencesPerSample>> tokens;  // BOS ... EOS
  Index height = 32;
  Index width = 32;

  static PreparedSplit from(const ToySplit& split, const Vocabulary& vocab);
  std::size_t size() const { return ids.size(); }
};

struct Batch {
  Tensor<float> t1;  // [B, H, W, 1]
  Tensor<float> t2;
  std::vector<int> inputs;   // [B, T]: caption without its last token
  std::vector<int> targets;  // [B, T]: caption shifted left, PAD-filled
  Index size = 0;
  Index steps = 0;
};

/// Batch of samples `rows` using reference `pick(row)` for each.
Batch make_batch(const PreparedSplit& data, std::span<const std::size_t> rows,
                 const std::function<int(std::size_t)>& pick);

/// Mean token NLL over a split (reference id % 5 per sample), without recording.
double evaluate_loss(const CaptionModel<float>& model, const PreparedSplit& data, int batch = 50);

struct TrainOptions {
  bool resume = false;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  int epochs_completed = 0;
  double last_train_loss = 0;
  double last_val_loss = 0;
  double best_val_loss = 0;
  double wall_s = 0;
};

/// Trains per `cfg` on the dataset at cfg.data_dir. Writes config.txt, train_log.csv,
/// last.camc and best.camc into cfg.out_dir. A non-finite loss throws DivergenceError
/// naming the epoch and batch.
TrainResult train(const RunConfig& cfg, const TrainOptions& options = {});

struct Prediction {
  std::uint64_t sample_id = 0;
  std::string hypothesis;
  std::array<std::string, kReferencesPerSample> references;
};

struct EvalOptions {
  int batch = 50;  // fixed so results do not depend on the thread count
  int max_len = 24;
  int threads = 0;  // 0: hardware concurrency
};

/// Greedy-decodes every sample of `split`; batches are spread over a worker pool.
std::vector<Prediction> predict(const CaptionModel<float>& model, const Vocabulary& vocab, const ToySplit& split,
                                const EvalOptions& options = {});

/// Reference 0 as the hypothesis, scored against references 1..4.
std::vector<Prediction> oracle_predictions(const ToySplit& split);

/// Scores predictions; oracle predictions are scored against references 1..4 only.
EvalReport score(const std::vector<Prediction>& preds, bool oracle = false);

std::string predictions_jsonl(const std::vector<Prediction>& preds);

}  // namespace cama
