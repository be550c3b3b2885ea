#pragma once

// Synthetic bi-temporal scenes on a cell grid with templated change captions.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cama/tensor.hpp"
#include "cama/vocab.hpp"

namespace cama {

enum class CellClass : std::uint8_t { empty = 0, road = 1, trees = 2, house = 3 };
enum class EventKind : std::uint8_t { added, removed, none };
enum class Region : std::uint8_t { top_left, top_right, bottom_left, bottom_right, center };

inline constexpr int kNumRegions = 5;
inline constexpr int kReferencesPerSample = 5;

/// Rendered intensity of a cell class: empty 0, road 0.33, trees 0.66, house 1.
float intensity(CellClass c);
/// Inverse of intensity(); throws FormatError for values that are not a class intensity.
CellClass class_of_intensity(float v);

std::string to_string(CellClass c);
std::string to_string(EventKind k);
std::string to_string(Region r);
CellClass parse_cell_class(const std::string& s);
EventKind parse_event_kind(const std::string& s);
Region parse_region(const std::string& s);

struct GridScene {
  Index height = 32;
  Index width = 32;
  std::vector<CellClass> cells;  // row-major

  GridScene() = default;
  GridScene(Index h, Index w) : height(h), width(w), cells(static_cast<std::size_t>(h * w), CellClass::empty) {}

  CellClass at(Index r, Index c) const { return cells[static_cast<std::size_t>(r * width + c)]; }
  CellClass& at(Index r, Index c) { return cells[static_cast<std::size_t>(r * width + c)]; }
  Index count(CellClass c) const;

  /// [H, W, 1] intensities.
  Tensor<float> render() const;
  static GridScene from_rendered(const Tensor<float>& image);

  bool operator==(const GridScene&) const = default;
};

/// Whether cell (r, c) of a 32x32-style grid belongs to `region`. The center block is
/// rows/cols [H*3/8, H*5/8); quadrants exclude it.
bool in_region(Region region, Index r, Index c, Index height, Index width);

struct ChangeEvent {
  EventKind kind = EventKind::none;
  CellClass object = CellClass::house;
  Region region = Region::center;
  int count = 1;

  bool operator==(const ChangeEvent&) const = default;
};

struct ToySample {
  std::uint64_t id = 0;
  GridScene t1;
  GridScene t2;
  std::vector<ChangeEvent> events;  // empty means no change; sorted by region
  std::array<std::string, kReferencesPerSample> references;
};

/// One caption per template index for the given events.
std::array<std::string, kReferencesPerSample> describe(const std::vector<ChangeEvent>& events);

/// Recovers the events from any caption produced by describe(); nullopt if the
/// sentence does not follow the templates.
std::optional<std::vector<ChangeEvent>> parse_caption(const std::string& caption);

/// Deterministic sample from a seed (32x32 grid).
ToySample generate_sample(std::uint64_t seed);

struct ToySplit {
  std::string name;
  std::vector<ToySample> samples;
};

struct ToyDataset {
  ToySplit train;
  ToySplit val;
  ToySplit test;
  Vocabulary vocab;

  const ToySplit& split(const std::string& name) const;
};

/// Per-sample seed for sample `id` of a dataset generated with `seed`.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t id);

/// First sample id of each split; the ranges never overlap for split sizes < 2^40.
inline constexpr std::uint64_t kSplitIdStride = std::uint64_t{1} << 40;

/// Splits with disjoint id ranges; vocabulary from train references only.
ToyDataset build_dataset(int n_train, int n_val, int n_test, std::uint64_t seed);

/// Layout: <dir>/vocab.txt and <dir>/<split>/{scenes.bin, captions.jsonl}.
void save_dataset(const ToyDataset& data, const std::filesystem::path& dir);
ToySplit load_split(const std::filesystem::path& dir, const std::string& split);
Vocabulary load_vocab(const std::filesystem::path& file);
std::string vocab_text(const Vocabulary& vocab);
ToyDataset load_dataset(const std::filesystem::path& dir);

}  // namespace cama
