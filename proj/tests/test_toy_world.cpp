#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include <unistd.h>

#include "cama/errors.hpp"
#include "cama/fsutil.hpp"
#include "cama/model.hpp"
#include "cama/toy_world.hpp"
#include "test_util.hpp"

using namespace cama;
namespace fs = std::filesystem;
using cama::testing::bitwise_equal;
using cama::testing::random_tensor;

namespace {

Index count_in_region(const GridScene& s, CellClass c, Region r) {
  Index n = 0;
  for (Index i = 0; i < s.height; ++i) {
    for (Index j = 0; j < s.width; ++j) n += in_region(r, i, j, s.height, s.width) && s.at(i, j) == c;
  }
  return n;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("cama-test-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("rendering is injective per class") {
  std::set<float> seen;
  for (auto c : {CellClass::empty, CellClass::road, CellClass::trees, CellClass::house}) {
    seen.insert(intensity(c));
    CHECK(class_of_intensity(intensity(c)) == c);
  }
  CHECK(seen.size() == 4);
  CHECK(intensity(CellClass::empty) == 0.0f);
  CHECK(intensity(CellClass::road) == 0.33f);
  CHECK(intensity(CellClass::trees) == 0.66f);
  CHECK(intensity(CellClass::house) == 1.0f);
  CHECK_THROWS_AS(class_of_intensity(0.5f), FormatError);
}

TEST_CASE("regions partition the grid") {
  for (Index r = 0; r < 32; ++r) {
    for (Index c = 0; c < 32; ++c) {
      int hits = 0;
      for (int k = 0; k < kNumRegions; ++k) hits += in_region(static_cast<Region>(k), r, c, 32, 32);
      CHECK(hits == 1);
    }
  }
  CHECK(in_region(Region::center, 16, 16, 32, 32));
  CHECK(in_region(Region::top_left, 0, 0, 32, 32));
  CHECK(in_region(Region::bottom_right, 31, 31, 32, 32));
}

TEST_CASE("generated samples") {
  int none = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const ToySample s = generate_sample(seed);
    REQUIRE(s.t1.cells.size() == 32u * 32u);
    if (s.events.empty()) {
      ++none;
      CHECK(bitwise_equal(s.t1.render(), s.t2.render()));
      CHECK(s.references == describe({}));
    }
    std::set<Region> regions;
    for (const auto& e : s.events) {
      regions.insert(e.region);
      const Index before = count_in_region(s.t1, e.object, e.region);
      const Index after = count_in_region(s.t2, e.object, e.region);
      CHECK(after - before == (e.kind == EventKind::added ? e.count : -e.count));
      CHECK(e.count >= 1);
      CHECK(e.count <= 3);
    }
    CHECK(regions.size() == s.events.size());
    std::set<std::string> distinct(s.references.begin(), s.references.end());
    CHECK(distinct.size() == kReferencesPerSample);
  }
  CHECK(none > 120);  // about 40% unchanged
  CHECK(none < 200);
}

TEST_CASE("added house with count 2 adds exactly two houses") {
  bool found = false;
  for (std::uint64_t seed = 0; seed < 2000 && !found; ++seed) {
    const ToySample s = generate_sample(seed);
    if (s.events.size() != 1) continue;
    const auto& e = s.events.front();
    if (e.kind != EventKind::added || e.object != CellClass::house || e.count != 2) continue;
    found = true;
    CHECK(s.t2.count(CellClass::house) - s.t1.count(CellClass::house) == 2);
    CHECK(s.references[0].find("two houses") != std::string::npos);
  }
  CHECK(found);
}

TEST_CASE("changes land on an empty background, one changed cell per 8x8 block") {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const ToySample s = generate_sample(seed);
    Index changed_cells = 0;
    std::set<Index> blocks;
    for (Index r = 0; r < s.t1.height; ++r) {
      for (Index c = 0; c < s.t1.width; ++c) {
        const bool occupied_both = s.t1.at(r, c) != CellClass::empty && s.t2.at(r, c) != CellClass::empty;
        CHECK_FALSE(occupied_both);
        if (s.t1.at(r, c) != s.t2.at(r, c)) {
          ++changed_cells;
          blocks.insert((r / 8) * (s.t1.width / 8) + c / 8);
        }
      }
    }
    Index expected = 0;
    for (const auto& e : s.events) expected += e.count;
    CHECK(changed_cells == expected);
    CHECK(static_cast<Index>(blocks.size()) == changed_cells);
  }
}

TEST_CASE("generation is deterministic") {
  const ToySample a = generate_sample(12345);
  const ToySample b = generate_sample(12345);
  CHECK(a.t1 == b.t1);
  CHECK(a.t2 == b.t2);
  CHECK(a.events == b.events);
  CHECK(a.references == b.references);
  CHECK(bitwise_equal(a.t1.render(), b.t1.render()));
}

TEST_CASE("captions parse back to their events for 1000 samples") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const ToySample s = generate_sample(seed * 7919 + 3);
    for (const auto& ref : s.references) {
      const auto parsed = parse_caption(ref);
      REQUIRE(parsed.has_value());
      CHECK(*parsed == s.events);
    }
  }
  CHECK_FALSE(parse_caption("a purple elephant").has_value());
  CHECK_FALSE(parse_caption("two house have been added in the center").has_value());
}

TEST_CASE("scene rendering round trips") {
  const ToySample s = generate_sample(99);
  CHECK(GridScene::from_rendered(s.t1.render()) == s.t1);
  CHECK(s.t1.render().shape() == Shape{32, 32, 1});
}

TEST_CASE("dataset splits and vocabulary") {
  const ToyDataset d = build_dataset(2000, 200, 200, 7);
  CHECK(d.train.samples.size() == 2000);
  CHECK(d.val.samples.size() == 200);
  CHECK(d.test.samples.size() == 200);
  // template lexicon plus the four specials
  std::set<std::string> words;
  for (const auto& s : d.train.samples) {
    for (const auto& r : s.references) {
      for (const auto& w : tokenize(r)) words.insert(w);
    }
  }
  CHECK(d.vocab.size() == static_cast<int>(words.size()) + 4);
  CHECK(d.vocab.size() >= 30);
  CHECK(d.vocab.size() <= 60);
  CHECK(d.vocab.token(Vocabulary::kPad) == "<pad>");

  std::set<std::uint64_t> ids;
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const auto& s : split->samples) CHECK(ids.insert(s.id).second);
  }
  const ToyDataset again = build_dataset(2000, 200, 200, 7);
  CHECK(again.vocab == d.vocab);
  for (std::size_t i = 0; i < d.test.samples.size(); ++i) {
    CHECK(again.test.samples[i].t2 == d.test.samples[i].t2);
    CHECK(again.test.samples[i].references == d.test.samples[i].references);
  }
  CHECK_THROWS_AS(build_dataset(0, 1, 1, 7), ConfigError);
  CHECK_THROWS_AS(build_dataset(1, 1, 0, 7), ConfigError);
}

TEST_CASE("unseen words map to UNK") {
  const Vocabulary v = Vocabulary::build({"a house", "two roads"});
  const auto ids = v.encode("a castle");
  CHECK(ids.front() == Vocabulary::kBos);
  CHECK(ids.back() == Vocabulary::kEos);
  CHECK(ids[2] == Vocabulary::kUnk);
  CHECK(v.decode(v.encode("two roads")) == "two roads");
}

TEST_CASE("dataset serialization round trips bitwise") {
  const auto dir = scratch_dir("ds");
  const ToyDataset d = build_dataset(30, 5, 5, 11);
  save_dataset(d, dir);
  CHECK(fs::exists(dir / "vocab.txt"));
  for (const char* s : {"train", "val", "test"}) {
    CHECK(fs::exists(dir / s / "scenes.bin"));
    CHECK(fs::exists(dir / s / "captions.jsonl"));
  }
  const ToyDataset back = load_dataset(dir);
  CHECK(back.vocab == d.vocab);
  for (std::size_t i = 0; i < d.train.samples.size(); ++i) {
    const auto& a = d.train.samples[i];
    const auto& b = back.train.samples[i];
    CHECK(a.id == b.id);
    CHECK(a.t1 == b.t1);
    CHECK(a.t2 == b.t2);
    CHECK(a.events == b.events);
    CHECK(a.references == b.references);
  }
  const std::string first = read_file(dir / "train" / "scenes.bin");
  const auto dir2 = scratch_dir("ds2");
  save_dataset(build_dataset(30, 5, 5, 11), dir2);
  CHECK(read_file(dir2 / "train" / "scenes.bin") == first);
  CHECK(read_file(dir2 / "train" / "captions.jsonl") == read_file(dir / "train" / "captions.jsonl"));
  CHECK(read_file(dir2 / "vocab.txt") == read_file(dir / "vocab.txt"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("patch embedding") {
  Rng rng(1, "patch");
  auto pe = PatchEmbed<double>::init(8, 32, rng);
  auto constant = Tensor<double>::full({32, 32, 1}, 0.66);
  auto y = patch_embed(constant, pe);
  CHECK(y.shape() == Shape{16, 32});
  for (Index r = 1; r < 16; ++r) CHECK(cama::testing::rows_bitwise_equal(slice(y, 0, 0, 1), slice(y, 0, r, 1), 0, 1));

  auto img = random_tensor({32, 32, 1}, rng);
  auto base = patch_embed(img, pe);
  auto moved = img.clone();
  moved.raw()[static_cast<std::size_t>(13 * 32 + 20)] += 1.0;  // row 13, col 20 -> patch (1, 2)
  auto after = patch_embed(moved, pe);
  for (Index r = 0; r < 16; ++r) {
    const bool same = cama::testing::rows_bitwise_equal(slice(base, 0, r, 1), slice(after, 0, r, 1), 0, 1);
    CHECK(same == (r != 1 * 4 + 2));
  }
  CHECK_THROWS_AS(extract_patches(Tensor<double>({30, 30, 1}), 8), ConfigError);
  CHECK(patch_embed(random_tensor({2, 32, 32, 1}, rng), pe).shape() == Shape{2, 16, 32});
}
