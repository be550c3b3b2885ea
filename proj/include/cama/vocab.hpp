#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cama {

/// Token <-> id map with fixed specials PAD=0, BOS=1, EOS=2, UNK=3.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();

  /// Specials followed by `words` in the given order (duplicates and specials skipped).
  static Vocabulary from_words(const std::vector<std::string>& words);
  /// Sorted lexicon of every whitespace token in `sentences`.
  static Vocabulary build(const std::vector<std::string>& sentences);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// [BOS, ids..., EOS]; unseen words map to UNK.
  std::vector<int> encode(std::string_view sentence) const;
  /// Words up to the first EOS; PAD and BOS are skipped.
  std::string decode(const std::vector<int>& ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void push(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercased whitespace tokens with terminal punctuation stripped.
std::vector<std::string> tokenize(std::string_view sentence);

}  // namespace cama
