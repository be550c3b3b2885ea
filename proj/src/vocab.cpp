#include "cama/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "cama/errors.hpp"

namespace cama {

std::vector<std::string> tokenize(std::string_view sentence) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    while (!cur.empty() && std::ispunct(static_cast<unsigned char>(cur.back()))) cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : sentence) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) push(s);
}

void Vocabulary::push(const std::string& token) {
  if (index_.count(token) != 0) return;
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) v.push(w);
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& sentences) {
  std::set<std::string> lexicon;
  for (const auto& s : sentences) {
    for (auto& t : tokenize(s)) lexicon.insert(std::move(t));
  }
  return from_words({lexicon.begin(), lexicon.end()});
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view sentence) const {
  std::vector<int> ids{kBos};
  for (const auto& t : tokenize(sentence)) ids.push_back(id(t));
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::ostringstream os;
  bool first = true;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    if (!first) os << ' ';
    os << token(id);
    first = false;
  }
  return os.str();
}

}  // namespace cama
