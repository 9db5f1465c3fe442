#include "percap/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "percap/error.hpp"

namespace percap {

namespace {

bool is_split_punct(char c) {
  switch (c) {
    case '.':
    case ',':
    case '!':
    case '?':
    case ';':
    case ':':
    case '\'':
    case '"':
      return true;
    default:
      return false;
  }
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (is_split_punct(static_cast<char>(c))) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  push("PAD");
  push("BOS");
  push("EOS");
  push("UNK");
}

void Vocabulary::push(const std::string& token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& token_lists,
                             std::size_t min_freq) {
  if (token_lists.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& list : token_lists)
    for (const auto& t : list) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : freq)
    if (n >= min_freq) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, n] : kept) v.push(tok);
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("vocabulary: cannot open " + path);
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (v.index_.count(line))
      throw FormatError("vocabulary: duplicate token '" + line + "' in " + path);
    v.push(line);
  }
  static const char* reserved[4] = {"PAD", "BOS", "EOS", "UNK"};
  if (v.tokens_.size() < 4)
    throw FormatError("vocabulary: " + path + " has fewer than the 4 reserved lines");
  for (int i = 0; i < 4; ++i)
    if (v.tokens_[i] != reserved[i])
      throw FormatError("vocabulary: line " + std::to_string(i) + " of " + path + " must be '" +
                        reserved[i] + "', got '" + v.tokens_[i] + "'");
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("vocabulary: cannot write " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range [0, " +
                     std::to_string(tokens_.size()) + ")");
  return tokens_[id];
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(token) > 0; }

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<int> Vocabulary::encode_wrapped(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(kBos);
  for (const auto& t : tokens) ids.push_back(id(t));
  ids.push_back(kEos);
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

}  // namespace percap
