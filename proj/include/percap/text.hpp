#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace percap {

// Lowercases, splits on whitespace, and breaks the punctuation marks
// .,!?;:'" out as standalone tokens. Deterministic; empty input gives an
// empty list.
std::vector<std::string> tokenize(const std::string& text);

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// Token table with four reserved entries at fixed ids. Unknown lookups map
// to UNK; id→token→id round-trips for every id.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();

  // Tokens with frequency >= min_freq, ordered by descending frequency then
  // lexicographically, appended after the reserved entries.
  static Vocabulary build(const std::vector<std::vector<std::string>>& token_lists,
                          std::size_t min_freq);

  // One token per line, line number = id; the first four lines must read
  // PAD BOS EOS UNK.
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int id(const std::string& token) const;  // UNK for absent tokens
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  // BOS + ids + EOS
  std::vector<int> encode_wrapped(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void push(const std::string& token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace percap
