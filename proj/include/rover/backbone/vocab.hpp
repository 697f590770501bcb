#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rover/util/random.hpp"

namespace rover {

using TokenId = std::int32_t;

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace words {
inline const std::vector<std::string> kColors = {"red", "green", "blue", "yellow", "purple", "orange"};
inline const std::vector<std::string> kShapes = {"ball", "cube", "cone", "ring", "star", "cylinder"};
inline const std::vector<std::string> kNumbers = {"zero", "one", "two", "three", "four", "five", "six"};
}  // namespace words

// Closed toy vocabulary. Ids are assigned in a fixed order so that structural
// token ids never change between runs.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kImageSep = 3;

  Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<image_sep>", "<obj>", "</obj>", "<box>", "</box>", "[", "]",
                          ",", "-"})
      add(t);
    for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
    for (const auto& w : words::kColors) add(w);
    for (const auto& w : words::kShapes) add(w);
    for (const auto& w : words::kNumbers) add(w);
    for (const char* w : {"yes", "no", "both", "none", "image", "in", "the", "a", "an", "object", "objects", "which",
                          "what", "how", "many", "is", "are", "there", "of", "same", "color", "shape", "as", "has",
                          "have", "and", "does", "do", "any", "with", "find", "tell", "me", "count", "total",
                          "matches", "match", "look", "at", "to", "that", "it", "its", "than", "options", "answer",
                          "evidence", "question", "?", ".", ":", ";"})
      add(w);
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) throw VocabularyError("unknown token '" + std::string(token) + "'");
    return it->second;
  }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw VocabularyError("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  std::vector<std::string> decode(const std::vector<TokenId>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (TokenId i : ids) out.push_back(token(i));
    return out;
  }

  std::string render(const std::vector<TokenId>& ids) const {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ' ';
      s += token(ids[i]);
    }
    return s;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("vocab");
    for (const auto& t : tokens_) h = fnv1a64(t + '\n', h);
    return h;
  }

  // Tokenize a space-separated string of known tokens.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && text[i] == ' ') ++i;
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      if (j > i) out.push_back(id(text.substr(i, j - i)));
      i = j;
    }
    return out;
  }

 private:
  void add(const std::string& t) {
    ids_.emplace(t, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace rover
