#pragma once

// Fixed caption vocabulary and tokenizer.

#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vlseg/errors.hpp"

namespace vlseg {

using TokenIds = std::vector<std::size_t>;

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;

  /// Word for each id; id 0 is padding.
  static constexpr std::array<std::string_view, 11> kWords = {
      "<pad>", "disc", "square", "triangle", "upper", "lower", "left", "right", "segment", "the", "in"};

  static constexpr std::size_t size() { return kWords.size(); }

  static std::size_t id(std::string_view word) {
    for (std::size_t i = 1; i < kWords.size(); ++i) {
      if (kWords[i] == word) return i;
    }
    throw DataError("unknown word '" + std::string(word) + "'");
  }

  static std::string_view word(std::size_t id) {
    if (id >= kWords.size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return kWords[id];
  }
};

/// Word ids in caption order, zero-padded to `n`.
inline TokenIds tokenize(const std::string& caption, std::size_t n) {
  TokenIds ids(n, Vocab::kPad);
  std::istringstream in(caption);
  std::string w;
  std::size_t i = 0;
  while (in >> w) {
    const std::size_t id = Vocab::id(w);
    if (i == n) throw DataError("caption has more than " + std::to_string(n) + " words: '" + caption + "'");
    ids[i++] = id;
  }
  return ids;
}

/// Non-padding words joined by single spaces.
inline std::string detokenize(const TokenIds& ids) {
  std::string out;
  for (std::size_t id : ids) {
    if (id == Vocab::kPad) continue;
    if (!out.empty()) out += ' ';
    out += Vocab::word(id);
  }
  return out;
}

}  // namespace vlseg
