#pragma once

// Byte-level vocabulary: printable ASCII (0x20..0x7E) maps to ids 0..94,
// newline to 95, followed by the reserved control tokens.

#include <string>
#include <string_view>
#include <vector>

#include "translora/errors.hpp"

namespace translora {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

namespace tok {
inline constexpr TokenId kNewline = 95;
inline constexpr TokenId kBos = 96;
inline constexpr TokenId kEos = 97;
inline constexpr TokenId kPad = 98;
inline constexpr TokenId kYes = 99;
inline constexpr TokenId kNo = 100;
inline constexpr std::size_t kVocabSize = 101;
inline constexpr std::size_t kNoLimit = static_cast<std::size_t>(-1);

inline bool is_reserved(TokenId id) noexcept { return id >= kBos; }
}  // namespace tok

inline bool is_supported_char(char c) noexcept {
  return c == '\n' || (c >= 0x20 && c <= 0x7E);
}

inline TokenSeq tokenize(std::string_view text, std::size_t max_len = tok::kNoLimit) {
  if (text.size() > max_len) {
    throw SequenceTooLong(std::to_string(text.size()) + " tokens exceed max_len " +
                          std::to_string(max_len));
  }
  TokenSeq ids;
  ids.reserve(text.size());
  for (char c : text) {
    if (c == '\n') {
      ids.push_back(tok::kNewline);
    } else if (c >= 0x20 && c <= 0x7E) {
      ids.push_back(static_cast<TokenId>(c - 0x20));
    } else {
      throw UnsupportedCharacter("byte 0x" + std::to_string(static_cast<unsigned char>(c)));
    }
  }
  return ids;
}

// Reserved tokens are dropped.
inline std::string detokenize(const TokenSeq& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id == tok::kNewline) {
      out.push_back('\n');
    } else if (id >= 0 && id < tok::kNewline) {
      out.push_back(static_cast<char>(id + 0x20));
    }
  }
  return out;
}

}  // namespace translora
