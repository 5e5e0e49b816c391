#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace deduce {

/// Single-character vocabulary. Literals 'A'..'T' take ids 0..19, followed by
/// the punctuation symbols in a fixed order.
class Vocab {
 public:
  static constexpr int kSize = 28;
  static constexpr int kLiterals = 20;

  static constexpr int kStart = 20;    // '@'
  static constexpr int kEntails = 21;  // '|'
  static constexpr int kComma = 22;    // ','
  static constexpr int kImplies = 23;  // '>'
  static constexpr int kPad = 24;      // '_'
  static constexpr int kDash = 25;     // '-'
  static constexpr int kFalse = 26;    // '0'
  static constexpr int kTrue = 27;     // '1'

  static constexpr std::string_view kSymbols = "ABCDEFGHIJKLMNOPQRST@|,>_-01";

  /// Id of `c`, or -1 when `c` is not in the vocabulary.
  static constexpr int id(char c) {
    const auto pos = kSymbols.find(c);
    return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
  }

  static char symbol(int id);

  /// Throws InputError carrying the index of the first unknown character.
  static std::vector<int> encode(std::string_view text);
  static std::string decode(const std::vector<int>& ids);
};

static_assert(Vocab::kSymbols.size() == Vocab::kSize);

}  // namespace deduce
