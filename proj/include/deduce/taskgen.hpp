#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "deduce/rng.hpp"

namespace deduce {

/// Literal id in [0, n); id 0 is 'A'.
using Literal = int;

struct Rule {
  Literal head = 0;
  Literal tail = 0;
  friend bool operator==(const Rule&, const Rule&) = default;
};

enum class Supervision { kChainOfThought, kBinary };

std::string_view to_string(Supervision s);
Supervision parse_supervision(std::string_view text);

/// How a negative was built, kept so it can be turned into a positive.
struct BreakInfo {
  int point = 0;           // b in [1, m]
  bool head_replaced = false;
  Literal broken_head = 0;  // l_b
  Literal extra = 0;        // l_{m+2}
};

struct Example {
  std::vector<Rule> rules;
  Literal q0 = 0;
  Literal q1 = 0;
  bool label = false;
  /// Break point b for negatives, chain length for positives; 0 when unknown
  /// (examples read back from disk).
  int break_point = 0;
  std::optional<BreakInfo> origin;
  std::string target;

  /// "C>D,A>B,B>C,E>F,D>E|A>F" - rules in listed order plus the query, without
  /// the leading start symbol. Also the deduplication key.
  std::string prompt() const;
};

/// Layout of a tokenized sequence for m rules. Positions are absolute indices
/// into the full sequence (start symbol at 0).
struct Layout {
  int m = 5;
  Supervision supervision = Supervision::kChainOfThought;

  int prompt_len() const { return 4 * m + 4; }
  int output_len() const { return supervision == Supervision::kChainOfThought ? 4 * m + 1 : 1; }
  int sequence_len() const { return prompt_len() + output_len(); }

  int rule_head(int r) const { return 1 + 4 * r; }
  int rule_arrow(int r) const { return 2 + 4 * r; }
  int rule_tail(int r) const { return 3 + 4 * r; }
  int entails() const { return 4 * m; }
  int query_head() const { return 4 * m + 1; }
  int query_arrow() const { return 4 * m + 2; }
  int query_tail() const { return 4 * m + 3; }

  // Chain-of-thought output slots.
  int slot_head(int i) const { return prompt_len() + 4 * i; }
  int slot_arrow(int i) const { return prompt_len() + 4 * i + 1; }
  int slot_tail(int i) const { return prompt_len() + 4 * i + 2; }
  int slot_comma(int i) const { return prompt_len() + 4 * i + 3; }  // i < m - 1
  int dash() const { return prompt_len() + 4 * m - 1; }
  int decision() const { return sequence_len() - 1; }
};

struct OracleResult {
  bool reachable = false;
  std::vector<Rule> path;
  bool unique = false;
};

/// Exhaustive path enumeration over the rule digraph, independent of the
/// greedy chaining used to build targets.
OracleResult oracle_label(const std::vector<Rule>& rules, Literal q0, Literal q1);

struct ChainOfThought {
  std::string text;
  bool label = false;
};

/// Greedy forward chaining from q0, padded with "_>_" to m slots.
ChainOfThought build_cot(const std::vector<Rule>& rules, Literal q0, Literal q1, int m);

/// Number of distinct negatives the generator can emit: P(n, m+2) * m * 2 * m!.
boost::multiprecision::cpp_int count_space(int n, int m);

Example gen_negative(int n, int m, Rng& rng);

/// Whether `neg` can be turned into a positive with at least one intact rule.
bool convertible(const Example& neg);

/// Tail-replaced negatives become positives of chain length b by asking for
/// the injected literal; head-replaced ones become length b-1 by asking for l_b.
Example to_positive(const Example& neg);

struct Dataset {
  std::vector<Example> examples;
  std::uint64_t seed = 0;
  int n = 20;
  int m = 5;
  Supervision supervision = Supervision::kChainOfThought;
  std::string split = "all";

  std::size_t positives() const;
  std::size_t negatives() const { return examples.size() - positives(); }
};

/// Balanced, deduplicated dataset; a pure function of its arguments.
Dataset gen_dataset(std::size_t count, int n, int m, std::uint64_t seed,
                    Supervision supervision = Supervision::kChainOfThought);

struct Split {
  Dataset train;
  Dataset val;
};

Split split(const Dataset& dataset, double ratio, std::uint64_t seed);

/// "@" + prompt + target as token ids.
std::vector<int> encode_example(const Example& example);

/// Parses a prompt (with or without the leading '@') into rules and query.
/// Throws InputError with the character position on malformed text.
Example parse_prompt(std::string_view prompt, int m = 5);

}  // namespace deduce
