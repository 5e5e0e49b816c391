#include "deduce/taskgen.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <unordered_set>

#include "deduce/errors.hpp"
#include "deduce/vocab.hpp"

namespace deduce {

namespace {

char literal_char(Literal l) { return static_cast<char>('A' + l); }

void check_sizes(int n, int m) {
  if (m < 1) throw ConfigError("m must be at least 1, got " + std::to_string(m));
  if (n < m + 2) {
    throw ConfigError("need n >= m + 2 literals, got n=" + std::to_string(n) + " m=" + std::to_string(m));
  }
  if (n > Vocab::kLiterals) {
    throw ConfigError("n must not exceed " + std::to_string(Vocab::kLiterals) + ", got " + std::to_string(n));
  }
}

void count_paths(const std::vector<Rule>& rules, Literal at, Literal goal, std::vector<bool>& visited,
                 std::vector<Rule>& current, OracleResult& result, int& found) {
  if (at == goal && !current.empty()) {
    if (found == 0) result.path = current;
    ++found;
    return;
  }
  for (const Rule& rule : rules) {
    if (rule.head != at || visited[static_cast<std::size_t>(rule.tail)]) continue;
    visited[static_cast<std::size_t>(rule.tail)] = true;
    current.push_back(rule);
    count_paths(rules, rule.tail, goal, visited, current, result, found);
    current.pop_back();
    visited[static_cast<std::size_t>(rule.tail)] = false;
  }
}

}  // namespace

std::string_view to_string(Supervision s) { return s == Supervision::kChainOfThought ? "cot" : "binary"; }

Supervision parse_supervision(std::string_view text) {
  if (text == "cot") return Supervision::kChainOfThought;
  if (text == "binary") return Supervision::kBinary;
  throw ConfigError("unknown supervision mode '" + std::string(text) + "' (expected cot or binary)");
}

std::string Example::prompt() const {
  std::string text;
  for (std::size_t i = 0; i < rules.size(); ++i) {
    if (i > 0) text.push_back(',');
    text.push_back(literal_char(rules[i].head));
    text.push_back('>');
    text.push_back(literal_char(rules[i].tail));
  }
  text.push_back('|');
  text.push_back(literal_char(q0));
  text.push_back('>');
  text.push_back(literal_char(q1));
  return text;
}

OracleResult oracle_label(const std::vector<Rule>& rules, Literal q0, Literal q1) {
  OracleResult result;
  Literal max_literal = std::max(q0, q1);
  for (const Rule& r : rules) max_literal = std::max({max_literal, r.head, r.tail});
  std::vector<bool> visited(static_cast<std::size_t>(max_literal) + 1, false);
  visited[static_cast<std::size_t>(q0)] = true;
  std::vector<Rule> current;
  int found = 0;
  count_paths(rules, q0, q1, visited, current, result, found);
  result.reachable = found > 0;
  result.unique = found == 1;
  return result;
}

ChainOfThought build_cot(const std::vector<Rule>& rules, Literal q0, Literal q1, int m) {
  ChainOfThought cot;
  Literal current = q0;
  int emitted = 0;
  while (emitted < m && current != q1) {
    const auto next = std::find_if(rules.begin(), rules.end(), [&](const Rule& r) { return r.head == current; });
    if (next == rules.end()) break;
    if (emitted > 0) cot.text.push_back(',');
    cot.text += {literal_char(next->head), '>', literal_char(next->tail)};
    current = next->tail;
    ++emitted;
  }
  for (; emitted < m; ++emitted) {
    if (emitted > 0) cot.text.push_back(',');
    cot.text += "_>_";
  }
  cot.label = current == q1;
  cot.text.push_back('-');
  cot.text.push_back(cot.label ? '1' : '0');
  return cot;
}

boost::multiprecision::cpp_int count_space(int n, int m) {
  check_sizes(n, m);
  boost::multiprecision::cpp_int total = 1;
  for (int i = 0; i < m + 2; ++i) total *= n - i;
  total *= m * 2;
  for (int i = 2; i <= m; ++i) total *= i;
  return total;
}

Example gen_negative(int n, int m, Rng& rng) {
  check_sizes(n, m);
  // Step 1: m + 2 distinct literals, ordered (partial Fisher-Yates).
  std::vector<Literal> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < m + 2; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(n - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  const auto lit = [&](int i) { return pool[static_cast<std::size_t>(i - 1)]; };  // 1-based l_i

  // Steps 2-3: the chain l_1 > ... > l_{m+1} and the query l_1 > l_{m+1}.
  Example ex;
  for (int i = 1; i <= m; ++i) ex.rules.push_back({lit(i), lit(i + 1)});
  ex.q0 = lit(1);
  ex.q1 = lit(m + 1);

  // Step 4: break rule b by injecting l_{m+2} in its head or tail.
  BreakInfo info;
  info.point = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(m)));
  info.head_replaced = rng.coin();
  info.broken_head = lit(info.point);
  info.extra = lit(m + 2);
  Rule& broken = ex.rules[static_cast<std::size_t>(info.point - 1)];
  (info.head_replaced ? broken.head : broken.tail) = info.extra;

  // Step 5.
  rng.shuffle(std::span<Rule>(ex.rules));

  ex.origin = info;
  ex.break_point = info.point;
  const ChainOfThought cot = build_cot(ex.rules, ex.q0, ex.q1, m);
  ex.label = cot.label;
  ex.target = cot.text;
  return ex;
}

bool convertible(const Example& neg) {
  return neg.origin.has_value() && !neg.label && neg.origin->point >= 2;
}

Example to_positive(const Example& neg) {
  if (!convertible(neg)) {
    throw GenerationError("negative example '" + neg.prompt() + "' cannot be converted to a positive");
  }
  const BreakInfo& info = *neg.origin;
  Example pos = neg;
  const int m = static_cast<int>(neg.rules.size());
  if (info.head_replaced) {
    pos.q1 = info.broken_head;
    pos.break_point = info.point - 1;
  } else {
    pos.q1 = info.extra;
    pos.break_point = info.point;
  }
  const ChainOfThought cot = build_cot(pos.rules, pos.q0, pos.q1, m);
  pos.label = cot.label;
  pos.target = cot.text;
  if (!pos.label) throw GenerationError("conversion of '" + neg.prompt() + "' did not yield a positive");
  return pos;
}

std::size_t Dataset::positives() const {
  return static_cast<std::size_t>(
      std::count_if(examples.begin(), examples.end(), [](const Example& e) { return e.label; }));
}

Dataset gen_dataset(std::size_t count, int n, int m, std::uint64_t seed, Supervision supervision) {
  check_sizes(n, m);
  if (count == 0) throw ConfigError("dataset count must be positive");
  if (boost::multiprecision::cpp_int(count) * 2 > count_space(n, m)) {
    throw ConfigError("requested " + std::to_string(count) + " examples but the generation space holds only " +
                      count_space(n, m).str());
  }

  Dataset data;
  data.seed = seed;
  data.n = n;
  data.m = m;
  data.supervision = supervision;
  data.examples.reserve(count);

  Rng rng(seed);
  std::unordered_set<std::string> seen;
  const std::size_t max_attempts = 100 * count;
  std::size_t attempts = 0;
  // Even indices are positives, odd indices negatives.
  while (data.examples.size() < count) {
    if (++attempts > max_attempts) {
      throw GenerationError("could only generate " + std::to_string(data.examples.size()) + " distinct examples of " +
                            std::to_string(count) + " after " + std::to_string(max_attempts) + " attempts");
    }
    const bool want_positive = data.examples.size() % 2 == 0;
    Example ex = gen_negative(n, m, rng);
    if (want_positive) {
      if (!convertible(ex)) continue;
      ex = to_positive(ex);
    }
    if (!seen.insert(ex.prompt()).second) continue;
    if (supervision == Supervision::kBinary) ex.target = ex.label ? "1" : "0";
    data.examples.push_back(std::move(ex));
  }
  rng.shuffle(std::span<Example>(data.examples));
  return data;
}

Split split(const Dataset& dataset, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  std::vector<std::size_t> order(dataset.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed ^ 0x5eed5eed5eed5eedULL);
  rng.shuffle(std::span<std::size_t>(order));

  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(order.size())));
  Split out;
  for (Dataset* part : {&out.train, &out.val}) {
    part->seed = dataset.seed;
    part->n = dataset.n;
    part->m = dataset.m;
    part->supervision = dataset.supervision;
  }
  out.train.split = "train";
  out.val.split = "val";
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.train : out.val).examples.push_back(dataset.examples[order[i]]);
  }
  return out;
}

std::vector<int> encode_example(const Example& example) {
  return Vocab::encode("@" + example.prompt() + example.target);
}

Example parse_prompt(std::string_view prompt, int m) {
  const std::size_t offset = !prompt.empty() && prompt.front() == '@' ? 1 : 0;
  const std::string_view body = prompt.substr(offset);
  const auto fail = [&](std::size_t i, const std::string& why) -> void {
    throw InputError("invalid prompt at position " + std::to_string(i + offset) + ": " + why, i + offset);
  };
  // Unknown characters are reported before structural problems.
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (Vocab::id(body[i]) < 0) fail(i, std::string("character '") + body[i] + "' is not in the vocabulary");
  }
  const auto expected_len = static_cast<std::size_t>(4 * m + 3);
  const auto literal_at = [&](std::size_t i) {
    if (i >= body.size()) fail(i, "prompt is too short");
    const int id = Vocab::id(body[i]);
    if (id < 0 || id >= Vocab::kLiterals) fail(i, "expected a literal A-T");
    return id;
  };
  const auto expect = [&](std::size_t i, char c) {
    if (i >= body.size()) fail(i, "prompt is too short");
    if (body[i] != c) fail(i, std::string("expected '") + c + "'");
  };

  Example ex;
  for (int r = 0; r < m; ++r) {
    const auto base = static_cast<std::size_t>(4 * r);
    const Literal head = literal_at(base);
    expect(base + 1, '>');
    const Literal tail = literal_at(base + 2);
    expect(base + 3, r + 1 < m ? ',' : '|');
    ex.rules.push_back({head, tail});
  }
  const auto q = static_cast<std::size_t>(4 * m);
  ex.q0 = literal_at(q);
  expect(q + 1, '>');
  ex.q1 = literal_at(q + 2);
  if (body.size() != expected_len) fail(expected_len, "prompt is too long");

  const ChainOfThought cot = build_cot(ex.rules, ex.q0, ex.q1, m);
  ex.label = cot.label;
  ex.target = cot.text;
  return ex;
}

}  // namespace deduce
