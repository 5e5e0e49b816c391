// Behaviour of a converged model. Uses DEDUCE_CONVERGED_CKPT when set,
// otherwise the first converged seed cached by the acceptance binary (its
// regular runs first, then its extended one); without
// either the cases only report that nothing was found.

#include <filesystem>
#include <optional>

#include "deduce/report.hpp"
#include "doctest.h"

using namespace deduce;
namespace fs = std::filesystem;

namespace {

const std::string kGuiding = "C>D,A>B,B>C,E>F,D>E|A>F";

struct Converged {
  Checkpoint ckpt;
  std::uint64_t seed = 0;
};

const std::optional<Converged>& converged() {
  static const std::optional<Converged> c = []() -> std::optional<Converged> {
    if (const char* env = std::getenv("DEDUCE_CONVERGED_CKPT")) {
      Checkpoint ck = load_checkpoint(env);
      const std::uint64_t seed = ck.meta.train.seed;
      return Converged{std::move(ck), seed};
    }
    for (const char* suffix : {"", "-extended"}) {
      for (int s = 1; s <= 10; ++s) {
        const fs::path p =
            fs::path(DEDUCE_ACCEPTANCE_DIR) / ("seed-" + std::to_string(s) + suffix) / "converged.ckpt";
        if (fs::exists(p)) return Converged{load_checkpoint(p), static_cast<std::uint64_t>(s)};
      }
    }
    return std::nullopt;
  }();
  if (!c) MESSAGE("no converged checkpoint available; nothing checked");
  return c;
}

std::string greedy(const ParamsF& p, const std::string& prompt) {
  QkvDecoder dec(p);
  TraceRequest req;
  req.prompt = prompt;
  return trace_response(dec, "c", req).at("output").get<std::string>();
}

}  // namespace

TEST_CASE("converged model answers the worked examples") {
  const auto& c = converged();
  if (!c) return;
  CHECK(greedy(c->ckpt.params, kGuiding) == "A>B,B>C,C>D,D>E,E>F-1");
  CHECK(greedy(c->ckpt.params, "E>F,C>K,B>C,A>B,D>E|A>F") == "A>B,B>C,C>K,_>_,_>_-0");
}

TEST_CASE("converged model generalizes to its validation split") {
  const auto& c = converged();
  if (!c) return;
  const Split parts = split(gen_dataset(4096, 20, 5, c->seed), 0.75, c->seed);
  CHECK(evaluate(c->ckpt.params, parts.val).full_seq_acc >= 0.99);
}

TEST_CASE("rule completion on the guiding example") {
  const auto& c = converged();
  if (!c) return;
  const Example ex = parse_prompt(kGuiding);
  const CircuitReport r = circuit_report(c->ckpt.params, ex, Thresholds{});
  REQUIRE(r.completion.size() == 5);
  REQUIRE(r.chaining.size() == 4);
  for (const StageCheck& s : r.completion) CHECK(s.pass);
  for (const StageCheck& s : r.chaining) CHECK(s.pass);
  REQUIRE(r.completion[0].decoding);
  CHECK(r.completion[0].decoding->q.at(0).token == 'A');
  CHECK(r.completion[0].decoding->k.at(0).token == 'A');
  CHECK(r.completion[0].decoding->v.at(0).token == 'B');
}

TEST_CASE("links into the output arrows at threshold 0.4") {
  const auto& c = converged();
  if (!c) return;
  QkvDecoder dec(c->ckpt.params);
  TraceRequest req;
  req.prompt = kGuiding;
  req.thresholds.link = 0.4;
  req.dst_filter = parse_positions("arrows", Layout{});
  const Json j = trace_response(dec, "c", req);
  int copies = 0, completions = 0;
  for (const Json& l : j.at("links")) {
    copies += l.at("role") == "positional_copy";
    completions += l.at("role") == "rule_completion";
  }
  MESSAGE("links: " << j.at("links").size() << ", positional copies: " << copies << ", completions: " << completions);
  CHECK(j.at("links").size() == 15);
  CHECK(copies == 10);
  CHECK(completions == 5);
}
