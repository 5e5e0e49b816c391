#include <algorithm>

#include "doctest.h"
#include "deduce/report.hpp"
#include "deduce/vocab.hpp"

using namespace deduce;

namespace {

const std::string kPrompt = "C>D,A>B,B>C,E>F,D>E|A>F";

const ParamsF& model() {
  static const ParamsF p = init_params<float>(ModelConfig{}, 21);
  return p;
}

Json trace(const TraceRequest& req) {
  QkvDecoder dec(model());
  return trace_response(dec, "m", req);
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto at = hay.find(needle); at != std::string::npos; at = hay.find(needle, at + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("trace response content") {
  TraceRequest req;
  req.prompt = kPrompt;
  const Json j = trace(req);
  CHECK(j.at("schema") == kTraceSchema);
  CHECK(j.at("checkpoint") == "m");
  CHECK(j.at("prompt") == kPrompt);
  CHECK(j.at("tokens").size() == 45);
  CHECK(j.at("positions") == 44);
  CHECK(j.at("expected") == "A>B,B>C,C>D,D>E,E>F-1");
  CHECK(j.at("output").get<std::string>().size() == 21);
  CHECK(j.at("decision").get<std::string>() == j.at("output").get<std::string>().substr(20));
  CHECK(j.at("pinv").size() == 6);
  CHECK(j.at("pinv")[0].at("tag") == "Q1");
  CHECK(j.at("pinv")[1].at("tag") == "K1");

  std::string tokens;
  for (const Json& t : j.at("tokens")) tokens += t.get<std::string>();
  CHECK(tokens.substr(0, 24) == "@" + kPrompt);
  CHECK(tokens.substr(24) == j.at("output").get<std::string>());

  // Attention rows are distributions after serialization.
  const Json back = Json::parse(render_json(j));
  for (const Json& layer : back.at("layers")) {
    REQUIRE(layer.at("attention").size() == 1);
    const Json& rows = layer.at("attention")[0];
    CHECK(rows.size() == 44);
    for (const Json& row : rows) {
      double sum = 0;
      for (const Json& v : row) sum += v.get<double>();
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
    CHECK(layer.at("residual").size() == 44);
    CHECK(layer.at("residual")[0].size() == 3);
  }
  // The logit lens on the last layer reproduces the greedy choice.
  const Json& last = back.at("layers")[1].at("residual");
  for (int p = 23; p < 44; ++p) CHECK(last[p][0].at("token") == back.at("tokens")[p + 1]);

  CHECK(j.contains("circuit"));
  CHECK(j.at("circuit").at("completion").size() == 5);
  CHECK(j.at("circuit").at("chaining").size() == 4);
}

TEST_CASE("trace response link selection") {
  TraceRequest req;
  req.prompt = "@" + kPrompt;
  req.thresholds.link = 1.01;
  CHECK(trace(req).at("links").empty());

  req.thresholds.link = 0.0;
  CHECK(trace(req).at("links").size() == 2 * 44 * 45 / 2);

  req.thresholds.link = 0.05;
  req.dst_filter = parse_positions("arrows", Layout{});
  const Json j = trace(req);
  std::set<int> endpoints;
  for (const Json& l : j.at("links")) {
    if (l.at("layer") == 2) {
      CHECK(req.dst_filter->contains(l.at("dst").get<int>()));
      endpoints.insert(l.at("src").get<int>());
      endpoints.insert(l.at("dst").get<int>());
    }
  }
  for (const Json& l : j.at("links")) {
    if (l.at("layer") == 1) CHECK(endpoints.contains(l.at("dst").get<int>()));
    CHECK(l.contains("q"));
    CHECK(l.at("q").size() == 3);
    CHECK(l.contains("role"));
  }

  req.layer = 1;
  for (const Json& l : trace(req).at("links")) {
    CHECK(l.at("layer") == 1);
    CHECK(req.dst_filter->contains(l.at("dst").get<int>()));
  }
  req.layer = 3;
  CHECK_THROWS_AS(trace(req), InputError);
}

TEST_CASE("trace responses are deterministic") {
  TraceRequest req;
  req.prompt = kPrompt;
  req.dst_filter = PositionSet{27, 31};
  CHECK(render_json(trace(req)) == render_json(trace(req)));
}

TEST_CASE("bad prompts carry the character position") {
  TraceRequest req;
  req.prompt = "C>D,A>B,B>C,E>F,D>E|A>f";
  try {
    trace(req);
    FAIL("expected an error");
  } catch (const InputError& e) {
    CHECK(e.position() == 22);
  }
  req.prompt = "@C>D,A>B,B>C,E>F,D>E|A";
  CHECK_THROWS_AS(trace(req), InputError);
  req.prompt = kPrompt;
  req.thresholds.s_q = 2;
  CHECK_THROWS_AS(trace(req), ConfigError);
}

TEST_CASE("average of one example matches its trace") {
  TraceRequest req;
  req.prompt = kPrompt;
  req.thresholds.link = 0.2;
  const Json t = trace(req);
  Example ex = parse_prompt(kPrompt);
  ex.target = t.at("output").get<std::string>();
  AverageRequest ar;
  ar.threshold = 0.2;
  const Json a = average_response(model(), "m", {ex}, ar);
  CHECK(a.at("schema") == kAverageSchema);
  CHECK(a.at("count") == 1);
  CHECK(a.at("positions") == 44);
  REQUIRE(a.at("links").size() == t.at("links").size());
  for (std::size_t i = 0; i < a.at("links").size(); ++i) {
    CHECK(a["links"][i].at("src") == t["links"][i].at("src"));
    CHECK(a["links"][i].at("dst") == t["links"][i].at("dst"));
    CHECK(a["links"][i].at("layer") == t["links"][i].at("layer"));
  }
}

TEST_CASE("average subsets") {
  const Dataset d = gen_dataset(30, 20, 5, 3);
  AverageRequest ar;
  ar.threshold = 0.3;
  const auto count_of = [&](Subset s) {
    ar.subset = s;
    return average_response(model(), "m", d.examples, ar).at("count").get<int>();
  };
  CHECK(count_of(Subset::kPositive) + count_of(Subset::kNegative) == count_of(Subset::kAll));
  CHECK(count_of(Subset::kAll) == 30);
  const auto neg = std::find_if(d.examples.begin(), d.examples.end(), [](const Example& e) { return !e.label; });
  REQUIRE(neg != d.examples.end());
  ar.subset = Subset::kPositive;
  CHECK_THROWS_AS(average_response(model(), "m", {*neg}, ar), InputError);
}

TEST_CASE("position lists") {
  const Layout l;
  CHECK(parse_positions("arrows", l) == PositionSet{25, 29, 33, 37, 41});
  CHECK(parse_positions(">", l) == PositionSet{25, 29, 33, 37, 41});
  CHECK(parse_positions("commas", l) == PositionSet{27, 31, 35, 39});
  CHECK(parse_positions("dash", l) == PositionSet{43});
  CHECK(parse_positions("3, 7,dash", l) == PositionSet{3, 7, 43});
  CHECK(parse_positions("", l).empty());
  CHECK_THROWS_AS(parse_positions("3,x", l), InputError);
  CHECK_THROWS_AS(parse_positions("45", l), InputError);
  CHECK_THROWS_AS(parse_positions("-1", l), InputError);
}

TEST_CASE("svg and text rendering") {
  TraceRequest req;
  req.prompt = kPrompt;
  req.thresholds.link = 0.1;
  req.dst_filter = PositionSet{25, 29};
  const Json j = trace(req);
  const std::string svg = render_svg(j);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(count(svg, "<line ") == j.at("links").size());
  CHECK(count(svg, "fill=\"red\"") == 3 * j.at("links").size());
  CHECK(svg.find("&gt;") != std::string::npos);
  // Every '>' of the document belongs to markup.
  for (std::size_t at = svg.find('>'); at != std::string::npos; at = svg.find('>', at + 1)) {
    const char before = svg[at - 1];
    CHECK((before == '"' || before == '/' || std::isalpha(static_cast<unsigned char>(before))));
  }
  CHECK(render_svg(j) == svg);

  const std::string text = render_text(j);
  CHECK(text.find("prompt  " + kPrompt) != std::string::npos);
  CHECK(text.find("layer 2") != std::string::npos);
  CHECK(count(text, "\n  L") == j.at("links").size());

  AverageRequest ar;
  ar.threshold = 0.3;
  const Json a = average_response(model(), "m", gen_dataset(10, 20, 5, 4).examples, ar);
  CHECK(count(render_svg(a), "<line ") == a.at("links").size());
  CHECK(count(render_svg(a), "fill=\"red\"") == 0);
  CHECK(render_text(a).find("average all over 10 examples") != std::string::npos);
}
