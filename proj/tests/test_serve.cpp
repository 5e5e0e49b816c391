#include <filesystem>
#include <fstream>
#include <thread>

#include <unistd.h>

#include "deduce/serve.hpp"
#include "doctest.h"
#include "httplib.h"

using namespace deduce;
namespace fs = std::filesystem;

namespace {

const std::string kPrompt = "C>D,A>B,B>C,E>F,D>E|A>F";

struct Fixture {
  fs::path root;

  Fixture() {
    root = fs::temp_directory_path() / ("deduce_serve_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root / "ckpt" / "run1");
    for (const auto& [id, seed] : std::vector<std::pair<std::string, std::uint64_t>>{{"b", 2}, {"run1/e10", 3}, {"a", 1}}) {
      Checkpoint c{init_params<float>(ModelConfig{}, seed), {}};
      c.meta.tag = id;
      c.meta.epoch = static_cast<int>(seed);
      save_checkpoint(c.params, c.meta, root / "ckpt" / (id + ".ckpt"));
    }
    std::ofstream(root / "ckpt" / "broken.ckpt") << "TMLM nonsense";
    std::ofstream(root / "ckpt" / "notes.txt") << "ignored";
    write_dataset_dir(root / "data", split(gen_dataset(40, 20, 5, 9), 0.75, 9), 0.75);
  }
  ~Fixture() { fs::remove_all(root); }

  ServeOptions options(bool with_data = true) const {
    ServeOptions o;
    o.ckpt_dir = root / "ckpt";
    if (with_data) o.data_dir = root / "data";
    return o;
  }
};

Json body_of(const HttpReply& r) { return Json::parse(r.body); }

std::string run_body(const std::string& ckpt, const std::string& prompt) {
  return Json{{"ckpt", ckpt}, {"prompt", prompt}}.dump();
}

}  // namespace

TEST_CASE("checkpoint listing") {
  Fixture f;
  Service s(f.options());
  const HttpReply r = s.checkpoints();
  CHECK(r.status == 200);
  const Json j = body_of(r);
  CHECK(j.at("schema") == kCheckpointsSchema);
  std::vector<std::string> ids;
  for (const Json& c : j.at("checkpoints")) ids.push_back(c.at("id"));
  CHECK(ids == std::vector<std::string>{"a", "b", "run1/e10"});
  CHECK(j["checkpoints"][2].at("epoch") == 3);
  CHECK(j["checkpoints"][0].at("model").at("d_model") == 128);

  ServeOptions empty;
  empty.ckpt_dir = f.root / "missing";
  CHECK(body_of(Service(empty).checkpoints()).at("checkpoints").empty());
  empty.cache_size = 0;
  CHECK_THROWS_AS(Service{empty}, ConfigError);
}

TEST_CASE("run matches the library response") {
  Fixture f;
  Service s(f.options());
  const HttpReply r = s.run(run_body("run1/e10", kPrompt));
  REQUIRE(r.status == 200);
  const Checkpoint c = load_checkpoint(f.root / "ckpt" / "run1" / "e10.ckpt");
  QkvDecoder dec(c.params);
  TraceRequest tr;
  tr.prompt = kPrompt;
  CHECK(r.body == render_json(trace_response(dec, "run1/e10", tr)));

  Json req = Json::parse(run_body("a", kPrompt));
  req["thresholds"] = {{"link", 0.3}, {"top_k", 2}};
  req["dst_filter"] = "arrows";
  req["layer"] = 2;
  const Json j = body_of(s.run(req.dump()));
  CHECK(j.at("thresholds").at("link") == 0.3);
  for (const Json& l : j.at("links")) {
    CHECK(l.at("layer") == 2);
    CHECK(l.at("q").size() == 2);
  }
  req["dst_filter"] = Json::array({25, 29});
  CHECK(s.run(req.dump()).status == 200);
}

TEST_CASE("request errors") {
  Fixture f;
  Service s(f.options());
  CHECK(s.run(run_body("nope", kPrompt)).status == 404);
  CHECK(s.run(run_body("../ckpt/a", kPrompt)).status == 404);
  // Present on disk but unreadable.
  CHECK(s.run(run_body("broken", kPrompt)).status == 500);

  const HttpReply bad = s.run(run_body("a", "C>D,A>B,B>C,E>F,D>E|A?F"));
  CHECK(bad.status == 400);
  const Json e = body_of(bad);
  CHECK(e.at("schema") == kErrorSchema);
  CHECK(e.at("position") == 21);

  const HttpReply malformed = s.run("{\"ckpt\": \"a\",");
  CHECK(malformed.status == 400);
  CHECK(body_of(malformed).at("position").is_number());
  CHECK(s.run("[1, 2]").status == 400);
  CHECK(s.run(R"({"prompt": "x"})").status == 400);
  CHECK(s.run(R"({"ckpt": "a"})").status == 400);
  CHECK(s.run(R"({"ckpt": 3, "prompt": "x"})").status == 400);

  Json req = Json::parse(run_body("a", kPrompt));
  req["thresholds"] = {{"s_k", 0}};
  CHECK(s.run(req.dump()).status == 400);
  req["thresholds"] = Json::object();
  req["dst_filter"] = Json::array({99});
  CHECK(s.run(req.dump()).status == 400);
  req["dst_filter"] = "commas,x";
  CHECK(s.run(req.dump()).status == 400);
  req["dst_filter"] = nullptr;
  req["layer"] = 0;
  CHECK(s.run(req.dump()).status == 400);
}

TEST_CASE("averages") {
  Fixture f;
  Service without(f.options(false));
  CHECK(without.average(R"({"ckpt": "a"})").status == 409);

  Service s(f.options());
  const auto count_of = [&](const std::string& subset, const std::string& split) {
    const HttpReply r = s.average(Json{{"ckpt", "a"}, {"subset", subset}, {"split", split}}.dump());
    REQUIRE(r.status == 200);
    const Json j = body_of(r);
    CHECK(j.at("schema") == kAverageSchema);
    CHECK(j.at("split") == split);
    return j.at("count").get<int>();
  };
  CHECK(count_of("all", "train") == 30);
  CHECK(count_of("positive", "train") + count_of("negative", "train") == 30);
  CHECK(count_of("all", "val") == 10);
  // A memoized average answers the same way.
  const std::string q = Json{{"ckpt", "b"}, {"threshold", 0.2}, {"dst_filter", "dash"}}.dump();
  CHECK(s.average(q).body == s.average(q).body);

  CHECK(s.average(R"({"ckpt": "a", "subset": "some"})").status == 400);
  CHECK(s.average(R"({"ckpt": "a", "split": "test"})").status == 400);
  CHECK(s.average(R"({"ckpt": "zz"})").status == 404);
}

TEST_CASE("cache eviction keeps answers stable") {
  Fixture f;
  ServeOptions o = f.options();
  o.cache_size = 1;
  Service s(o);
  const std::string a1 = s.run(run_body("a", kPrompt)).body;
  const std::string b1 = s.run(run_body("b", kPrompt)).body;
  CHECK(a1 != b1);
  CHECK(s.run(run_body("a", kPrompt)).body == a1);
  CHECK(s.run(run_body("b", kPrompt)).body == b1);
}

TEST_CASE("concurrent requests") {
  Fixture f;
  ServeOptions o = f.options();
  o.cache_size = 2;
  Service s(o);
  const std::vector<std::string> ids{"a", "b", "run1/e10"};
  std::map<std::string, std::string> expected;
  for (const auto& id : ids) expected[id] = s.run(run_body(id, kPrompt)).body;

  std::vector<std::string> got(12);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < got.size(); ++i) {
    threads.emplace_back([&, i] { got[i] = s.run(run_body(ids[i % ids.size()], kPrompt)).body; });
  }
  for (auto& t : threads) t.join();
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == expected[ids[i % ids.size()]]);
}

TEST_CASE("http transport") {
  Fixture f;
  fs::create_directories(f.root / "www");
  std::ofstream(f.root / "www" / "index.html") << "<html></html>";
  ServeOptions o = f.options();
  o.static_dir = f.root / "www";
  Service s(o);
  HttpServer server(s);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread loop([&] { server.listen(); });

  httplib::Client client("127.0.0.1", port);
  const auto list = client.Get("/checkpoints");
  REQUIRE(list);
  CHECK(list->status == 200);
  CHECK(list->body == s.checkpoints().body);
  CHECK(list->get_header_value("Access-Control-Allow-Origin") == "*");

  const auto run = client.Post("/run", run_body("a", kPrompt), "application/json");
  REQUIRE(run);
  CHECK(run->status == 200);
  CHECK(run->body == s.run(run_body("a", kPrompt)).body);

  const auto bad = client.Post("/run", "{", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(bad->get_header_value("Content-Type") == "application/json");

  const auto avg = client.Post("/average", R"({"ckpt": "b"})", "application/json");
  REQUIRE(avg);
  CHECK(avg->status == 200);

  const auto pre = client.Options("/run");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

  const auto page = client.Get("/index.html");
  REQUIRE(page);
  CHECK(page->body == "<html></html>");

  server.stop();
  loop.join();
}
