#include "deduce/serve.hpp"

#include <algorithm>

#include "httplib.h"

namespace deduce {

namespace fs = std::filesystem;

namespace {

struct HttpError {
  int status;
  std::string message;
  std::optional<std::size_t> position;
};

HttpReply error_reply(const HttpError& e) {
  Json j{{"schema", kErrorSchema}, {"error", e.message}};
  j["position"] = e.position ? Json(*e.position) : Json(nullptr);
  return {e.status, render_json(j)};
}

Json parse_body(const std::string& body) {
  try {
    Json j = Json::parse(body);
    if (!j.is_object()) throw HttpError{400, "request body must be a JSON object", {}};
    return j;
  } catch (const Json::parse_error& e) {
    throw HttpError{400, std::string("malformed JSON: ") + e.what(), e.byte > 0 ? std::optional(e.byte - 1) : std::nullopt};
  }
}

std::optional<PositionSet> dst_filter_of(const Json& req, const Layout& layout) {
  if (!req.contains("dst_filter") || req["dst_filter"].is_null()) return std::nullopt;
  const Json& f = req["dst_filter"];
  if (f.is_string()) return parse_positions(f.get<std::string>(), layout);
  PositionSet out;
  for (const Json& p : f) {
    const int v = p.get<int>();
    if (v < 0 || v >= layout.sequence_len()) throw InputError("position " + std::to_string(v) + " out of range");
    out.insert(v);
  }
  return out;
}

std::optional<int> layer_of(const Json& req) {
  if (!req.contains("layer") || req["layer"].is_null()) return std::nullopt;
  return req["layer"].get<int>();
}

template <typename F>
HttpReply guarded(F&& f) {
  try {
    return f();
  } catch (const HttpError& e) {
    return error_reply(e);
  } catch (const InputError& e) {
    return error_reply({400, e.what(), e.position() == InputError::npos ? std::nullopt : std::optional(e.position())});
  } catch (const ConfigError& e) {
    return error_reply({400, e.what(), {}});
  } catch (const Json::exception& e) {
    return error_reply({400, std::string("bad request field: ") + e.what(), {}});
  } catch (const std::exception& e) {
    return error_reply({500, e.what(), {}});
  }
}

Layout layout_for(const ParamsF& p) { return Layout{(p.config.context_len - 5) / 8, Supervision::kChainOfThought}; }

}  // namespace

Service::Service(ServeOptions options) : options_(std::move(options)) {
  if (options_.cache_size == 0) throw ConfigError("cache size must be at least 1");
}

std::vector<std::string> Service::checkpoint_ids() const {
  std::vector<std::string> ids;
  std::error_code ec;
  if (!fs::is_directory(options_.ckpt_dir, ec)) return ids;
  for (const auto& e : fs::recursive_directory_iterator(options_.ckpt_dir, ec)) {
    if (!e.is_regular_file() || e.path().extension() != ".ckpt") continue;
    fs::path rel = fs::relative(e.path(), options_.ckpt_dir);
    rel.replace_extension();
    ids.push_back(rel.generic_string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

HttpReply Service::checkpoints() const {
  return guarded([&] {
    Json list = Json::array();
    for (const std::string& id : checkpoint_ids()) {
      try {
        const CheckpointMeta meta = read_checkpoint_meta(options_.ckpt_dir / (id + ".ckpt"));
        Json item{{"id", id}, {"tag", meta.tag}, {"epoch", meta.epoch}};
        item["metrics"] = meta.metrics ? Json(*meta.metrics) : Json(nullptr);
        item["model"] = meta.model;
        list.push_back(std::move(item));
      } catch (const Error&) {
        // Unreadable files are not offered.
      }
    }
    return HttpReply{200, render_json(Json{{"schema", kCheckpointsSchema}, {"checkpoints", std::move(list)}})};
  });
}

std::shared_ptr<Service::Entry> Service::entry(const std::string& id) {
  std::lock_guard lock(cache_mutex_);
  for (auto it = lru_.begin(); it != lru_.end(); ++it) {
    if ((*it)->id == id) {
      lru_.splice(lru_.begin(), lru_, it);
      return lru_.front();
    }
  }
  // Only listed ids resolve, so request strings never reach the filesystem.
  const std::vector<std::string> ids = checkpoint_ids();
  if (std::find(ids.begin(), ids.end(), id) == ids.end()) throw HttpError{404, "unknown checkpoint '" + id + "'", {}};
  auto e = std::make_shared<Entry>();
  e->id = id;
  try {
    e->checkpoint = std::make_unique<Checkpoint>(load_checkpoint(options_.ckpt_dir / (id + ".ckpt")));
  } catch (const CorruptionError& err) {
    throw HttpError{500, err.what(), {}};
  }
  e->decoder = std::make_unique<QkvDecoder>(e->checkpoint->params);
  lru_.push_front(e);
  while (lru_.size() > options_.cache_size) lru_.pop_back();
  return e;
}

const Split& Service::dataset() {
  std::lock_guard lock(data_mutex_);
  if (!data_) {
    if (!options_.data_dir) throw HttpError{409, "no dataset registered with the server", {}};
    data_ = read_dataset_dir(*options_.data_dir).split;
  }
  return *data_;
}

HttpReply Service::run(const std::string& body) {
  return guarded([&] {
    const Json req = parse_body(body);
    if (!req.contains("ckpt")) throw HttpError{400, "missing field 'ckpt'", {}};
    if (!req.contains("prompt")) throw HttpError{400, "missing field 'prompt'", {}};
    const std::shared_ptr<Entry> e = entry(req.at("ckpt").get<std::string>());
    TraceRequest tr;
    tr.prompt = req.at("prompt").get<std::string>();
    if (req.contains("thresholds")) {
      const Json& t = req["thresholds"];
      tr.thresholds.link = t.value("link", tr.thresholds.link);
      tr.thresholds.final_link = t.value("final_link", tr.thresholds.final_link);
      tr.thresholds.s_q = t.value("s_q", tr.thresholds.s_q);
      tr.thresholds.s_k = t.value("s_k", tr.thresholds.s_k);
      tr.thresholds.s_v = t.value("s_v", tr.thresholds.s_v);
      tr.thresholds.top_k = t.value("top_k", tr.thresholds.top_k);
    }
    tr.dst_filter = dst_filter_of(req, layout_for(e->checkpoint->params));
    tr.layer = layer_of(req);
    return HttpReply{200, render_json(trace_response(*e->decoder, e->id, tr))};
  });
}

HttpReply Service::average(const std::string& body) {
  return guarded([&] {
    const Json req = parse_body(body);
    if (!req.contains("ckpt")) throw HttpError{400, "missing field 'ckpt'", {}};
    const std::shared_ptr<Entry> e = entry(req.at("ckpt").get<std::string>());
    const Split& data = dataset();
    AverageRequest ar;
    ar.subset = parse_subset(req.value("subset", std::string("all")));
    ar.threshold = req.value("threshold", ar.threshold);
    ar.dst_filter = dst_filter_of(req, layout_for(e->checkpoint->params));
    ar.layer = layer_of(req);
    const std::string split = req.value("split", std::string("train"));
    if (split != "train" && split != "val") throw HttpError{400, "split must be 'train' or 'val'", {}};

    std::shared_ptr<const AveragedAttention> avg;
    {
      std::lock_guard lock(e->averages_mutex);
      auto& slot = e->averages[{split, ar.subset}];
      if (!slot) {
        std::vector<std::vector<int>> seqs =
            subset_sequences((split == "train" ? data.train : data.val).examples, ar.subset);
        if (seqs.empty()) throw InputError("no " + std::string(to_string(ar.subset)) + " examples to average");
        for (auto& s : seqs) s.pop_back();
        slot = std::make_shared<const AveragedAttention>(average_attention(e->checkpoint->params, seqs));
      }
      avg = slot;
    }
    Json j = average_response(*avg, e->id, ar);
    j["split"] = split;
    return HttpReply{200, render_json(j)};
  });
}

HttpServer::HttpServer(Service& service) : server_(std::make_unique<httplib::Server>()) {
  httplib::Server& server = *server_;
  server.set_default_headers({{"Access-Control-Allow-Origin", service.options().cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  const auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Get("/checkpoints", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, service.checkpoints());
  });
  server.Post("/run", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.run(req.body));
  });
  server.Post("/average", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.average(req.body));
  });
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  if (service.options().static_dir && !server.set_mount_point("/", service.options().static_dir->string())) {
    throw IoError("cannot serve static files from " + service.options().static_dir->string());
  }
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() {
  if (!server_->listen_after_bind()) throw IoError("server stopped unexpectedly");
}

void HttpServer::stop() { server_->stop(); }

}  // namespace deduce
