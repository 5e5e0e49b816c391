#pragma once

#include <cstddef>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "deduce/report.hpp"

namespace httplib {
class Server;
}

namespace deduce {

struct ServeOptions {
  std::filesystem::path ckpt_dir;
  /// Dataset directory (as written by `gen`) used for averaged attention.
  std::optional<std::filesystem::path> data_dir;
  /// Directory served at "/" for a browser front end.
  std::optional<std::filesystem::path> static_dir;
  std::size_t cache_size = 4;
  std::string cors_origin = "*";
};

struct HttpReply {
  int status = 200;
  std::string body;
};

/// Request handlers, independent of the HTTP transport. Loaded checkpoints
/// and their derived data (pseudoinverses, averages) are kept in a bounded
/// least-recently-used cache; everything else is recomputed per request.
class Service {
 public:
  explicit Service(ServeOptions options);

  const ServeOptions& options() const { return options_; }

  HttpReply checkpoints() const;
  HttpReply run(const std::string& body);
  HttpReply average(const std::string& body);

  /// Ids are checkpoint paths relative to the directory, without ".ckpt".
  std::vector<std::string> checkpoint_ids() const;

 private:
  struct Entry {
    std::string id;
    std::unique_ptr<Checkpoint> checkpoint;
    std::unique_ptr<QkvDecoder> decoder;
    std::mutex averages_mutex;
    std::map<std::pair<std::string, Subset>, std::shared_ptr<const AveragedAttention>> averages;
  };

  std::shared_ptr<Entry> entry(const std::string& id);
  const Split& dataset();

  ServeOptions options_;
  std::mutex cache_mutex_;
  std::list<std::shared_ptr<Entry>> lru_;  // most recent first
  std::mutex data_mutex_;
  std::optional<Split> data_;
};

/// HTTP transport for a Service: the three endpoints, CORS headers and the
/// optional static directory.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called from another thread.
  void listen();
  void stop();

 private:
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace deduce
