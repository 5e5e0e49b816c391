// Command-line entry point: dataset generation, training, evaluation,
// multi-seed sweeps, circuit inspection and the HTTP API.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "deduce/serve.hpp"

namespace fs = std::filesystem;
using namespace deduce;

namespace {

constexpr std::size_t kReferenceParams = 144384;

// Exit statuses.
constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kInternalError = 2;

void print_config(const std::string& command, const Json& config) {
  std::cout << "# " << command << ' ' << config.dump() << '\n';
}

void print_params(const ModelConfig& cfg) {
  for (const ParamGroup& g : param_breakdown(cfg)) std::cout << "#   " << g.name << ' ' << g.count << '\n';
  const auto total = static_cast<long long>(param_count(cfg));
  std::cout << "# parameters " << total << " (" << std::showpos << total - static_cast<long long>(kReferenceParams)
            << std::noshowpos << " vs " << kReferenceParams << ")\n";
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      const auto dots = item.find("..");
      if (dots == std::string::npos) {
        seeds.push_back(std::stoull(item));
        continue;
      }
      const std::uint64_t lo = std::stoull(item.substr(0, dots));
      const std::uint64_t hi = std::stoull(item.substr(dots + 2));
      if (hi < lo) throw ConfigError("empty seed range '" + item + "'");
      for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    } catch (const std::logic_error&) {
      throw ConfigError("bad seed list entry '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("no seeds given");
  return seeds;
}

struct ModelFlags {
  int d_model = 128;
  int layers = 2;
  int heads = 1;
  bool mlp = false;
  int d_ff = 512;

  void add(CLI::App& app) {
    app.add_option("--d-model", d_model, "Residual width")->capture_default_str();
    app.add_option("--layers", layers, "Transformer layers")->capture_default_str();
    app.add_option("--heads", heads, "Attention heads per layer")->capture_default_str();
    app.add_flag("--mlp", mlp, "Add MLP blocks");
    app.add_option("--d-ff", d_ff, "MLP hidden width")->capture_default_str();
  }
  ModelConfig resolve(const Layout& layout) const {
    ModelConfig c = default_model_config(layout);
    c.d_model = d_model;
    c.n_layers = layers;
    c.n_heads = heads;
    c.mlp_enabled = mlp;
    c.d_ff = d_ff;
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  std::string loss_mask = "output";

  void add(CLI::App& app) {
    app.add_option("--epochs", cfg.epochs, "Epoch budget")->capture_default_str();
    app.add_option("--batch", cfg.batch_size, "Batch size")->capture_default_str();
    app.add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
    app.add_option("--beta1", cfg.beta1)->capture_default_str();
    app.add_option("--beta2", cfg.beta2)->capture_default_str();
    app.add_option("--eps", cfg.epsilon)->capture_default_str();
    app.add_option("--weight-decay", cfg.weight_decay)->capture_default_str();
    app.add_option("--loss-mask", loss_mask, "output|full")->capture_default_str();
    app.add_option("--checkpoint-every", cfg.checkpoint_every, "Periodic checkpoint interval in epochs (0 = off)")
        ->capture_default_str();
    app.add_option("--converge-at", cfg.convergence_threshold, "Validation accuracy counted as converged")
        ->capture_default_str();
    app.add_flag("--stop-on-convergence", cfg.stop_on_convergence);
  }
  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig c = cfg;
    c.seed = seed;
    c.loss_mask = parse_loss_mask(loss_mask);
    c.validate();
    return c;
  }
};

void log_epoch(const EpochMetrics& m) {
  std::fprintf(stderr, "epoch %4d  loss %.5f  train %.4f  val %.4f  excl-last %.4f  last %.4f\n", m.epoch, m.train_loss,
               m.train_accuracy, m.val_accuracy, m.val_accuracy_excl_last, m.val_last_token_accuracy);
}

void save_snapshot(const fs::path& dir, const Snapshot& s, const ModelConfig& model, const TrainConfig& train,
                   const std::string& data) {
  fs::create_directories(dir);
  CheckpointMeta meta{model, train, s.tag, s.epoch, s.metrics, data};
  save_checkpoint(s.params, meta, dir / (s.tag + ".ckpt"));
}

void save_snapshots(const fs::path& dir, const TrainResult& r, const ModelConfig& model, const TrainConfig& train,
                    const std::string& data) {
  for (const Snapshot& s : r.snapshots) save_snapshot(dir, s, model, train, data);
  write_text_file(dir / "metrics.csv", metrics_csv(r.log));
}

// ---------------------------------------------------------------------------

struct GenCmd {
  int n = 20;
  int m = 5;
  std::size_t count = 4096;
  std::uint64_t seed = 0;
  std::string supervision = "cot";
  double ratio = 0.75;
  fs::path out;

  void add(CLI::App& app) {
    app.add_option("--n", n, "Alphabet size")->capture_default_str();
    app.add_option("--m", m, "Rules per prompt")->capture_default_str();
    app.add_option("--count", count, "Examples, half positive")->capture_default_str();
    app.add_option("--seed", seed)->capture_default_str();
    app.add_option("--supervision", supervision, "cot|binary")->capture_default_str();
    app.add_option("--split", ratio, "Training fraction")->capture_default_str();
    app.add_option("--out", out, "Output directory")->required();
  }
  void run() const {
    const Supervision sup = parse_supervision(supervision);
    print_config("gen", {{"n", n}, {"m", m}, {"count", count}, {"seed", seed}, {"supervision", to_string(sup)},
                         {"split", ratio}, {"out", out.string()}});
    const Dataset d = gen_dataset(count, n, m, seed, sup);
    const Split parts = split(d, ratio, seed);
    write_dataset_dir(out, parts, ratio);
    std::cout << "train " << parts.train.examples.size() << " (" << parts.train.positives() << " positive)\n"
              << "val " << parts.val.examples.size() << " (" << parts.val.positives() << " positive)\n";
  }
};

struct TrainCmd {
  fs::path data;
  fs::path ckpt_dir;
  std::uint64_t seed = 0;
  ModelFlags model;
  TrainFlags train;

  void add(CLI::App& app) {
    app.add_option("--data", data, "Dataset directory from gen")->required();
    app.add_option("--ckpt-dir", ckpt_dir, "Where checkpoints and metrics.csv go")->required();
    app.add_option("--seed", seed)->capture_default_str();
    model.add(app);
    train.add(app);
  }
  void run() const {
    const DatasetFiles files = read_dataset_dir(data);
    const Dataset& tr = files.split.train;
    const ModelConfig mc = model.resolve(Layout{tr.m, tr.supervision});
    const TrainConfig tc = train.resolve(seed);
    print_config("train", {{"data", data.string()}, {"ckpt_dir", ckpt_dir.string()}, {"model", mc}, {"train", tc}});
    print_params(mc);
    // Snapshots hit the disk as they are taken so an interrupted long run keeps them.
    MetricsLog log;
    const TrainResult r = train_run(
        mc, tc, tr, files.split.val,
        [&](const EpochMetrics& m) {
          log_epoch(m);
          log.push_back(m);
        },
        [&](const Snapshot& s) {
          save_snapshot(ckpt_dir, s, mc, tc, data.string());
          write_text_file(ckpt_dir / "metrics.csv", metrics_csv(log));
        });
    write_text_file(ckpt_dir / "metrics.csv", metrics_csv(r.log));
    if (r.diverged) throw NumericError("training diverged: " + r.divergence);
    std::cout << (r.converged ? "converged at epoch " + std::to_string(r.converged_epoch) : std::string("not converged"))
              << '\n';
    for (const Snapshot& s : r.snapshots) std::cout << "wrote " << (ckpt_dir / (s.tag + ".ckpt")).string() << '\n';
  }
};

struct EvalCmd {
  fs::path ckpt;
  fs::path data;
  std::string which = "val";

  void add(CLI::App& app) {
    app.add_option("--ckpt", ckpt)->required();
    app.add_option("--data", data, "Dataset directory from gen")->required();
    app.add_option("--split", which, "train|val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));
  }
  void run() const {
    print_config("eval", {{"ckpt", ckpt.string()}, {"data", data.string()}, {"split", which}});
    const Checkpoint c = load_checkpoint(ckpt);
    const DatasetFiles files = read_dataset_dir(data);
    const Evaluation e = evaluate(c.params, which == "train" ? files.split.train : files.split.val);
    std::printf("full_seq_acc %.6f\nacc_excl_last %.6f\nlast_token_acc %.6f\n", e.full_seq_acc, e.acc_excl_last,
                e.last_token_acc);
  }
};

struct SweepCmd {
  std::string seeds = "1..10";
  SweepData data;
  fs::path out;
  std::optional<fs::path> ckpt_dir;
  ModelFlags model;
  TrainFlags train;

  void add(CLI::App& app) {
    app.add_option("--seeds", seeds, "Seed list, e.g. 1..10 or 3,5,8")->capture_default_str();
    app.add_option("--count", data.count, "Examples per run")->capture_default_str();
    app.add_option("--n", data.n)->capture_default_str();
    app.add_option("--m", data.m)->capture_default_str();
    app.add_option("--split", data.train_ratio, "Training fraction")->capture_default_str();
    app.add_option("--out", out, "Directory for runs.csv and mean.csv")->required();
    app.add_option("--ckpt-dir", ckpt_dir, "Also keep each run's snapshots under DIR/seed-N");
    model.add(app);
    train.add(app);
  }
  void run() const {
    const std::vector<std::uint64_t> list = parse_seeds(seeds);
    const ModelConfig mc = model.resolve(Layout{data.m, Supervision::kChainOfThought});
    const TrainConfig tc = train.resolve(0);
    print_config("sweep", {{"seeds", list},
                           {"count", data.count},
                           {"n", data.n},
                           {"m", data.m},
                           {"split", data.train_ratio},
                           {"model", mc},
                           {"train", tc}});
    print_params(mc);
    const SweepResult r = sweep(mc, tc, data, list, [&](std::uint64_t seed, const TrainResult& run) {
      std::cout << "seed " << seed << ' '
                << (run.converged ? "converged at epoch " + std::to_string(run.converged_epoch)
                                  : std::string("not converged"))
                << std::endl;
      if (ckpt_dir) {
        TrainConfig seeded = tc;
        seeded.seed = seed;
        save_snapshots(*ckpt_dir / ("seed-" + std::to_string(seed)), run, mc, seeded, "");
      }
    });
    fs::create_directories(out);
    write_text_file(out / "runs.csv", sweep_runs_csv(r));
    write_text_file(out / "mean.csv", sweep_mean_csv(r));
    std::printf("converged %zu/%zu (%.0f%%)\n",
                static_cast<std::size_t>(std::count_if(r.runs.begin(), r.runs.end(), [](const SweepRun& s) { return s.converged; })),
                r.runs.size(), 100.0 * r.convergence_fraction());
  }
};

struct InspectCmd {
  fs::path ckpt;
  std::optional<std::string> ckpt_id;
  std::string prompt;
  std::optional<int> layer;
  Thresholds thresholds;
  std::optional<std::string> dst_positions;
  std::string format = "text";
  std::optional<fs::path> out;
  std::optional<std::string> average;
  std::optional<fs::path> data;
  std::string which = "train";

  void add(CLI::App& app) {
    app.add_option("--ckpt", ckpt)->required();
    app.add_option("--ckpt-id", ckpt_id, "Id reported in JSON (default: file stem)");
    app.add_option("--prompt", prompt, "Prompt, e.g. C>D,A>B,B>C,E>F,D>E|A>F");
    app.add_option("--layer", layer, "Only links of this layer (1-based)");
    app.add_option("--threshold", thresholds.link, "Link threshold (average default 0.1)");
    app.add_option("--final-threshold", thresholds.final_link, "Link strength used by the decision check")
        ->capture_default_str();
    app.add_option("--dst-positions", dst_positions, "Positions, or arrows|commas|dash");
    app.add_option("--sk-q", thresholds.s_q, "Spectral fraction kept for queries")->capture_default_str();
    app.add_option("--sk-k", thresholds.s_k, "Spectral fraction kept for keys")->capture_default_str();
    app.add_option("--sk-v", thresholds.s_v, "Spectral fraction kept for values")->capture_default_str();
    app.add_option("--top-k", thresholds.top_k, "Decoded tokens per vector")->capture_default_str();
    app.add_option("--format", format, "svg|text|json")
        ->capture_default_str()
        ->check(CLI::IsMember({"svg", "text", "json"}));
    app.add_option("--out", out, "Write to a file instead of stdout");
    app.add_option("--average", average, "Average over a dataset subset: all|positive|negative");
    app.add_option("--data", data, "Dataset directory for --average");
    app.add_option("--split", which, "Dataset split for --average")
        ->capture_default_str()
        ->check(CLI::IsMember({"train", "val"}));
  }

  void run(const CLI::App& app) const {
    const Checkpoint c = load_checkpoint(ckpt);
    const std::string id = ckpt_id.value_or(ckpt.stem().string());
    const Layout layout{(c.params.config.context_len - 5) / 8, Supervision::kChainOfThought};
    const std::optional<PositionSet> filter =
        dst_positions ? std::optional(parse_positions(*dst_positions, layout)) : std::nullopt;
    Json response;
    if (average) {
      if (!data) throw ConfigError("--average needs --data");
      if (!prompt.empty()) throw ConfigError("--average and --prompt are exclusive");
      AverageRequest ar;
      ar.subset = parse_subset(*average);
      if (app.count("--threshold") > 0) ar.threshold = thresholds.link;
      ar.dst_filter = filter;
      ar.layer = layer;
      std::cerr << "# inspect " << Json{{"ckpt", ckpt.string()}, {"average", to_string(ar.subset)},
                                          {"data", data->string()}, {"split", which}, {"threshold", ar.threshold}}
                                         .dump()
                << '\n';
      const Split parts = read_dataset_dir(*data).split;
      response = average_response(c.params, id, (which == "train" ? parts.train : parts.val).examples, ar);
      response["split"] = which;
    } else {
      if (prompt.empty()) throw ConfigError("--prompt is required unless --average is given");
      thresholds.validate();
      std::cerr << "# inspect " << Json{{"ckpt", ckpt.string()}, {"prompt", prompt}, {"link", thresholds.link},
                                          {"s_q", thresholds.s_q}, {"s_k", thresholds.s_k}, {"s_v", thresholds.s_v}}
                                         .dump()
                << '\n';
      QkvDecoder decoder(c.params);
      response = trace_response(decoder, id, TraceRequest{prompt, thresholds, filter, layer});
    }
    const std::string text = format == "json" ? render_json(response)
                             : format == "svg" ? render_svg(response)
                                               : render_text(response);
    if (out) {
      write_text_file(*out, text);
    } else {
      std::cout << text;
    }
  }
};

struct ExportCmd {
  fs::path report;
  fs::path out;
  std::string format = "svg";

  void add(CLI::App& app) {
    app.add_option("--report", report, "JSON from inspect --format json or the API")->required();
    app.add_option("--out", out)->required();
    app.add_option("--format", format, "svg|text")->capture_default_str()->check(CLI::IsMember({"svg", "text"}));
  }
  void run() const {
    Json j;
    try {
      j = Json::parse(read_text_file(report));
    } catch (const Json::parse_error& e) {
      throw InputError(report.string() + ": " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
    }
    if (!j.contains("schema") || (j["schema"] != kTraceSchema && j["schema"] != kAverageSchema)) {
      throw InputError(report.string() + ": not a trace or average report");
    }
    write_text_file(out, format == "svg" ? render_svg(j) : render_text(j));
  }
};

HttpServer* g_server = nullptr;

struct ServeCmd {
  ServeOptions options;
  std::string host = "127.0.0.1";
  int port = 8080;

  void add(CLI::App& app) {
    app.add_option("--ckpt-dir", options.ckpt_dir)->required();
    app.add_option("--data", options.data_dir, "Dataset directory used by /average");
    app.add_option("--static", options.static_dir, "Directory served at /");
    app.add_option("--cache", options.cache_size, "Checkpoints kept in memory")->capture_default_str();
    app.add_option("--cors-origin", options.cors_origin)->capture_default_str();
    app.add_option("--host", host)->capture_default_str();
    app.add_option("--port", port)->capture_default_str();
  }
  void run() {
    Json cfg{{"ckpt_dir", options.ckpt_dir.string()}, {"host", host}, {"port", port}, {"cache", options.cache_size}};
    cfg["data"] = options.data_dir ? Json(options.data_dir->string()) : Json(nullptr);
    print_config("serve", cfg);
    Service service(options);
    HttpServer server(service);
    const int bound = server.bind(host, port);
    std::cout << "listening on http://" << host << ':' << bound << std::endl;
    g_server = &server;
    std::signal(SIGINT, [](int) {
      if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
      if (g_server) g_server->stop();
    });
    server.listen();
    g_server = nullptr;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and dissect small transformers on synthetic deduction tasks"};
  app.require_subcommand(1);

  GenCmd gen;
  TrainCmd train;
  EvalCmd eval;
  SweepCmd sweep_cmd;
  InspectCmd inspect;
  ExportCmd export_cmd;
  ServeCmd serve;
  CLI::App* gen_app = app.add_subcommand("gen", "Generate a train/val dataset directory");
  CLI::App* train_app = app.add_subcommand("train", "Train one model");
  CLI::App* eval_app = app.add_subcommand("eval", "Greedy accuracy of a checkpoint");
  CLI::App* sweep_app = app.add_subcommand("sweep", "Independent runs over several seeds");
  CLI::App* inspect_app = app.add_subcommand("inspect", "Attention links and Q/K/V decodings");
  CLI::App* export_app = app.add_subcommand("export", "Render a saved JSON report");
  CLI::App* serve_app = app.add_subcommand("serve", "JSON API for the explorer");
  gen.add(*gen_app);
  train.add(*train_app);
  eval.add(*eval_app);
  sweep_cmd.add(*sweep_app);
  inspect.add(*inspect_app);
  export_cmd.add(*export_app);
  serve.add(*serve_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (gen_app->parsed()) gen.run();
    if (train_app->parsed()) train.run();
    if (eval_app->parsed()) eval.run();
    if (sweep_app->parsed()) sweep_cmd.run();
    if (inspect_app->parsed()) inspect.run(*inspect_app);
    if (export_app->parsed()) export_cmd.run();
    if (serve_app->parsed()) serve.run();
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const CorruptionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternalError;
  }
  return kOk;
}
