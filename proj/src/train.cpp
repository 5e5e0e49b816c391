#include "deduce/train.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "deduce/alloc.hpp"
#include "deduce/vocab.hpp"

namespace deduce {

namespace {

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

constexpr std::size_t kEvalChunk = 256;

}  // namespace

std::string_view to_string(LossMask mask) { return mask == LossMask::kOutputOnly ? "output" : "full"; }

LossMask parse_loss_mask(std::string_view text) {
  if (text == "output") return LossMask::kOutputOnly;
  if (text == "full") return LossMask::kFullSequence;
  throw ConfigError("unknown loss mask '" + std::string(text) + "' (expected output or full)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint interval must be non-negative");
}

void write_metrics_csv(std::ostream& out, const MetricsLog& log) {
  out << "epoch,train_loss,train_full_seq_acc,val_full_seq_acc,val_acc_excl_last,val_last_token_acc\n";
  for (const EpochMetrics& m : log) {
    out << m.epoch << ',' << fmt_real(m.train_loss) << ',' << fmt_real(m.train_accuracy) << ','
        << fmt_real(m.val_accuracy) << ',' << fmt_real(m.val_accuracy_excl_last) << ','
        << fmt_real(m.val_last_token_accuracy) << '\n';
  }
}

std::string metrics_csv(const MetricsLog& log) {
  std::ostringstream out;
  write_metrics_csv(out, log);
  return out.str();
}

TokenBatch make_batch(std::span<const std::vector<int>> sequences, int prompt_len, LossMask mask) {
  TokenBatch b;
  if (sequences.empty()) return b;
  const auto len = sequences.front().size();
  b.batch = static_cast<int>(sequences.size());
  b.length = static_cast<int>(len) - 1;
  for (const auto& seq : sequences) {
    if (seq.size() != len) throw InputError("sequences in a batch must share one length");
    b.inputs.insert(b.inputs.end(), seq.begin(), seq.end() - 1);
    b.targets.insert(b.targets.end(), seq.begin() + 1, seq.end());
    for (int t = 0; t < b.length; ++t) {
      // Input position t predicts token t + 1.
      b.mask.push_back(mask == LossMask::kFullSequence || t + 1 >= prompt_len ? 1 : 0);
    }
  }
  return b;
}

Adam::Adam(const ModelConfig& config, const TrainConfig& train)
    : cfg_(train), first_(ParamsF::zeros(config)), second_(ParamsF::zeros(config)) {}

void Adam::step(ParamsF& params, const ParamsF& grads) {
  ++step_;
  const auto b1 = static_cast<float>(cfg_.beta1);
  const auto b2 = static_cast<float>(cfg_.beta2);
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  const auto step_size = static_cast<float>(cfg_.learning_rate / c1);
  const auto sqrt_c2 = static_cast<float>(std::sqrt(c2));
  const auto eps = static_cast<float>(cfg_.epsilon);
  const auto decay = static_cast<float>(cfg_.learning_rate * cfg_.weight_decay);

  std::vector<const float*> g;
  std::vector<float*> m;
  std::vector<float*> v;
  grads.visit([&](const std::string&, const auto& t) { g.push_back(t.data()); });
  first_.visit([&](const std::string&, auto& t) { m.push_back(t.data()); });
  second_.visit([&](const std::string&, auto& t) { v.push_back(t.data()); });
  std::size_t i = 0;
  params.visit([&](const std::string& name, auto& t) {
    const bool decayed = decay > 0.0F && (name.find(".w_") != std::string::npos || name.ends_with("embedding"));
    float* p = t.data();
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      const float gj = g[i][j];
      m[i][j] = b1 * m[i][j] + (1.0F - b1) * gj;
      v[i][j] = b2 * v[i][j] + (1.0F - b2) * gj * gj;
      if (decayed) p[j] -= decay * p[j];
      p[j] -= step_size * m[i][j] / (std::sqrt(v[i][j]) / sqrt_c2 + eps);
    }
    ++i;
  });
}

Evaluation evaluate(const ParamsF& params, const Dataset& dataset) {
  Evaluation ev;
  if (dataset.examples.empty()) return ev;
  const Layout layout{dataset.m, dataset.supervision};
  const int prompt_len = layout.prompt_len();
  const int steps = layout.output_len();
  std::size_t full = 0, prefix = 0, last = 0;
  for (std::size_t start = 0; start < dataset.examples.size(); start += kEvalChunk) {
    const std::size_t end = std::min(dataset.examples.size(), start + kEvalChunk);
    std::vector<int> prompts;
    for (std::size_t i = start; i < end; ++i) {
      const auto ids = Vocab::encode("@" + dataset.examples[i].prompt());
      prompts.insert(prompts.end(), ids.begin(), ids.end());
    }
    const int batch = static_cast<int>(end - start);
    const std::vector<int> seqs = generate_batch(params, std::span<const int>(prompts), batch, prompt_len, steps);
    for (int s = 0; s < batch; ++s) {
      const Example& ex = dataset.examples[start + static_cast<std::size_t>(s)];
      ExampleOutcome o;
      for (int t = 0; t < steps; ++t) {
        o.generated.push_back(Vocab::symbol(seqs[static_cast<std::size_t>(s * (prompt_len + steps) + prompt_len + t)]));
      }
      o.full_match = o.generated == ex.target;
      o.prefix_match = o.generated.compare(0, o.generated.size() - 1, ex.target, 0, ex.target.size() - 1) == 0;
      o.last_token_match = o.generated.back() == ex.target.back();
      full += o.full_match;
      prefix += o.prefix_match;
      last += o.last_token_match;
      ev.outcomes.push_back(std::move(o));
    }
  }
  const double total = static_cast<double>(dataset.examples.size());
  ev.full_seq_acc = static_cast<double>(full) / total;
  ev.acc_excl_last = static_cast<double>(prefix) / total;
  ev.last_token_acc = static_cast<double>(last) / total;
  return ev;
}

ModelConfig default_model_config(const Layout& layout) {
  ModelConfig cfg;
  cfg.context_len = layout.sequence_len();
  return cfg;
}

TrainResult train_run(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Dataset& train_set,
                      const Dataset& val_set, const EpochCallback& on_epoch,
                      const SnapshotCallback& on_snapshot) {
  tune_allocator();
  model_cfg.validate();
  train_cfg.validate();
  if (train_set.examples.empty()) throw ConfigError("training set is empty");
  const Layout layout{train_set.m, train_set.supervision};
  if (model_cfg.context_len < layout.sequence_len()) {
    throw ConfigError("context length " + std::to_string(model_cfg.context_len) + " is shorter than the sequence length " +
                      std::to_string(layout.sequence_len()));
  }

  std::vector<std::vector<int>> sequences;
  sequences.reserve(train_set.examples.size());
  for (const Example& ex : train_set.examples) sequences.push_back(encode_example(ex));

  TrainResult result;
  result.params = init_params<float>(model_cfg, train_cfg.seed);
  Adam adam(model_cfg, train_cfg);
  Rng order_rng(train_cfg.seed ^ 0x0ddba11c0ffee000ULL);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  bool seen_t1 = false, seen_t2 = false;
  ParamsF last_good = result.params;
  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    int correct = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train_cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train_cfg.batch_size));
        std::vector<std::vector<int>> chunk;
        for (std::size_t i = start; i < end; ++i) chunk.push_back(sequences[order[i]]);
        const TokenBatch batch = make_batch(chunk, layout.prompt_len(), train_cfg.loss_mask);
        GradResult<float> g = grad(result.params, batch);
        adam.step(result.params, g.grads);
        if (!result.params.all_finite()) throw NumericError("parameters became non-finite");
        loss_sum += g.loss;
        correct += g.sequences_correct;
        ++batches;
      }
    } catch (const NumericError& e) {
      result.diverged = true;
      result.divergence = "epoch " + std::to_string(epoch) + ": " + e.what();
      result.params = last_good;
      break;
    }
    last_good = result.params;

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(batches);
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(sequences.size());
    if (!val_set.examples.empty()) {
      const Evaluation ev = evaluate(result.params, val_set);
      m.val_accuracy = ev.full_seq_acc;
      m.val_accuracy_excl_last = ev.acc_excl_last;
      m.val_last_token_accuracy = ev.last_token_acc;
    }
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);

    const auto snap = [&](const std::string& tag) {
      result.snapshots.push_back({tag, epoch, result.params, m});
      if (on_snapshot) on_snapshot(result.snapshots.back());
    };
    if (!seen_t1 && m.val_accuracy >= kMilestoneT1) {
      seen_t1 = true;
      snap("t1");
    }
    if (!seen_t2 && m.val_accuracy >= kMilestoneT2) {
      seen_t2 = true;
      snap("t2");
    }
    if (train_cfg.checkpoint_every > 0 && epoch % train_cfg.checkpoint_every == 0) {
      char tag[32];
      std::snprintf(tag, sizeof tag, "epoch-%04d", epoch);
      snap(tag);
    }
    if (!result.converged && m.val_accuracy >= train_cfg.convergence_threshold) {
      result.converged = true;
      result.converged_epoch = epoch;
      snap("converged");
      if (train_cfg.stop_on_convergence) break;
    }
  }
  if (!result.log.empty()) {
    result.snapshots.push_back({"final", result.log.back().epoch, result.params, result.log.back()});
    if (on_snapshot) on_snapshot(result.snapshots.back());
  }
  return result;
}

double SweepResult::convergence_fraction() const {
  if (runs.empty()) return 0.0;
  const auto n = std::count_if(runs.begin(), runs.end(), [](const SweepRun& r) { return r.converged; });
  return static_cast<double>(n) / static_cast<double>(runs.size());
}

SweepResult summarize_sweep(std::vector<SweepRun> runs, int epochs) {
  SweepResult out;
  out.runs = std::move(runs);
  out.mean_converged_val_accuracy.assign(static_cast<std::size_t>(epochs), 0.0);
  std::size_t converged = 0;
  for (const SweepRun& r : out.runs) {
    if (!r.converged || r.log.empty()) continue;
    ++converged;
    for (int e = 0; e < epochs; ++e) {
      const std::size_t idx = std::min(static_cast<std::size_t>(e), r.log.size() - 1);
      out.mean_converged_val_accuracy[static_cast<std::size_t>(e)] += r.log[idx].val_accuracy;
    }
  }
  if (converged == 0) {
    out.mean_converged_val_accuracy.clear();
  } else {
    for (double& v : out.mean_converged_val_accuracy) v /= static_cast<double>(converged);
  }
  return out;
}

SweepResult sweep(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const SweepData& data,
                  std::span<const std::uint64_t> seeds,
                  const std::function<void(std::uint64_t, const TrainResult&)>& on_run) {
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  std::vector<SweepRun> runs;
  for (const std::uint64_t seed : seeds) {
    const Dataset all = gen_dataset(data.count, data.n, data.m, seed);
    const Split parts = split(all, data.train_ratio, seed);
    TrainConfig cfg = train_cfg;
    cfg.seed = seed;
    TrainResult r = train_run(model_cfg, cfg, parts.train, parts.val);
    runs.push_back({seed, r.converged, r.converged_epoch, r.log});
    if (on_run) on_run(seed, r);
  }
  return summarize_sweep(std::move(runs), train_cfg.epochs);
}

std::string sweep_runs_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "seed,converged,converged_epoch,epoch,train_loss,val_full_seq_acc,val_acc_excl_last,val_last_token_acc\n";
  for (const SweepRun& r : result.runs) {
    for (const EpochMetrics& m : r.log) {
      out << r.seed << ',' << (r.converged ? 1 : 0) << ',' << r.converged_epoch << ',' << m.epoch << ','
          << fmt_real(m.train_loss) << ',' << fmt_real(m.val_accuracy) << ',' << fmt_real(m.val_accuracy_excl_last)
          << ',' << fmt_real(m.val_last_token_accuracy) << '\n';
    }
  }
  return out.str();
}

std::string sweep_mean_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "epoch,mean_val_full_seq_acc_converged\n";
  for (std::size_t e = 0; e < result.mean_converged_val_accuracy.size(); ++e) {
    out << e + 1 << ',' << fmt_real(result.mean_converged_val_accuracy[e]) << '\n';
  }
  return out.str();
}

}  // namespace deduce
