#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deduce/model.hpp"
#include "deduce/taskgen.hpp"

namespace deduce {

enum class LossMask { kOutputOnly, kFullSequence };

std::string_view to_string(LossMask mask);
LossMask parse_loss_mask(std::string_view text);

struct TrainConfig {
  int epochs = 250;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  LossMask loss_mask = LossMask::kOutputOnly;
  double convergence_threshold = 0.99;
  bool stop_on_convergence = false;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // teacher-forced full-sequence accuracy over the epoch's batches
  double val_accuracy = 0.0;
  double val_accuracy_excl_last = 0.0;
  double val_last_token_accuracy = 0.0;
};

using MetricsLog = std::vector<EpochMetrics>;

void write_metrics_csv(std::ostream& out, const MetricsLog& log);
std::string metrics_csv(const MetricsLog& log);

// ---------------------------------------------------------------------------
// Loss and gradients.

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Matrix<Scalar> dlogits;
};

/// Mean cross-entropy over rows with mask[row] set. The gradient is with
/// respect to the logits of that mean.
template <typename Scalar>
LossResult<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask) {
  std::size_t count = 0;
  for (const auto m : mask) count += m != 0;
  if (count == 0) throw ConfigError("loss mask selects no positions");
  LossResult<Scalar> out;
  out.dlogits = Matrix<Scalar>::Zero(logits.rows(), logits.cols());
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)] == 0) continue;
    const auto row = logits.row(r);
    const Scalar peak = row.maxCoeff();
    RowVector<Scalar> probs = (row.array() - peak).exp().matrix();
    const Scalar z = probs.sum();
    const int target = targets[static_cast<std::size_t>(r)];
    total += static_cast<double>(std::log(z) - (row(target) - peak));
    probs /= z;
    probs(target) -= static_cast<Scalar>(1);
    out.dlogits.row(r) = probs * static_cast<Scalar>(inv);
  }
  out.loss = total * inv;
  return out;
}

/// A batch of equal-length sequences split into model inputs (all tokens but
/// the last) and next-token targets, with the supervised positions marked.
struct TokenBatch {
  int batch = 0;
  int length = 0;  // input length = sequence length - 1
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

TokenBatch make_batch(std::span<const std::vector<int>> sequences, int prompt_len, LossMask mask);

template <typename Scalar>
struct GradResult {
  double loss = 0.0;
  ModelParams<Scalar> grads;
  /// Sequences whose every supervised position is predicted correctly.
  int sequences_correct = 0;
};

template <typename Scalar>
GradResult<Scalar> grad(const ModelParams<Scalar>& p, const TokenBatch& batch) {
  if (batch.batch == 0) throw ConfigError("empty batch");
  const ForwardPass<Scalar> pass = forward(p, std::span<const int>(batch.inputs), batch.batch, batch.length);
  LossResult<Scalar> loss = cross_entropy(pass.logits, batch.targets, batch.mask);
  if (!std::isfinite(loss.loss)) throw NumericError("non-finite loss " + std::to_string(loss.loss));
  GradResult<Scalar> out;
  out.loss = loss.loss;
  out.grads = backward(p, pass, std::span<const int>(batch.inputs), loss.dlogits);
  for (int s = 0; s < batch.batch; ++s) {
    bool ok = true;
    for (int t = 0; t < batch.length && ok; ++t) {
      const auto r = static_cast<std::size_t>(s * batch.length + t);
      if (batch.mask[r] != 0) ok = argmax(pass.logits.row(static_cast<Eigen::Index>(r))) == batch.targets[r];
    }
    out.sequences_correct += ok;
  }
  return out;
}

/// Adam with bias correction; weight decay, when non-zero, is decoupled and
/// applied to projection and embedding matrices only.
class Adam {
 public:
  Adam(const ModelConfig& config, const TrainConfig& train);
  void step(ParamsF& params, const ParamsF& grads);
  long steps() const { return step_; }

 private:
  TrainConfig cfg_;
  ParamsF first_;
  ParamsF second_;
  long step_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation.

struct ExampleOutcome {
  std::string generated;  // output characters only
  bool full_match = false;
  bool prefix_match = false;  // all but the final decision token
  bool last_token_match = false;
};

struct Evaluation {
  double full_seq_acc = 0.0;
  double acc_excl_last = 0.0;
  double last_token_acc = 0.0;
  std::vector<ExampleOutcome> outcomes;
};

/// Greedy generation for every example, scored against its target.
Evaluation evaluate(const ParamsF& params, const Dataset& dataset);

// ---------------------------------------------------------------------------
// Training runs.

struct Snapshot {
  std::string tag;  // "epoch-0010", "t1", "t2", "converged", "final"
  int epoch = 0;
  ParamsF params;
  EpochMetrics metrics;
};

struct TrainResult {
  ParamsF params;
  MetricsLog log;
  std::vector<Snapshot> snapshots;
  bool converged = false;
  int converged_epoch = 0;
  bool diverged = false;
  std::string divergence;
};

/// Optional observer called after each epoch (progress output).
using EpochCallback = std::function<void(const EpochMetrics&)>;
/// Called as each snapshot is taken, so a caller can persist it before the run ends.
using SnapshotCallback = std::function<void(const Snapshot&)>;

ModelConfig default_model_config(const Layout& layout);

/// Milestone thresholds on validation full-sequence accuracy; the first epoch
/// crossing each is snapshotted as "t1" and "t2".
inline constexpr double kMilestoneT1 = 0.20;
inline constexpr double kMilestoneT2 = 0.60;

TrainResult train_run(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Dataset& train_set,
                      const Dataset& val_set, const EpochCallback& on_epoch = {},
                      const SnapshotCallback& on_snapshot = {});

struct SweepRun {
  std::uint64_t seed = 0;
  bool converged = false;
  int converged_epoch = 0;
  MetricsLog log;
};

struct SweepResult {
  std::vector<SweepRun> runs;
  /// Mean validation accuracy per epoch over converged runs only. A run that
  /// stopped early holds its last value for later epochs.
  std::vector<double> mean_converged_val_accuracy;
  double convergence_fraction() const;
};

struct SweepData {
  std::size_t count = 4096;
  int n = 20;
  int m = 5;
  double train_ratio = 0.75;
};

/// Independent runs, each with its own dataset and initialization drawn from
/// the run seed.
SweepResult sweep(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const SweepData& data,
                  std::span<const std::uint64_t> seeds,
                  const std::function<void(std::uint64_t, const TrainResult&)>& on_run = {});

SweepResult summarize_sweep(std::vector<SweepRun> runs, int epochs);

std::string sweep_runs_csv(const SweepResult& result);
std::string sweep_mean_csv(const SweepResult& result);

}  // namespace deduce
