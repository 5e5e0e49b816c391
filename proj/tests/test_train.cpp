#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "deduce/train.hpp"

using namespace deduce;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  return c;
}

TrainConfig quick(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.seed = 3;
  return t;
}

Split tiny_split() { return split(gen_dataset(64, 20, 5, 3), 0.75, 3); }

}  // namespace

TEST_CASE("cross-entropy of uniform logits is log V with softmax-minus-onehot gradient") {
  const MatrixF logits = MatrixF::Zero(3, 4);
  const std::vector<int> targets{1, 2, 3};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const LossResult<float> r = cross_entropy<float>(logits, targets, mask);
  CHECK(r.loss == doctest::Approx(std::log(4.0)));
  // Mean over the two selected rows.
  CHECK(r.dlogits(0, 0) == doctest::Approx(0.25 / 2));
  CHECK(r.dlogits(0, 1) == doctest::Approx(-0.75 / 2));
  CHECK(r.dlogits.row(1).isZero());
  CHECK(r.dlogits(2, 3) == doctest::Approx(-0.75 / 2));

  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(cross_entropy<float>(logits, targets, none), ConfigError);
}

TEST_CASE("cross-entropy is stable for large logits") {
  MatrixF logits(1, 2);
  logits << 1000.0F, 0.0F;
  const std::vector<int> target{0};
  const std::vector<std::uint8_t> mask{1};
  const LossResult<float> r = cross_entropy<float>(logits, target, mask);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss == doctest::Approx(0.0));
}

TEST_CASE("batches shift targets by one and supervise only the output by default") {
  const std::vector<std::vector<int>> seqs{{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}};
  const TokenBatch out = make_batch(seqs, 3, LossMask::kOutputOnly);
  CHECK(out.batch == 2);
  CHECK(out.length == 4);
  CHECK(out.inputs == std::vector<int>{0, 1, 2, 3, 5, 6, 7, 8});
  CHECK(out.targets == std::vector<int>{1, 2, 3, 4, 6, 7, 8, 9});
  // Targets 3 and 4 sit at or after the prompt boundary.
  CHECK(out.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1});

  const TokenBatch full = make_batch(seqs, 3, LossMask::kFullSequence);
  CHECK(full.mask == std::vector<std::uint8_t>(8, 1));

  const std::vector<std::vector<int>> ragged{{0, 1, 2}, {0, 1}};
  CHECK_THROWS_AS(make_batch(ragged, 1, LossMask::kOutputOnly), InputError);
}

TEST_CASE("output-only batches from real examples supervise exactly the 21 answer tokens") {
  const Dataset d = gen_dataset(4, 20, 5, 1);
  std::vector<std::vector<int>> seqs;
  for (const Example& e : d.examples) seqs.push_back(encode_example(e));
  const Layout layout{5, Supervision::kChainOfThought};
  const TokenBatch b = make_batch(seqs, layout.prompt_len(), LossMask::kOutputOnly);
  CHECK(b.length == 44);
  int supervised = 0;
  for (int t = 0; t < b.length; ++t) supervised += b.mask[static_cast<std::size_t>(t)];
  CHECK(supervised == 21);
}

TEST_CASE("first Adam step moves every parameter by the learning rate against its gradient") {
  const ModelConfig cfg = tiny_config();
  TrainConfig tc;
  tc.learning_rate = 0.01;
  ParamsF p = init_params<float>(cfg, 1);
  const ParamsF before = p;
  ParamsF g = init_params<float>(cfg, 2);
  Adam adam(cfg, tc);
  adam.step(p, g);
  CHECK(adam.steps() == 1);
  double worst = 0;
  std::vector<const float*> gs, bs;
  g.visit([&](const std::string&, const auto& t) { gs.push_back(t.data()); });
  before.visit([&](const std::string&, const auto& t) { bs.push_back(t.data()); });
  std::size_t i = 0;
  p.visit([&](const std::string&, const auto& t) {
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      const float gj = gs[i][j];
      if (std::abs(gj) < 1e-4F) continue;
      const double expected = bs[i][j] - 0.01 * (gj > 0 ? 1 : -1);
      worst = std::max(worst, std::abs(t.data()[j] - expected));
    }
    ++i;
  });
  CHECK(worst < 1e-5);
}

TEST_CASE("training config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.beta2 = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.checkpoint_every = -1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK(parse_loss_mask("full") == LossMask::kFullSequence);
  CHECK(to_string(parse_loss_mask("output")) == "output");
  CHECK_THROWS_AS(parse_loss_mask("prompt"), ConfigError);
}

TEST_CASE("snapshots reach the callback as they are taken") {
  const Split parts = tiny_split();
  TrainConfig tc = quick(3);
  tc.checkpoint_every = 2;
  std::vector<std::string> seen;
  std::vector<int> logged_when_seen;
  int epochs_logged = 0;
  const TrainResult r = train_run(
      tiny_config(), tc, parts.train, parts.val, [&](const EpochMetrics&) { ++epochs_logged; },
      [&](const Snapshot& s) {
        seen.push_back(s.tag);
        logged_when_seen.push_back(epochs_logged);
      });
  REQUIRE(r.log.size() == 3);
  std::vector<std::string> tags;
  for (const Snapshot& s : r.snapshots) tags.push_back(s.tag);
  CHECK(seen == tags);
  REQUIRE(seen.size() >= 2);
  CHECK(seen.back() == "final");
  const auto periodic = std::find(seen.begin(), seen.end(), "epoch-0002");
  REQUIRE(periodic != seen.end());
  CHECK(logged_when_seen[static_cast<std::size_t>(periodic - seen.begin())] == 2);
}

TEST_CASE("training is deterministic in the seed") {
  const Split parts = tiny_split();
  const TrainResult a = train_run(tiny_config(), quick(2), parts.train, parts.val);
  const TrainResult b = train_run(tiny_config(), quick(2), parts.train, parts.val);
  CHECK(metrics_csv(a.log) == metrics_csv(b.log));
  CHECK(a.params.token_embedding == b.params.token_embedding);
  TrainConfig other = quick(2);
  other.seed = 4;
  const TrainResult c = train_run(tiny_config(), other, parts.train, parts.val);
  CHECK(a.params.token_embedding != c.params.token_embedding);
}

TEST_CASE("stop on convergence ends the run at the converged epoch") {
  const Split parts = tiny_split();
  TrainConfig tc = quick(5);
  tc.convergence_threshold = 0.0;
  tc.stop_on_convergence = true;
  const TrainResult r = train_run(tiny_config(), tc, parts.train, parts.val);
  CHECK(r.converged);
  CHECK(r.converged_epoch == 1);
  CHECK(r.log.size() == 1);
  REQUIRE(r.snapshots.size() >= 2);
  CHECK(r.snapshots[r.snapshots.size() - 2].tag == "converged");
}

TEST_CASE("metrics csv layout") {
  MetricsLog log{{1, 0.5, 0.25, 0.125, 0.5, 0.75}};
  CHECK(metrics_csv(log) ==
        "epoch,train_loss,train_full_seq_acc,val_full_seq_acc,val_acc_excl_last,val_last_token_acc\n"
        "1,0.500000,0.250000,0.125000,0.500000,0.750000\n");
}

TEST_CASE("sweep mean covers converged runs and holds early-stopped values") {
  const auto run = [](std::uint64_t seed, bool converged, std::vector<double> val) {
    SweepRun r{seed, converged, converged ? static_cast<int>(val.size()) : 0, {}};
    for (std::size_t e = 0; e < val.size(); ++e) r.log.push_back({static_cast<int>(e + 1), 0, 0, val[e], 0, 0});
    return r;
  };
  const SweepResult r =
      summarize_sweep({run(1, true, {0.2, 1.0}), run(2, true, {0.4, 0.6, 1.0}), run(3, false, {0.9, 0.9, 0.9})}, 3);
  CHECK(r.convergence_fraction() == doctest::Approx(2.0 / 3));
  REQUIRE(r.mean_converged_val_accuracy.size() == 3);
  CHECK(r.mean_converged_val_accuracy[0] == doctest::Approx(0.3));
  CHECK(r.mean_converged_val_accuracy[1] == doctest::Approx(0.8));
  CHECK(r.mean_converged_val_accuracy[2] == doctest::Approx(1.0));
  CHECK(sweep_mean_csv(r).starts_with("epoch,mean_val_full_seq_acc_converged\n1,0.300000\n"));

  const SweepResult none = summarize_sweep({run(4, false, {0.1})}, 1);
  CHECK(none.mean_converged_val_accuracy.empty());
  CHECK(none.convergence_fraction() == 0.0);
}
