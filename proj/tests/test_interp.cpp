#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "deduce/interp.hpp"
#include "deduce/taskgen.hpp"
#include "deduce/vocab.hpp"

using namespace deduce;

namespace {

template <typename Scalar>
Matrix<Scalar> gaussian(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal());
  return m;
}

const Dataset& small_dataset() {
  static const Dataset d = gen_dataset(64, 20, 5, 11);
  return d;
}

}  // namespace

TEST_CASE("top tokens are ranked by logit with ties to the lower id") {
  std::vector<float> logits(Vocab::kSize, 0.0F);
  logits[3] = 2.0F;
  logits[7] = 2.0F;
  logits[1] = 5.0F;
  const auto top = top_tokens(logits, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].token == 'B');
  CHECK(top[1].token == 'D');
  CHECK(top[2].token == 'H');
  CHECK(top[0].rank == 1);
  CHECK(top[2].rank == 3);

  const auto all = top_tokens(logits, Vocab::kSize);
  std::set<char> seen;
  for (const auto& t : all) seen.insert(t.token);
  CHECK(seen.size() == Vocab::kSize);
  CHECK_THROWS_AS(top_tokens(logits, Vocab::kSize + 1), ConfigError);
}

TEST_CASE("logit lens agrees with the forward pass") {
  const ParamsF p = init_params<float>(ModelConfig{}, 5);
  // A token's own embedding decodes to itself through the tied head.
  for (char c : std::string("AKT@>")) {
    const RowVector<float> e = p.token_embedding.row(Vocab::id(c)) * 7.0F;
    CHECK(logit_lens(e, p, 1).front().token == c);
  }

  const std::vector<int> tokens = encode_example(small_dataset().examples[0]);
  const ActivationTrace<float> trace = capture(p, tokens);
  const auto decoded = residual_decodings(trace, p, 3);
  REQUIRE(decoded.size() == 2);
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const auto& lens = decoded[1][pos];
    CHECK(lens.front().token == Vocab::symbol(argmax(trace.logits.row(static_cast<Eigen::Index>(pos)))));
    CHECK(lens.front().logit == trace.logits.row(static_cast<Eigen::Index>(pos)).maxCoeff());
  }
  CHECK_THROWS_AS(logit_lens(RowVector<float>::Zero(5), p, 1), InputError);
}

TEST_CASE("truncated pseudoinverse of simple matrices") {
  SUBCASE("identity keeps everything at s = 1") {
    const auto t = truncated_pinv<double>(MatrixD::Identity(128, 128), 1.0);
    CHECK(t.rank == 128);
    CHECK(t.inverse.isApprox(MatrixD::Identity(128, 128), 1e-12));
  }
  SUBCASE("diag(3, 1)") {
    MatrixD w(2, 2);
    w << 3, 0, 0, 1;
    const auto t = truncated_pinv<double>(w, 0.75);
    CHECK(t.rank == 1);
    CHECK(t.inverse(0, 0) == doctest::Approx(1.0 / 3.0));
    CHECK(std::abs(t.inverse(0, 1)) < 1e-15);
    CHECK(std::abs(t.inverse(1, 0)) < 1e-15);
    CHECK(std::abs(t.inverse(1, 1)) < 1e-15);
    CHECK(truncated_pinv<double>(w, 0.76).rank == 2);
  }
  SUBCASE("rank-deficient input stops at its rank") {
    const MatrixD w = gaussian<double>(40, 6, 1) * gaussian<double>(6, 30, 2);
    CHECK(truncated_pinv<double>(w, 1.0).rank == 6);
  }
  SUBCASE("all-zero matrix") {
    const auto t = truncated_pinv<double>(MatrixD::Zero(4, 4), 0.5);
    CHECK(t.rank == 0);
    CHECK(t.inverse.isZero(0.0));
  }
  SUBCASE("bad input") {
    CHECK_THROWS_AS(truncated_pinv<double>(MatrixD::Identity(3, 3), 0.0), ConfigError);
    CHECK_THROWS_AS(truncated_pinv<double>(MatrixD::Identity(3, 3), 1.5), ConfigError);
    MatrixD bad = MatrixD::Identity(3, 3);
    bad(1, 2) = std::nan("");
    CHECK_THROWS_AS(truncated_pinv<double>(bad, 0.5), NumericError);
  }
}

TEST_CASE("retro-projection equals the top-k right singular projection") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const MatrixD w = gaussian<double>(128, 128, seed);
    const MatrixD x = gaussian<double>(128, 20, seed + 100);
    int previous = 0;
    for (double s : {0.1, 0.5, 0.8, 0.97, 1.0}) {
      const auto t = truncated_pinv<double>(w, s);
      CHECK(t.rank >= previous);
      previous = t.rank;
      const MatrixD err = t.inverse * (w * x) - t.projector() * x;
      for (Eigen::Index c = 0; c < x.cols(); ++c) CHECK(err.col(c).norm() <= 1e-4 * x.col(c).norm());
    }
    CHECK(previous == 128);
  }
  // Single precision at the thresholds used for decoding.
  const MatrixF w = gaussian<float>(128, 128, 9);
  const MatrixF x = gaussian<float>(128, 10, 10);
  for (double s : {0.8, 0.97}) {
    const auto t = truncated_pinv<float>(w, s);
    const MatrixF err = t.inverse * (w * x) - t.projector() * x;
    for (Eigen::Index c = 0; c < x.cols(); ++c) CHECK(err.col(c).norm() <= 1e-4F * x.col(c).norm());
  }
}

TEST_CASE("retained rank is monotone in the threshold") {
  const VectorD sigma = truncated_pinv<double>(gaussian<double>(64, 64, 4), 1.0).singular_values;
  for (Eigen::Index i = 1; i < sigma.size(); ++i) CHECK(sigma(i) <= sigma(i - 1));
  int previous = 0;
  for (int i = 1; i <= 200; ++i) {
    const int k = retained_rank(sigma, i / 200.0);
    CHECK(k >= previous);
    previous = k;
  }
  CHECK(previous == 64);
}

TEST_CASE("rectangular head slices") {
  const MatrixF w = gaussian<float>(8, 16, 3);
  const auto t = truncated_pinv<float>(w, 1.0);
  CHECK(t.rank == 8);
  CHECK(t.inverse.rows() == 16);
  CHECK(t.inverse.cols() == 8);
  CHECK((w * t.inverse).isApprox(MatrixF::Identity(8, 8), 1e-4F));
}

TEST_CASE("attention links") {
  const ParamsF p = init_params<float>(ModelConfig{}, 6);
  const std::vector<int> tokens = encode_example(small_dataset().examples[1]);
  const ActivationTrace<float> trace = capture(p, tokens);
  const int t = static_cast<int>(tokens.size());

  const LinkSet all = attention_links(trace, 1, 0.0);
  CHECK(all.size() == static_cast<std::size_t>(t * (t + 1) / 2));
  for (const AttentionLink& l : all) {
    CHECK(l.src <= l.dst);
    CHECK(l.layer == 1);
    CHECK(l.strength == trace.layers[0].patterns[0](l.dst, l.src));
  }
  CHECK(attention_links(trace, 2, 1.01).empty());

  const LinkSet filtered = attention_links(trace, 2, 0.0, PositionSet{25, 29});
  CHECK(filtered.size() == 26 + 30);
  for (const AttentionLink& l : filtered) CHECK((l.dst == 25 || l.dst == 29));
  CHECK_THROWS_AS(attention_links(trace, 3, 0.1), InputError);
}

TEST_CASE("averaged attention") {
  const ParamsF p = init_params<float>(ModelConfig{}, 7);
  const auto seqs = subset_sequences(small_dataset().examples, Subset::kAll);
  CHECK(seqs.size() == 64);
  CHECK(subset_sequences(small_dataset().examples, Subset::kPositive).size() == 32);
  CHECK(subset_sequences(small_dataset().examples, Subset::kNegative).size() == 32);

  const AveragedAttention one = average_attention(p, {seqs[0]});
  const ActivationTrace<float> trace = capture(p, seqs[0]);
  for (int l = 0; l < 2; ++l) CHECK(one.layers[l][0].isApprox(trace.layers[l].patterns[0], 1e-6F));

  const AveragedAttention avg = average_attention(p, seqs);
  CHECK(avg.count == 64);
  for (const auto& layer : avg.layers) {
    const MatrixF& m = layer[0];
    CHECK(m.minCoeff() >= 0.0F);
    CHECK(m.maxCoeff() <= 1.0F);
    for (Eigen::Index r = 0; r < m.rows(); ++r) CHECK(m.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }

  CHECK(token_independent_links(avg, 1.01).empty());
  const LinkSet skeleton = token_independent_links(p, seqs, 0.5);
  for (const AttentionLink& l : skeleton) {
    CHECK(l.strength == avg.layers[l.layer - 1][0](l.dst, l.src));
  }
  // Row 0 can only attend to itself.
  CHECK(std::count_if(skeleton.begin(), skeleton.end(), [](const AttentionLink& l) { return l.dst == 0; }) == 2);

  auto mixed = seqs;
  mixed[3].pop_back();
  CHECK_THROWS_AS(average_attention(p, mixed), InputError);
  CHECK_THROWS_AS(average_attention(p, {}), InputError);
  CHECK_THROWS_AS(token_independent_links(p, {seqs[0]}, 0.1), InputError);
}

TEST_CASE("full-rank decoding reproduces the normalized residual") {
  const ParamsF p = init_params<float>(ModelConfig{}, 8);
  const std::vector<int> tokens = encode_example(small_dataset().examples[2]);
  const ActivationTrace<float> trace = capture(p, tokens);
  const AttentionLink link{2, 0, 12, 30, 0.0, {}};
  const QkvDecoding d = decode_qkv(link, p, trace, 1.0, 1.0, 1.0, 3);
  const auto q_raw = logit_lens(trace.layers[1].normed.row(30), p, 3);
  const auto k_raw = logit_lens(trace.layers[1].normed.row(12), p, 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(d.q[i].token == q_raw[i].token);
    CHECK(d.q[i].logit == doctest::Approx(q_raw[i].logit).epsilon(1e-3));
    CHECK(d.k[i].token == k_raw[i].token);
    CHECK(d.v[i].token == k_raw[i].token);
  }
}

TEST_CASE("decoder caches one pseudoinverse per matrix and threshold") {
  const ParamsF p = init_params<float>(ModelConfig{}, 9);
  QkvDecoder dec(p);
  const auto a = dec.pinv(1, 0, Projection::kKey, 0.97);
  CHECK(a == dec.pinv(1, 0, Projection::kKey, 0.97));
  CHECK(a != dec.pinv(1, 0, Projection::kKey, 0.8));
  CHECK(a != dec.pinv(2, 0, Projection::kKey, 0.97));
  CHECK(a->tag == "K1");
  CHECK_THROWS_AS(dec.pinv(3, 0, Projection::kQuery, 0.8), InputError);

  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  const ParamsF q = init_params<float>(cfg, 1);
  QkvDecoder heads(q);
  const auto h1 = heads.pinv(2, 1, Projection::kValue, 1.0);
  CHECK(h1->tag == "V2.h1");
  CHECK(h1->inverse.rows() == 16);
  CHECK(h1->inverse.cols() == 8);
}

TEST_CASE("circuit report on an untrained model") {
  const ParamsF p = init_params<float>(ModelConfig{}, 10);
  const Thresholds t;
  int completions = 0, passes = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const Example& e = small_dataset().examples[i];
    const CircuitReport r = circuit_report(p, e, t);
    CHECK(r.tokens == encode_example(e));
    CHECK(r.emitted.size() == e.target.size());
    int non_pad = 0;
    for (int s = 0; s < 5 && e.target[4 * s] != '_'; ++s) ++non_pad;
    CHECK(static_cast<int>(r.completion.size()) == non_pad);
    CHECK(static_cast<int>(r.chaining.size()) == non_pad - 1);
    for (const StageCheck& c : r.completion) {
      CHECK(c.expected_src.size() == 2);
      CHECK(c.decoding.has_value());
      ++completions;
      passes += c.pass;
    }
    const ActivationTrace<float> trace = capture(p, r.tokens);
    for (const ClassifiedLink& c : r.links) {
      CHECK(c.link.strength ==
            trace.layers[c.link.layer - 1].patterns[c.link.head](c.link.dst, c.link.src));
      CHECK(c.link.decoding.has_value());
      if (c.role == LinkRole::kRuleCompletion) CHECK(c.link.layer == 2);
    }
  }
  CHECK(completions > 0);
  CHECK(passes <= completions / 4);

  Example binary = small_dataset().examples[0];
  binary.target = "1";
  CHECK_THROWS_AS(circuit_report(p, binary, t), InputError);
  Thresholds bad;
  bad.s_k = 0;
  CHECK_THROWS_AS(circuit_report(p, small_dataset().examples[0], bad), ConfigError);
}
