#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <Eigen/SVD>

#include "deduce/errors.hpp"
#include "deduce/linalg.hpp"
#include "deduce/model.hpp"
#include "deduce/taskgen.hpp"

namespace deduce {

struct DecodedToken {
  char token = '?';
  double logit = 0;
  int rank = 0;  // 1-based
};

/// Top-k of one row of logits, ties broken towards the lower token id.
std::vector<DecodedToken> top_tokens(std::span<const float> logits, int top_k);

/// Final norm plus tied unembedding applied to an arbitrary residual vector.
std::vector<DecodedToken> logit_lens(const RowVector<float>& residual, const ParamsF& params, int top_k);

/// Logit-lens decoding of every block output: [layer][position] -> top-k.
std::vector<std::vector<std::vector<DecodedToken>>> residual_decodings(const ActivationTrace<float>& trace,
                                                                        const ParamsF& params, int top_k);

// ---------------------------------------------------------------------------
// Truncated pseudoinverse.

enum class Projection { kQuery, kKey, kValue };
char to_char(Projection p);

/// Smallest k whose leading singular values reach fraction `s` of the total.
/// Zero for an all-zero spectrum.
int retained_rank(const VectorD& sigma, double s);

template <typename Scalar>
struct TruncatedPinv {
  std::string tag;
  VectorD singular_values;  // non-increasing
  int rank = 0;
  double threshold = 1;
  Matrix<Scalar> u, v;      // thin factors, w = u diag(sigma) v^T
  Matrix<Scalar> inverse;   // V_k Sigma_k^-1 U_k^T, cols x rows of w

  /// Orthogonal projector onto the top-k right singular vectors.
  Matrix<Scalar> projector() const {
    const auto vk = v.leftCols(rank);
    return vk * vk.transpose();
  }
};

/// The SVD always runs in double; factors are stored back in `Scalar`.
template <typename Scalar>
TruncatedPinv<Scalar> truncated_pinv(const Matrix<Scalar>& w, double s_threshold, std::string tag = {}) {
  if (!(s_threshold > 0 && s_threshold <= 1)) throw ConfigError("s threshold must lie in (0, 1]");
  if (w.size() == 0) throw InputError("empty matrix");
  const MatrixD wd = w.template cast<double>();
  if (!wd.allFinite()) throw NumericError("non-finite matrix passed to the SVD");
  Eigen::JacobiSVD<MatrixD> svd(wd, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericError("SVD did not converge");

  TruncatedPinv<Scalar> out;
  out.tag = std::move(tag);
  out.threshold = s_threshold;
  out.singular_values = svd.singularValues();
  out.rank = retained_rank(out.singular_values, s_threshold);
  const MatrixD& u = svd.matrixU();
  const MatrixD& v = svd.matrixV();
  const int k = out.rank;
  const VectorD inv_sigma = out.singular_values.head(k).cwiseInverse();
  const MatrixD inverse = v.leftCols(k) * inv_sigma.asDiagonal() * u.leftCols(k).transpose();
  out.u = u.cast<Scalar>();
  out.v = v.cast<Scalar>();
  out.inverse = inverse.cast<Scalar>();
  return out;
}

// ---------------------------------------------------------------------------
// Attention links.

struct QkvDecoding {
  std::vector<DecodedToken> q, k, v;
};

struct AttentionLink {
  int layer = 1;  // 1 = input to layer 1, 2 = layer 1 to layer 2
  int head = 0;
  int src = 0;
  int dst = 0;
  double strength = 0;
  std::optional<QkvDecoding> decoding;
};

using LinkSet = std::vector<AttentionLink>;
using PositionSet = std::set<int>;

/// Every (src, dst) of one layer's per-head patterns with strength >= threshold,
/// ordered by head, dst, src.
LinkSet links_from_patterns(const std::vector<MatrixF>& heads, int layer, double threshold,
                            const std::optional<PositionSet>& dst_filter = std::nullopt);

LinkSet attention_links(const ActivationTrace<float>& trace, int layer, double threshold,
                        const std::optional<PositionSet>& dst_filter = std::nullopt);

enum class Subset { kAll, kPositive, kNegative };
std::string_view to_string(Subset s);
Subset parse_subset(std::string_view text);

/// Teacher-forced token sequences (prompt followed by target) of the chosen examples.
std::vector<std::vector<int>> subset_sequences(const std::vector<Example>& examples, Subset subset);

struct AveragedAttention {
  int count = 0;
  int length = 0;
  std::vector<std::vector<MatrixF>> layers;  // [layer][head], length x length
};

AveragedAttention average_attention(const ParamsF& params, const std::vector<std::vector<int>>& sequences);

/// Links of the averaged patterns across every layer; content-dependent links
/// wash out, leaving the positional skeleton.
LinkSet token_independent_links(const ParamsF& params, const std::vector<std::vector<int>>& sequences,
                                double threshold, const std::optional<PositionSet>& dst_filter = std::nullopt);
LinkSet token_independent_links(const AveragedAttention& avg, double threshold,
                                const std::optional<PositionSet>& dst_filter = std::nullopt);

// ---------------------------------------------------------------------------
// Q/K/V decoding.

struct Thresholds {
  double link = 0.4;        // completion and chaining links
  double final_link = 0.1;  // start and final-decision links
  double s_q = 0.80;
  double s_k = 0.97;
  double s_v = 0.80;
  int top_k = 3;

  void validate() const;
};

/// Retro-projects query (at dst), key and value (at src) of a link through
/// the truncated pseudoinverse of the head's slice of W_Q/W_K/W_V, then
/// decodes with the logit lens. The projection bias is removed first so the
/// pseudoinverse sees W x alone. Pseudoinverses are computed once per
/// (layer, head, matrix, threshold) and shared between threads.
class QkvDecoder {
 public:
  explicit QkvDecoder(const ParamsF& params) : params_(&params) {}

  const ParamsF& params() const { return *params_; }

  std::shared_ptr<const TruncatedPinv<float>> pinv(int layer, int head, Projection which, double s);

  QkvDecoding decode(const AttentionLink& link, const ActivationTrace<float>& trace, const Thresholds& t);

  /// Decodes every link in place.
  void decode_all(LinkSet& links, const ActivationTrace<float>& trace, const Thresholds& t);

 private:
  std::vector<DecodedToken> decode_one(int layer, int head, Projection which, double s, int position,
                                       const ActivationTrace<float>& trace, int top_k);

  const ParamsF* params_;
  std::shared_mutex mutex_;
  std::map<std::tuple<int, int, Projection, double>, std::shared_ptr<const TruncatedPinv<float>>> cache_;
};

QkvDecoding decode_qkv(const AttentionLink& link, const ParamsF& params, const ActivationTrace<float>& trace,
                       double s_q, double s_k, double s_v, int top_k = 3);

// ---------------------------------------------------------------------------
// Circuit reports.

enum class LinkRole { kPositionalCopy, kRuleCompletion, kRuleChaining, kStart, kFinalDecision, kOther };
std::string_view to_string(LinkRole r);

/// Role of a link by its endpoints in the fixed sequence layout.
LinkRole classify_link(const AttentionLink& link, const Layout& layout, int n_layers);

struct ClassifiedLink {
  AttentionLink link;
  LinkRole role = LinkRole::kOther;
};

struct StageCheck {
  int slot = -1;             // output slot, or -1 for start/final
  int dst = 0;
  std::vector<int> expected_src;  // positions that count as the right source
  int observed_src = -1;     // argmax of the checked layer's attention row
  double strength = 0;       // attention weight on observed_src
  char expected_query = '?';
  char expected_value = '?';
  std::optional<QkvDecoding> decoding;  // of the (observed_src, dst) link
  bool source_ok = false;
  bool pass = false;
};

/// Checks run on the teacher-forced sequence (prompt followed by the expected
/// chain) so every example is judged against the true chain. `emitted` is the
/// model's own greedy output for the same prompt.
struct CircuitReport {
  std::vector<int> tokens;
  std::string emitted;
  bool emitted_correct = false;
  std::vector<ClassifiedLink> links;
  std::vector<StageCheck> completion;  // one per non-padding slot
  std::vector<StageCheck> chaining;    // one per slot followed by another rule
  StageCheck start;
  StageCheck final_decision;
};

CircuitReport circuit_report(QkvDecoder& decoder, const Example& example, const Thresholds& t);
CircuitReport circuit_report(const ParamsF& params, const Example& example, const Thresholds& t);

struct CircuitStats {
  int examples = 0;
  int completion_total = 0, completion_pass = 0, completion_source = 0;
  int chaining_total = 0, chaining_pass = 0, chaining_source = 0;
  int start_pass = 0, final_pass = 0;

  double completion_rate() const { return completion_total ? double(completion_pass) / completion_total : 0; }
  double chaining_rate() const { return chaining_total ? double(chaining_pass) / chaining_total : 0; }
};

CircuitStats circuit_statistics(QkvDecoder& decoder, const std::vector<Example>& examples, const Thresholds& t);

}  // namespace deduce
