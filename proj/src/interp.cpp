#include "deduce/interp.hpp"

#include <algorithm>
#include <mutex>
#include <numeric>

#include "deduce/vocab.hpp"

namespace deduce {

namespace {

MatrixF lens_logits(const MatrixF& rows, const ParamsF& p) {
  return unembed(p, layer_norm(rows, p.final_scale, p.final_shift));
}

Literal literal_at(const std::string& target, std::size_t i) {
  return Vocab::id(target.at(i));
}

bool top1_is(const std::vector<DecodedToken>& decoded, char c) {
  return !decoded.empty() && decoded.front().token == c;
}

// Strongest (head, src) of a dst row over all heads of a 1-based layer.
std::pair<int, int> argmax_source(const ActivationTrace<float>& trace, int layer, int dst, double* weight) {
  const auto& heads = trace.layers.at(static_cast<std::size_t>(layer - 1)).patterns;
  int best_head = 0, best_src = 0;
  float best = -1;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    for (int s = 0; s <= dst; ++s) {
      if (heads[h](dst, s) > best) {
        best = heads[h](dst, s);
        best_head = static_cast<int>(h);
        best_src = s;
      }
    }
  }
  *weight = best;
  return {best_head, best_src};
}

// Strongest single-head weight on (src, dst) in a 1-based layer.
std::pair<int, double> best_head_weight(const ActivationTrace<float>& trace, int layer, int src, int dst) {
  const auto& heads = trace.layers.at(static_cast<std::size_t>(layer - 1)).patterns;
  int best_head = 0;
  double best = -1;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    if (heads[h](dst, src) > best) {
      best = heads[h](dst, src);
      best_head = static_cast<int>(h);
    }
  }
  return {best_head, best};
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

// Positions the final decision searches for the query tail: the ',' after
// each of the first m-1 tails (the tail is shifted there by a positional
// copy) plus the last tail itself.
std::vector<int> chain_tail_positions(const Layout& layout) {
  std::vector<int> out;
  for (int i = 0; i + 1 < layout.m; ++i) out.push_back(layout.slot_comma(i));
  out.push_back(layout.slot_tail(layout.m - 1));
  return out;
}

}  // namespace

LinkRole classify_link(const AttentionLink& l, const Layout& layout, int last_layer) {
  if (l.dst == layout.query_tail() && l.src == layout.query_head()) return LinkRole::kStart;
  if (l.dst == layout.dash()) {
    if (l.layer == 1 && l.src == layout.query_tail()) return LinkRole::kFinalDecision;
    if (l.layer == last_layer && contains(chain_tail_positions(layout), l.src)) return LinkRole::kFinalDecision;
  }
  if (l.layer == last_layer && l.src < layout.entails()) {
    for (int i = 0; i < layout.m; ++i) {
      if (l.dst == layout.slot_arrow(i)) return LinkRole::kRuleCompletion;
      if (i + 1 < layout.m && l.dst == layout.slot_comma(i)) return LinkRole::kRuleChaining;
    }
  }
  if (l.layer == 1 && (l.dst - l.src == 1 || l.dst - l.src == 2)) return LinkRole::kPositionalCopy;
  return LinkRole::kOther;
}

std::vector<DecodedToken> top_tokens(std::span<const float> logits, int top_k) {
  const int n = static_cast<int>(logits.size());
  if (top_k < 0 || top_k > n) throw ConfigError("top_k must lie in [0, " + std::to_string(n) + "]");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  std::vector<DecodedToken> out;
  for (int r = 0; r < top_k; ++r) {
    out.push_back({Vocab::symbol(order[r]), logits[order[r]], r + 1});
  }
  return out;
}

std::vector<DecodedToken> logit_lens(const RowVector<float>& residual, const ParamsF& params, int top_k) {
  if (residual.size() != params.config.d_model) throw InputError("residual width does not match d_model");
  const MatrixF logits = lens_logits(MatrixF(residual), params);
  return top_tokens({logits.data(), static_cast<std::size_t>(logits.cols())}, top_k);
}

std::vector<std::vector<std::vector<DecodedToken>>> residual_decodings(const ActivationTrace<float>& trace,
                                                                        const ParamsF& params, int top_k) {
  std::vector<std::vector<std::vector<DecodedToken>>> out;
  for (const LayerTrace<float>& layer : trace.layers) {
    const MatrixF logits = lens_logits(layer.resid_post, params);
    auto& rows = out.emplace_back();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      rows.push_back(top_tokens({logits.row(r).data(), static_cast<std::size_t>(logits.cols())}, top_k));
    }
  }
  return out;
}

char to_char(Projection p) {
  switch (p) {
    case Projection::kQuery: return 'Q';
    case Projection::kKey: return 'K';
    case Projection::kValue: return 'V';
  }
  return '?';
}

int retained_rank(const VectorD& sigma, double s) {
  const double total = sigma.sum();
  if (total <= 0) return 0;
  // Relative slack so that s = 1 stops at the numerical rank instead of
  // running past it on rounding noise.
  const double goal = s * total - 1e-12 * total;
  double cumulative = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    cumulative += sigma(i);
    if (cumulative >= goal) return static_cast<int>(i + 1);
  }
  return static_cast<int>(sigma.size());
}

LinkSet links_from_patterns(const std::vector<MatrixF>& heads, int layer, double threshold,
                            const std::optional<PositionSet>& dst_filter) {
  LinkSet out;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const MatrixF& p = heads[h];
    for (Eigen::Index dst = 0; dst < p.rows(); ++dst) {
      if (dst_filter && !dst_filter->contains(static_cast<int>(dst))) continue;
      for (Eigen::Index src = 0; src <= dst; ++src) {
        if (p(dst, src) >= threshold) {
          out.push_back({layer, static_cast<int>(h), static_cast<int>(src), static_cast<int>(dst), p(dst, src), {}});
        }
      }
    }
  }
  return out;
}

LinkSet attention_links(const ActivationTrace<float>& trace, int layer, double threshold,
                        const std::optional<PositionSet>& dst_filter) {
  if (layer < 1 || layer > static_cast<int>(trace.layers.size())) {
    throw InputError("layer " + std::to_string(layer) + " out of range");
  }
  return links_from_patterns(trace.layers[static_cast<std::size_t>(layer - 1)].patterns, layer, threshold,
                             dst_filter);
}

std::string_view to_string(Subset s) {
  switch (s) {
    case Subset::kAll: return "all";
    case Subset::kPositive: return "positive";
    case Subset::kNegative: return "negative";
  }
  return "all";
}

Subset parse_subset(std::string_view text) {
  if (text == "all") return Subset::kAll;
  if (text == "positive") return Subset::kPositive;
  if (text == "negative") return Subset::kNegative;
  throw ConfigError("unknown subset '" + std::string(text) + "' (expected all, positive or negative)");
}

std::vector<std::vector<int>> subset_sequences(const std::vector<Example>& examples, Subset subset) {
  std::vector<std::vector<int>> out;
  for (const Example& e : examples) {
    if (subset == Subset::kPositive && !e.label) continue;
    if (subset == Subset::kNegative && e.label) continue;
    out.push_back(encode_example(e));
  }
  return out;
}

AveragedAttention average_attention(const ParamsF& params, const std::vector<std::vector<int>>& sequences) {
  if (sequences.empty()) throw InputError("no examples to average");
  const int length = static_cast<int>(sequences.front().size());
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (static_cast<int>(sequences[i].size()) != length) {
      throw InputError("example " + std::to_string(i) + " has length " + std::to_string(sequences[i].size()) +
                       ", expected " + std::to_string(length));
    }
  }
  const int layers = params.config.n_layers;
  const int heads = params.config.n_heads;
  std::vector<std::vector<MatrixD>> sums(static_cast<std::size_t>(layers),
                                         std::vector<MatrixD>(static_cast<std::size_t>(heads),
                                                              MatrixD::Zero(length, length)));
  constexpr std::size_t kChunk = 128;
  std::vector<int> flat;
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    const std::size_t end = std::min(sequences.size(), start + kChunk);
    flat.clear();
    for (std::size_t i = start; i < end; ++i) flat.insert(flat.end(), sequences[i].begin(), sequences[i].end());
    const int batch = static_cast<int>(end - start);
    const ForwardPass<float> pass = forward(params, flat, batch, length);
    for (int l = 0; l < layers; ++l) {
      const auto& pats = pass.blocks[static_cast<std::size_t>(l)].patterns;
      for (int s = 0; s < batch; ++s) {
        for (int h = 0; h < heads; ++h) {
          sums[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] +=
              pats[static_cast<std::size_t>(s * heads + h)].cast<double>();
        }
      }
    }
  }
  AveragedAttention avg;
  avg.count = static_cast<int>(sequences.size());
  avg.length = length;
  for (auto& layer : sums) {
    auto& out = avg.layers.emplace_back();
    for (MatrixD& m : layer) out.push_back((m / static_cast<double>(avg.count)).cast<float>());
  }
  return avg;
}

LinkSet token_independent_links(const AveragedAttention& avg, double threshold,
                                const std::optional<PositionSet>& dst_filter) {
  LinkSet out;
  for (std::size_t l = 0; l < avg.layers.size(); ++l) {
    LinkSet part = links_from_patterns(avg.layers[l], static_cast<int>(l + 1), threshold, dst_filter);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

LinkSet token_independent_links(const ParamsF& params, const std::vector<std::vector<int>>& sequences,
                                double threshold, const std::optional<PositionSet>& dst_filter) {
  if (sequences.size() < 2) throw InputError("averaging needs at least two examples");
  return token_independent_links(average_attention(params, sequences), threshold, dst_filter);
}

void Thresholds::validate() const {
  for (double s : {s_q, s_k, s_v}) {
    if (!(s > 0 && s <= 1)) throw ConfigError("s thresholds must lie in (0, 1]");
  }
  if (!(link >= 0) || !(final_link >= 0)) throw ConfigError("link thresholds must be non-negative");
  if (top_k < 1 || top_k > Vocab::kSize) throw ConfigError("top_k must lie in [1, 28]");
}

std::shared_ptr<const TruncatedPinv<float>> QkvDecoder::pinv(int layer, int head, Projection which, double s) {
  const auto key = std::make_tuple(layer, head, which, s);
  {
    std::shared_lock lock(mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  }
  const ParamsF& p = *params_;
  if (layer < 1 || layer > p.config.n_layers) throw InputError("layer " + std::to_string(layer) + " out of range");
  if (head < 0 || head >= p.config.n_heads) throw InputError("head " + std::to_string(head) + " out of range");
  const Block<float>& b = p.blocks[static_cast<std::size_t>(layer - 1)];
  const MatrixF& w = which == Projection::kQuery ? b.w_q : which == Projection::kKey ? b.w_k : b.w_v;
  const int dh = p.config.d_head();
  const MatrixF slice = w.middleRows(head * dh, dh);
  std::string tag = std::string(1, to_char(which)) + std::to_string(layer);
  if (p.config.n_heads > 1) tag += ".h" + std::to_string(head);
  auto made = std::make_shared<const TruncatedPinv<float>>(truncated_pinv(slice, s, std::move(tag)));
  std::unique_lock lock(mutex_);
  return cache_.emplace(key, std::move(made)).first->second;
}

std::vector<DecodedToken> QkvDecoder::decode_one(int layer, int head, Projection which, double s, int position,
                                                 const ActivationTrace<float>& trace, int top_k) {
  const ParamsF& p = *params_;
  const LayerTrace<float>& lt = trace.layers.at(static_cast<std::size_t>(layer - 1));
  const Block<float>& b = p.blocks[static_cast<std::size_t>(layer - 1)];
  const int dh = p.config.d_head();
  const MatrixF& act = which == Projection::kQuery ? lt.q : which == Projection::kKey ? lt.k : lt.v;
  const VectorF& bias = which == Projection::kQuery ? b.b_q : which == Projection::kKey ? b.b_k : b.b_v;
  const VectorF projected = act.row(position).segment(head * dh, dh).transpose() - bias.segment(head * dh, dh);
  const VectorF back = pinv(layer, head, which, s)->inverse * projected;
  return logit_lens(back.transpose(), p, top_k);
}

QkvDecoding QkvDecoder::decode(const AttentionLink& link, const ActivationTrace<float>& trace, const Thresholds& t) {
  if (link.src > link.dst || link.dst >= static_cast<int>(trace.tokens.size()) || link.src < 0) {
    throw InputError("link does not fit the trace");
  }
  QkvDecoding d;
  d.q = decode_one(link.layer, link.head, Projection::kQuery, t.s_q, link.dst, trace, t.top_k);
  d.k = decode_one(link.layer, link.head, Projection::kKey, t.s_k, link.src, trace, t.top_k);
  d.v = decode_one(link.layer, link.head, Projection::kValue, t.s_v, link.src, trace, t.top_k);
  return d;
}

void QkvDecoder::decode_all(LinkSet& links, const ActivationTrace<float>& trace, const Thresholds& t) {
  for (AttentionLink& l : links) l.decoding = decode(l, trace, t);
}

QkvDecoding decode_qkv(const AttentionLink& link, const ParamsF& params, const ActivationTrace<float>& trace,
                       double s_q, double s_k, double s_v, int top_k) {
  Thresholds t;
  t.s_q = s_q;
  t.s_k = s_k;
  t.s_v = s_v;
  t.top_k = top_k;
  t.validate();
  QkvDecoder decoder(params);
  return decoder.decode(link, trace, t);
}

std::string_view to_string(LinkRole r) {
  switch (r) {
    case LinkRole::kPositionalCopy: return "positional_copy";
    case LinkRole::kRuleCompletion: return "rule_completion";
    case LinkRole::kRuleChaining: return "rule_chaining";
    case LinkRole::kStart: return "start";
    case LinkRole::kFinalDecision: return "final_decision";
    case LinkRole::kOther: return "other";
  }
  return "other";
}

CircuitReport circuit_report(QkvDecoder& decoder, const Example& example, const Thresholds& t) {
  t.validate();
  const ParamsF& p = decoder.params();
  const Layout layout{static_cast<int>(example.rules.size()), Supervision::kChainOfThought};
  if (static_cast<int>(example.target.size()) != layout.output_len()) {
    throw InputError("circuit reports need a chain-of-thought target of length " +
                     std::to_string(layout.output_len()));
  }
  if (p.config.n_layers < 2) throw ConfigError("circuit reports need at least two layers");
  const int last = p.config.n_layers;

  CircuitReport rep;
  rep.tokens = encode_example(example);
  if (static_cast<int>(rep.tokens.size()) > p.config.context_len) throw InputError("example exceeds the context");
  const ActivationTrace<float> trace = capture(p, rep.tokens);

  const std::vector<int> prompt(rep.tokens.begin(), rep.tokens.begin() + layout.prompt_len());
  const std::vector<int> generated = generate(p, prompt, layout.output_len());
  rep.emitted = Vocab::decode(std::vector<int>(generated.begin() + layout.prompt_len(), generated.end()));
  rep.emitted_correct = rep.emitted == example.target;

  auto rule_with_head = [&](Literal head) -> int {
    for (std::size_t r = 0; r < example.rules.size(); ++r) {
      if (example.rules[r].head == head) return static_cast<int>(r);
    }
    return -1;
  };
  auto check_at = [&](int layer, int dst, StageCheck& c) {
    double w = 0;
    const auto [head, src] = argmax_source(trace, layer, dst, &w);
    c.dst = dst;
    c.observed_src = src;
    c.strength = w;
    c.decoding = decoder.decode({layer, head, src, dst, w, {}}, trace, t);
    c.source_ok = contains(c.expected_src, src);
  };

  // Completion: the query literal at the output '>' finds its rule and
  // releases the rule tail.
  for (int i = 0; i < layout.m; ++i) {
    const Literal h = literal_at(example.target, static_cast<std::size_t>(4 * i));
    if (h == Vocab::kPad) break;
    const int r = rule_with_head(h);
    if (r < 0) continue;
    StageCheck c;
    c.slot = i;
    c.expected_src = {layout.rule_head(r), layout.rule_tail(r)};
    c.expected_query = Vocab::symbol(h);
    c.expected_value = Vocab::symbol(example.rules[static_cast<std::size_t>(r)].tail);
    check_at(last, layout.slot_arrow(i), c);
    c.pass = c.source_ok && top1_is(c.decoding->q, c.expected_query) && top1_is(c.decoding->k, c.expected_query) &&
             top1_is(c.decoding->v, c.expected_value);
    rep.completion.push_back(std::move(c));
  }

  // Chaining: the tail copied onto ',' looks for the rule it heads.
  for (int i = 0; i + 1 < layout.m; ++i) {
    const Literal next = literal_at(example.target, static_cast<std::size_t>(4 * (i + 1)));
    if (next == Vocab::kPad) break;
    const Literal tail = literal_at(example.target, static_cast<std::size_t>(4 * i + 2));
    const int r = rule_with_head(tail);
    if (r < 0) continue;
    StageCheck c;
    c.slot = i;
    c.expected_src = {layout.rule_head(r)};
    c.expected_query = c.expected_value = Vocab::symbol(tail);
    check_at(last, layout.slot_comma(i), c);
    c.pass = c.source_ok && top1_is(c.decoding->q, c.expected_query) && top1_is(c.decoding->k, c.expected_query) &&
             top1_is(c.decoding->v, c.expected_value);
    rep.chaining.push_back(std::move(c));
  }

  // Start: the query head is copied to the position that emits the first token.
  {
    StageCheck& c = rep.start;
    c.dst = layout.query_tail();
    c.expected_src = {layout.query_head()};
    c.expected_query = c.expected_value = Vocab::symbol(example.q0);
    int best_layer = 1, best_head = 0;
    double best = -1;
    for (int l = 1; l <= last; ++l) {
      const auto [h, w] = best_head_weight(trace, l, layout.query_head(), c.dst);
      if (w > best) {
        best = w;
        best_layer = l;
        best_head = h;
      }
    }
    c.observed_src = layout.query_head();
    c.strength = best;
    c.decoding = decoder.decode({best_layer, best_head, c.observed_src, c.dst, best, {}}, trace, t);
    c.source_ok = best >= t.final_link;
    c.pass = c.source_ok && top1_is(c.decoding->v, c.expected_value);
  }

  // Final decision: the query tail reaches '-' in layer 1, then layer 2
  // searches the chain tails for it.
  {
    StageCheck& c = rep.final_decision;
    c.expected_query = Vocab::symbol(example.q1);
    c.expected_value = example.label ? '1' : '0';
    const std::vector<int> tails = chain_tail_positions(layout);
    if (example.label) {
      int j = 0;
      while (j + 1 < layout.m && literal_at(example.target, static_cast<std::size_t>(4 * (j + 1))) != Vocab::kPad) ++j;
      c.expected_src = {j + 1 < layout.m ? layout.slot_comma(j) : layout.slot_tail(j)};
    } else {
      c.expected_src = tails;
    }
    check_at(last, layout.dash(), c);
    const double copy = best_head_weight(trace, 1, layout.query_tail(), layout.dash()).second;
    const int decided = argmax(trace.logits.row(layout.dash()));
    c.source_ok = copy >= t.final_link && contains(c.expected_src, c.observed_src);
    c.pass = c.source_ok && Vocab::symbol(decided) == c.expected_value;
  }

  // Links shown alongside the checks: the strong last-layer links into the
  // output '>' and ',' positions, the weaker start and decision links, and
  // the layer-1 links feeding any of them.
  PositionSet strong, weak{layout.query_tail(), layout.dash()};
  for (int i = 0; i < layout.m; ++i) {
    strong.insert(layout.slot_arrow(i));
    if (i + 1 < layout.m) strong.insert(layout.slot_comma(i));
  }
  LinkSet links;
  for (int l = 2; l <= last; ++l) {
    for (const AttentionLink& a : attention_links(trace, l, t.link, strong)) links.push_back(a);
    for (const AttentionLink& a : attention_links(trace, l, t.final_link, weak)) links.push_back(a);
  }
  PositionSet fed = weak;
  for (const AttentionLink& a : links) fed.insert({a.src, a.dst});
  for (const AttentionLink& a : attention_links(trace, 1, t.final_link, weak)) links.push_back(a);
  fed.erase(layout.query_tail());
  fed.erase(layout.dash());
  for (const AttentionLink& a : attention_links(trace, 1, t.link, fed)) links.push_back(a);
  std::sort(links.begin(), links.end(), [](const AttentionLink& a, const AttentionLink& b) {
    return std::tie(a.layer, a.head, a.dst, a.src) < std::tie(b.layer, b.head, b.dst, b.src);
  });
  decoder.decode_all(links, trace, t);
  for (AttentionLink& a : links) {
    const LinkRole role = classify_link(a, layout, last);
    rep.links.push_back({std::move(a), role});
  }
  return rep;
}

CircuitReport circuit_report(const ParamsF& params, const Example& example, const Thresholds& t) {
  QkvDecoder decoder(params);
  return circuit_report(decoder, example, t);
}

CircuitStats circuit_statistics(QkvDecoder& decoder, const std::vector<Example>& examples, const Thresholds& t) {
  CircuitStats s;
  for (const Example& e : examples) {
    const CircuitReport r = circuit_report(decoder, e, t);
    ++s.examples;
    for (const StageCheck& c : r.completion) {
      ++s.completion_total;
      s.completion_pass += c.pass;
      s.completion_source += c.source_ok;
    }
    for (const StageCheck& c : r.chaining) {
      ++s.chaining_total;
      s.chaining_pass += c.pass;
      s.chaining_source += c.source_ok;
    }
    s.start_pass += r.start.pass;
    s.final_pass += r.final_decision.pass;
  }
  return s;
}

}  // namespace deduce
