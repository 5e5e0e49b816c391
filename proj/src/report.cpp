#include "deduce/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "deduce/vocab.hpp"

namespace deduce {

namespace {

Json decoded_json(const std::vector<DecodedToken>& d) {
  Json out = Json::array();
  for (const DecodedToken& t : d) out.push_back({{"token", std::string(1, t.token)}, {"logit", t.logit}});
  return out;
}

Json link_json(const AttentionLink& l, std::optional<LinkRole> role) {
  Json j{{"layer", l.layer}, {"head", l.head}, {"src", l.src}, {"dst", l.dst}, {"strength", l.strength}};
  if (role) j["role"] = std::string(to_string(*role));
  if (l.decoding) {
    j["q"] = decoded_json(l.decoding->q);
    j["k"] = decoded_json(l.decoding->k);
    j["v"] = decoded_json(l.decoding->v);
  }
  return j;
}

Json patterns_json(const std::vector<MatrixF>& heads) {
  Json out = Json::array();
  for (const MatrixF& p : heads) {
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      Json row = Json::array();
      for (Eigen::Index c = 0; c < p.cols(); ++c) row.push_back(static_cast<double>(p(r, c)));
      rows.push_back(std::move(row));
    }
    out.push_back(std::move(rows));
  }
  return out;
}

Json positions_json(const std::optional<PositionSet>& s) {
  if (!s) return nullptr;
  return Json(std::vector<int>(s->begin(), s->end()));
}

Json check_json(const StageCheck& c) {
  Json j{{"slot", c.slot},
         {"dst", c.dst},
         {"expected_src", c.expected_src},
         {"observed_src", c.observed_src},
         {"strength", c.strength},
         {"expected_query", std::string(1, c.expected_query)},
         {"expected_value", std::string(1, c.expected_value)},
         {"source_ok", c.source_ok},
         {"pass", c.pass}};
  if (c.decoding) {
    j["q"] = decoded_json(c.decoding->q);
    j["k"] = decoded_json(c.decoding->k);
    j["v"] = decoded_json(c.decoding->v);
  }
  return j;
}

// Keeps the links a viewer needs: every layer at the threshold, or, with a
// destination filter, the last layer's links into the filter and in earlier
// layers only links into endpoints of links already kept.
LinkSet select_links(const std::vector<const std::vector<MatrixF>*>& layers, double threshold,
                     const std::optional<PositionSet>& dst_filter, std::optional<int> only_layer) {
  const int n = static_cast<int>(layers.size());
  if (only_layer) {
    if (*only_layer < 1 || *only_layer > n) throw InputError("layer " + std::to_string(*only_layer) + " out of range");
    return links_from_patterns(*layers[*only_layer - 1], *only_layer, threshold, dst_filter);
  }
  LinkSet out;
  std::optional<PositionSet> filter = dst_filter;
  for (int l = n; l >= 1; --l) {
    LinkSet part = links_from_patterns(*layers[l - 1], l, threshold, filter);
    if (dst_filter) {
      PositionSet next;
      for (const AttentionLink& a : part) next.insert({a.src, a.dst});
      filter = std::move(next);
    }
    out.insert(out.begin(), part.begin(), part.end());
  }
  return out;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string top1(const Json& decoded) {
  return decoded.is_array() && !decoded.empty() ? decoded[0].at("token").get<std::string>() : std::string("?");
}

// Per-position labels shared by both renderers.
struct Rows {
  int positions = 0;
  std::vector<std::string> input, output;
  std::vector<std::vector<std::string>> decoded;  // [layer][position], top-2 joined
};

Rows rows_of(const Json& r) {
  Rows rows;
  rows.positions = r.at("positions").get<int>();
  const bool traced = r.contains("tokens");
  for (int p = 0; p < rows.positions; ++p) {
    if (traced) {
      rows.input.push_back(r["tokens"][p].get<std::string>());
      rows.output.push_back(r["tokens"][p + 1].get<std::string>());
    } else {
      rows.input.push_back(std::to_string(p));
      rows.output.emplace_back();
    }
  }
  for (const Json& layer : r.at("layers")) {
    auto& out = rows.decoded.emplace_back();
    for (int p = 0; p < rows.positions; ++p) {
      std::string s;
      if (layer.contains("residual")) {
        const Json& d = layer["residual"][p];
        for (std::size_t i = 0; i < std::min<std::size_t>(2, d.size()); ++i) s += d[i].at("token").get<std::string>();
      }
      out.push_back(s);
    }
  }
  return rows;
}

}  // namespace

Json trace_response(QkvDecoder& decoder, const std::string& checkpoint_id, const TraceRequest& request) {
  request.thresholds.validate();
  const ParamsF& p = decoder.params();
  const int m = (p.config.context_len - 5) / 8;
  Example ex = parse_prompt(request.prompt, m);
  const Layout layout{m, Supervision::kChainOfThought};
  if (layout.sequence_len() != p.config.context_len) {
    throw InputError("checkpoint context " + std::to_string(p.config.context_len) + " does not fit " +
                     std::to_string(m) + "-rule prompts");
  }
  const std::vector<int> prompt = Vocab::encode("@" + ex.prompt());
  const std::vector<int> sequence = generate(p, prompt, layout.output_len());
  const std::vector<int> inputs(sequence.begin(), sequence.end() - 1);
  const ActivationTrace<float> trace = capture(p, inputs);
  const std::string output = Vocab::decode(std::vector<int>(sequence.begin() + layout.prompt_len(), sequence.end()));
  const ChainOfThought expected = build_cot(ex.rules, ex.q0, ex.q1, m);
  const Thresholds& t = request.thresholds;

  Json j;
  j["schema"] = kTraceSchema;
  j["checkpoint"] = checkpoint_id;
  j["prompt"] = ex.prompt();
  Json tokens = Json::array();
  for (int id : sequence) tokens.push_back(std::string(1, Vocab::symbol(id)));
  j["tokens"] = std::move(tokens);
  j["prompt_length"] = layout.prompt_len();
  j["positions"] = static_cast<int>(inputs.size());
  j["output"] = output;
  j["decision"] = output.substr(output.size() - 1);
  j["expected"] = expected.text;
  j["correct"] = output == expected.text;
  j["thresholds"] = {{"link", t.link}, {"final_link", t.final_link}, {"s_q", t.s_q},
                     {"s_k", t.s_k},   {"s_v", t.s_v},               {"top_k", t.top_k}};
  j["dst_filter"] = positions_json(request.dst_filter);
  j["layer"] = request.layer ? Json(*request.layer) : Json(nullptr);

  Json ranks = Json::array();
  for (int l = 1; l <= p.config.n_layers; ++l) {
    for (int h = 0; h < p.config.n_heads; ++h) {
      for (auto [which, s] : {std::pair{Projection::kQuery, t.s_q}, {Projection::kKey, t.s_k},
                              {Projection::kValue, t.s_v}}) {
        const auto pinv = decoder.pinv(l, h, which, s);
        ranks.push_back({{"tag", pinv->tag}, {"threshold", s}, {"rank", pinv->rank},
                         {"dim", static_cast<int>(pinv->singular_values.size())}});
      }
    }
  }
  j["pinv"] = std::move(ranks);

  const auto decodings = residual_decodings(trace, p, t.top_k);
  Json layers = Json::array();
  std::vector<const std::vector<MatrixF>*> patterns;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    Json residual = Json::array();
    for (const auto& d : decodings[l]) residual.push_back(decoded_json(d));
    layers.push_back({{"layer", static_cast<int>(l + 1)},
                      {"residual", std::move(residual)},
                      {"attention", patterns_json(trace.layers[l].patterns)}});
    patterns.push_back(&trace.layers[l].patterns);
  }
  j["layers"] = std::move(layers);

  LinkSet links = select_links(patterns, t.link, request.dst_filter, request.layer);
  decoder.decode_all(links, trace, t);
  Json link_list = Json::array();
  for (const AttentionLink& l : links) link_list.push_back(link_json(l, classify_link(l, layout, p.config.n_layers)));
  j["links"] = std::move(link_list);

  if (p.config.n_layers >= 2) {
    ex.target = expected.text;
    ex.label = expected.label;
    j["circuit"] = to_json(circuit_report(decoder, ex, t));
  }
  return j;
}

Json average_response(const AveragedAttention& avg, const std::string& checkpoint_id, const AverageRequest& request) {
  Json j;
  j["schema"] = kAverageSchema;
  j["checkpoint"] = checkpoint_id;
  j["subset"] = std::string(to_string(request.subset));
  j["count"] = avg.count;
  j["positions"] = avg.length;
  j["threshold"] = request.threshold;
  j["dst_filter"] = positions_json(request.dst_filter);
  j["layer"] = request.layer ? Json(*request.layer) : Json(nullptr);
  Json layers = Json::array();
  std::vector<const std::vector<MatrixF>*> patterns;
  for (std::size_t l = 0; l < avg.layers.size(); ++l) {
    layers.push_back({{"layer", static_cast<int>(l + 1)}, {"attention", patterns_json(avg.layers[l])}});
    patterns.push_back(&avg.layers[l]);
  }
  j["layers"] = std::move(layers);
  const int m = (avg.length + 1 - 5) / 8;
  const Layout layout{m, Supervision::kChainOfThought};
  Json link_list = Json::array();
  for (const AttentionLink& l : select_links(patterns, request.threshold, request.dst_filter, request.layer)) {
    link_list.push_back(link_json(l, classify_link(l, layout, static_cast<int>(avg.layers.size()))));
  }
  j["links"] = std::move(link_list);
  return j;
}

Json average_response(const ParamsF& params, const std::string& checkpoint_id, const std::vector<Example>& examples,
                      const AverageRequest& request) {
  // Inputs only, as in a traced generation: the final token is never fed back.
  std::vector<std::vector<int>> seqs = subset_sequences(examples, request.subset);
  if (seqs.empty()) throw InputError("no " + std::string(to_string(request.subset)) + " examples to average");
  for (auto& s : seqs) s.pop_back();
  return average_response(average_attention(params, seqs), checkpoint_id, request);
}

Json to_json(const CircuitReport& report) {
  Json j;
  j["emitted"] = report.emitted;
  j["emitted_correct"] = report.emitted_correct;
  Json completion = Json::array(), chaining = Json::array(), links = Json::array();
  for (const StageCheck& c : report.completion) completion.push_back(check_json(c));
  for (const StageCheck& c : report.chaining) chaining.push_back(check_json(c));
  for (const ClassifiedLink& c : report.links) links.push_back(link_json(c.link, c.role));
  j["completion"] = std::move(completion);
  j["chaining"] = std::move(chaining);
  j["start"] = check_json(report.start);
  j["final_decision"] = check_json(report.final_decision);
  j["links"] = std::move(links);
  return j;
}

Json to_json(const CircuitStats& s) {
  return Json{{"examples", s.examples},
              {"completion", {{"total", s.completion_total}, {"pass", s.completion_pass},
                              {"source", s.completion_source}, {"rate", s.completion_rate()}}},
              {"chaining", {{"total", s.chaining_total}, {"pass", s.chaining_pass},
                            {"source", s.chaining_source}, {"rate", s.chaining_rate()}}},
              {"start_pass", s.start_pass},
              {"final_decision_pass", s.final_pass}};
}

std::string render_json(const Json& j) { return j.dump() + "\n"; }

PositionSet parse_positions(const std::string& text, const Layout& layout) {
  PositionSet out;
  const auto add = [&](const std::string& s, std::size_t at) {
    if (s.empty()) return;
    if (s == "arrows" || s == ">") {
      for (int i = 0; i < layout.m; ++i) out.insert(layout.slot_arrow(i));
    } else if (s == "commas") {
      for (int i = 0; i + 1 < layout.m; ++i) out.insert(layout.slot_comma(i));
    } else if (s == "dash" || s == "-") {
      out.insert(layout.dash());
    } else {
      std::size_t used = 0;
      int v = -1;
      try {
        v = std::stoi(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || v < 0 || v >= layout.sequence_len()) {
        throw InputError("bad position '" + s + "'", at);
      }
      out.insert(v);
    }
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == ',' || text[i] == ' ') {
      add(text.substr(start, i - start), start);
      start = i + 1;
    }
  }
  return out;
}

std::string render_svg(const Json& r) {
  const Rows rows = rows_of(r);
  const int cell = 30, margin = 70, row_gap = 130, box = 24;
  const int n_layers = static_cast<int>(rows.decoded.size());
  const int width = margin + rows.positions * cell + 20;
  const int height = 40 + (n_layers + 1) * row_gap + 60;
  // Row 0 is the input at the bottom; row n_layers + 1 is the output on top.
  const auto row_y = [&](int row) { return height - 40 - row * row_gap; };
  const auto col_x = [&](int pos) { return margin + pos * cell + cell / 2; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"monospace\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const std::vector<std::string> names = [&] {
    std::vector<std::string> v{"input"};
    for (int l = 1; l <= n_layers; ++l) v.push_back("layer " + std::to_string(l));
    v.push_back("output");
    return v;
  }();
  for (int row = 0; row <= n_layers + 1; ++row) {
    const int y = row_y(row);
    s << "<text x=\"4\" y=\"" << y + 4 << "\" font-size=\"11\">" << names[static_cast<std::size_t>(row)]
      << "</text>\n";
    for (int p = 0; p < rows.positions; ++p) {
      const int x = col_x(p);
      std::string label = row == n_layers + 1 ? rows.output[static_cast<std::size_t>(p)] : rows.input[static_cast<std::size_t>(p)];
      if (row == n_layers + 1 && label.empty()) continue;
      s << "<rect x=\"" << x - box / 2 << "\" y=\"" << y - box / 2 << "\" width=\"" << box << "\" height=\"" << box
        << "\" fill=\"#f4f4f4\" stroke=\"#888\"/>\n";
      s << "<text x=\"" << x << "\" y=\"" << y + (row > 0 && row <= n_layers ? -1 : 4)
        << "\" font-size=\"12\" text-anchor=\"middle\">" << xml_escape(label) << "</text>\n";
      if (row > 0 && row <= n_layers) {
        s << "<text x=\"" << x << "\" y=\"" << y + 10 << "\" font-size=\"8\" fill=\"#446\" text-anchor=\"middle\">"
          << xml_escape(rows.decoded[static_cast<std::size_t>(row - 1)][static_cast<std::size_t>(p)]) << "</text>\n";
      }
    }
  }
  for (const Json& l : r.at("links")) {
    const int layer = l.at("layer").get<int>();
    const double strength = l.at("strength").get<double>();
    const int x1 = col_x(l.at("src").get<int>()), y1 = row_y(layer - 1) - box / 2;
    const int x2 = col_x(l.at("dst").get<int>()), y2 = row_y(layer) + box / 2;
    s << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
      << "\" stroke=\"#2a5db0\" stroke-opacity=\"0.7\" stroke-width=\"" << fixed(0.5 + 6.0 * strength, 2)
      << "\"><title>L" << layer << " " << l.at("src").get<int>() << "-&gt;" << l.at("dst").get<int>() << " "
      << fixed(strength, 3) << "</title></line>\n";
    if (l.contains("q")) {
      const double qx = x2 + 0.3 * (x1 - x2), qy = y2 + 0.3 * (y1 - y2);
      const double kx = x1 + 0.3 * (x2 - x1), ky = y1 + 0.3 * (y2 - y1);
      s << "<text x=\"" << fixed(qx, 1) << "\" y=\"" << fixed(qy, 1)
        << "\" font-size=\"10\" fill=\"red\" text-anchor=\"middle\">" << xml_escape(top1(l["q"])) << "</text>\n";
      s << "<text x=\"" << fixed(kx - 6, 1) << "\" y=\"" << fixed(ky, 1)
        << "\" font-size=\"10\" fill=\"red\" text-anchor=\"middle\">" << xml_escape(top1(l["k"])) << "</text>\n";
      s << "<text x=\"" << fixed(kx + 6, 1) << "\" y=\"" << fixed(ky, 1)
        << "\" font-size=\"10\" fill=\"red\" text-anchor=\"middle\">" << xml_escape(top1(l["v"])) << "</text>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

std::string render_text(const Json& r) {
  const Rows rows = rows_of(r);
  const auto line = [&](const std::string& name, const auto& cell) {
    std::string out = name;
    out.resize(8, ' ');
    for (int p = 0; p < rows.positions; ++p) {
      std::string c = cell(p);
      c.resize(3, ' ');
      out += c;
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::string out;
  if (r.contains("prompt")) out += "prompt  " + r["prompt"].get<std::string>() + "\n";
  if (r.contains("output")) {
    out += "output  " + r["output"].get<std::string>() + (r.value("correct", false) ? "  (correct)" : "  (expected " +
                                                             r.value("expected", std::string()) + ")") + "\n";
  }
  if (r.contains("subset")) {
    out += "average " + r["subset"].get<std::string>() + " over " + std::to_string(r["count"].get<int>()) +
           " examples\n";
  }
  out += "\n";
  out += line("pos", [](int p) { return std::to_string(p); });
  out += line("input", [&](int p) { return rows.input[static_cast<std::size_t>(p)]; });
  for (std::size_t l = 0; l < rows.decoded.size(); ++l) {
    if (rows.decoded[l].empty() || rows.decoded[l][0].empty()) continue;
    out += line("layer " + std::to_string(l + 1), [&](int p) { return rows.decoded[l][static_cast<std::size_t>(p)]; });
  }
  if (r.contains("tokens")) out += line("output", [&](int p) { return rows.output[static_cast<std::size_t>(p)]; });
  out += "\nlinks\n";
  for (const Json& l : r.at("links")) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "  L%d h%d %3d -> %3d  %.3f", l.at("layer").get<int>(), l.at("head").get<int>(),
                  l.at("src").get<int>(), l.at("dst").get<int>(), l.at("strength").get<double>());
    out += buf;
    if (l.contains("q")) out += "  Q=" + top1(l["q"]) + " K=" + top1(l["k"]) + " V=" + top1(l["v"]);
    if (l.contains("role")) out += "  " + l["role"].get<std::string>();
    out += "\n";
  }
  return out;
}

}  // namespace deduce
