#pragma once

#include <optional>
#include <string>
#include <vector>

#include "deduce/interp.hpp"
#include "deduce/persist.hpp"

namespace deduce {

inline constexpr const char* kTraceSchema = "deduce.trace/1";
inline constexpr const char* kAverageSchema = "deduce.average/1";
inline constexpr const char* kCheckpointsSchema = "deduce.checkpoints/1";
inline constexpr const char* kErrorSchema = "deduce.error/1";

struct TraceRequest {
  std::string prompt;
  Thresholds thresholds;
  /// Output positions the last layer's links must reach. Earlier layers then
  /// keep only links into the endpoints of those links.
  std::optional<PositionSet> dst_filter;
  /// Restricts links to one layer (1-based).
  std::optional<int> layer;
};

/// Greedy generation, activation capture, link extraction and Q/K/V
/// decoding for one prompt. Throws InputError (with the character position)
/// for malformed prompts.
Json trace_response(QkvDecoder& decoder, const std::string& checkpoint_id, const TraceRequest& request);

struct AverageRequest {
  Subset subset = Subset::kAll;
  double threshold = 0.1;
  std::optional<PositionSet> dst_filter;
  std::optional<int> layer;
};

Json average_response(const ParamsF& params, const std::string& checkpoint_id, const std::vector<Example>& examples,
                      const AverageRequest& request);
Json average_response(const AveragedAttention& avg, const std::string& checkpoint_id, const AverageRequest& request);

Json to_json(const CircuitReport& report);
Json to_json(const CircuitStats& stats);

/// Serialized form shared by the CLI and the server, so the same query gives
/// the same bytes on both paths.
std::string render_json(const Json& j);

/// Figure-style diagram of a trace or average response: input, layer 1,
/// layer 2 and output rows, link width proportional to strength, decoded
/// Q/K/V in red.
std::string render_svg(const Json& response);

/// The same content as aligned plain text.
std::string render_text(const Json& response);

/// Parses a comma-separated position list. Besides numbers, the names
/// "arrows", "commas" and "dash" select the '>' tokens, ',' tokens and the
/// '-' of the output section.
PositionSet parse_positions(const std::string& text, const Layout& layout);

}  // namespace deduce
