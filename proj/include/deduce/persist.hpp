#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "deduce/model.hpp"
#include "deduce/taskgen.hpp"
#include "deduce/train.hpp"

namespace deduce {

using Json = nlohmann::ordered_json;

void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);
void to_json(Json& j, const EpochMetrics& m);
void from_json(const Json& j, EpochMetrics& m);

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Layout: "TMLM", u32 version, u64 header length, UTF-8 JSON header, then the
// tensors as row-major little-endian f32 in directory order. Integers are
// little-endian. Tensor offsets in the header are relative to the payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  ModelConfig model;
  TrainConfig train;
  std::string tag;
  int epoch = 0;
  std::optional<EpochMetrics> metrics;
  /// Directory of where the training data lives, informational only.
  std::string data;
};

struct Checkpoint {
  ParamsF params;
  CheckpointMeta meta;
};

/// Writes to a sibling temporary file, fsyncs and renames over `path`.
void save_checkpoint(const ParamsF& params, const CheckpointMeta& meta, const std::filesystem::path& path);

/// Verifies magic, version, tensor directory and payload size.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Reads only the header; the payload is not touched.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// The raw header JSON as stored.
Json read_checkpoint_header(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Datasets: "PROMPT\tTARGET" lines with the prompt's leading '@' omitted,
// plus a JSON sidecar.

void write_examples(const std::filesystem::path& path, const std::vector<Example>& examples);

/// Re-derives labels from the targets and checks each target against the
/// chain the rules imply.
std::vector<Example> read_examples(const std::filesystem::path& path, int m,
                                   Supervision supervision = Supervision::kChainOfThought);

struct DatasetFiles {
  Split split;
  Json sidecar;
};

/// DIR/train.txt, DIR/val.txt and DIR/dataset.json.
void write_dataset_dir(const std::filesystem::path& dir, const Split& split, double ratio);
DatasetFiles read_dataset_dir(const std::filesystem::path& dir);

/// Text written through a temporary file and rename, like checkpoints.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace deduce
