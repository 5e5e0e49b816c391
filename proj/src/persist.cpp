#include "deduce/persist.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "deduce/vocab.hpp"

namespace deduce {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'T', 'M', 'L', 'M'};
constexpr std::size_t kPreamble = 4 + 4 + 8;

std::string sys_error(const std::string& what, const fs::path& path) {
  return what + " " + path.string() + ": " + std::strerror(errno);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

void atomic_write(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError(sys_error("cannot create", tmp));
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string msg = sys_error("cannot write", tmp);
      ::close(fd);
      ::unlink(tmp.c_str());
      throw IoError(msg);
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    const std::string msg = sys_error("cannot flush", tmp);
    ::unlink(tmp.c_str());
    throw IoError(msg);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    ::unlink(tmp.c_str());
    throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(sys_error("cannot open", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(sys_error("cannot read", path));
  return ss.str();
}

// Parses the preamble and header of a checkpoint image; `bytes` may hold only
// a prefix of the file as long as it covers the header.
Json parse_header(const std::string& bytes, const fs::path& path, std::uint64_t* header_len) {
  if (bytes.size() < kPreamble) throw CorruptionError(path.string() + ": file too short for a checkpoint");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptionError(path.string() + ": bad magic");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion) {
    throw CorruptionError(path.string() + ": unsupported format version " + std::to_string(version));
  }
  *header_len = get_le(bytes.data() + 8, 8);
  if (*header_len > bytes.size() - kPreamble) throw CorruptionError(path.string() + ": truncated header");
  try {
    return Json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(kPreamble + *header_len));
  } catch (const Json::exception& e) {
    throw CorruptionError(path.string() + ": header is not valid JSON (" + e.what() + ")");
  }
}

CheckpointMeta meta_from_header(const Json& h, const fs::path& path) {
  try {
    CheckpointMeta meta;
    meta.model = h.at("model").get<ModelConfig>();
    meta.train = h.at("train").get<TrainConfig>();
    meta.tag = h.at("tag").get<std::string>();
    meta.epoch = h.at("epoch").get<int>();
    if (h.contains("metrics") && !h.at("metrics").is_null()) meta.metrics = h.at("metrics").get<EpochMetrics>();
    meta.data = h.value("data", std::string());
    return meta;
  } catch (const Json::exception& e) {
    throw CorruptionError(path.string() + ": malformed header (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw CorruptionError(path.string() + ": invalid configuration in header (" + e.what() + ")");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// JSON conversions.

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"d_model", c.d_model},         {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
           {"context_len", c.context_len}, {"vocab_size", c.vocab_size},   {"mlp", c.mlp_enabled},
           {"d_ff", c.d_ff}};
}

void from_json(const Json& j, ModelConfig& c) {
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("context_len").get_to(c.context_len);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("mlp").get_to(c.mlp_enabled);
  j.at("d_ff").get_to(c.d_ff);
  c.validate();
}

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"epsilon", c.epsilon},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"checkpoint_every", c.checkpoint_every},
           {"loss_mask", std::string(to_string(c.loss_mask))},
           {"convergence_threshold", c.convergence_threshold},
           {"stop_on_convergence", c.stop_on_convergence}};
}

void from_json(const Json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("epsilon").get_to(c.epsilon);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("seed").get_to(c.seed);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  c.loss_mask = parse_loss_mask(j.at("loss_mask").get<std::string>());
  j.at("convergence_threshold").get_to(c.convergence_threshold);
  j.at("stop_on_convergence").get_to(c.stop_on_convergence);
}

void to_json(Json& j, const EpochMetrics& m) {
  j = Json{{"epoch", m.epoch},
           {"train_loss", m.train_loss},
           {"train_full_seq_acc", m.train_accuracy},
           {"val_full_seq_acc", m.val_accuracy},
           {"val_acc_excl_last", m.val_accuracy_excl_last},
           {"val_last_token_acc", m.val_last_token_accuracy}};
}

void from_json(const Json& j, EpochMetrics& m) {
  j.at("epoch").get_to(m.epoch);
  j.at("train_loss").get_to(m.train_loss);
  j.at("train_full_seq_acc").get_to(m.train_accuracy);
  j.at("val_full_seq_acc").get_to(m.val_accuracy);
  j.at("val_acc_excl_last").get_to(m.val_accuracy_excl_last);
  j.at("val_last_token_acc").get_to(m.val_last_token_accuracy);
}

// ---------------------------------------------------------------------------
// Checkpoints.

void save_checkpoint(const ParamsF& params, const CheckpointMeta& meta, const fs::path& path) {
  if (!(params.config == meta.model)) throw ConfigError("checkpoint metadata does not match the parameters");
  Json dir = Json::array();
  std::uint64_t offset = 0;
  params.visit([&](const std::string& name, const auto& t) {
    using Tensor = std::decay_t<decltype(t)>;
    const Json shape = Tensor::ColsAtCompileTime == 1 ? Json::array({t.rows()}) : Json::array({t.rows(), t.cols()});
    dir.push_back({{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * 4;
  });
  Json header{{"format", "TMLM"}, {"model", meta.model}, {"train", meta.train}, {"tag", meta.tag},
              {"epoch", meta.epoch}};
  header["metrics"] = meta.metrics ? Json(*meta.metrics) : Json(nullptr);
  header["data"] = meta.data;
  header["tensors"] = std::move(dir);
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  std::string bytes(kMagic, 4);
  put_u32(bytes, kCheckpointVersion);
  put_u64(bytes, text.size());
  bytes += text;
  bytes.reserve(bytes.size() + offset);
  params.visit([&](const std::string&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) put_u32(bytes, std::bit_cast<std::uint32_t>(t.data()[i]));
  });
  atomic_write(path, bytes);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_all(path);
  std::uint64_t header_len = 0;
  const Json header = parse_header(bytes, path, &header_len);
  Checkpoint ck;
  ck.meta = meta_from_header(header, path);
  ck.params = ParamsF::zeros(ck.meta.model);

  const std::size_t payload_start = kPreamble + header_len;
  const std::uint64_t payload = bytes.size() - payload_start;
  std::uint64_t expected = 0;
  ck.params.visit([&](const std::string&, const auto& t) { expected += static_cast<std::uint64_t>(t.size()) * 4; });
  if (payload != expected) {
    throw CorruptionError(path.string() + ": payload holds " + std::to_string(payload) + " bytes, expected " +
                          std::to_string(expected));
  }
  try {
    const Json& dir = header.at("tensors");
    if (!dir.is_array()) throw CorruptionError(path.string() + ": tensor directory is not a list");
    std::size_t index = 0;
    std::uint64_t offset = 0;
    ck.params.visit([&](const std::string& name, auto& t) {
      if (index >= dir.size()) throw CorruptionError(path.string() + ": tensor directory is missing " + name);
      const Json& entry = dir.at(index++);
      if (entry.at("name").get<std::string>() != name) {
        throw CorruptionError(path.string() + ": expected tensor " + name + ", found " +
                              entry.at("name").get<std::string>());
      }
      std::uint64_t count = 1;
      for (const Json& d : entry.at("shape")) count *= d.get<std::uint64_t>();
      if (count != static_cast<std::uint64_t>(t.size()) || entry.at("dtype").get<std::string>() != "f32" ||
          entry.at("offset").get<std::uint64_t>() != offset) {
        throw CorruptionError(path.string() + ": tensor " + name + " does not match the model configuration");
      }
      const char* p = bytes.data() + payload_start + offset;
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        t.data()[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + 4 * i, 4)));
      }
      offset += count * 4;
    });
    if (index != dir.size()) throw CorruptionError(path.string() + ": tensor directory has extra entries");
  } catch (const Json::exception& e) {
    throw CorruptionError(path.string() + ": malformed tensor directory (" + e.what() + ")");
  }
  return ck;
}

Json read_checkpoint_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(sys_error("cannot open", path));
  std::string pre(kPreamble, '\0');
  if (!in.read(pre.data(), static_cast<std::streamsize>(kPreamble))) {
    throw CorruptionError(path.string() + ": file too short for a checkpoint");
  }
  if (std::memcmp(pre.data(), kMagic, 4) != 0) throw CorruptionError(path.string() + ": bad magic");
  const std::uint64_t len = get_le(pre.data() + 8, 8);
  const std::uint64_t size = fs::file_size(path);
  if (len > size - kPreamble) throw CorruptionError(path.string() + ": truncated header");
  std::string bytes = pre;
  bytes.resize(kPreamble + len);
  in.read(bytes.data() + kPreamble, static_cast<std::streamsize>(len));
  std::uint64_t header_len = 0;
  return parse_header(bytes, path, &header_len);
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
  return meta_from_header(read_checkpoint_header(path), path);
}

// ---------------------------------------------------------------------------
// Datasets.

void write_text_file(const fs::path& path, const std::string& text) { atomic_write(path, text); }

std::string read_text_file(const fs::path& path) { return read_all(path); }

void write_examples(const fs::path& path, const std::vector<Example>& examples) {
  std::string text;
  for (const Example& e : examples) {
    text += e.prompt();
    text += '\t';
    text += e.target;
    text += '\n';
  }
  atomic_write(path, text);
}

std::vector<Example> read_examples(const fs::path& path, int m, Supervision supervision) {
  std::istringstream in(read_all(path));
  std::vector<Example> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string where = path.string() + ":" + std::to_string(number);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw CorruptionError(where + ": expected PROMPT<TAB>TARGET");
    Example e;
    try {
      e = parse_prompt(std::string_view(line).substr(0, tab), m);
    } catch (const InputError& err) {
      throw CorruptionError(where + ": " + err.what());
    }
    e.target = line.substr(tab + 1);
    const ChainOfThought cot = build_cot(e.rules, e.q0, e.q1, m);
    e.label = cot.label;
    const std::string expected = supervision == Supervision::kChainOfThought ? cot.text : (cot.label ? "1" : "0");
    if (e.target != expected) {
      throw CorruptionError(where + ": target '" + e.target + "' does not follow from the rules (expected '" +
                            expected + "')");
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_dataset_dir(const fs::path& dir, const Split& split, double ratio) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_examples(dir / "train.txt", split.train.examples);
  write_examples(dir / "val.txt", split.val.examples);
  const Dataset& t = split.train;
  Json side{{"seed", t.seed},
            {"n", t.n},
            {"m", t.m},
            {"supervision", std::string(to_string(t.supervision))},
            {"split_ratio", ratio},
            {"train", {{"count", split.train.examples.size()},
                       {"positive", split.train.positives()},
                       {"negative", split.train.negatives()}}},
            {"val", {{"count", split.val.examples.size()},
                     {"positive", split.val.positives()},
                     {"negative", split.val.negatives()}}}};
  atomic_write(dir / "dataset.json", side.dump(2) + "\n");
}

DatasetFiles read_dataset_dir(const fs::path& dir) {
  DatasetFiles out;
  try {
    out.sidecar = Json::parse(read_all(dir / "dataset.json"));
  } catch (const Json::exception& e) {
    throw CorruptionError((dir / "dataset.json").string() + ": " + e.what());
  }
  try {
    for (Dataset* d : {&out.split.train, &out.split.val}) {
      d->seed = out.sidecar.at("seed").get<std::uint64_t>();
      d->n = out.sidecar.at("n").get<int>();
      d->m = out.sidecar.at("m").get<int>();
      d->supervision = parse_supervision(out.sidecar.at("supervision").get<std::string>());
    }
  } catch (const Json::exception& e) {
    throw CorruptionError((dir / "dataset.json").string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError((dir / "dataset.json").string() + ": " + e.what());
  }
  out.split.train.split = "train";
  out.split.val.split = "val";
  const int m = out.split.train.m;
  const Supervision sup = out.split.train.supervision;
  out.split.train.examples = read_examples(dir / "train.txt", m, sup);
  out.split.val.examples = read_examples(dir / "val.txt", m, sup);
  return out;
}

}  // namespace deduce
