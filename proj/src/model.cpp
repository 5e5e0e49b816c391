#include "deduce/model.hpp"

#include <numeric>

namespace deduce {

std::vector<ParamGroup> param_breakdown(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  std::vector<ParamGroup> groups;
  groups.push_back({"token_embedding (tied with unembedding)", static_cast<std::size_t>(config.vocab_size) * d});
  groups.push_back({"position_embedding", static_cast<std::size_t>(config.context_len) * d});
  const auto layers = static_cast<std::size_t>(config.n_layers);
  groups.push_back({"attention norms (scale + shift)", layers * 2 * d});
  groups.push_back({"attention projections Q/K/V/O", layers * 4 * d * d});
  groups.push_back({"attention biases", layers * 4 * d});
  if (config.mlp_enabled) {
    groups.push_back({"mlp norms (scale + shift)", layers * 2 * d});
    groups.push_back({"mlp weights", layers * 2 * d * ff});
    groups.push_back({"mlp biases", layers * (ff + d)});
  }
  groups.push_back({"final norm (scale + shift)", 2 * d});
  return groups;
}

std::size_t param_count(const ModelConfig& config) {
  const auto groups = param_breakdown(config);
  return std::accumulate(groups.begin(), groups.end(), std::size_t{0},
                         [](std::size_t acc, const ParamGroup& g) { return acc + g.count; });
}

}  // namespace deduce
