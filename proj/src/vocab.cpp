#include "deduce/vocab.hpp"

#include <string>

#include "deduce/errors.hpp"

namespace deduce {

char Vocab::symbol(int id) {
  if (id < 0 || id >= kSize) throw InputError("token id out of range: " + std::to_string(id));
  return kSymbols[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int token = id(text[i]);
    if (token < 0) {
      throw InputError("character '" + std::string(1, text[i]) + "' at position " + std::to_string(i) +
                           " is not in the vocabulary",
                       i);
    }
    ids.push_back(token);
  }
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) {
  std::string text;
  text.reserve(ids.size());
  for (const int id : ids) text.push_back(symbol(id));
  return text;
}

}  // namespace deduce
