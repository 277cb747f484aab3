#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>

#include "json.hpp"
#include "panformer/error.hpp"

namespace panformer::detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// Reads j[key] into out when present; wrong types become ConfigError naming the field.
template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + it->dump() + ")");
  }
}

}  // namespace panformer::detail
