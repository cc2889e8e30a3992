#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "wav2sleep/types.hpp"

namespace wav2sleep::detail {

// Rejects keys of `j` outside `allowed`, naming the section.
inline void reject_unknown_keys(const nlohmann::json& j, std::string_view section,
                                std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) {
    throw ConfigError("config section '" + std::string(section) + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in config section '" + std::string(section) + "'");
    }
  }
}

template <typename V>
void read_if_present(const nlohmann::json& j, const char* key, V& out, std::string_view section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + std::string(section) + "." + key + "': " + e.what());
  }
}

}  // namespace wav2sleep::detail
