#pragma once

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "safe/fed_runtime.hpp"

namespace safe {

/// Invalid or unknown configuration; `key` names the offending entry.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& k, const std::string& msg)
      : std::runtime_error(k + ": " + msg), key(k) {}
  std::string key;
};

nlohmann::json config_to_json(const RunConfig& cfg);
/// Strict parse: unknown keys raise ConfigError naming them; missing keys
/// keep their defaults.
RunConfig config_from_json(const nlohmann::json& doc);

/// Applies a `--set key=value` override (dotted path, e.g. toggles.cro) onto
/// a JSON config document. The value is parsed as JSON when possible.
void apply_override(nlohmann::json& doc, const std::string& assignment);

nlohmann::json report_to_json(const RunReport& rep);

/// One header row plus one row per RoundRecord (RFC-4180).
std::string rounds_csv(const RunReport& rep);

}  // namespace safe
