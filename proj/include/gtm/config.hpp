#pragma once

#include "gtm/optim.hpp"

#include <filesystem>
#include <string>

namespace gtm {

/// Applies `key = value` lines to `config`. Blank lines and `#` comments are
/// skipped; strings may be quoted. Unknown keys and malformed values throw
/// ConfigError naming the line.
void apply_config_text(TrainConfig& config, const std::string& text, const std::string& origin = "config");
void apply_config_file(TrainConfig& config, const std::filesystem::path& path);

/// Sets one key from its textual value.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);

/// The resolved configuration in the same `key = value` syntax, one per line.
std::string format_config(const TrainConfig& config);

}  // namespace gtm
