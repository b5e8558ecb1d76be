#pragma once

#include <map>
#include <string>

#include "macb/dataset.hpp"
#include "macb/trainer.hpp"

// Flat `key = value` configuration files with `#` comments.
namespace macb::config {

using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::string& path);

/// Everything a config file can set: generator and training keys share one namespace.
struct RunConfig {
  data::GenConfig gen;
  train::TrainConfig train;
};

// Unknown keys and malformed values raise ConfigError naming the key.
void apply(const KeyValues& kv, RunConfig& cfg);
RunConfig load(const std::string& path);

// Canonical text with every key, parseable by parse_key_values.
std::string to_text(const RunConfig& cfg);

// Every recognized key.
std::vector<std::string> known_keys();

}  // namespace macb::config
