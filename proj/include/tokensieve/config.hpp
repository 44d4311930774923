// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

// JSON experiment configs. Every key is optional except "seed"; unknown keys
// are rejected with their full dotted path.

#pragma once

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "tokensieve/harness.hpp"

namespace tokensieve {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Parses and validates; data.image_size, data.patch, data.classes and
// data.seed default to model.image_size, model.patch, model.classes and seed.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Fully resolved config; parse_config(config_to_json(c)) == c.
nlohmann::ordered_json config_to_json(const ExperimentConfig& c);

}  // namespace tokensieve
