#pragma once

// Flat `key = value` run configuration shared by every subcommand.
//
//   # comment
//   epochs = 30
//   lambda4 = 0        # trailing comments are allowed too
//
// Keys map one-to-one onto TrainConfig, DistillWeights, the loss-enable flags
// and data paths. Unknown keys are rejected.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kdlt/harness.hpp"

namespace kdlt::cli {

struct RunConfig {
    harness::TrainConfig train;
    std::string train_data;  // dataset directory holding manifest.tsv
    std::string test_data;
    std::string teacher;     // teacher checkpoint path

    bool operator==(const RunConfig&) const = default;
};

std::vector<std::string> config_keys();

// Throws ConfigError naming the key when it is unknown or its value malformed.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

// `origin` prefixes error messages ("file.cfg:3: ...").
RunConfig parse_config_text(std::string_view text, const std::string& origin, RunConfig base = {});
RunConfig parse_config_file(const std::filesystem::path& path, RunConfig base = {});

// Applies "key=value" overrides in order.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

// Every key with its effective value, one `key = value` line each, in config_keys() order.
std::string format_config(const RunConfig& config);

}  // namespace kdlt::cli
