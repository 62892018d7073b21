#pragma once

#include "driftforge/gan.hpp"
#include "driftforge/harness.hpp"
#include "driftforge/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace driftforge::config {

// Minimal TOML: [section] headers, `key = value` pairs, `#` comments. Values
// are integers, floats, booleans, basic "strings" and flat arrays of those.
struct Value;
using Array = std::vector<Value>;
struct Value {
    std::variant<std::int64_t, double, bool, std::string, Array> data;
};

// "section.key" -> value; keys before any header have no section prefix.
using Document = std::map<std::string, Value>;

Document parse_toml(const std::string& text);
Document parse_toml_file(const std::filesystem::path& path);

struct RunConfig {
    harness::ExperimentConfig experiment;
    std::optional<SynthConfig> synth;            // present when a [synth] section exists
    std::optional<std::filesystem::path> data;   // top-level `data`, relative to the config file
};

// Unknown sections or keys and ill-typed values raise UsageError.
RunConfig load_config(const Document& doc, const std::filesystem::path& base_dir = {});
RunConfig load_config_file(const std::filesystem::path& path);

} // namespace driftforge::config
