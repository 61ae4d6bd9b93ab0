#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace retovla {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped;
/// duplicate keys and lines without '=' are errors.
std::vector<ConfigEntry> parse_kv_config(std::string_view text);

std::size_t parse_count(const ConfigEntry& e);
double parse_real(const ConfigEntry& e);
std::uint64_t parse_u64(const ConfigEntry& e);

}  // namespace retovla
