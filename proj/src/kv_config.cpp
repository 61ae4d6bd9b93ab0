#include "retovla/kv_config.hpp"

#include <charconv>
#include <cstdint>
#include <set>

namespace retovla {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const ConfigEntry& e, const char* what) {
  throw ConfigError("line " + std::to_string(e.line) + ": key '" + e.key + "' expects " + what + ", got '" + e.value +
                    "'");
}

}  // namespace

std::vector<ConfigEntry> parse_kv_config(std::string_view text) {
  std::vector<ConfigEntry> out;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    ConfigEntry e{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), line_no};
    if (e.key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(e.key).second) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + e.key + "'");
    out.push_back(std::move(e));
  }
  return out;
}

std::size_t parse_count(const ConfigEntry& e) {
  std::size_t v = 0;
  const auto* end = e.value.data() + e.value.size();
  auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc{} || ptr != end || e.value.empty()) bad_value(e, "a non-negative integer");
  return v;
}

std::uint64_t parse_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  const auto* end = e.value.data() + e.value.size();
  auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc{} || ptr != end || e.value.empty()) bad_value(e, "an unsigned integer");
  return v;
}

double parse_real(const ConfigEntry& e) {
  try {
    std::size_t used = 0;
    const double v = std::stod(e.value, &used);
    if (used != e.value.size()) bad_value(e, "a real number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(e, "a real number");
  }
}

}  // namespace retovla
