#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace medvit {

using KeyValues = std::map<std::string, std::string>;

/// key = value lines; '#' starts a comment; "[section]" prefixes following
/// keys with "section."; values may be double-quoted. Throws ConfigError
/// naming `source` and the line on malformed input.
KeyValues parse_key_values(std::istream& in, const std::string& source = "<config>");
KeyValues load_key_values(const std::filesystem::path& path);

/// Resolved run configuration with typed accessors. Later merges win.
class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(KeyValues defaults) : values_(std::move(defaults)) {}

  void merge(const KeyValues& overrides);
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& str(const std::string& key) const;
  std::size_t size(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  /// Comma-separated reals, e.g. "0.5,0.5,0.5".
  std::vector<double> reals(const std::string& key) const;
  std::vector<std::size_t> sizes(const std::string& key) const;

  const KeyValues& values() const { return values_; }
  /// Sorted "key = value" lines, re-readable by parse_key_values.
  std::string echo() const;

 private:
  KeyValues values_;
};

}  // namespace medvit
