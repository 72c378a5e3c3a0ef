#pragma once

// Layered run configuration. Keys are "section.key"; every key must be
// declared in the schema, so a misspelled key is an error rather than a
// silently ignored line. A value comes from the first layer that sets it:
// command-line flag, then config file, then the built-in default.

#include "flexdit/common.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flexdit {

enum class ConfigSource { builtin, file, flag };
const char* to_string(ConfigSource s);
ConfigSource config_source_from_string(const std::string& s);

struct ConfigKey {
    std::string name;
    std::string default_value;
    std::string help;
    bool hashed = true;  // part of the config hash (output locations are not)
};

class Config {
  public:
    explicit Config(std::vector<ConfigKey> schema);

    // Format: "key = value" lines, "[section]" headers, '#' comments.
    // Keys before any header live in the top-level namespace.
    void parse_text(const std::string& text, const std::string& origin = "<text>");
    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value, ConfigSource source = ConfigSource::flag);

    bool known(const std::string& key) const;
    const std::string& str(const std::string& key) const;
    long long integer(const std::string& key) const;
    std::uint64_t u64(const std::string& key) const;
    double real(const std::string& key) const;
    bool boolean(const std::string& key) const;
    // Comma-separated integers; empty string gives an empty list.
    std::vector<int> int_list(const std::string& key) const;
    ConfigSource source(const std::string& key) const;
    bool is_set(const std::string& key) const { return source(key) != ConfigSource::builtin; }

    const std::vector<ConfigKey>& schema() const { return schema_; }
    std::vector<std::string> keys() const;

    // {"key": {"value": ..., "source": ...}} in schema order.
    nlohmann::json to_json() const;
    // Restores values and sources recorded by to_json.
    void load_json(const nlohmann::json& j);
    // FNV-1a over "key=value\n" of every hashed key, in schema order.
    std::uint64_t hash() const;
    // The resolved configuration as a config file.
    std::string to_text() const;

  private:
    struct Slot {
        std::optional<std::string> file, flag;
    };
    const ConfigKey& key_info(const std::string& key) const;
    std::vector<ConfigKey> schema_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, Slot> values_;
};

std::string hex64(std::uint64_t v);

}  // namespace flexdit
