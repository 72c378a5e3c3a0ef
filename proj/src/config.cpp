#include "flexdit/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace flexdit {

const char* to_string(ConfigSource s) {
    switch (s) {
        case ConfigSource::builtin: return "default";
        case ConfigSource::file: return "file";
        case ConfigSource::flag: return "flag";
    }
    return "?";
}

ConfigSource config_source_from_string(const std::string& s) {
    if (s == "default") return ConfigSource::builtin;
    if (s == "file") return ConfigSource::file;
    if (s == "flag") return ConfigSource::flag;
    throw ConfigError("unknown config source '" + s + "'");
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

Config::Config(std::vector<ConfigKey> schema) : schema_(std::move(schema)) {
    for (std::size_t i = 0; i < schema_.size(); ++i) {
        if (!index_.emplace(schema_[i].name, i).second) throw Error("duplicate config key " + schema_[i].name);
        values_[schema_[i].name];
    }
}

bool Config::known(const std::string& key) const { return index_.count(key) > 0; }

const ConfigKey& Config::key_info(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("unknown config key '" + key + "'");
    return schema_[it->second];
}

void Config::set(const std::string& key, const std::string& value, ConfigSource source) {
    key_info(key);
    auto& slot = values_.at(key);
    if (source == ConfigSource::flag) slot.flag = value;
    else if (source == ConfigSource::file) slot.file = value;
    else throw ConfigError("cannot override built-in default of '" + key + "'");
}

void Config::parse_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto where = origin + ":" + std::to_string(lineno);
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError(where + ": empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        const auto name = trim(line.substr(0, eq));
        if (name.empty()) throw ConfigError(where + ": missing key");
        const auto key = section.empty() ? name : section + "." + name;
        if (!known(key)) throw ConfigError(where + ": unknown key '" + key + "'");
        set(key, trim(line.substr(eq + 1)), ConfigSource::file);
    }
}

void Config::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    parse_text(ss.str(), path);
}

const std::string& Config::str(const std::string& key) const {
    const auto& info = key_info(key);
    const auto& slot = values_.at(key);
    if (slot.flag) return *slot.flag;
    if (slot.file) return *slot.file;
    return info.default_value;
}

ConfigSource Config::source(const std::string& key) const {
    key_info(key);
    const auto& slot = values_.at(key);
    if (slot.flag) return ConfigSource::flag;
    if (slot.file) return ConfigSource::file;
    return ConfigSource::builtin;
}

long long Config::integer(const std::string& key) const {
    const auto& s = str(key);
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("'" + key + "' expects an integer, got '" + s + "'");
    }
    return v;
}

std::uint64_t Config::u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("'" + key + "' expects an unsigned integer, got '" + s + "'");
    }
    return v;
}

double Config::real(const std::string& key) const {
    const auto& s = str(key);
    double v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
    }
    return v;
}

bool Config::boolean(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("'" + key + "' expects true or false, got '" + s + "'");
}

std::vector<int> Config::int_list(const std::string& key) const {
    std::vector<int> out;
    const auto& s = str(key);
    if (trim(s).empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        int v = 0;
        const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || res.ec != std::errc() || res.ptr != item.data() + item.size()) {
            throw ConfigError("'" + key + "' expects a comma-separated integer list, got '" + s + "'");
        }
        out.push_back(v);
    }
    return out;
}

std::vector<std::string> Config::keys() const {
    std::vector<std::string> out;
    for (const auto& k : schema_) out.push_back(k.name);
    return out;
}

nlohmann::json Config::to_json() const {
    auto j = nlohmann::json::object();
    for (const auto& k : schema_) j[k.name] = {{"value", str(k.name)}, {"source", to_string(source(k.name))}};
    return j;
}

void Config::load_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("recorded configuration must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known(it.key())) throw ConfigError("unknown key '" + it.key() + "' in recorded configuration");
        const auto src = config_source_from_string(it.value().at("source").get<std::string>());
        const auto value = it.value().at("value").get<std::string>();
        auto& slot = values_.at(it.key());
        slot = {};
        if (src == ConfigSource::flag) slot.flag = value;
        else if (src == ConfigSource::file) slot.file = value;
        else if (value != key_info(it.key()).default_value) slot.file = value;
    }
}

std::uint64_t Config::hash() const {
    std::uint64_t h = fnv1a(nullptr, 0);
    for (const auto& k : schema_) {
        if (!k.hashed) continue;
        const auto line = k.name + "=" + str(k.name) + "\n";
        h = fnv1a(line.data(), line.size(), h);
    }
    return h;
}

std::string Config::to_text() const {
    std::string out, section = "\x01";
    for (const auto& k : schema_) {
        const auto dot = k.name.find('.');
        const auto sec = dot == std::string::npos ? std::string() : k.name.substr(0, dot);
        const auto name = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
        if (sec != section) {
            if (!sec.empty()) out += (out.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
            section = sec;
        }
        out += name + " = " + str(k.name) + "\n";
    }
    return out;
}

}  // namespace flexdit
