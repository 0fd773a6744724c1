#include "cmqr/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace cmqr {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T out{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
    }
    return out;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
        }
        const auto key = trim(t.substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(number) + ": empty key");
        if (kv.values_.count(key) != 0) throw ConfigError("config key '" + key + "' repeated");
        kv.values_[key] = trim(t.substr(eq + 1));
    }
    return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

const std::string* KeyValues::find(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) {
    const auto* v = find(key);
    return v != nullptr ? *v : fallback;
}

std::int64_t KeyValues::get_int(const std::string& key, std::int64_t fallback) {
    const auto* v = find(key);
    return v != nullptr ? parse_number<std::int64_t>(key, *v) : fallback;
}

std::uint64_t KeyValues::get_uint(const std::string& key, std::uint64_t fallback) {
    const auto* v = find(key);
    return v != nullptr ? parse_number<std::uint64_t>(key, *v) : fallback;
}

double KeyValues::get_double(const std::string& key, double fallback) {
    const auto* v = find(key);
    return v != nullptr ? parse_number<double>(key, *v) : fallback;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) {
    const auto* v = find(key);
    if (v == nullptr) return fallback;
    if (*v == "true" || *v == "1" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + *v + "'");
}

void KeyValues::reject_unknown() const {
    std::string unknown;
    for (const auto& [k, _] : values_) {
        if (used_.count(k) == 0) unknown += (unknown.empty() ? "" : ", ") + k;
    }
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::string to_key_value_text(const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::string out;
    for (const auto& [k, v] : pairs) out += k + "=" + v + "\n";
    return out;
}

}  // namespace cmqr
