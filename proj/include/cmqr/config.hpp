#pragma once

// key=value configuration text. Blank lines and lines starting with '#' are
// ignored. Readers pull typed values out by key; any key left unread is an
// error, so typos fail loudly.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmqr {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class KeyValues {
public:
    static KeyValues parse(const std::string& text);
    static KeyValues load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback);
    std::int64_t get_int(const std::string& key, std::int64_t fallback);
    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback);
    double get_double(const std::string& key, double fallback);
    bool get_bool(const std::string& key, bool fallback);

    /// Throws ConfigError listing every key never read.
    void reject_unknown() const;

private:
    const std::string* find(const std::string& key);

    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

/// Writes `key=value` lines in the given order.
std::string to_key_value_text(const std::vector<std::pair<std::string, std::string>>& pairs);

}  // namespace cmqr
