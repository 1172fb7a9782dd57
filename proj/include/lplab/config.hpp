#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lplab/errors.hpp"

namespace lplab {

// Flat text config: `key = value` lines, `#` comments, `[section]` headers.
// Keys are addressed as "section.key"; keys before any header live in "".
class Config {
public:
    static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
        Config cfg;
        cfg.origin_ = origin;
        cfg.raw_text_ = text;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            if (trimmed.front() == '[') {
                if (trimmed.back() != ']' || trimmed.size() < 3) {
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": malformed section header '" + trimmed + "'");
                }
                section = trim(trimmed.substr(1, trimmed.size() - 2));
                continue;
            }
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + trimmed + "'");
            }
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            const std::string full = section.empty() ? key : section + "." + key;
            cfg.entries_[full] = Entry{value, lineno};
        }
        return cfg;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_string(ss.str(), path);
    }

    const std::string& raw_text() const { return raw_text_; }
    const std::string& origin() const { return origin_; }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    std::string get_str(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) {
            throw ConfigError(origin_ + ": missing required key '" + key + "'");
        }
        return it->second.value;
    }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? dflt : it->second.value;
    }

    long get_long(const std::string& key) const { return to_long(key, get_str(key)); }
    long get_long(const std::string& key, long dflt) const {
        return has(key) ? get_long(key) : dflt;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const {
        if (!has(key)) return dflt;
        const std::string v = get_str(key);
        try {
            std::size_t pos = 0;
            const auto out = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw bad_value(key, v, "unsigned integer");
        }
    }

    double get_double(const std::string& key) const { return to_double(key, get_str(key)); }
    double get_double(const std::string& key, double dflt) const {
        return has(key) ? get_double(key) : dflt;
    }

    bool get_bool(const std::string& key, bool dflt) const {
        if (!has(key)) return dflt;
        const std::string v = get_str(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw bad_value(key, v, "boolean");
    }

    std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        std::istringstream ss(get_str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            const std::string t = trim(item);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

    std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& s : get_list(key)) out.push_back(to_double(key, s));
        return out;
    }

    std::vector<long> get_long_list(const std::string& key) const {
        std::vector<long> out;
        for (const auto& s : get_list(key)) out.push_back(to_long(key, s));
        return out;
    }

private:
    struct Entry {
        std::string value;
        int line = 0;
    };

    std::map<std::string, Entry> entries_;
    std::string raw_text_;
    std::string origin_;

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    ConfigError bad_value(const std::string& key, const std::string& v,
                          const char* kind) const {
        std::string where = origin_;
        auto it = entries_.find(key);
        if (it != entries_.end()) where += ":" + std::to_string(it->second.line);
        return ConfigError(where + ": field '" + key + "': '" + v + "' is not a " + kind);
    }

    long to_long(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const long out = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw bad_value(key, v, "integer");
        }
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const double out = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw bad_value(key, v, "number");
        }
    }
};

} // namespace lplab
