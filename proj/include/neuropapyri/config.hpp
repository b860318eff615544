#pragma once

// Flat key=value run configuration: file values, then the NEUROPAPYRI_SEED
// environment override, then explicit key=value overrides (highest
// precedence). Unknown keys abort. Every run writes the resolved snapshot,
// which replayed byte-identically reproduces the run.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "neuropapyri/common.hpp"
#include "neuropapyri/greek.hpp"

namespace npap {

class FlatConfig {
public:
    FlatConfig() = default;

    static FlatConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file: " + path);
        FlatConfig cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(strf("%s:%d: expected key = value", path.c_str(), lineno));
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw ConfigError("config: empty key");
        kv_[key] = value;
    }

    // "key=value" as passed on the command line.
    void apply_override(const std::string& spec) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key=value: " + spec);
        set(trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
    }

    void apply_env_seed() {
        if (const char* env = std::getenv("NEUROPAPYRI_SEED")) set("seed", env);
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& dflt) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? dflt : it->second;
    }

    std::string require_string(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end() || it->second.empty())
            throw ConfigError("config: missing required key '" + key + "'");
        return it->second;
    }

    int64_t get_int(const std::string& key, int64_t dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try {
            size_t pos = 0;
            const int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument(key);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not an integer: " + it->second);
        }
    }

    uint64_t get_u64(const std::string& key, uint64_t dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try {
            size_t pos = 0;
            const uint64_t v = std::stoull(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument(key);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not an unsigned integer: " + it->second);
        }
    }

    double get_double(const std::string& key, double dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument(key);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not a number: " + it->second);
        }
    }

    // Comma-separated canonical letters -> indices.
    std::vector<int> get_letters(const std::string& key) const {
        std::vector<int> out;
        auto it = kv_.find(key);
        if (it == kv_.end() || it->second.empty()) return out;
        std::string cur;
        auto flush = [&]() {
            cur = trim(cur);
            if (cur.empty()) return;
            const int k = greek::letter_index(cur);
            if (k < 0) throw ConfigError("config: '" + key + "' has unknown letter '" + cur + "'");
            out.push_back(k);
            cur.clear();
        };
        for (char c : it->second) {
            if (c == ',')
                flush();
            else
                cur += c;
        }
        flush();
        return out;
    }

    void ensure_known(const std::set<std::string>& allowed) const {
        for (const auto& [key, value] : kv_)
            if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }

    // Deterministic resolved snapshot (keys sorted; std::map already is).
    void write_snapshot(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write config snapshot: " + path);
        for (const auto& [key, value] : kv_) out << key << " = " << value << "\n";
    }

    const std::map<std::string, std::string>& items() const { return kv_; }

private:
    static std::string trim(std::string s) {
        const auto notspace = [](unsigned char c) { return !std::isspace(c); };
        s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
        s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
        return s;
    }

    std::map<std::string, std::string> kv_;
};

// Resolution order: config file < NEUROPAPYRI_SEED < --set overrides.
inline FlatConfig resolve_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides) {
    FlatConfig cfg = config_path.empty() ? FlatConfig() : FlatConfig::from_file(config_path);
    cfg.apply_env_seed();
    for (const auto& o : overrides) cfg.apply_override(o);
    return cfg;
}

}  // namespace npap
