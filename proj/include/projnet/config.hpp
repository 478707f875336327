#pragma once

// Flat `key = value` configuration files. '#' starts a comment; blank lines are ignored.
// Duplicate and unknown keys are errors, reported with the source line.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "projnet/error.hpp"
#include "projnet/shapes.hpp"
#include "projnet/synthdata.hpp"
#include "projnet/train.hpp"

namespace projnet {

struct ConfigEntry {
    std::string value;
    std::size_t line = 0;
};

class KeyValueFile {
public:
    KeyValueFile() = default;

    static KeyValueFile parse(std::istream& is, std::string source) {
        KeyValueFile f;
        f.source_ = std::move(source);
        std::string raw;
        std::size_t lineno = 0;
        while (std::getline(is, raw)) {
            ++lineno;
            const auto hash = raw.find('#');
            const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw f.error(lineno, "expected 'key = value'");
            const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (key.empty()) throw f.error(lineno, "empty key");
            if (value.empty()) throw f.error(lineno, "empty value for '" + key + "'");
            if (f.entries_.count(key))
                throw f.error(lineno, "duplicate key '" + key + "' (first set on line " +
                                          std::to_string(f.entries_.at(key).line) + ")");
            f.entries_[key] = {value, lineno};
        }
        return f;
    }

    static KeyValueFile parse_string(const std::string& text, std::string source = "<string>") {
        std::istringstream is(text);
        return parse(is, std::move(source));
    }

    static KeyValueFile load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file " + path.string());
        return parse(is, path.string());
    }

    const std::string& source() const { return source_; }
    bool has(const std::string& key) const { return entries_.count(key) > 0; }
    const ConfigEntry& entry(const std::string& key) const { return entries_.at(key); }

    /// Errors on the first key not in `allowed`.
    void check_keys(const std::set<std::string>& allowed) const {
        for (const auto& [k, e] : entries_)
            if (!allowed.count(k)) throw error(e.line, "unknown key '" + k + "'");
    }

    void require(const std::string& key) const {
        if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
    }

    ConfigError error(std::size_t line, const std::string& what) const {
        return ConfigError(source_ + ":" + std::to_string(line) + ": " + what);
    }

    std::uint64_t get_uint(const std::string& key) const {
        const auto& e = entries_.at(key);
        std::uint64_t v = 0;
        const auto* end = e.value.data() + e.value.size();
        const auto r = std::from_chars(e.value.data(), end, v);
        if (r.ec != std::errc{} || r.ptr != end)
            throw error(e.line, "'" + key + "' expects a non-negative integer, got '" + e.value + "'");
        return v;
    }

    double get_double(const std::string& key) const {
        const auto& e = entries_.at(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(e.value, &used);
            if (used == e.value.size() && std::isfinite(v)) return v;
        } catch (const std::logic_error&) {
        }
        throw error(e.line, "'" + key + "' expects a number, got '" + e.value + "'");
    }

    /// Integer list separated by 'x', ',' or the multiplication sign.
    std::vector<std::size_t> get_uint_list(const std::string& key) const {
        const auto& e = entries_.at(key);
        std::vector<std::size_t> out;
        for (const auto& tok : split_list(e.value)) {
            std::size_t v = 0;
            const auto* end = tok.data() + tok.size();
            const auto r = std::from_chars(tok.data(), end, v);
            if (tok.empty() || r.ec != std::errc{} || r.ptr != end)
                throw error(e.line, "'" + key + "' expects integers separated by 'x' or ',', got '" + e.value + "'");
            out.push_back(v);
        }
        return out;
    }

    std::vector<double> get_double_list(const std::string& key) const {
        const auto& e = entries_.at(key);
        std::vector<double> out;
        for (const auto& tok : split_list(e.value)) {
            try {
                std::size_t used = 0;
                const double v = std::stod(tok, &used);
                if (used == tok.size()) {
                    out.push_back(v);
                    continue;
                }
            } catch (const std::logic_error&) {
            }
            throw error(e.line, "'" + key + "' expects numbers separated by ',' or 'x', got '" + e.value + "'");
        }
        return out;
    }

    const std::string& get_string(const std::string& key) const { return entries_.at(key).value; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    static std::vector<std::string> split_list(std::string s) {
        const std::string times = "×";
        for (auto p = s.find(times); p != std::string::npos; p = s.find(times)) s.replace(p, times.size(), ",");
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == ',' || c == 'x' || c == 'X') {
                out.push_back(trim(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        out.push_back(trim(cur));
        return out;
    }

    std::string source_;
    std::map<std::string, ConfigEntry> entries_;
};

/// Parses "64x128x256", "64,128,256" or "64×128×256".
inline Extent parse_extent(const std::string& text) {
    return KeyValueFile::parse_string("extent = " + text, "extent").get_uint_list("extent");
}

inline ArchConfig arch_from_config(const KeyValueFile& f) {
    f.check_keys({"n_dims", "target_dims", "depth", "base_channels", "blocks", "variant"});
    for (const char* k : {"n_dims", "target_dims", "depth", "base_channels"}) f.require(k);
    const auto depth = static_cast<std::size_t>(f.get_uint("depth"));
    std::vector<std::size_t> blocks;
    if (f.has("blocks")) {
        blocks = f.get_uint_list("blocks");
        if (blocks.size() != depth)
            throw f.error(f.entry("blocks").line, "'blocks' needs one entry per level (" + std::to_string(depth) + ")");
    }
    Variant variant = Variant::proposed;
    if (f.has("variant")) {
        try {
            variant = parse_variant(f.get_string("variant"));
        } catch (const ConfigError& e) {
            throw f.error(f.entry("variant").line, e.what());
        }
    }
    return ArchConfig::make(f.get_uint("n_dims"), f.get_uint("target_dims"), depth, f.get_uint("base_channels"),
                            std::move(blocks), variant);
}

inline GenSpec gen_spec_from_config(const KeyValueFile& f) {
    f.check_keys({"extent", "kind", "count_min", "count_max", "contrast", "noise", "seed", "spacing"});
    GenSpec s;
    if (f.has("extent")) s.extent = f.get_uint_list("extent");
    if (f.has("kind")) {
        try {
            s.kind = parse_lesion_kind(f.get_string("kind"));
        } catch (const ConfigError& e) {
            throw f.error(f.entry("kind").line, e.what());
        }
    }
    if (f.has("count_min")) s.count_min = f.get_uint("count_min");
    if (f.has("count_max")) s.count_max = f.get_uint("count_max");
    if (f.has("contrast")) s.contrast = f.get_double("contrast");
    if (f.has("noise")) s.noise = f.get_double("noise");
    if (f.has("seed")) s.seed = f.get_uint("seed");
    if (f.has("spacing")) s.spacing = f.get_double_list("spacing");
    s.validate();
    return s;
}

inline TrainConfig train_config_from_config(const KeyValueFile& f) {
    f.check_keys({"iterations", "batch_size", "patch", "lr", "weight_decay", "decay_iteration", "decay_factor", "seed",
                  "checkpoint_every"});
    TrainConfig c;
    if (f.has("iterations")) c.iterations = f.get_uint("iterations");
    if (f.has("batch_size")) c.batch_size = f.get_uint("batch_size");
    if (f.has("patch")) c.patch = f.get_uint_list("patch");
    if (f.has("lr")) c.lr = f.get_double("lr");
    if (f.has("weight_decay")) c.weight_decay = f.get_double("weight_decay");
    if (f.has("decay_iteration")) c.decay_iteration = f.get_uint("decay_iteration");
    if (f.has("decay_factor")) c.decay_factor = f.get_double("decay_factor");
    if (f.has("seed")) c.seed = f.get_uint("seed");
    if (f.has("checkpoint_every")) c.checkpoint_every = f.get_uint("checkpoint_every");
    c.validate();
    return c;
}

struct EvalConfig {
    std::string checkpoint;
    std::string data;
    std::vector<double> spacing; // empty: take from the dataset manifest
    Extent tile;                 // empty: the whole target extent
};

inline EvalConfig eval_config_from_config(const KeyValueFile& f) {
    f.check_keys({"checkpoint", "data", "spacing", "tile"});
    EvalConfig c;
    if (f.has("checkpoint")) c.checkpoint = f.get_string("checkpoint");
    if (f.has("data")) c.data = f.get_string("data");
    if (f.has("spacing")) c.spacing = f.get_double_list("spacing");
    if (f.has("tile")) c.tile = f.get_uint_list("tile");
    return c;
}

} // namespace projnet
