#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flowage/container.hpp"
#include "flowage/error.hpp"
#include "flowage/flow.hpp"
#include "flowage/training.hpp"

namespace flowage {

/// Flat `key = value` configuration. '#' starts a comment; blank lines are ignored.
class KeyValueConfig {
public:
    struct Entry {
        std::string value;
        std::size_t line = 0;
    };

    static KeyValueConfig parse(const std::string& text, const std::string& source)
    {
        KeyValueConfig cfg;
        cfg.source_ = source;
        std::size_t line_no = 0;
        for (auto line : split(text, '\n')) {
            ++line_no;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ValidationError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ValidationError(source + ":" + std::to_string(line_no) + ": empty key");
            if (cfg.entries_.count(key)) {
                throw ValidationError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
            }
            cfg.entries_[key] = {value, line_no};
            cfg.order_.push_back(key);
        }
        return cfg;
    }

    static KeyValueConfig load(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    /// Rejects keys outside `allowed`, naming the first offender's line.
    void check_keys(const std::set<std::string>& allowed) const
    {
        for (const auto& key : order_) {
            if (!allowed.count(key)) {
                std::string list;
                for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
                throw ValidationError(where(key) + ": unknown key '" + key + "' (expected one of: " + list + ")");
            }
        }
    }

    std::optional<std::string> string(const std::string& key) const
    {
        auto it = entries_.find(key);
        if (it == entries_.end()) return std::nullopt;
        return it->second.value;
    }

    std::optional<double> number(const std::string& key) const
    {
        auto s = string(key);
        if (!s) return std::nullopt;
        auto v = parse_double(*s);
        if (!v || !std::isfinite(*v)) throw ValidationError(where(key) + ": '" + key + "' expects a number, got '" + *s + "'");
        return v;
    }

    std::optional<std::uint64_t> integer(const std::string& key) const
    {
        auto s = string(key);
        if (!s) return std::nullopt;
        auto v = parse_uint(*s);
        if (!v) throw ValidationError(where(key) + ": '" + key + "' expects a non-negative integer, got '" + *s + "'");
        return v;
    }

    std::optional<bool> boolean(const std::string& key) const
    {
        auto s = string(key);
        if (!s) return std::nullopt;
        if (*s == "true" || *s == "1" || *s == "yes") return true;
        if (*s == "false" || *s == "0" || *s == "no") return false;
        throw ValidationError(where(key) + ": '" + key + "' expects true/false, got '" + *s + "'");
    }

    std::optional<std::vector<double>> numbers(const std::string& key) const
    {
        auto s = string(key);
        if (!s) return std::nullopt;
        std::vector<double> out;
        for (const auto& part : split(*s, ',')) {
            auto v = parse_double(part);
            if (!v) throw ValidationError(where(key) + ": '" + key + "' expects comma-separated numbers, got '" + *s + "'");
            out.push_back(*v);
        }
        return out;
    }

    std::string where(const std::string& key) const
    {
        auto it = entries_.find(key);
        return source_ + ":" + (it == entries_.end() ? std::string("?") : std::to_string(it->second.line));
    }

    const std::string& source() const noexcept { return source_; }

private:
    static std::string trim(const std::string& s)
    {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::string source_;
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
};

/// Flow architecture plus optimizer settings, as read by `flowage train`.
struct TrainingSetup {
    FlowConfig flow;
    TrainConfig train;
    std::uint64_t flow_seed = 0;
};

inline const std::set<std::string>& training_config_keys()
{
    static const std::set<std::string> keys{
        "sigma", "epochs", "learning_rate", "weight_decay", "batch", "seed", "grad_check", "record_every",
        "age_units", "beta1", "beta2", "epsilon", "n_lay", "n_hid", "hidden", "scale_clamp", "mixing", "flow_seed"};
    return keys;
}

inline TrainingSetup training_setup_from(const KeyValueConfig& kv)
{
    kv.check_keys(training_config_keys());
    TrainingSetup s;
    auto& t = s.train;
    if (auto v = kv.number("sigma")) t.sigma = *v;
    if (auto v = kv.integer("epochs")) t.epochs = *v;
    if (auto v = kv.number("learning_rate")) t.learning_rate = *v;
    if (auto v = kv.number("weight_decay")) t.weight_decay = *v;
    if (auto v = kv.string("batch")) {
        if (*v == "full") {
            t.batch = 0;
        } else if (auto n = parse_uint(*v); n && *n > 0) {
            t.batch = *n;
        } else {
            throw ValidationError(kv.where("batch") + ": 'batch' expects 'full' or a positive integer, got '" + *v + "'");
        }
    }
    if (auto v = kv.integer("seed")) t.seed = *v;
    if (auto v = kv.boolean("grad_check")) t.grad_check = *v;
    if (auto v = kv.integer("record_every")) t.record_every = *v;
    if (auto v = kv.string("age_units")) {
        try {
            t.age_units = age_units_from_string(*v);
        } catch (const ValidationError& e) {
            throw ValidationError(kv.where("age_units") + ": " + e.what());
        }
    }
    if (auto v = kv.number("beta1")) t.beta1 = *v;
    if (auto v = kv.number("beta2")) t.beta2 = *v;
    if (auto v = kv.number("epsilon")) t.epsilon = *v;

    auto& f = s.flow;
    if (auto v = kv.integer("n_lay")) f.n_lay = *v;
    if (auto v = kv.integer("n_hid")) f.n_hid = *v;
    if (auto v = kv.integer("hidden")) f.hidden = *v;
    if (auto v = kv.number("scale_clamp")) f.scale_clamp = *v;
    if (auto v = kv.string("mixing")) {
        try {
            f.mixing = mixing_schedule_from_string(*v);
        } catch (const ValidationError& e) {
            throw ValidationError(kv.where("mixing") + ": " + e.what());
        }
    }
    if (auto v = kv.integer("flow_seed")) s.flow_seed = *v;
    try {
        t.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(kv.source() + ": " + e.what());
    }
    return s;
}

} // namespace flowage
