#pragma once

// Run configuration: every tunable default under one flat, dotted key set.
// Sources, later ones winning: built-in defaults, a JSON file (flat dotted
// keys or nested objects), USTS_<KEY> environment variables, --set key=value.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "usts/trainer.hpp"

namespace usts {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    data::MaskOptions mask;  // shared by training, validation and imputation evaluation
    std::size_t eval_batch = 16;
    std::uint64_t eval_seed = 0;
    std::uint64_t init_seed = 0;  // parameter initialization
    std::size_t grid_width = 100;
    std::int64_t grid_origin = 1;
    std::size_t clusters = 200;
    std::uint64_t cluster_seed = 0;
    std::vector<std::size_t> prepare_channels = {0, 1, 2, 3, 4};
    bool zs_recompute_adjacency = true;
    bool zs_reuse_source_medians = false;

    TrainConfig train_config() const {
        auto t = train;
        t.mask = mask;
        t.eval_batch = eval_batch;
        return t;
    }
    EvalOptions eval_options() const {
        EvalOptions e;
        e.batch = eval_batch;
        e.stride = train.stride;
        e.seed = eval_seed;
        e.mask = mask;
        return e;
    }
    ZeroShotOptions zero_shot_options() const {
        ZeroShotOptions z;
        z.recompute_adjacency = zs_recompute_adjacency;
        z.reuse_source_medians = zs_reuse_source_medians;
        z.eval = eval_options();
        return z;
    }
    data::PrepareOptions prepare_options() const {
        data::PrepareOptions p;
        p.grid.width = grid_width;
        p.grid.origin = grid_origin;
        p.clusters = clusters;
        p.seed = cluster_seed;
        p.channels = prepare_channels;
        return p;
    }

    void validate() const {
        model.validate();
        train_config().validate();
        if (eval_batch == 0) throw ConfigError("eval.batch must be positive");
        if (grid_width == 0) throw ConfigError("prepare.grid_width must be positive");
        if (clusters == 0) throw ConfigError("prepare.clusters must be positive");
        if (prepare_channels.empty()) throw ConfigError("prepare.channels must list at least one channel");
        for (auto c : prepare_channels)
            if (c >= data::kChannelCount) throw ConfigError("prepare.channels: index " + std::to_string(c) + " out of range");
    }
};

namespace config {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed keys share the unsigned slot type");

using Slot = std::variant<std::size_t*, double*, bool*, std::int64_t*, std::vector<std::size_t>*>;

inline std::vector<std::pair<std::string, Slot>> bindings(RunConfig& c) {
    auto& m = c.model;
    auto& t = c.train;
    return {
        {"model.nodes", &m.nodes},
        {"model.channels", &m.channels},
        {"model.history", &m.history},
        {"model.horizon", &m.horizon},
        {"model.conditioning", &m.conditioning},
        {"model.cond_hidden", &m.cond_hidden},
        {"model.cond_center", &m.cond_center},
        {"model.cond_radius", &m.cond_radius},
        {"model.temporal_embedding", &m.temporal_embedding},
        {"model.steps_per_interval", &m.steps_per_interval},
        {"model.intervals_per_day", &m.intervals_per_day},
        {"model.days_per_week", &m.days_per_week},
        {"model.groups", &m.groups},
        {"model.group_kernel", &m.group_kernel},
        {"model.perception_hidden", &m.perception_hidden},
        {"model.guidance", &m.guidance},
        {"model.guide_hidden", &m.guide_hidden},
        {"model.bias_injection", &m.bias_injection},
        {"model.graph", &m.graph},
        {"model.gate_hidden", &m.gate_hidden},
        {"model.gate_kernel", &m.gate_kernel},
        {"model.bias_intensity", &m.bias_intensity},
        {"model.layers", &m.layers},
        {"model.d_model", &m.d_model},
        {"model.heads", &m.heads},
        {"model.frozen_layers", &m.frozen_layers},
        {"model.adapted_layers", &m.adapted_layers},
        {"model.lora_rank", &m.lora_rank},
        {"model.lora_scale", &m.lora_scale},
        {"model.lora_value", &m.lora_value},
        {"model.lora_output", &m.lora_output},
        {"model.positional", &m.positional},
        {"model.causal_predict", &m.causal_predict},
        {"model.causal_impute", &m.causal_impute},
        {"model.head_kernel", &m.head_kernel},
        {"model.fusion_gate", &m.fusion_gate},
        {"model.init_seed", &c.init_seed},
        {"train.alpha", &t.alpha},
        {"train.lr", &t.lr},
        {"train.warmup_steps", &t.warmup_steps},
        {"train.total_steps", &t.total_steps},
        {"train.weight_decay", &t.weight_decay},
        {"train.beta1", &t.beta1},
        {"train.beta2", &t.beta2},
        {"train.adam_eps", &t.adam_eps},
        {"train.patience", &t.patience},
        {"train.batch_size", &t.batch_size},
        {"train.max_epochs", &t.max_epochs},
        {"train.stride", &t.stride},
        {"train.seed", &t.seed},
        {"mask.r_min", &c.mask.r_min},
        {"mask.r_max", &c.mask.r_max},
        {"mask.block", &c.mask.block},
        {"mask.mean_block_len", &c.mask.mean_block_len},
        {"eval.batch", &c.eval_batch},
        {"eval.seed", &c.eval_seed},
        {"prepare.grid_width", &c.grid_width},
        {"prepare.grid_origin", &c.grid_origin},
        {"prepare.clusters", &c.clusters},
        {"prepare.seed", &c.cluster_seed},
        {"prepare.channels", &c.prepare_channels},
        {"zeroshot.recompute_adjacency", &c.zs_recompute_adjacency},
        {"zeroshot.reuse_source_medians", &c.zs_reuse_source_medians},
    };
}

inline std::vector<std::string> keys() {
    RunConfig c;
    std::vector<std::string> out;
    for (const auto& [k, s] : bindings(c)) out.push_back(k);
    return out;
}

inline Slot find_slot(RunConfig& c, const std::string& key) {
    for (auto& [k, s] : bindings(c))
        if (k == key) return s;
    throw ConfigError("unknown config key '" + key + "'");
}

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::size_t parse_unsigned(const std::string& key, const std::string& v) {
    const auto t = trim(v);
    if (t.empty() || t[0] == '-') throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    std::size_t pos = 0;
    try {
        auto x = std::stoull(t, &pos);
        if (pos == t.size()) return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
}

}  // namespace detail

/// Assigns one key from its text form.
inline void set(RunConfig& c, const std::string& key, const std::string& value) {
    auto slot = find_slot(c, key);
    const auto v = detail::trim(value);
    std::visit(
        [&](auto* p) {
            using P = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<P, bool>) {
                if (v == "true" || v == "1") *p = true;
                else if (v == "false" || v == "0") *p = false;
                else throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
            } else if constexpr (std::is_same_v<P, double>) {
                std::size_t pos = 0;
                double x = 0;
                try {
                    x = std::stod(v, &pos);
                } catch (const std::exception&) {
                    pos = 0;
                }
                if (v.empty() || pos != v.size()) throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
                *p = x;
            } else if constexpr (std::is_same_v<P, std::int64_t>) {
                std::size_t pos = 0;
                long long x = 0;
                try {
                    x = std::stoll(v, &pos);
                } catch (const std::exception&) {
                    pos = 0;
                }
                if (v.empty() || pos != v.size()) throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
                *p = x;
            } else if constexpr (std::is_same_v<P, std::size_t>) {
                *p = detail::parse_unsigned(key, v);
            } else {
                P list;
                std::stringstream ss(v);
                std::string item;
                while (std::getline(ss, item, ',')) list.push_back(detail::parse_unsigned(key, item));
                *p = list;
            }
        },
        slot);
}

inline void set_json(RunConfig& c, const std::string& key, const nlohmann::json& j) {
    auto slot = find_slot(c, key);
    auto bad = [&](const char* want) {
        return ConfigError("config key '" + key + "': expected " + want + ", got " + j.dump());
    };
    std::visit(
        [&](auto* p) {
            using P = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<P, bool>) {
                if (!j.is_boolean()) throw bad("a boolean");
                *p = j.get<bool>();
            } else if constexpr (std::is_same_v<P, double>) {
                if (!j.is_number()) throw bad("a number");
                *p = j.get<double>();
            } else if constexpr (std::is_same_v<P, std::int64_t>) {
                if (!j.is_number_integer()) throw bad("an integer");
                *p = j.get<std::int64_t>();
            } else if constexpr (std::is_same_v<P, std::size_t>) {
                if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
                    throw bad("a non-negative integer");
                *p = j.get<std::size_t>();
            } else {
                if (!j.is_array()) throw bad("an array of indices");
                P list;
                for (const auto& e : j) {
                    if (!e.is_number_unsigned()) throw bad("an array of indices");
                    list.push_back(e.get<std::size_t>());
                }
                *p = list;
            }
        },
        slot);
}

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object()) flatten(*it, key, out);
        else out[key] = *it;
    }
}

inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    std::map<std::string, nlohmann::json> flat;
    flatten(j, "", flat);
    for (const auto& [k, v] : flat) set_json(c, k, v);
}

inline void apply_file(RunConfig& c, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path + "': " + e.what());
    }
    apply_json(c, j);
}

/// USTS_MODEL_D_MODEL=32 sets model.d_model, and so on for every key.
inline std::string env_name(const std::string& key) {
    std::string e = "USTS_";
    for (char ch : key) e += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return e;
}

inline void apply_env(RunConfig& c) {
    for (const auto& k : keys())
        if (const char* v = std::getenv(env_name(k).c_str())) set(c, k, v);
}

/// "key=value" as given to --set.
inline void apply_assignment(RunConfig& c, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("expected key=value, got '" + kv + "'");
    set(c, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
}

inline nlohmann::json to_json(RunConfig c) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, s] : bindings(c)) std::visit([&, key = k](auto* p) { j[key] = *p; }, s);
    return j;
}

/// Canonical text: sorted keys, one per line.
inline std::string dump(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash(const RunConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

inline RunConfig load(const std::string& path, const std::vector<std::string>& assignments, bool use_env = true) {
    RunConfig c;
    if (!path.empty()) apply_file(c, path);
    if (use_env) apply_env(c);
    for (const auto& a : assignments) apply_assignment(c, a);
    return c;
}

}  // namespace config

}  // namespace usts
