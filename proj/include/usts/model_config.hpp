#pragma once

#include <cstddef>
#include <string>

#include "usts/error.hpp"

namespace usts {

enum class Task { Predict, Impute };

inline const char* task_name(Task t) { return t == Task::Predict ? "predict" : "impute"; }

inline Task parse_task(const std::string& s) {
    if (s == "predict") return Task::Predict;
    if (s == "impute") return Task::Impute;
    throw ContractError("unknown task '" + s + "' (expected predict|impute)");
}

/// Every architectural hyperparameter of the model.
struct ModelConfig {
    // data geometry
    std::size_t nodes = 200;
    std::size_t channels = 5;
    std::size_t history = 288;  // L
    std::size_t horizon = 144;  // S

    // conditional input scaling
    bool conditioning = true;
    std::size_t cond_hidden = 16;
    double cond_center = 1.0;
    double cond_radius = 0.1;

    // temporal calendar and perception pathway
    bool temporal_embedding = true;      // off = "w/o STE" ablation
    std::size_t steps_per_interval = 1;  // f
    std::size_t intervals_per_day = 144; // Q
    std::size_t days_per_week = 7;       // P_week
    std::size_t groups = 16;             // D
    std::size_t group_kernel = 3;
    std::size_t perception_hidden = 64;  // d_h

    // guidance signal
    bool guidance = true;  // off = "w/o GS" ablation
    std::size_t guide_hidden = 32;

    // dynamic attention bias
    bool bias_injection = true;
    bool graph = true;  // off = "w/o GE" ablation (adjacency replaced by identity)
    std::size_t gate_hidden = 8;
    std::size_t gate_kernel = 3;
    double bias_intensity = 0.1;  // initial mu

    // backbone
    std::size_t layers = 6;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t frozen_layers = 3;   // L_f
    std::size_t adapted_layers = 3;  // U
    std::size_t lora_rank = 4;
    double lora_scale = 1.0;
    bool lora_value = false;
    bool lora_output = false;
    bool positional = true;
    bool causal_predict = true;
    bool causal_impute = false;

    // output head and fusion
    std::size_t head_kernel = 3;
    double fusion_gate = 0.5;  // initial lambda

    bool causal(Task t) const { return t == Task::Predict ? causal_predict : causal_impute; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (nodes == 0 || channels == 0 || history == 0 || horizon == 0) fail("data geometry must be positive");
        if (horizon > history) fail("horizon S must not exceed history L");
        if (frozen_layers + adapted_layers > layers) fail("frozen_layers + adapted_layers exceeds layers");
        if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
        if (lora_rank < 1 || lora_rank > d_model / 4) fail("lora_rank must be in [1, d_model/4]");
        if (groups == 0) fail("groups must be positive");
        if (group_kernel > history || gate_kernel > history || head_kernel > history) {
            fail("convolution kernel longer than history");
        }
        if (steps_per_interval == 0 || intervals_per_day == 0 || days_per_week == 0) fail("calendar sizes must be positive");
        if (!(fusion_gate > 0 && fusion_gate < 1)) fail("fusion_gate must be in (0,1)");
    }
};

}  // namespace usts
