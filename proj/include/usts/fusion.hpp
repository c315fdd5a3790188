#pragma once

// Task-specific regression heads and the gated blend with the guidance signal.

#include <cmath>
#include <optional>
#include <string>

#include "usts/model_config.hpp"
#include "usts/nn.hpp"

namespace usts {

template <class T>
struct RegressionHead {
    nn::TemporalConv<T> conv;      // d -> N*C per step
    std::optional<nn::Linear<T>> time_map;  // L -> S, absent when S == L

    static RegressionHead create(ParameterSet<T>& ps, const std::string& name, const ModelConfig& cfg,
                                 std::size_t out_steps, Rng& rng) {
        RegressionHead h;
        h.conv = nn::TemporalConv<T>::create(ps, name + ".conv", cfg.d_model, cfg.nodes * cfg.channels,
                                             cfg.head_kernel, rng);
        if (out_steps != cfg.history)
            h.time_map = nn::Linear<T>::create(ps, name + ".time", cfg.history, out_steps, rng);
        return h;
    }

    /// [B, L, d] -> [B, S, N, C].
    Tensor<T> operator()(const Tensor<T>& h, std::size_t nodes, std::size_t channels) const {
        const std::size_t B = h.dim(0);
        auto y = conv(h);  // [B,L,NC]
        if (time_map) y = ops::permute((*time_map)(ops::permute(y, {0, 2, 1})), {0, 2, 1});
        return ops::reshape(y, {B, y.dim(1), nodes, channels});
    }
};

template <class T>
struct Fusion {
    RegressionHead<T> predict_head;
    RegressionHead<T> impute_head;
    Tensor<T> predict_gate;  // lambda_raw
    Tensor<T> impute_gate;
    std::size_t nodes = 0;
    std::size_t channels = 0;

    static Fusion create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        Fusion f;
        f.nodes = cfg.nodes;
        f.channels = cfg.channels;
        f.predict_head = RegressionHead<T>::create(ps, "head.pred", cfg, cfg.horizon, rng);
        f.impute_head = RegressionHead<T>::create(ps, "head.imp", cfg, cfg.history, rng);
        const T raw = static_cast<T>(std::log(cfg.fusion_gate / (1.0 - cfg.fusion_gate)));
        f.predict_gate = ps.add("fuse.pred.gate", Tensor<T>::full({1}, raw), true);
        f.impute_gate = ps.add("fuse.imp.gate", Tensor<T>::full({1}, raw), true);
        return f;
    }

    Tensor<T> regression_head(const Tensor<T>& h, Task task) const {
        switch (task) {
            case Task::Predict: return predict_head(h, nodes, channels);
            case Task::Impute: return impute_head(h, nodes, channels);
        }
        throw ContractError("unknown task tag");
    }

    const Tensor<T>& gate(Task task) const { return task == Task::Predict ? predict_gate : impute_gate; }
};

/// (1 - sigmoid(raw)) * h_out + sigmoid(raw) * g.
template <class T>
Tensor<T> gated_fuse(const Tensor<T>& h_out, const Tensor<T>& g, const Tensor<T>& gate_raw) {
    if (h_out.shape() != g.shape()) {
        throw DimensionError("fusion: regression output " + shape_str(h_out.shape()) + " vs guidance " +
                             shape_str(g.shape()));
    }
    auto lambda = ops::sigmoid(gate_raw);
    return ops::add(h_out, ops::mul(lambda, ops::sub(g, h_out)));
}

}  // namespace usts
