#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "usts/model.hpp"

namespace usts::testing {

/// Smallest configuration exercising every block regime.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.nodes = 4;
    c.channels = 2;
    c.history = 8;
    c.horizon = 4;
    c.intervals_per_day = 6;
    c.groups = 2;
    c.perception_hidden = 8;
    c.guide_hidden = 4;
    c.gate_hidden = 4;
    c.layers = 3;
    c.d_model = 16;
    c.heads = 2;
    c.frozen_layers = 1;
    c.adapted_layers = 1;
    c.lora_rank = 2;
    return c;
}

inline std::vector<std::int64_t> step_times(std::size_t batch, std::size_t steps, std::int64_t first = 100) {
    std::vector<std::int64_t> t;
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < steps; ++l) t.push_back(first + static_cast<std::int64_t>(7 * b + l));
    return t;
}

inline std::vector<std::uint8_t> random_mask(std::size_t n, double keep, std::mt19937_64& rng) {
    std::bernoulli_distribution d(keep);
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = d(rng) ? 1 : 0;
    return m;
}

template <class T>
void zero_tensor(Tensor<T> t) {
    for (auto& v : t.mutable_data()) v = T(0);
}

template <class T>
void fill_tensor(Tensor<T> t, std::initializer_list<double> vals) {
    auto d = t.mutable_data();
    if (vals.size() != d.size()) throw ContractError("fill_tensor: size mismatch");
    std::size_t i = 0;
    for (double v : vals) d[i++] = static_cast<T>(v);
}

}  // namespace usts::testing
