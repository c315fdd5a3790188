#pragma once

// Functional adjacency and the dynamic attention bias synthesized from it.

#include <algorithm>
#include <cmath>
#include <vector>

#include <spdlog/spdlog.h>

#include "usts/dataset.hpp"
#include "usts/model_config.hpp"
#include "usts/nn.hpp"

namespace usts {

template <class T>
Tensor<T> normalize_adjacency(const std::vector<double>& a, std::size_t N) {
    std::vector<double> inv_sqrt(N);
    for (std::size_t i = 0; i < N; ++i) {
        double d = 0;
        for (std::size_t j = 0; j < N; ++j) d += a[i * N + j];
        if (!(d > 0)) throw ContractError("adjacency row " + std::to_string(i) + " has non-positive degree");
        inv_sqrt[i] = 1.0 / std::sqrt(d);
    }
    std::vector<T> out(N * N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) out[i * N + j] = static_cast<T>(a[i * N + j] * (inv_sqrt[i] * inv_sqrt[j]));
    return Tensor<T>({N, N}, std::move(out));
}

/// Cosine similarity of per-node training profiles (flattened over time and
/// channel), row-major [N*N]. A node whose profile has zero norm gets a lone
/// self-loop.
inline std::vector<double> profile_cosine(const data::NodeSeries& s, std::size_t train_end) {
    if (train_end == 0 || train_end > s.steps) {
        throw ContractError("adjacency: training range " + std::to_string(train_end) + " outside series of " +
                            std::to_string(s.steps) + " steps");
    }
    const std::size_t N = s.nodes, C = s.channels;
    std::vector<double> gram(N * N, 0.0);
    for (std::size_t t = 0; t < train_end; ++t) {
        const float* row = s.values.data() + t * N * C;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = i; j < N; ++j) {
                double dot = 0;
                for (std::size_t c = 0; c < C; ++c) dot += double(row[i * C + c]) * double(row[j * C + c]);
                gram[i * N + j] += dot;
            }
    }
    std::vector<double> norm(N);
    for (std::size_t i = 0; i < N; ++i) norm[i] = std::sqrt(gram[i * N + i]);
    std::vector<double> a(N * N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        if (norm[i] == 0) {
            spdlog::warn("node {} has a zero training profile; adjacency row set to a self-loop", i);
            a[i * N + i] = 1.0;
            continue;
        }
        for (std::size_t j = i; j < N; ++j) {
            if (norm[j] == 0) continue;
            const double v = i == j ? 1.0 : gram[i * N + j] / (norm[i] * norm[j]);
            a[i * N + j] = a[j * N + i] = v;
        }
    }
    return a;
}

/// Profile cosine similarity, symmetrically normalized D^-1/2 A D^-1/2.
template <class T>
Tensor<T> build_adjacency(const data::NodeSeries& s, std::size_t train_end) {
    return normalize_adjacency<T>(profile_cosine(s, train_end), s.nodes);
}

template <class T>
Tensor<T> identity_matrix(std::size_t n) {
    auto m = Tensor<T>::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) m.mutable_data()[i * n + i] = T(1);
    return m;
}

/// Node-mean first difference of x[B, L, N, C], z-normalized per (sample,
/// channel) -> [B, L, C]. Constant with respect to the parameters: the
/// z-normalization removes any per-sample scale.
template <class T>
Tensor<T> differential_signal(const Tensor<T>& x) {
    if (x.rank() != 4) throw DimensionError("differential signal: expected [B,L,N,C], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), N = x.dim(2), C = x.dim(3);
    std::vector<T> out(B * L * C, T(0));
    if (L < 2) {
        spdlog::warn("differential signal needs at least 2 steps; using zeros");
        return Tensor<T>({B, L, C}, std::move(out));
    }
    const auto& xv = x.values();
    std::vector<double> avg(L);
    std::vector<double> diff(L);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t l = 0; l < L; ++l) {
                double s = 0;
                for (std::size_t n = 0; n < N; ++n) s += xv[((b * L + l) * N + n) * C + c];
                avg[l] = s / static_cast<double>(N);
            }
            diff[0] = 0;
            for (std::size_t l = 1; l < L; ++l) diff[l] = avg[l] - avg[l - 1];
            double mean = 0;
            for (double d : diff) mean += d;
            mean /= static_cast<double>(L);
            double var = 0;
            for (double d : diff) var += (d - mean) * (d - mean);
            const double sd = std::max(std::sqrt(var / static_cast<double>(L)), 1e-6);
            for (std::size_t l = 0; l < L; ++l) out[(b * L + l) * C + c] = static_cast<T>((diff[l] - mean) / sd);
        }
    return Tensor<T>({B, L, C}, std::move(out));
}

template <class T>
struct GateOutput {
    Tensor<T> k;  // [L, N]
    Tensor<T> g;  // [B, L]
};

/// P' = tanh(P * k) elementwise; B_s = P' A P'^T -> [L, L].
template <class T>
Tensor<T> static_bias(const Tensor<T>& projection, const Tensor<T>& k, const Tensor<T>& adjacency) {
    auto p = ops::tanh(ops::mul(projection, k));
    return ops::matmul(ops::matmul(p, adjacency), ops::transpose(p, 0, 1));
}

/// B~_b = mu * (g_b g_b^T) * B_s -> [B, L, L].
template <class T>
Tensor<T> dynamic_bias(const Tensor<T>& bs, const Tensor<T>& g, const Tensor<T>& mu) {
    const std::size_t B = g.dim(0), L = g.dim(1);
    auto outer = ops::matmul(ops::reshape(g, {B, L, 1}), ops::reshape(g, {B, 1, L}));
    return ops::mul(ops::mul(outer, bs), mu);
}

template <class T>
struct BiasGenerator {
    Tensor<T> projection;  // P_proj [L, N]
    Tensor<T> intensity;   // mu [1]
    Tensor<T> adjacency;   // A [N, N], fixed
    nn::TemporalConv<T> conv1;
    nn::TemporalConv<T> conv2;
    nn::Linear<T> head_k;
    nn::Linear<T> head_g;
    bool use_graph = true;

    static BiasGenerator create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        BiasGenerator m;
        const std::size_t L = cfg.history, N = cfg.nodes, H = cfg.gate_hidden;
        m.use_graph = cfg.graph;
        m.projection = ps.add("bias.proj", init::normal<T>({L, N}, 1.0 / std::sqrt(double(N)), rng), true);
        m.intensity = ps.add("bias.mu", Tensor<T>::full({1}, static_cast<T>(cfg.bias_intensity)), true);
        m.adjacency = ps.add("bias.adjacency", identity_matrix<T>(N), false);
        m.conv1 = nn::TemporalConv<T>::create(ps, "bias.gate.conv1", cfg.channels, H, cfg.gate_kernel, rng);
        m.conv2 = nn::TemporalConv<T>::create(ps, "bias.gate.conv2", H, H, cfg.gate_kernel, rng);
        m.head_k = nn::Linear<T>::create(ps, "bias.gate.head_k", H, N, rng);
        m.head_g = nn::Linear<T>::create(ps, "bias.gate.head_g", H, 1, rng);
        return m;
    }

    /// Overwrites the stored adjacency in place (shared with the parameter set).
    void set_adjacency(const Tensor<T>& a) {
        if (a.shape() != adjacency.shape()) {
            throw ConfigError("adjacency " + shape_str(a.shape()) + " does not match model nodes " +
                              shape_str(adjacency.shape()));
        }
        std::copy(a.values().begin(), a.values().end(), adjacency.mutable_data().begin());
    }

    GateOutput<T> gate(const Tensor<T>& sdiff) const {
        const std::size_t B = sdiff.dim(0), L = sdiff.dim(1);
        auto h = conv2(ops::gelu(conv1(sdiff)));  // [B,L,H]
        auto k = ops::mean_axis(head_k(h), 0);    // [L,N]
        auto g = ops::tanh(ops::reshape(head_g(h), {B, L}));
        return {k, g};
    }

    Tensor<T> graph() const { return use_graph ? adjacency : identity_matrix<T>(adjacency.dim(0)); }

    /// Full synthesis from the scaled input x_s[B, L, N, C] -> [B, L, L].
    Tensor<T> forward(const Tensor<T>& xs) const {
        auto go = gate(differential_signal(xs));
        return dynamic_bias(static_bias(projection, go.k, graph()), go.g, intensity);
    }
};

}  // namespace usts
