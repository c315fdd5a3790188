#pragma once

// Layer building blocks shared by every model component: dense maps, layer
// norm, temporal and grouped convolutions, GRU sequences.

#include <string>

#include "usts/ops.hpp"
#include "usts/parameter.hpp"

namespace usts::nn {

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    static Linear create(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                         Rng& rng, bool trainable = true) {
        Linear l;
        l.weight = ps.add(name + ".weight", init::fan_in_uniform<T>({in, out}, in, rng), trainable);
        l.bias = ps.add(name + ".bias", init::fan_in_uniform<T>({out}, in, rng), trainable);
        return l;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;

    static LayerNorm create(ParameterSet<T>& ps, const std::string& name, std::size_t width, bool trainable) {
        LayerNorm l;
        l.gamma = ps.add(name + ".gamma", Tensor<T>::ones({width}), trainable);
        l.beta = ps.add(name + ".beta", Tensor<T>::zeros({width}), trainable);
        return l;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

/// "Same"-padded 1-D convolution over the time axis of x[B, L, C_in].
/// weight is stored unfolded as [K * C_in, C_out].
template <class T>
struct TemporalConv {
    Tensor<T> weight;
    Tensor<T> bias;
    std::size_t kernel = 1;

    static TemporalConv create(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                               std::size_t kernel, Rng& rng) {
        TemporalConv c;
        c.kernel = kernel;
        c.weight = ps.add(name + ".weight", init::fan_in_uniform<T>({kernel * in, out}, kernel * in, rng), true);
        c.bias = ps.add(name + ".bias", init::fan_in_uniform<T>({out}, kernel * in, rng), true);
        return c;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return ops::linear(ops::unfold_time(x, kernel), weight, bias);
    }
};

/// Number of zero nodes appended so that `nodes` splits evenly into `groups`.
inline std::size_t group_padding(std::size_t nodes, std::size_t groups) {
    if (groups == 0) throw ConfigError("group count must be positive");
    return (groups - nodes % groups) % groups;
}

/// Grouped temporal convolution over x[B, L, N] producing one channel per
/// group -> [B, L, D]. Nodes are split into D contiguous blocks (zero-padded
/// to a multiple of D); within a block the kernel is tied across nodes, so
///   out[b,t,g] = bias[g] + sum_k weight[k,g] * sum_{n in g} x[b, t+k-(K-1)/2, n].
template <class T>
struct GroupConv {
    Tensor<T> weight;  // [K, D]
    Tensor<T> bias;    // [D]
    std::size_t groups = 1;
    std::size_t kernel = 1;

    static GroupConv create(ParameterSet<T>& ps, const std::string& name, std::size_t nodes, std::size_t groups,
                            std::size_t kernel, Rng& rng) {
        GroupConv c;
        c.groups = groups;
        c.kernel = kernel;
        const std::size_t per_group = (nodes + group_padding(nodes, groups)) / groups;
        c.weight = ps.add(name + ".weight", init::fan_in_uniform<T>({kernel, groups}, kernel * per_group, rng), true);
        c.bias = ps.add(name + ".bias", init::fan_in_uniform<T>({groups}, kernel * per_group, rng), true);
        return c;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.rank() != 3) throw DimensionError("group conv: expected [B,L,N], got " + shape_str(x.shape()));
        const std::size_t B = x.dim(0), L = x.dim(1), N = x.dim(2);
        if (kernel > L) {
            throw ConfigError("group conv kernel " + std::to_string(kernel) + " longer than sequence " +
                              std::to_string(L));
        }
        Tensor<T> padded = x;
        if (const std::size_t pad = group_padding(N, groups); pad > 0)
            padded = ops::concat<T>({x, Tensor<T>::zeros({B, L, pad})}, 2);
        const std::size_t per_group = padded.dim(2) / groups;
        auto pooled = ops::sum_axis(ops::reshape(padded, {B, L, groups, per_group}), 3);  // [B,L,D]
        auto patches = ops::reshape(ops::unfold_time(pooled, kernel), {B, L, kernel, groups});
        return ops::add(ops::sum_axis(ops::mul(patches, weight), 2), bias);
    }
};

/// 1x1 convolution collapsing the channel axis: x[B, L, N, C] -> [B, L, N].
template <class T>
struct ChannelConv {
    Tensor<T> weight;  // [C, 1]
    Tensor<T> bias;    // [1]

    static ChannelConv create(ParameterSet<T>& ps, const std::string& name, std::size_t channels, Rng& rng) {
        ChannelConv c;
        c.weight = ps.add(name + ".weight", init::fan_in_uniform<T>({channels, 1}, channels, rng), true);
        c.bias = ps.add(name + ".bias", init::fan_in_uniform<T>({1}, channels, rng), true);
        return c;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.rank() != 4) throw DimensionError("channel conv: expected [B,L,N,C], got " + shape_str(x.shape()));
        Shape out = {x.dim(0), x.dim(1), x.dim(2)};
        return ops::reshape(ops::linear(x, weight, bias), out);
    }
};

template <class T>
struct Gru {
    Tensor<T> w_ih;  // [I, 3H]
    Tensor<T> w_hh;  // [H, 3H]
    Tensor<T> b_ih;  // [3H]
    Tensor<T> b_hh;  // [3H]

    std::size_t hidden() const { return w_hh.dim(0); }

    static Gru create(ParameterSet<T>& ps, const std::string& name, std::size_t input, std::size_t hidden, Rng& rng) {
        Gru g;
        g.w_ih = ps.add(name + ".w_ih", init::fan_in_uniform<T>({input, 3 * hidden}, hidden, rng), true);
        g.w_hh = ps.add(name + ".w_hh", init::fan_in_uniform<T>({hidden, 3 * hidden}, hidden, rng), true);
        g.b_ih = ps.add(name + ".b_ih", init::fan_in_uniform<T>({3 * hidden}, hidden, rng), true);
        g.b_hh = ps.add(name + ".b_hh", init::fan_in_uniform<T>({3 * hidden}, hidden, rng), true);
        return g;
    }

    Tensor<T> step(const Tensor<T>& x, const Tensor<T>& h) const { return ops::gru_cell(x, h, w_ih, w_hh, b_ih, b_hh); }

    Tensor<T> initial_state(std::size_t rows) const { return Tensor<T>::zeros({rows, hidden()}); }
};

/// Runs a GRU over x[B, T, I] from a zero state and returns every hidden
/// state, [B, T, H]. With `reverse`, time is consumed from the end and the
/// output is aligned with the input positions.
template <class T>
Tensor<T> gru_sequence(const Gru<T>& gru, const Tensor<T>& x, bool reverse = false) {
    if (x.rank() != 3) throw DimensionError("gru: expected [B,T,I], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), steps = x.dim(1), I = x.dim(2), H = gru.hidden();
    if (steps == 0) throw DimensionError("gru: empty sequence");
    std::vector<Tensor<T>> states(steps);
    Tensor<T> h = gru.initial_state(B);
    for (std::size_t i = 0; i < steps; ++i) {
        const std::size_t t = reverse ? steps - 1 - i : i;
        h = gru.step(ops::reshape(ops::slice(x, 1, t, 1), {B, I}), h);
        states[t] = ops::reshape(h, {B, 1, H});
    }
    return ops::concat(states, 1);
}

/// gru_forward as a single call: unidirectional -> [B,T,H]; bidirectional
/// concatenates forward and backward states -> [B,T,2H].
template <class T>
Tensor<T> gru_forward(const Tensor<T>& x, const Gru<T>& forward, const Gru<T>* backward = nullptr) {
    auto fwd = gru_sequence(forward, x, false);
    if (!backward) return fwd;
    return ops::concat<T>({fwd, gru_sequence(*backward, x, true)}, 2);
}

}  // namespace usts::nn
