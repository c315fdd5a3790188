#pragma once

// Partially frozen pre-norm transformer. Lower blocks are fully frozen; the
// top blocks carry low-rank adapters on their attention projections, a
// trainable attention LayerNorm, and accept an additive attention bias.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "usts/model_config.hpp"
#include "usts/nn.hpp"

namespace usts {

/// Low-rank update x W0 + scale * ((x B) A). `down` is B [d, r] (zero at
/// init), `up` is A [r, d].
template <class T>
struct LoraAdapter {
    Tensor<T> down;
    Tensor<T> up;
    T scale = T(1);

    static LoraAdapter create(ParameterSet<T>& ps, const std::string& name, std::size_t d, std::size_t r, T scale,
                              Rng& rng) {
        LoraAdapter a;
        a.scale = scale;
        a.down = ps.add(name + ".lora_B", Tensor<T>::zeros({d, r}), true);
        a.up = ps.add(name + ".lora_A", fresh_up<T>(d, r, rng), true);
        return a;
    }

    template <class U>
    static Tensor<U> fresh_up(std::size_t d, std::size_t r, Rng& rng) {
        return init::normal<U>({r, d}, 1.0 / static_cast<double>(r), rng);
    }
};

template <class T>
Tensor<T> apply_lora(const Tensor<T>& x, const Tensor<T>& w0, const Tensor<T>& b0, const LoraAdapter<T>* adapter) {
    auto y = ops::linear(x, w0, b0);
    if (!adapter) return y;
    auto delta = ops::matmul(ops::matmul(x, adapter->down), adapter->up);
    return ops::add(y, adapter->scale == T(1) ? delta : ops::scale(delta, adapter->scale));
}

/// A frozen dense map with an optional adapter.
template <class T>
struct Projection {
    Tensor<T> weight;
    Tensor<T> bias;
    std::optional<LoraAdapter<T>> lora;

    Tensor<T> operator()(const Tensor<T>& x, bool use_lora) const {
        return apply_lora(x, weight, bias, use_lora && lora ? &*lora : nullptr);
    }
};

template <class T>
Tensor<T> causal_mask(std::size_t L) {
    auto m = Tensor<T>::zeros({L, L});
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = i + 1; j < L; ++j) m.mutable_data()[i * L + j] = -std::numeric_limits<T>::infinity();
    return m;
}

/// softmax(Q K^T / sqrt(d_k) + bias [+ causal mask]) V over `heads` heads.
/// q, k, v: [B, L, d]; bias: [B, L, L] shared by every head. If `probs` is
/// given it receives the attention weights [B, H, L, L].
template <class T>
Tensor<T> biased_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                           std::type_identity_t<const Tensor<T>*> bias, bool causal,
                           std::type_identity_t<Tensor<T>*> probs = nullptr,
                           const std::string& bias_source = "bias generator") {
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw DimensionError("attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                             shape_str(v.shape()));
    }
    const std::size_t B = q.dim(0), L = q.dim(1), d = q.dim(2);
    if (heads == 0 || d % heads != 0) throw ConfigError("attention: width not divisible by head count");
    const std::size_t dk = d / heads;
    auto split = [&](const Tensor<T>& x) { return ops::permute(ops::reshape(x, {B, L, heads, dk}), {0, 2, 1, 3}); };
    auto qh = split(q), kh = split(k), vh = split(v);
    auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh, 2, 3)), T(1) / std::sqrt(static_cast<T>(dk)));
    if (bias) {
        if (bias->shape() != Shape{B, L, L}) {
            throw DimensionError("attention bias " + shape_str(bias->shape()) + " expected " +
                                 shape_str(Shape{B, L, L}));
        }
        if (!ops::all_finite(*bias)) throw NonFiniteError("non-finite attention bias from " + bias_source);
        scores = ops::add(scores, ops::reshape(*bias, {B, 1, L, L}));
    }
    if (causal) scores = ops::add(scores, causal_mask<T>(L));
    auto p = ops::softmax_lastaxis(scores);
    if (probs) *probs = p;
    auto out = ops::matmul(p, vh);  // [B,H,L,dk]
    return ops::reshape(ops::permute(out, {0, 2, 1, 3}), {B, L, d});
}

template <class T>
struct Block {
    std::size_t heads = 1;
    bool adapted = false;
    nn::LayerNorm<T> ln1;
    nn::LayerNorm<T> ln2;
    Projection<T> q, k, v, o;
    nn::Linear<T> fc;
    nn::Linear<T> proj;

    static Block create(ParameterSet<T>& ps, const std::string& name, const ModelConfig& cfg, bool adapted, Rng& rng) {
        Block b;
        const std::size_t d = cfg.d_model;
        b.heads = cfg.heads;
        b.adapted = adapted;
        b.ln1 = nn::LayerNorm<T>::create(ps, name + ".ln_1", d, adapted);
        auto frozen = [&](const std::string& n, std::size_t in, std::size_t out) {
            nn::Linear<T> l;
            l.weight = ps.add(n + ".weight", init::normal<T>({in, out}, 0.02, rng), false);
            l.bias = ps.add(n + ".bias", Tensor<T>::zeros({out}), false);
            return l;
        };
        auto projection = [&](const std::string& n, bool with_lora) {
            auto l = frozen(name + ".attn." + n, d, d);
            Projection<T> p{l.weight, l.bias, std::nullopt};
            if (with_lora)
                p.lora = LoraAdapter<T>::create(ps, name + ".attn." + n, d, cfg.lora_rank,
                                                static_cast<T>(cfg.lora_scale), rng);
            return p;
        };
        b.q = projection("q", adapted);
        b.k = projection("k", adapted);
        b.v = projection("v", adapted && cfg.lora_value);
        b.o = projection("o", adapted && cfg.lora_output);
        b.ln2 = nn::LayerNorm<T>::create(ps, name + ".ln_2", d, false);
        b.fc = frozen(name + ".mlp.fc", d, 4 * d);
        b.proj = frozen(name + ".mlp.proj", 4 * d, d);
        return b;
    }

    /// Pre-norm block: z = MHA(LN(h)) + h; out = FFN(LN(z)) + z.
    Tensor<T> forward(const Tensor<T>& h, const Tensor<T>* bias, bool causal, bool use_lora,
                      Tensor<T>* probs = nullptr) const {
        if (bias && !adapted) throw ContractError("attention bias passed to a block without adapters");
        auto x = ln1(h);
        auto a = biased_attention(q(x, use_lora), k(x, use_lora), v(x, use_lora), heads, bias, causal, probs);
        auto z = ops::add(o(a, use_lora), h);
        return ops::add(proj(ops::gelu(fc(ln2(z)))), z);
    }
};

template <class T>
struct BackboneTrace {
    std::vector<Tensor<T>> attention;  // per block, [B, H, L, L]
    std::vector<Tensor<T>> hidden;     // per block output, [B, L, d]
};

template <class T>
struct Backbone {
    std::vector<Block<T>> blocks;
    Tensor<T> positions;  // [L, d], empty when disabled
    nn::LayerNorm<T> ln_f;
    std::size_t frozen_layers = 0;
    std::size_t adapted_layers = 0;
    bool use_lora = true;

    static Backbone create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        Backbone bb;
        bb.frozen_layers = cfg.frozen_layers;
        bb.adapted_layers = cfg.adapted_layers;
        if (cfg.positional)
            bb.positions = ps.add("backbone.wpe", init::normal<T>({cfg.history, cfg.d_model}, 0.02, rng), false);
        for (std::size_t i = 0; i < cfg.layers; ++i) {
            const bool adapted = i >= cfg.layers - cfg.adapted_layers;
            bb.blocks.push_back(Block<T>::create(ps, "backbone.h" + std::to_string(i), cfg, adapted, rng));
        }
        bb.ln_f = nn::LayerNorm<T>::create(ps, "backbone.ln_f", cfg.d_model, false);
        return bb;
    }

    /// H_p[B, L, d] -> H_pfa[B, L, d]. The bias (if any) reaches only the adapted blocks.
    Tensor<T> forward(const Tensor<T>& hp, const Tensor<T>* bias, bool causal, BackboneTrace<T>* trace = nullptr) const {
        auto h = hp;
        if (positions.defined()) {
            if (hp.dim(1) != positions.dim(0) || hp.dim(2) != positions.dim(1)) {
                throw DimensionError("backbone input " + shape_str(hp.shape()) + " does not match positions " +
                                     shape_str(positions.shape()));
            }
            h = ops::add(h, positions);
        }
        for (const auto& blk : blocks) {
            Tensor<T> probs;
            h = blk.forward(h, blk.adapted ? bias : nullptr, causal, use_lora, trace ? &probs : nullptr);
            if (trace) {
                trace->attention.push_back(probs);
                trace->hidden.push_back(h);
            }
        }
        return ln_f(h);
    }
};

}  // namespace usts
