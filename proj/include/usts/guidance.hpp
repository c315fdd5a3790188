#pragma once

// Per-node recurrent estimate G: a forecasting GRU for prediction and a
// bidirectional auto-regressive GRU that fills masked entries for imputation.

#include <vector>

#include "usts/model_config.hpp"
#include "usts/nn.hpp"

namespace usts {

/// [B, L, N, C] -> [B*N, L, C], rows ordered b-major, n-minor.
template <class T>
Tensor<T> reshape_per_node(const Tensor<T>& x) {
    if (x.rank() != 4) throw DimensionError("per-node reshape: expected [B,L,N,C], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), N = x.dim(2), C = x.dim(3);
    return ops::reshape(ops::permute(x, {0, 2, 1, 3}), {B * N, L, C});
}

/// Inverse of reshape_per_node.
template <class T>
Tensor<T> reshape_from_nodes(const Tensor<T>& r, std::size_t batch, std::size_t nodes) {
    if (r.rank() != 3 || r.dim(0) != batch * nodes) {
        throw DimensionError("per-node inverse: " + shape_str(r.shape()) + " is not " + std::to_string(batch) + "x" +
                             std::to_string(nodes) + " rows");
    }
    return ops::permute(ops::reshape(r, {batch, nodes, r.dim(1), r.dim(2)}), {0, 2, 1, 3});
}

/// Same relayout for a flat byte mask.
inline std::vector<std::uint8_t> mask_per_node(const std::vector<std::uint8_t>& m, std::size_t B, std::size_t L,
                                               std::size_t N, std::size_t C) {
    if (m.size() != B * L * N * C) throw DimensionError("per-node mask: size mismatch");
    std::vector<std::uint8_t> out(m.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    out[((b * N + n) * L + l) * C + c] = m[((b * L + l) * N + n) * C + c];
    return out;
}

template <class T>
struct Guidance {
    nn::Gru<T> pred_gru;
    nn::Linear<T> pred_head;
    nn::Gru<T> fwd_gru;
    nn::Linear<T> fwd_head;
    nn::Gru<T> bwd_gru;
    nn::Linear<T> bwd_head;

    static Guidance create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        Guidance g;
        const std::size_t C = cfg.channels, H = cfg.guide_hidden;
        g.pred_gru = nn::Gru<T>::create(ps, "guide.pred.gru", C, H, rng);
        g.pred_head = nn::Linear<T>::create(ps, "guide.pred.head", H, C, rng);
        g.fwd_gru = nn::Gru<T>::create(ps, "guide.imp.fwd.gru", C, H, rng);
        g.fwd_head = nn::Linear<T>::create(ps, "guide.imp.fwd.head", H, C, rng);
        g.bwd_gru = nn::Gru<T>::create(ps, "guide.imp.bwd.gru", C, H, rng);
        g.bwd_head = nn::Linear<T>::create(ps, "guide.imp.bwd.head", H, C, rng);
        return g;
    }

    /// xr[R, L, C] -> last `horizon` steps of Linear(GRU(xr)), [R, S, C].
    Tensor<T> predict(const Tensor<T>& xr, std::size_t horizon) const {
        const std::size_t L = xr.dim(1);
        if (horizon > L) {
            throw ConfigError("guidance horizon " + std::to_string(horizon) + " exceeds history " + std::to_string(L));
        }
        auto out = pred_head(nn::gru_sequence(pred_gru, xr));
        return ops::slice(out, 1, L - horizon, horizon);
    }

    /// xr[R, L, C] with mask mr (1 = observed, same layout) -> refined [R, L, C].
    /// Forward pass: estimate from h_{t-1}, substitute at masked entries, step.
    /// Backward pass: run over the forward-refined sequence from the end and
    /// substitute its head's estimate at masked entries.
    Tensor<T> impute(const Tensor<T>& xr, const std::vector<std::uint8_t>& mr) const {
        if (xr.rank() != 3) throw DimensionError("guidance impute: expected [R,L,C], got " + shape_str(xr.shape()));
        const std::size_t R = xr.dim(0), L = xr.dim(1), C = xr.dim(2);
        if (mr.size() != xr.numel()) throw DimensionError("guidance impute: mask size mismatch");

        std::vector<Tensor<T>> steps(L);
        std::vector<std::vector<std::uint8_t>> masks(L, std::vector<std::uint8_t>(R * C));
        for (std::size_t t = 0; t < L; ++t) {
            steps[t] = ops::reshape(ops::slice(xr, 1, t, 1), {R, C});
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) masks[t][r * C + c] = mr[(r * L + t) * C + c];
        }

        std::vector<Tensor<T>> refined(L);
        Tensor<T> h = fwd_gru.initial_state(R);
        for (std::size_t t = 0; t < L; ++t) {
            refined[t] = ops::where(masks[t], steps[t], fwd_head(h));
            h = fwd_gru.step(refined[t], h);
        }

        std::vector<Tensor<T>> out(L);
        h = bwd_gru.initial_state(R);
        for (std::size_t i = 0; i < L; ++i) {
            const std::size_t t = L - 1 - i;
            h = bwd_gru.step(refined[t], h);
            out[t] = ops::reshape(ops::where(masks[t], steps[t], bwd_head(h)), {R, 1, C});
        }
        return ops::concat(out, 1);
    }
};

}  // namespace usts
