#pragma once

// Conditional input scaling: a per-sample scalar s drawn from an
// input-conditioned interval [a, b], applied to the input and inverted on
// the output.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <spdlog/spdlog.h>

#include "usts/model_config.hpp"
#include "usts/nn.hpp"

namespace usts {

template <class T>
struct ScaleBounds {
    Tensor<T> lower;  // [B]
    Tensor<T> upper;  // [B]
};

template <class T>
struct ScaleDraw {
    Tensor<T> scale;      // [B]
    std::vector<T> u;     // uniform draw per sample
};

template <class T>
struct Conditioning {
    Tensor<T> center;  // c
    Tensor<T> radius;  // delta
    nn::Linear<T> fc1;
    nn::Linear<T> fc2;

    static constexpr T kMinScale = T(1e-6);

    static Conditioning create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        Conditioning m;
        m.center = ps.add("cond.center", Tensor<T>::full({1}, static_cast<T>(cfg.cond_center)), true);
        m.radius = ps.add("cond.radius", Tensor<T>::full({1}, static_cast<T>(cfg.cond_radius)), true);
        m.fc1 = nn::Linear<T>::create(ps, "cond.fc1", cfg.nodes * cfg.channels, cfg.cond_hidden, rng);
        m.fc2 = nn::Linear<T>::create(ps, "cond.fc2", cfg.cond_hidden, 2, rng);
        return m;
    }

    /// Last-observed-step summary of x[B, L, N, C] -> [B, N*C]. `mask` (same
    /// layout as x, 1 = observed) may be null for the prediction view.
    static Tensor<T> summarize(const Tensor<T>& x, const std::vector<std::uint8_t>* mask) {
        if (x.rank() != 4) throw DimensionError("summarize: expected [B,L,N,C], got " + shape_str(x.shape()));
        const std::size_t B = x.dim(0), L = x.dim(1), F = x.dim(2) * x.dim(3);
        if (L == 0) throw DimensionError("summarize: empty time axis");
        if (mask && mask->size() != x.numel()) throw DimensionError("summarize: mask size mismatch");
        const auto& xv = x.values();
        std::vector<T> out(B * F, T(0));
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = b * L * F;
            std::size_t last = L;
            if (!mask) {
                last = L - 1;
            } else {
                for (std::size_t l = L; l-- > 0;) {
                    const auto* row = mask->data() + base + l * F;
                    if (std::any_of(row, row + F, [](std::uint8_t m) { return m != 0; })) {
                        last = l;
                        break;
                    }
                }
            }
            T* o = out.data() + b * F;
            if (last < L) {
                std::copy_n(xv.data() + base + last * F, F, o);
                continue;
            }
            // Every step fully masked: per-feature mean over observed entries.
            bool any = false;
            for (std::size_t f = 0; f < F; ++f) {
                double s = 0;
                std::size_t n = 0;
                for (std::size_t l = 0; l < L; ++l) {
                    if ((*mask)[base + l * F + f]) {
                        s += xv[base + l * F + f];
                        ++n;
                    }
                }
                if (n) {
                    o[f] = static_cast<T>(s / static_cast<double>(n));
                    any = true;
                }
            }
            if (!any) spdlog::warn("sample {} has no observed entries; scale summary set to zeros", b);
        }
        return Tensor<T>({B, F}, std::move(out));
    }

    /// a = c + da * delta, b = c + db * delta, reordered so a <= b.
    ScaleBounds<T> predict_bounds(const Tensor<T>& psi) const {
        auto delta = fc2(ops::tanh(fc1(psi)));  // [B,2]
        const std::size_t B = psi.dim(0);
        auto da = ops::reshape(ops::slice(delta, 1, 0, 1), {B});
        auto db = ops::reshape(ops::slice(delta, 1, 1, 1), {B});
        auto a = ops::add(center, ops::mul(da, radius));
        auto b = ops::add(center, ops::mul(db, radius));
        std::vector<std::uint8_t> ordered(B);
        for (std::size_t i = 0; i < B; ++i) ordered[i] = a.values()[i] <= b.values()[i];
        return {ops::where(ordered, a, b), ops::where(ordered, b, a)};
    }

    /// s = a + u (b - a). Training draws u ~ U(0,1); evaluation fixes u = 0.5.
    static ScaleDraw<T> sample_scale(const ScaleBounds<T>& bounds, Rng* rng) {
        const std::size_t B = bounds.lower.numel();
        std::vector<T> u(B, T(0.5));
        if (rng) {
            std::uniform_real_distribution<double> dist(0.0, 1.0);
            for (auto& v : u) v = static_cast<T>(dist(*rng));
        }
        return {sample_scale(bounds, u), u};
    }

    static Tensor<T> sample_scale(const ScaleBounds<T>& bounds, const std::vector<T>& u) {
        const std::size_t B = bounds.lower.numel();
        if (u.size() != B) throw DimensionError("sample_scale: one uniform draw per sample required");
        auto s = ops::add(bounds.lower, ops::mul(Tensor<T>({B}, u), ops::sub(bounds.upper, bounds.lower)));
        std::vector<std::uint8_t> ok(B);
        std::vector<T> clamped(B);
        bool any_small = false;
        for (std::size_t i = 0; i < B; ++i) {
            const T v = s.values()[i];
            ok[i] = std::abs(v) >= kMinScale;
            clamped[i] = v < 0 ? -kMinScale : kMinScale;
            any_small = any_small || !ok[i];
        }
        if (!any_small) return s;
        spdlog::warn("scale factor below {} clamped", kMinScale);
        return ops::where(ok, s, Tensor<T>({B}, std::move(clamped)));
    }

    static Tensor<T> apply(const Tensor<T>& x, const Tensor<T>& s) { return ops::mul(x, per_sample(s, x.rank())); }
    static Tensor<T> invert(const Tensor<T>& y, const Tensor<T>& s) { return ops::div(y, per_sample(s, y.rank())); }

    static Tensor<T> per_sample(const Tensor<T>& s, std::size_t rank) {
        Shape shape(rank, 1);
        shape[0] = s.numel();
        return ops::reshape(s, shape);
    }
};

}  // namespace usts
