#pragma once

// The unified forecasting / imputation model: scaling, perception, biased
// partially frozen backbone, task head, guidance blend, inverse scaling.

#include <cstdint>
#include <vector>

#include "usts/backbone.hpp"
#include "usts/bias_gen.hpp"
#include "usts/conditioning.hpp"
#include "usts/embeddings.hpp"
#include "usts/fusion.hpp"
#include "usts/guidance.hpp"

namespace usts {

template <class T>
struct ForwardOptions {
    Rng* rng = nullptr;                  // training-mode scale draw; null = evaluation (u = 0.5)
    const std::vector<T>* u = nullptr;   // explicit draw, overrides rng
    BackboneTrace<T>* trace = nullptr;
};

template <class T>
struct ForwardResult {
    Tensor<T> y;         // final output after inverse scaling
    Tensor<T> y_out;     // blended output before inverse scaling
    Tensor<T> h_out;     // regression head output
    Tensor<T> guidance;  // undefined when guidance is disabled
    Tensor<T> scale;     // [B]
    Tensor<T> bias;      // [B, L, L], undefined when injection is disabled
};

template <class T>
class Model {
public:
    ModelConfig config;
    ParameterSet<T> params;
    Conditioning<T> cond;
    Embeddings<T> embed;
    Guidance<T> guide;
    BiasGenerator<T> bias;
    Backbone<T> backbone;
    Fusion<T> fusion;
    Tensor<T> medians;  // [N*C] normalization constants of the training data

    Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
        config.validate();
        Rng rng(seed);
        cond = Conditioning<T>::create(params, config, rng);
        embed = Embeddings<T>::create(params, config, rng);
        guide = Guidance<T>::create(params, config, rng);
        bias = BiasGenerator<T>::create(params, config, rng);
        backbone = Backbone<T>::create(params, config, rng);
        fusion = Fusion<T>::create(params, config, rng);
        medians = params.add("data.median", Tensor<T>::ones({config.nodes * config.channels}), false);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    /// x[B, L, N, C] normalized history; mask (impute only, 1 = observed);
    /// times[B*L] absolute step indices.
    ForwardResult<T> forward(Task task, const Tensor<T>& x, const std::vector<std::uint8_t>* mask,
                             const std::vector<std::int64_t>& times, const ForwardOptions<T>& opt = {}) const {
        const auto& c = config;
        if (x.rank() != 4 || x.dim(1) != c.history || x.dim(2) != c.nodes || x.dim(3) != c.channels) {
            throw DimensionError("model input " + shape_str(x.shape()) + " expected [B," + std::to_string(c.history) +
                                 "," + std::to_string(c.nodes) + "," + std::to_string(c.channels) + "]");
        }
        const std::size_t B = x.dim(0);
        if (task == Task::Impute && !mask) throw ContractError("imputation requires a mask");
        const std::vector<std::uint8_t>* m = task == Task::Impute ? mask : nullptr;

        Tensor<T> xm = x;
        if (m) {
            if (m->size() != x.numel()) throw DimensionError("mask size does not match input");
            std::vector<T> keep(m->begin(), m->end());
            xm = ops::mul(x, Tensor<T>(x.shape(), std::move(keep)));
        }

        ForwardResult<T> r;
        Tensor<T> xs = xm;
        if (c.conditioning) {
            auto bounds = cond.predict_bounds(Conditioning<T>::summarize(xm, m));
            if (opt.u) {
                r.scale = Conditioning<T>::sample_scale(bounds, *opt.u);
            } else {
                r.scale = Conditioning<T>::sample_scale(bounds, opt.rng).scale;
            }
            xs = Conditioning<T>::apply(xm, r.scale);
        } else {
            r.scale = Tensor<T>::ones({B});
        }

        auto hp = embed.forward(xs, times);
        if (c.bias_injection) r.bias = bias.forward(xs);
        auto h = backbone.forward(hp, c.bias_injection ? &r.bias : nullptr, c.causal(task), opt.trace);
        r.h_out = fusion.regression_head(h, task);

        if (c.guidance) {
            auto xr = reshape_per_node(xs);
            Tensor<T> g = task == Task::Predict
                              ? guide.predict(xr, c.horizon)
                              : guide.impute(xr, mask_per_node(*m, B, c.history, c.nodes, c.channels));
            r.guidance = reshape_from_nodes(g, B, c.nodes);
            r.y_out = gated_fuse(r.h_out, r.guidance, fusion.gate(task));
        } else {
            r.y_out = r.h_out;
        }
        r.y = c.conditioning ? Conditioning<T>::invert(r.y_out, r.scale) : r.y_out;
        return r;
    }

    /// Installs the functional adjacency computed from training data.
    void set_adjacency(const Tensor<T>& a) { bias.set_adjacency(a); }

    void set_medians(const std::vector<double>& med) {
        if (med.size() != medians.numel()) throw ConfigError("median count does not match model nodes x channels");
        auto dst = medians.mutable_data();
        for (std::size_t i = 0; i < med.size(); ++i) dst[i] = static_cast<T>(med[i]);
    }

    /// Copies every parameter value from a model of identical layout, possibly
    /// of another precision.
    template <class U>
    void copy_values_from(const Model<U>& other) {
        const auto& src = other.params.all();
        auto& dst = params.all();
        if (src.size() != dst.size()) throw ContractError("parameter layouts differ");
        for (std::size_t i = 0; i < src.size(); ++i) {
            if (src[i].name != dst[i].name || src[i].value.shape() != dst[i].value.shape()) {
                throw ContractError("parameter layouts differ at '" + dst[i].name + "'");
            }
            auto out = dst[i].value.mutable_data();
            for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(src[i].value.values()[j]);
        }
    }
};

}  // namespace usts
