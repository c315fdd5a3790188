#pragma once

// Calendar embedding and the perception pathway that compresses a
// [B, L, N, C] window into the backbone input [B, L, d].

#include <cstdint>
#include <vector>

#include "usts/model_config.hpp"
#include "usts/nn.hpp"

namespace usts {

struct TimeIndex {
    std::size_t day;   // interval within the day
    std::size_t week;  // day within the week
};

struct TemporalCalendar {
    std::size_t steps_per_interval = 1;
    std::size_t intervals_per_day = 144;
    std::size_t days_per_week = 7;

    static TemporalCalendar from(const ModelConfig& cfg) {
        return {cfg.steps_per_interval, cfg.intervals_per_day, cfg.days_per_week};
    }

    /// One full cycle of both indices, in steps.
    std::int64_t period() const {
        return static_cast<std::int64_t>(steps_per_interval * intervals_per_day * days_per_week);
    }

    TimeIndex index(std::int64_t t) const {
        if (t < 0) throw ContractError("time index must be non-negative, got " + std::to_string(t));
        const auto u = static_cast<std::uint64_t>(t);
        return {(u / steps_per_interval) % intervals_per_day,
                (u / (intervals_per_day * steps_per_interval)) % days_per_week};
    }

    /// Hour of the week in [0, 24 * days_per_week); the feature dump label.
    std::size_t hour_of_week(std::int64_t t) const {
        const auto i = index(t);
        return i.week * 24 + i.day * 24 / intervals_per_day;
    }
};

template <class T>
struct Embeddings {
    TemporalCalendar calendar;
    Tensor<T> day_table;   // [Q, D]
    Tensor<T> week_table;  // [P, D]
    nn::ChannelConv<T> compress;
    nn::GroupConv<T> group;
    nn::Gru<T> gru;
    nn::Linear<T> project;
    bool use_calendar = true;

    static Embeddings create(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        Embeddings e;
        e.calendar = TemporalCalendar::from(cfg);
        e.use_calendar = cfg.temporal_embedding;
        e.day_table = ps.add("embed.day", init::normal<T>({cfg.intervals_per_day, cfg.groups}, 0.02, rng), true);
        e.week_table = ps.add("embed.week", init::normal<T>({cfg.days_per_week, cfg.groups}, 0.02, rng), true);
        e.compress = nn::ChannelConv<T>::create(ps, "perceive.channel", cfg.channels, rng);
        e.group = nn::GroupConv<T>::create(ps, "perceive.group", cfg.nodes, cfg.groups, cfg.group_kernel, rng);
        e.gru = nn::Gru<T>::create(ps, "perceive.gru", cfg.groups, cfg.perception_hidden, rng);
        e.project = nn::Linear<T>::create(ps, "perceive.proj", cfg.perception_hidden, cfg.d_model, rng);
        return e;
    }

    /// Gathers day and week rows for absolute step indices times[B*L] -> [B, L, D].
    Tensor<T> temporal(const std::vector<std::int64_t>& times, std::size_t batch, std::size_t steps) const {
        if (times.size() != batch * steps) {
            throw DimensionError("temporal embedding: " + std::to_string(times.size()) + " time stamps for " +
                                 std::to_string(batch) + "x" + std::to_string(steps) + " steps");
        }
        std::vector<std::size_t> day(times.size()), week(times.size());
        for (std::size_t i = 0; i < times.size(); ++i) {
            const auto ix = calendar.index(times[i]);
            day[i] = ix.day;
            week[i] = ix.week;
        }
        const std::size_t D = day_table.dim(1);
        auto e = ops::add(ops::embedding(day_table, day), ops::embedding(week_table, week));
        return ops::reshape(e, {batch, steps, D});
    }

    /// x_s[B, L, N, C] with calendar features e_t[B, L, D] -> H_p[B, L, d].
    Tensor<T> perceive(const Tensor<T>& xs, const Tensor<T>& et) const {
        if (xs.rank() != 4) throw DimensionError("perception input: expected [B,L,N,C], got " + shape_str(xs.shape()));
        const std::size_t D = day_table.dim(1);
        if (et.rank() != 3 || et.dim(0) != xs.dim(0) || et.dim(1) != xs.dim(1) || et.dim(2) != D) {
            throw DimensionError("perception: temporal embedding " + shape_str(et.shape()) + " does not match input " +
                                 shape_str(xs.shape()) + " with " + std::to_string(D) + " groups");
        }
        auto xc = ops::gelu(compress(xs));  // [B,L,N]
        auto f = ops::gelu(group(xc));      // [B,L,D]
        auto hg = nn::gru_sequence(gru, ops::add(f, ops::tanh(et)));
        return project(hg);
    }

    Tensor<T> forward(const Tensor<T>& xs, const std::vector<std::int64_t>& times) const {
        const std::size_t B = xs.dim(0), L = xs.dim(1);
        auto et = use_calendar ? temporal(times, B, L) : Tensor<T>::zeros({B, L, day_table.dim(1)});
        return perceive(xs, et);
    }
};

}  // namespace usts
