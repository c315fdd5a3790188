#pragma once

// Telecom grid ingestion and preparation: TSV records -> spatial clusters ->
// dense node series -> interpolation -> median normalization -> windows and
// masks. Everything downstream of construction is immutable.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <spdlog/spdlog.h>

#include "usts/binary_io.hpp"
#include "usts/error.hpp"

namespace usts::data {

inline constexpr std::int64_t kIntervalMs = 10 * 60 * 1000;
inline constexpr std::size_t kChannelCount = 5;
inline constexpr std::array<std::string_view, kChannelCount> kChannelNames = {"sms_in", "sms_out", "call_in",
                                                                              "call_out", "internet"};

inline std::size_t channel_index(std::string_view name) {
    for (std::size_t i = 0; i < kChannelCount; ++i)
        if (kChannelNames[i] == name) return i;
    throw ConfigError("unknown channel '" + std::string(name) + "'");
}

// ------------------------------------------------------------------ records

/// Which TSV column holds what. Channel columns set to -1 are absent.
struct ColumnMap {
    int square_id = 0;
    int timestamp = 1;
    std::array<int, kChannelCount> channels = {3, 4, 5, 6, 7};
};

struct RawActivityRecord {
    std::int64_t square_id = 0;
    std::int64_t timestamp_ms = 0;  // aligned down to a 10-minute boundary
    std::array<double, kChannelCount> values{};
    std::array<bool, kChannelCount> present{};
};

struct LoadResult {
    std::vector<RawActivityRecord> records;  // sorted by (square_id, timestamp_ms)
    std::size_t lines = 0;
    std::size_t malformed = 0;
    std::size_t merged_duplicates = 0;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) break;
        start = tab + 1;
    }
    return out;
}

template <class V>
bool parse_number(std::string_view s, V& out) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace detail

/// Parses one record per line. Lines with an unreadable id or timestamp are
/// counted as malformed and skipped; empty or negative channel fields are
/// treated as absent. Records sharing (square_id, aligned timestamp) are summed.
inline LoadResult parse_records(std::istream& in, const ColumnMap& columns) {
    std::map<std::pair<std::int64_t, std::int64_t>, RawActivityRecord> merged;
    LoadResult result;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++result.lines;
        const auto fields = detail::split_tabs(line);
        auto field = [&](int col) -> std::string_view {
            return col >= 0 && static_cast<std::size_t>(col) < fields.size() ? fields[static_cast<std::size_t>(col)]
                                                                             : std::string_view{};
        };
        RawActivityRecord rec;
        if (!detail::parse_number(field(columns.square_id), rec.square_id) ||
            !detail::parse_number(field(columns.timestamp), rec.timestamp_ms) || rec.timestamp_ms < 0) {
            ++result.malformed;
            continue;
        }
        rec.timestamp_ms -= rec.timestamp_ms % kIntervalMs;
        for (std::size_t c = 0; c < kChannelCount; ++c) {
            double v = 0;
            if (detail::parse_number(field(columns.channels[c]), v) && std::isfinite(v) && v >= 0) {
                rec.values[c] = v;
                rec.present[c] = true;
            }
        }
        auto [it, inserted] = merged.try_emplace({rec.square_id, rec.timestamp_ms}, rec);
        if (!inserted) {
            ++result.merged_duplicates;
            for (std::size_t c = 0; c < kChannelCount; ++c) {
                if (!rec.present[c]) continue;
                it->second.values[c] += rec.values[c];
                it->second.present[c] = true;
            }
        }
    }
    if (merged.empty()) throw EmptyDatasetError("no valid records (" + std::to_string(result.malformed) + " malformed lines)");
    result.records.reserve(merged.size());
    for (auto& [key, rec] : merged) result.records.push_back(rec);
    if (result.malformed > 0) spdlog::warn("skipped {} malformed line(s) of {}", result.malformed, result.lines);
    return result;
}

inline LoadResult load_records(const std::string& path, const ColumnMap& columns) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return parse_records(in, columns);
}

// ---------------------------------------------------------------- clustering

struct GridSpec {
    std::size_t width = 100;  // cells per row
    std::int64_t origin = 1;  // id of the top-left cell
};

struct CellCoord {
    double row = 0;
    double col = 0;
};

inline CellCoord cell_coord(std::int64_t square_id, const GridSpec& grid) {
    const std::int64_t k = square_id - grid.origin;
    const auto w = static_cast<std::int64_t>(grid.width);
    return {static_cast<double>(k / w), static_cast<double>(k % w)};
}

struct NodeIndexMap {
    std::map<std::int64_t, std::size_t> cell_to_node;
    std::vector<CellCoord> centroids;  // by node index
    std::size_t nodes() const { return centroids.size(); }
};

/// K-means on grid coordinates with k-means++ seeding and at most 100 Lloyd
/// iterations. Clusters are re-indexed by (row, col) of their centroid so
/// neighbouring clusters get neighbouring indices.
inline NodeIndexMap cluster_cells(const std::vector<std::int64_t>& cells, std::size_t k, const GridSpec& grid,
                                  std::uint64_t seed, std::size_t max_iter = 100) {
    std::vector<std::int64_t> ids(cells);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (k == 0 || ids.size() < k) {
        throw ConfigError("cannot form " + std::to_string(k) + " clusters from " + std::to_string(ids.size()) +
                          " distinct cells");
    }
    const std::size_t n = ids.size();
    std::vector<CellCoord> pts(n);
    for (std::size_t i = 0; i < n; ++i) pts[i] = cell_coord(ids[i], grid);
    auto dist2 = [](const CellCoord& a, const CellCoord& b) {
        return (a.row - b.row) * (a.row - b.row) + (a.col - b.col) * (a.col - b.col);
    };

    std::mt19937_64 rng(seed);
    std::vector<CellCoord> centers;
    centers.push_back(pts[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    while (centers.size() < k) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], dist2(pts[i], centers.back()));
            total += d2[i];
        }
        std::size_t pick = n;
        const double u = std::uniform_real_distribution<double>(0, total)(rng);
        double acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
            acc += d2[i];
            if (d2[i] > 0) pick = i;
            if (u < acc) break;
        }
        if (pick == n) throw ConfigError("k-means++ seeding ran out of distinct cells");
        centers.push_back(pts[pick]);
    }

    std::vector<std::size_t> assign(n, k);
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = dist2(pts[i], centers[0]);
            for (std::size_t c = 1; c < k; ++c) {
                const double d = dist2(pts[i], centers[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<CellCoord> sum(k);
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sum[assign[i]].row += pts[i].row;
            sum[assign[i]].col += pts[i].col;
            ++count[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] > 0) {
                centers[c] = {sum[c].row / static_cast<double>(count[c]), sum[c].col / static_cast<double>(count[c])};
                continue;
            }
            // Empty cluster: move it to the point farthest from its own center.
            std::size_t far = 0;
            double fd = -1;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = dist2(pts[i], centers[assign[i]]);
                if (d > fd) {
                    fd = d;
                    far = i;
                }
            }
            centers[c] = pts[far];
            assign[far] = c;
            changed = true;
        }
        if (!changed) break;
    }

    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (centers[a].row != centers[b].row) return centers[a].row < centers[b].row;
        if (centers[a].col != centers[b].col) return centers[a].col < centers[b].col;
        return a < b;
    });
    std::vector<std::size_t> rank(k);
    for (std::size_t i = 0; i < k; ++i) rank[order[i]] = i;

    NodeIndexMap map;
    map.centroids.resize(k);
    for (std::size_t c = 0; c < k; ++c) map.centroids[rank[c]] = centers[c];
    for (std::size_t i = 0; i < n; ++i) map.cell_to_node[ids[i]] = rank[assign[i]];
    return map;
}

inline NodeIndexMap cluster_nodes(const std::vector<RawActivityRecord>& records, std::size_t k, const GridSpec& grid,
                                  std::uint64_t seed) {
    std::vector<std::int64_t> ids;
    ids.reserve(records.size());
    for (const auto& r : records) ids.push_back(r.square_id);
    return cluster_cells(ids, k, grid, seed);
}

// ------------------------------------------------------------------- series

/// Dense [T, N, C] series with per-entry provenance.
struct NodeSeries {
    std::size_t steps = 0;
    std::size_t nodes = 0;
    std::size_t channels = 0;
    std::int64_t start_step = 0;                   // absolute 10-minute index of t = 0
    std::vector<float> values;                     // [T, N, C]
    std::vector<std::uint8_t> observed;            // originally present
    std::vector<std::uint8_t> interp;              // filled by interpolation
    std::vector<double> median;                    // [N, C]; 1 until normalized
    std::vector<std::uint8_t> degenerate;          // [N, C]
    std::vector<std::pair<std::int64_t, std::uint32_t>> cells;  // square id -> node
    std::size_t grid_width = 0;

    std::size_t index(std::size_t t, std::size_t n, std::size_t c) const { return (t * nodes + n) * channels + c; }
    float at(std::size_t t, std::size_t n, std::size_t c) const { return values[index(t, n, c)]; }
    double denormalize(double v, std::size_t n, std::size_t c) const { return v * median[n * channels + c]; }

    static NodeSeries empty(std::size_t steps, std::size_t nodes, std::size_t channels) {
        NodeSeries s;
        s.steps = steps;
        s.nodes = nodes;
        s.channels = channels;
        const std::size_t total = steps * nodes * channels;
        s.values.assign(total, 0.f);
        s.observed.assign(total, 1);
        s.interp.assign(total, 0);
        s.median.assign(nodes * channels, 1.0);
        s.degenerate.assign(nodes * channels, 0);
        return s;
    }
};

/// Sums member cells into their clusters. A cluster entry is observed when at
/// least one member cell reported that channel at that time.
inline NodeSeries aggregate(const std::vector<RawActivityRecord>& records, const NodeIndexMap& map,
                            const std::vector<std::size_t>& channels, std::size_t grid_width = 0) {
    if (records.empty()) throw EmptyDatasetError("no records to aggregate");
    std::int64_t t0 = std::numeric_limits<std::int64_t>::max(), t1 = std::numeric_limits<std::int64_t>::min();
    for (const auto& r : records) {
        t0 = std::min(t0, r.timestamp_ms);
        t1 = std::max(t1, r.timestamp_ms);
    }
    const auto steps = static_cast<std::size_t>((t1 - t0) / kIntervalMs + 1);
    NodeSeries s = NodeSeries::empty(steps, map.nodes(), channels.size());
    std::fill(s.observed.begin(), s.observed.end(), 0);
    s.start_step = t0 / kIntervalMs;
    s.grid_width = grid_width;
    std::vector<double> acc(s.values.size(), 0.0);
    for (const auto& r : records) {
        auto it = map.cell_to_node.find(r.square_id);
        if (it == map.cell_to_node.end()) continue;
        const auto t = static_cast<std::size_t>((r.timestamp_ms - t0) / kIntervalMs);
        for (std::size_t c = 0; c < channels.size(); ++c) {
            if (!r.present[channels[c]]) continue;
            const auto i = s.index(t, it->second, c);
            acc[i] += r.values[channels[c]];
            s.observed[i] = 1;
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) s.values[i] = static_cast<float>(acc[i]);
    for (const auto& [cell, node] : map.cell_to_node) s.cells.emplace_back(cell, static_cast<std::uint32_t>(node));
    return s;
}

/// Fills every unobserved entry: linear between the surrounding observations,
/// nearest observation at the edges. Filled entries are flagged in `interp`.
inline void interpolate_missing(NodeSeries& s) {
    std::vector<std::string> empty_series;
    for (std::size_t n = 0; n < s.nodes; ++n)
        for (std::size_t c = 0; c < s.channels; ++c) {
            std::vector<std::size_t> obs;
            for (std::size_t t = 0; t < s.steps; ++t)
                if (s.observed[s.index(t, n, c)]) obs.push_back(t);
            if (obs.empty()) {
                empty_series.push_back("node " + std::to_string(n) + " channel " + std::to_string(c));
                continue;
            }
            for (std::size_t t = 0; t < s.steps; ++t) {
                const auto i = s.index(t, n, c);
                s.interp[i] = 0;
                if (s.observed[i]) continue;
                s.interp[i] = 1;
                auto hi = std::lower_bound(obs.begin(), obs.end(), t);
                if (hi == obs.begin()) {
                    s.values[i] = s.at(obs.front(), n, c);
                } else if (hi == obs.end()) {
                    s.values[i] = s.at(obs.back(), n, c);
                } else {
                    const std::size_t t_hi = *hi, t_lo = *(hi - 1);
                    const double w = static_cast<double>(t - t_lo) / static_cast<double>(t_hi - t_lo);
                    s.values[i] = static_cast<float>((1 - w) * s.at(t_lo, n, c) + w * s.at(t_hi, n, c));
                }
            }
        }
    if (!empty_series.empty()) {
        std::string list;
        for (const auto& e : empty_series) list += (list.empty() ? "" : ", ") + e;
        throw DegenerateNodeError("series without any observation: " + list);
    }
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

/// Divides every (node, channel) series by its median over [0, train_end),
/// using originally observed entries when there are any. A zero median falls
/// back to the smallest positive training value; an all-zero series is
/// flagged degenerate and left unscaled.
inline void median_normalize(NodeSeries& s, std::size_t train_end) {
    train_end = std::min(train_end, s.steps);
    if (train_end == 0) throw ConfigError("empty training range for median normalization");
    for (std::size_t n = 0; n < s.nodes; ++n)
        for (std::size_t c = 0; c < s.channels; ++c) {
            std::vector<double> obs, all;
            for (std::size_t t = 0; t < train_end; ++t) {
                const auto i = s.index(t, n, c);
                all.push_back(s.values[i]);
                if (s.observed[i]) obs.push_back(s.values[i]);
            }
            const auto& pool = obs.empty() ? all : obs;
            double m = median_of(pool);
            const std::size_t k = n * s.channels + c;
            s.degenerate[k] = 0;
            if (m <= 0) {
                double smallest = std::numeric_limits<double>::infinity();
                for (double v : pool)
                    if (v > 0) smallest = std::min(smallest, v);
                if (std::isfinite(smallest)) {
                    spdlog::warn("zero median for node {} channel {}; using smallest positive value {}", n, c, smallest);
                    m = smallest;
                } else {
                    spdlog::warn("node {} channel {} is all zero in the training range; flagged degenerate", n, c);
                    s.degenerate[k] = 1;
                    m = 1.0;
                }
            }
            s.median[k] = m;
            for (std::size_t t = 0; t < s.steps; ++t) {
                auto& v = s.values[s.index(t, n, c)];
                v = static_cast<float>(v / m);
            }
        }
}

/// Reverts a previous normalization and applies the given medians instead.
inline void renormalize(NodeSeries& s, const std::vector<double>& medians) {
    if (medians.size() != s.median.size()) {
        throw ConfigError("median table has " + std::to_string(medians.size()) + " entries, series needs " +
                          std::to_string(s.median.size()));
    }
    for (std::size_t t = 0; t < s.steps; ++t)
        for (std::size_t n = 0; n < s.nodes; ++n)
            for (std::size_t c = 0; c < s.channels; ++c) {
                const std::size_t k = n * s.channels + c;
                auto& v = s.values[s.index(t, n, c)];
                v = static_cast<float>(static_cast<double>(v) * s.median[k] / medians[k]);
            }
    s.median = medians;
}

// ----------------------------------------------------------------- windowing

struct SplitBounds {
    std::size_t train_end = 0;
    std::size_t val_end = 0;
    std::size_t total = 0;
};

/// Chronological 8:1:1 split.
inline SplitBounds split_bounds(std::size_t steps) {
    return {steps * 8 / 10, steps * 9 / 10, steps};
}

enum class Split { Train, Val, Test };

inline std::string_view split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

struct WindowSpec {
    std::size_t history = 288;  // L
    std::size_t horizon = 144;  // S
    std::size_t stride = 0;     // 0 means stride = horizon
};

/// Start indices of every [L + S] window fully inside [begin, end).
inline std::vector<std::size_t> window_starts(std::size_t begin, std::size_t end, const WindowSpec& w,
                                              std::string_view segment) {
    const std::size_t span = w.history + w.horizon;
    const std::size_t stride = w.stride == 0 ? w.horizon : w.stride;
    if (stride == 0) throw ConfigError("window stride must be positive");
    if (end < begin || end - begin < span) {
        throw ConfigError("split segment '" + std::string(segment) + "' has " + std::to_string(end - begin) +
                          " steps, needs at least " + std::to_string(span));
    }
    std::vector<std::size_t> starts;
    for (std::size_t t = begin; t + span <= end; t += stride) starts.push_back(t);
    return starts;
}

struct WindowSets {
    std::vector<std::size_t> train, val, test;
    const std::vector<std::size_t>& get(Split s) const {
        return s == Split::Train ? train : s == Split::Val ? val : test;
    }
};

inline WindowSets split_and_window(const NodeSeries& s, const WindowSpec& w) {
    const auto b = split_bounds(s.steps);
    if (s.steps < w.history + w.horizon) {
        throw ConfigError("series of " + std::to_string(s.steps) + " steps is shorter than one window (" +
                          std::to_string(w.history + w.horizon) + ")");
    }
    return {window_starts(0, b.train_end, w, "train"), window_starts(b.train_end, b.val_end, w, "val"),
            window_starts(b.val_end, b.total, w, "test")};
}

/// Materialized mini-batch: x[B, L, N, C] history, y[B, S, N, C] future.
struct Batch {
    std::size_t size = 0, history = 0, horizon = 0, nodes = 0, channels = 0;
    std::vector<float> x, y;
    std::vector<std::uint8_t> x_interp, y_interp;
    std::vector<std::int64_t> times;  // [B, L] absolute step index of each history position
    std::vector<std::size_t> starts;
};

inline Batch make_batch(const NodeSeries& s, const std::vector<std::size_t>& starts, const WindowSpec& w) {
    Batch b;
    b.size = starts.size();
    b.history = w.history;
    b.horizon = w.horizon;
    b.nodes = s.nodes;
    b.channels = s.channels;
    b.starts = starts;
    const std::size_t frame = s.nodes * s.channels;
    for (std::size_t start : starts) {
        if (start + w.history + w.horizon > s.steps) throw ConfigError("window exceeds series length");
        auto copy = [&](std::size_t from, std::size_t len, std::vector<float>& v, std::vector<std::uint8_t>& f) {
            const auto off = static_cast<std::ptrdiff_t>(from * frame);
            v.insert(v.end(), s.values.begin() + off, s.values.begin() + off + static_cast<std::ptrdiff_t>(len * frame));
            f.insert(f.end(), s.interp.begin() + off, s.interp.begin() + off + static_cast<std::ptrdiff_t>(len * frame));
        };
        copy(start, w.history, b.x, b.x_interp);
        copy(start + w.history, w.horizon, b.y, b.y_interp);
        for (std::size_t l = 0; l < w.history; ++l) b.times.push_back(s.start_step + static_cast<std::int64_t>(start + l));
    }
    return b;
}

// --------------------------------------------------------------------- masks

struct MaskOptions {
    double r_min = 0.70;
    double r_max = 0.80;
    bool block = false;          // contiguous temporal runs instead of independent entries
    double mean_block_len = 6.0;
};

struct MaskDraw {
    std::vector<std::uint8_t> mask;  // 1 = observed, 0 = masked
    double rate = 0;                 // the drawn masking probability p
};

inline void validate(const MaskOptions& o) {
    if (!(o.r_min >= 0 && o.r_max <= 1 && o.r_min <= o.r_max)) {
        throw ConfigError("invalid masking range [" + std::to_string(o.r_min) + ", " + std::to_string(o.r_max) + "]");
    }
    if (o.block && !(o.mean_block_len >= 1)) throw ConfigError("mean block length must be >= 1");
}

/// One sample's mask over [L, N, C]: p ~ U(r_min, r_max), then each entry is
/// masked independently with probability p. Block mode masks temporal runs
/// per (node, channel) with geometric lengths whose stationary rate is p.
inline MaskDraw gen_mask(std::size_t steps, std::size_t nodes, std::size_t channels, const MaskOptions& o,
                         std::mt19937_64& rng) {
    validate(o);
    MaskDraw d;
    d.rate = o.r_min == o.r_max ? o.r_min : std::uniform_real_distribution<double>(o.r_min, o.r_max)(rng);
    const std::size_t total = steps * nodes * channels;
    d.mask.assign(total, 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (!o.block) {
        for (auto& m : d.mask) m = u(rng) < d.rate ? 0 : 1;
        return d;
    }
    if (d.rate <= 0) return d;
    if (d.rate >= 1) {
        std::fill(d.mask.begin(), d.mask.end(), 0);
        return d;
    }
    const double leave_masked = 1.0 / o.mean_block_len;
    const double enter_masked = leave_masked * d.rate / (1.0 - d.rate);
    for (std::size_t n = 0; n < nodes; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
            bool masked = u(rng) < d.rate;
            for (std::size_t t = 0; t < steps; ++t) {
                d.mask[(t * nodes + n) * channels + c] = masked ? 0 : 1;
                masked = masked ? u(rng) >= leave_masked : u(rng) < std::min(1.0, enter_masked);
            }
        }
    return d;
}

// --------------------------------------------------------------- preparation

struct PrepareOptions {
    GridSpec grid;
    std::size_t clusters = 200;
    std::uint64_t seed = 0;
    std::vector<std::size_t> channels = {0, 1, 2, 3, 4};
};

/// Full ingestion pipeline on parsed records.
inline NodeSeries prepare_series(const std::vector<RawActivityRecord>& records, const PrepareOptions& o) {
    auto map = cluster_nodes(records, o.clusters, o.grid, o.seed);
    auto s = aggregate(records, map, o.channels, o.grid.width);
    interpolate_missing(s);
    median_normalize(s, split_bounds(s.steps).train_end);
    return s;
}

// --------------------------------------------------------------------- cache

inline constexpr std::uint32_t kCacheVersion = 1;

/// Layout (little-endian):
///   "USTS" | u32 version | u64 T | u32 N | u32 C | i64 start_step | u32 grid_width
///   | f32 values[T*N*C] | f64 median[N*C]
///   | observed bitmap | interp bitmap (ceil(T*N*C/8) bytes each, LSB first)
///   | degenerate bitmap (ceil(N*C/8) bytes)
///   | u32 cell count | (i64 square_id, u32 node) per cell
inline std::vector<std::uint8_t> encode_cache(const NodeSeries& s) {
    io::Writer w;
    w.str("USTS");
    w.put<std::uint32_t>(kCacheVersion);
    w.put<std::uint64_t>(s.steps);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.nodes));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.channels));
    w.put<std::int64_t>(s.start_step);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.grid_width));
    w.bytes(s.values.data(), s.values.size() * sizeof(float));
    w.bytes(s.median.data(), s.median.size() * sizeof(double));
    for (const auto* bits : {&s.observed, &s.interp, &s.degenerate}) {
        auto packed = io::pack_bits(*bits);
        w.bytes(packed.data(), packed.size());
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.cells.size()));
    for (const auto& [cell, node] : s.cells) {
        w.put<std::int64_t>(cell);
        w.put<std::uint32_t>(node);
    }
    return std::move(w.buffer());
}

inline NodeSeries decode_cache(const std::vector<std::uint8_t>& bytes) {
    io::Reader r(bytes.data(), bytes.size(), "dataset cache");
    if (r.str(4) != "USTS") throw FormatError("dataset cache: bad magic");
    if (const auto v = r.get<std::uint32_t>(); v != kCacheVersion) {
        throw FormatError("dataset cache: unsupported version " + std::to_string(v));
    }
    NodeSeries s;
    s.steps = r.get<std::uint64_t>();
    s.nodes = r.get<std::uint32_t>();
    s.channels = r.get<std::uint32_t>();
    s.start_step = r.get<std::int64_t>();
    s.grid_width = r.get<std::uint32_t>();
    const std::size_t total = s.steps * s.nodes * s.channels;
    s.values.resize(total);
    std::memcpy(s.values.data(), r.take(total * sizeof(float)), total * sizeof(float));
    s.median.resize(s.nodes * s.channels);
    std::memcpy(s.median.data(), r.take(s.median.size() * sizeof(double)), s.median.size() * sizeof(double));
    s.observed = io::unpack_bits(r.take((total + 7) / 8), total);
    s.interp = io::unpack_bits(r.take((total + 7) / 8), total);
    s.degenerate = io::unpack_bits(r.take((s.median.size() + 7) / 8), s.median.size());
    const auto cells = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < cells; ++i) {
        const auto cell = r.get<std::int64_t>();
        s.cells.emplace_back(cell, r.get<std::uint32_t>());
    }
    if (r.remaining() != 0) throw FormatError("dataset cache: " + std::to_string(r.remaining()) + " trailing bytes");
    return s;
}

inline void save_cache(const std::string& path, const NodeSeries& s) { io::write_file(path, encode_cache(s)); }
inline NodeSeries load_cache(const std::string& path) { return decode_cache(io::read_file(path)); }

// ----------------------------------------------------------------- synthetic

struct SyntheticOptions {
    std::size_t nodes = 8;
    std::size_t channels = 1;
    std::size_t steps = 24 * 40;
    std::size_t period = 24;    // steps per day
    double amplitude = 0.5;
    double noise = 0.02;        // relative to each node's base level
    std::uint64_t seed = 0;
};

/// Daily sinusoids with per-node level and phase plus spatially coupled noise
/// (white noise smoothed over a ring graph of the nodes). Returned already
/// median-normalized on its training range.
inline NodeSeries synthetic_series(const SyntheticOptions& o) {
    NodeSeries s = NodeSeries::empty(o.steps, o.nodes, o.channels);
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> level(1.0, 3.0);
    std::normal_distribution<double> white(0.0, 1.0);
    std::vector<double> base(o.nodes * o.channels);
    for (auto& b : base) b = level(rng);
    const double two_pi = 2.0 * 3.14159265358979323846;
    std::vector<double> eps(o.nodes * o.channels);
    for (std::size_t t = 0; t < o.steps; ++t) {
        for (auto& e : eps) e = white(rng);
        for (std::size_t n = 0; n < o.nodes; ++n)
            for (std::size_t c = 0; c < o.channels; ++c) {
                const std::size_t prev = (n + o.nodes - 1) % o.nodes, next = (n + 1) % o.nodes;
                const double coupled = 0.5 * eps[n * o.channels + c] +
                                       0.25 * (eps[prev * o.channels + c] + eps[next * o.channels + c]);
                const double phase = two_pi * (static_cast<double>(t) + static_cast<double>(n)) /
                                     static_cast<double>(o.period);
                const double b = base[n * o.channels + c];
                const double v = b * (1.0 + o.amplitude * std::sin(phase + 0.7 * static_cast<double>(c))) +
                                 b * o.noise * coupled;
                s.values[s.index(t, n, c)] = static_cast<float>(std::max(v, 0.0));
            }
    }
    for (std::size_t n = 0; n < o.nodes; ++n) s.cells.emplace_back(static_cast<std::int64_t>(n), static_cast<std::uint32_t>(n));
    median_normalize(s, split_bounds(s.steps).train_end);
    return s;
}

/// Writes synthetic activity for a width x height grid in the Milan TSV
/// layout (id, epoch ms, country, sms_in, sms_out, call_in, call_out, internet).
/// Roughly `drop` of the entries are left empty to exercise interpolation.
inline void write_synthetic_tsv(const std::string& path, std::size_t width, std::size_t height, std::size_t steps,
                                std::size_t period, std::uint64_t seed, double drop = 0.01) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::int64_t t0 = 1383260400000;  // 2013-11-01 00:00 CET
    const double two_pi = 2.0 * 3.14159265358979323846;
    std::vector<double> level(width * height);
    for (auto& l : level) l = 1.0 + 4.0 * u(rng);
    char buf[64];
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t cell = 0; cell < width * height; ++cell) {
            const std::size_t row = cell / width, col = cell % width;
            out << (cell + 1) << '\t' << (t0 + static_cast<std::int64_t>(t) * kIntervalMs) << "\t39";
            for (std::size_t c = 0; c < kChannelCount; ++c) {
                out << '\t';
                if (u(rng) < drop) continue;
                const double phase = two_pi * (static_cast<double>(t) + 0.5 * static_cast<double>(row + col)) /
                                     static_cast<double>(period);
                const double v = level[cell] * (1.0 + 0.5 * std::sin(phase + 0.4 * static_cast<double>(c))) *
                                 (1.0 + 0.05 * (u(rng) - 0.5));
                std::snprintf(buf, sizeof(buf), "%.6f", v);
                out << buf;
            }
            out << '\n';
        }
}

}  // namespace usts::data
