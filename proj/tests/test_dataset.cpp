#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "usts/dataset.hpp"

using namespace usts;
using namespace usts::data;

namespace {
LoadResult parse(const std::string& text) {
    std::istringstream in(text);
    return parse_records(in, ColumnMap{});
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("usts_test_" + name)).string();
}
}  // namespace

TEST(LoadRecords, ParsesFixtureLine) {
    auto r = parse("42\t1383260400000\t39\t\t\t\t\t1.5\n");
    ASSERT_EQ(r.records.size(), 1u);
    const auto& rec = r.records[0];
    EXPECT_EQ(rec.square_id, 42);
    EXPECT_EQ(rec.timestamp_ms, 1383260400000);
    EXPECT_TRUE(rec.present[4]);
    EXPECT_EQ(rec.values[4], 1.5);
    for (int c = 0; c < 4; ++c) EXPECT_FALSE(rec.present[c]);
}

TEST(LoadRecords, EmptyInputIsEmptyDatasetError) { EXPECT_THROW(parse(""), EmptyDatasetError); }

TEST(LoadRecords, MissingFileIsIoError) {
    EXPECT_THROW(load_records("/nonexistent/usts/none.tsv", ColumnMap{}), IoError);
}

TEST(LoadRecords, DuplicatesAreSummed) {
    auto r = parse("42\t1383260400000\t39\t1.0\n42\t1383260400000\t40\t2.0\n");
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].values[0], 3.0);
    EXPECT_EQ(r.merged_duplicates, 1u);
}

TEST(LoadRecords, MalformedLinesAreCountedAndTimestampsAligned) {
    auto r = parse("x\t1\t\t1\n7\tnope\n7\t1383260460000\t39\t-1\t2\n");
    EXPECT_EQ(r.malformed, 2u);
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].timestamp_ms % kIntervalMs, 0);
    EXPECT_FALSE(r.records[0].present[0]);  // negative value counts as absent
    EXPECT_TRUE(r.records[0].present[1]);
}

TEST(Cluster, OneClusterPerCellIsIdentityAggregation) {
    GridSpec grid{4, 1};
    std::vector<std::int64_t> cells = {1, 2, 3, 4, 5, 6, 7, 8};
    auto map = cluster_cells(cells, cells.size(), grid, 3);
    std::set<std::size_t> nodes;
    for (auto& [c, n] : map.cell_to_node) nodes.insert(n);
    EXPECT_EQ(nodes.size(), cells.size());
    // Ordering by (row, col) of a singleton centroid reproduces the row-major id order.
    for (std::size_t i = 0; i < cells.size(); ++i) EXPECT_EQ(map.cell_to_node.at(cells[i]), i);
}

TEST(Cluster, FourCornersSplitAlongLongerAxis) {
    // Corners of a 2 x 6 rectangle on a width-10 grid: (0,0), (0,5), (1,0), (1,5).
    GridSpec grid{10, 0};
    std::vector<std::int64_t> cells = {0, 5, 10, 15};
    // Oracle: brute force over every 2-partition, minimizing within-cluster scatter.
    double best = 1e300;
    unsigned best_mask = 0;
    for (unsigned mask = 1; mask < 8; ++mask) {  // cell 3 fixed in the second cluster
        double cost = 0;
        for (int side = 0; side < 2; ++side) {
            std::vector<CellCoord> pts;
            for (int i = 0; i < 4; ++i)
                if (((mask >> i) & 1u) == static_cast<unsigned>(side == 0)) pts.push_back(cell_coord(cells[i], grid));
            if (pts.empty()) cost = 1e300;
            double r = 0, c = 0;
            for (auto& p : pts) r += p.row, c += p.col;
            r /= static_cast<double>(pts.size()), c /= static_cast<double>(pts.size());
            for (auto& p : pts) cost += (p.row - r) * (p.row - r) + (p.col - c) * (p.col - c);
        }
        if (cost < best) best = cost, best_mask = mask;
    }
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto map = cluster_cells(cells, 2, grid, seed);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                const bool same_oracle = ((best_mask >> i) & 1u) == ((best_mask >> j) & 1u);
                EXPECT_EQ(map.cell_to_node.at(cells[i]) == map.cell_to_node.at(cells[j]), same_oracle);
            }
    }
    // The split separates the two columns.
    auto map = cluster_cells(cells, 2, grid, 0);
    EXPECT_EQ(map.cell_to_node.at(0), map.cell_to_node.at(10));
    EXPECT_NE(map.cell_to_node.at(0), map.cell_to_node.at(5));
}

TEST(Cluster, SameSeedIsReproducible) {
    GridSpec grid{20, 1};
    std::vector<std::int64_t> cells;
    for (std::int64_t i = 1; i <= 400; i += 3) cells.push_back(i);
    auto a = cluster_cells(cells, 12, grid, 42);
    auto b = cluster_cells(cells, 12, grid, 42);
    EXPECT_EQ(a.cell_to_node, b.cell_to_node);
}

TEST(Cluster, TooFewCellsIsConfigError) {
    EXPECT_THROW(cluster_cells({1, 2, 3}, 4, GridSpec{}, 0), ConfigError);
}

TEST(Cluster, IndicesFollowCentroidOrder) {
    GridSpec grid{30, 1};
    std::vector<std::int64_t> cells;
    for (std::int64_t i = 1; i <= 900; ++i) cells.push_back(i);
    auto map = cluster_cells(cells, 9, grid, 1);
    for (std::size_t i = 1; i < map.nodes(); ++i) {
        const auto& a = map.centroids[i - 1];
        const auto& b = map.centroids[i];
        EXPECT_TRUE(a.row < b.row || (a.row == b.row && a.col <= b.col));
    }
}

TEST(Normalize, MedianExamples) {
    auto s = NodeSeries::empty(3, 1, 1);
    s.values = {1, 2, 3};
    median_normalize(s, 3);
    EXPECT_EQ(s.median[0], 2.0);
    EXPECT_EQ(s.values, (std::vector<float>{0.5f, 1.0f, 1.5f}));

    auto eq = NodeSeries::empty(4, 1, 1);
    eq.values = {7, 7, 7, 7};
    median_normalize(eq, 4);
    for (float v : eq.values) EXPECT_EQ(v, 1.0f);
}

TEST(Normalize, RoundTrip) {
    auto s = NodeSeries::empty(5, 2, 1);
    s.values = {1, 10, 2, 20, 3.5f, 33, 4, 41, 5, 52};
    const auto orig = s.values;
    median_normalize(s, 4);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t n = 0; n < 2; ++n)
            EXPECT_NEAR(s.denormalize(s.at(t, n, 0), n, 0), orig[s.index(t, n, 0)], 1e-6 * orig[s.index(t, n, 0)]);
}

TEST(Normalize, UsesTrainingRangeOnly) {
    auto s = NodeSeries::empty(4, 1, 1);
    s.values = {2, 2, 100, 100};
    median_normalize(s, 2);
    EXPECT_EQ(s.median[0], 2.0);
}

TEST(Normalize, ZeroMedianFallsBackAndAllZeroIsDegenerate) {
    auto s = NodeSeries::empty(5, 2, 1);
    s.values = {0, 0, 0, 0, 0, 0, 3, 0, 5, 0};
    median_normalize(s, 5);
    EXPECT_EQ(s.median[0], 3.0);
    EXPECT_EQ(s.degenerate[0], 0);
    EXPECT_EQ(s.degenerate[1], 1);
    EXPECT_EQ(s.median[1], 1.0);
}

TEST(Interpolate, Examples) {
    auto s = NodeSeries::empty(3, 1, 1);
    s.values = {1, 0, 3};
    s.observed = {1, 0, 1};
    interpolate_missing(s);
    EXPECT_EQ(s.values, (std::vector<float>{1, 2, 3}));
    EXPECT_EQ(s.interp, (std::vector<std::uint8_t>{0, 1, 0}));

    auto full = NodeSeries::empty(3, 1, 1);
    full.values = {4, 5, 6};
    interpolate_missing(full);
    EXPECT_EQ(full.values, (std::vector<float>{4, 5, 6}));
    EXPECT_EQ(full.interp, (std::vector<std::uint8_t>{0, 0, 0}));

    auto edges = NodeSeries::empty(3, 1, 1);
    edges.values = {0, 5, 0};
    edges.observed = {0, 1, 0};
    interpolate_missing(edges);
    EXPECT_EQ(edges.values, (std::vector<float>{5, 5, 5}));
    EXPECT_EQ(edges.interp, (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(Interpolate, UnobservedSeriesNamesNode) {
    auto s = NodeSeries::empty(2, 2, 1);
    s.observed = {1, 0, 1, 0};
    try {
        interpolate_missing(s);
        FAIL();
    } catch (const DegenerateNodeError& e) {
        EXPECT_NE(std::string(e.what()).find("node 1"), std::string::npos);
    }
}

TEST(Split, BoundariesFollowEightOneOne) {
    auto b = split_bounds(100);
    EXPECT_EQ(b.train_end, 80u);
    EXPECT_EQ(b.val_end, 90u);
}

TEST(Split, WindowCounts) {
    WindowSpec w{288, 144, 1};
    EXPECT_THROW(window_starts(0, 431, w, "train"), ConfigError);
    EXPECT_EQ(window_starts(0, 432, w, "train").size(), 1u);
    EXPECT_EQ(window_starts(10, 10 + 288 + 144 + 2, w, "val").size(), 3u);
    WindowSpec def{4, 2, 0};
    EXPECT_EQ(window_starts(0, 12, def, "train"), (std::vector<std::size_t>{0, 2, 4, 6}));
}

TEST(Split, ShortSegmentErrorNamesIt) {
    auto s = NodeSeries::empty(100, 1, 1);
    try {
        split_and_window(s, WindowSpec{8, 4, 1});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("'val'"), std::string::npos);
    }
}

TEST(Split, SegmentsAreDisjointAndOrdered) {
    auto s = NodeSeries::empty(400, 1, 1);
    WindowSpec w{12, 6, 1};
    auto sets = split_and_window(s, w);
    auto b = split_bounds(400);
    std::size_t max_train = 0, min_val = SIZE_MAX, max_val = 0, min_test = SIZE_MAX;
    for (auto t : sets.train) max_train = std::max(max_train, t + w.history + w.horizon - 1);
    for (auto t : sets.val) min_val = std::min(min_val, t), max_val = std::max(max_val, t + w.history + w.horizon - 1);
    for (auto t : sets.test) min_test = std::min(min_test, t);
    EXPECT_LT(max_train, min_val);
    EXPECT_LT(max_val, min_test);
    EXPECT_LT(max_train, b.train_end);
    EXPECT_GE(min_val, b.train_end);
    EXPECT_GE(min_test, b.val_end);
}

TEST(Batch, ContiguousHistoryAndFuture) {
    auto s = NodeSeries::empty(10, 1, 1);
    for (std::size_t t = 0; t < 10; ++t) s.values[t] = static_cast<float>(t);
    s.start_step = 100;
    auto b = make_batch(s, {2}, WindowSpec{3, 2, 0});
    EXPECT_EQ(b.x, (std::vector<float>{2, 3, 4}));
    EXPECT_EQ(b.y, (std::vector<float>{5, 6}));
    EXPECT_EQ(b.times, (std::vector<std::int64_t>{102, 103, 104}));
}

TEST(Mask, DegenerateRates) {
    std::mt19937_64 rng(1);
    auto none = gen_mask(4, 3, 2, MaskOptions{0, 0}, rng);
    for (auto m : none.mask) EXPECT_EQ(m, 1);
    auto all = gen_mask(4, 3, 2, MaskOptions{1, 1}, rng);
    for (auto m : all.mask) EXPECT_EQ(m, 0);
}

TEST(Mask, InvalidRangeIsConfigError) {
    std::mt19937_64 rng(1);
    EXPECT_THROW(gen_mask(1, 1, 1, MaskOptions{0.8, 0.7}, rng), ConfigError);
    EXPECT_THROW(gen_mask(1, 1, 1, MaskOptions{-0.1, 0.5}, rng), ConfigError);
}

TEST(Mask, EmpiricalRateMatchesFixedProbability) {
    std::mt19937_64 rng(2024);
    auto d = gen_mask(1000, 100, 10, MaskOptions{0.75, 0.75}, rng);
    const double rate = static_cast<double>(std::count(d.mask.begin(), d.mask.end(), 0)) / 1e6;
    EXPECT_NEAR(rate, 0.75, 0.01);
}

TEST(Mask, RateWithinThreeSigmaOfDrawRange) {
    std::mt19937_64 rng(5);
    MaskOptions o{0.70, 0.80};
    for (int trial = 0; trial < 200; ++trial) {
        auto d = gen_mask(24, 8, 2, o, rng);
        const double n = static_cast<double>(d.mask.size());
        const double rate = static_cast<double>(std::count(d.mask.begin(), d.mask.end(), 0)) / n;
        const double sigma = std::sqrt(0.25 / n);
        EXPECT_GE(rate, o.r_min - 3 * sigma);
        EXPECT_LE(rate, o.r_max + 3 * sigma);
        EXPECT_GE(d.rate, o.r_min);
        EXPECT_LE(d.rate, o.r_max);
    }
}

TEST(Mask, BlockModeKeepsRateAndFormsRuns) {
    std::mt19937_64 rng(9);
    MaskOptions o{0.75, 0.75, true, 8.0};
    auto d = gen_mask(20000, 5, 1, o, rng);
    const double rate = static_cast<double>(std::count(d.mask.begin(), d.mask.end(), 0)) / static_cast<double>(d.mask.size());
    EXPECT_NEAR(rate, 0.75, 0.03);
    std::size_t switches = 0;
    for (std::size_t t = 1; t < 20000; ++t) switches += d.mask[t * 5] != d.mask[(t - 1) * 5];
    EXPECT_LT(switches, 20000u / 4);
}

TEST(Cache, RoundTripAndTruncation) {
    auto s = synthetic_series({});
    s.observed[3] = 0;
    s.interp[3] = 1;
    s.degenerate[1] = 1;
    const auto bytes = encode_cache(s);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "USTS");
    auto back = decode_cache(bytes);
    EXPECT_EQ(back.values, s.values);
    EXPECT_EQ(back.median, s.median);
    EXPECT_EQ(back.observed, s.observed);
    EXPECT_EQ(back.interp, s.interp);
    EXPECT_EQ(back.degenerate, s.degenerate);
    EXPECT_EQ(back.cells, s.cells);
    EXPECT_EQ(encode_cache(back), bytes);

    auto cut = bytes;
    cut.resize(bytes.size() / 2);
    try {
        decode_cache(cut);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
    }
}

TEST(Pipeline, TsvToNormalizedSeries) {
    const auto path = temp_path("pipeline.tsv");
    write_synthetic_tsv(path, 6, 4, 200, 24, 3, 0.5);
    auto loaded = load_records(path, ColumnMap{});
    PrepareOptions o;
    o.grid = {6, 1};
    o.clusters = 5;
    o.channels = {0, 4};
    auto s = prepare_series(loaded.records, o);
    EXPECT_EQ(s.nodes, 5u);
    EXPECT_EQ(s.channels, 2u);
    EXPECT_EQ(s.steps, 200u);
    EXPECT_EQ(s.start_step, 1383260400000 / kIntervalMs);
    EXPECT_GT(std::count(s.interp.begin(), s.interp.end(), 1), 0);
    for (double m : s.median) EXPECT_GT(m, 0);
    for (std::size_t i = 0; i < s.interp.size(); ++i) EXPECT_EQ(s.interp[i], s.observed[i] ? 0 : 1);
    std::remove(path.c_str());
}
