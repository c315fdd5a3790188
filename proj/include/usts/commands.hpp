#pragma once

// The pipeline behind each command-line verb. Every command writes into an
// output workspace directory and records its effective configuration there.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "usts/checkpoint.hpp"
#include "usts/config.hpp"
#include "usts/trainer.hpp"

namespace usts::cmd {

namespace fs = std::filesystem;

inline constexpr const char* kDatasetFile = "dataset.bin";
inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kConfigFile = "config.json";

/// Output directory plus the lookup rule for relative inputs: the working
/// directory first, then the workspace.
class Workspace {
public:
    explicit Workspace(fs::path root) : root_(std::move(root)) {
        std::error_code ec;
        fs::create_directories(root_, ec);
        if (ec) throw IoError("cannot create output directory '" + root_.string() + "': " + ec.message());
    }

    const fs::path& root() const { return root_; }
    fs::path output(const std::string& name) const { return root_ / name; }

    fs::path input(const std::string& p) const {
        const fs::path path(p);
        if (path.is_absolute() || fs::exists(path)) return path;
        if (fs::exists(root_ / path)) return root_ / path;
        throw IoError("input '" + p + "' not found (also looked in '" + root_.string() + "')");
    }

private:
    fs::path root_;
};

// ---------------------------------------------------------------- writers

/// RFC 4180 field: quoted when it holds a comma, quote, CR or LF.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
        if (ch == '"') q += '"';
        q += ch;
    }
    return q + '"';
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Ordered key=value lines.
class Summary {
public:
    template <class V>
    void add(const std::string& key, const V& v) {
        std::ostringstream s;
        if constexpr (std::is_floating_point_v<V>) s << fmt_g(static_cast<double>(v));
        else if constexpr (std::is_same_v<V, bool>) s << (v ? "true" : "false");
        else s << v;
        lines_.emplace_back(key, s.str());
    }
    std::string text() const {
        std::string out;
        for (const auto& [k, v] : lines_) out += k + "=" + v + "\n";
        return out;
    }
    const std::vector<std::pair<std::string, std::string>>& lines() const { return lines_; }

private:
    std::vector<std::pair<std::string, std::string>> lines_;
};

inline void write_config(const Workspace& ws, const RunConfig& c) {
    write_text(ws.output(kConfigFile), config::dump(c));
}

/// The configuration a checkpoint was trained with: config.json beside it.
inline RunConfig config_for_checkpoint(const fs::path& ckpt, const std::vector<std::string>& overrides) {
    const auto cfg_path = ckpt.parent_path() / kConfigFile;
    if (!fs::exists(cfg_path)) {
        throw IoError("no " + std::string(kConfigFile) + " next to checkpoint '" + ckpt.string() + "'");
    }
    return config::load(cfg_path.string(), overrides, false);
}

inline std::size_t lora_parameter_count(const ParameterSet<float>& ps) {
    std::size_t n = 0;
    for (const auto& p : ps.all())
        if (ckpt::is_lora(p.name)) n += p.value.numel();
    return n;
}

/// Geometry comes from the data, not the file.
inline void adopt_geometry(RunConfig& c, const data::NodeSeries& s) {
    c.model.nodes = s.nodes;
    c.model.channels = s.channels;
}

// ---------------------------------------------------------------- prepare

inline Summary prepare(const RunConfig& cfg, const std::string& input, const Workspace& ws) {
    cfg.validate();
    const auto loaded = data::load_records(ws.input(input).string(), data::ColumnMap{});
    const auto series = data::prepare_series(loaded.records, cfg.prepare_options());
    data::save_cache(ws.output(kDatasetFile).string(), series);
    write_config(ws, cfg);
    Summary s;
    s.add("lines", loaded.lines);
    s.add("malformed", loaded.malformed);
    s.add("merged_duplicates", loaded.merged_duplicates);
    s.add("steps", series.steps);
    s.add("nodes", series.nodes);
    s.add("channels", series.channels);
    s.add("interpolated", std::count(series.interp.begin(), series.interp.end(), 1));
    s.add("degenerate", std::count(series.degenerate.begin(), series.degenerate.end(), 1));
    s.add("config_hash", config::hash(cfg));
    write_text(ws.output("prepare_summary.txt"), s.text());
    return s;
}

// ------------------------------------------------------------------ train

inline std::vector<MetricReport> test_metrics(const Model<float>& m, const data::NodeSeries& s, const RunConfig& c) {
    return {evaluate_split(m, s, data::Split::Test, Task::Predict, c.eval_options()),
            evaluate_split(m, s, data::Split::Test, Task::Impute, c.eval_options())};
}

inline std::string metrics_csv(const std::vector<MetricReport>& reports) {
    std::ostringstream out;
    write_metrics_csv(out, reports);
    return out.str();
}

/// Fits a model on the cached dataset and writes the checkpoint, loss
/// curves, test metrics and a run summary.
inline Summary train(RunConfig cfg, const std::string& data_path, const Workspace& ws,
                     Ablation ablation = Ablation::None) {
    const auto started = std::chrono::steady_clock::now();
    const auto series = data::load_cache(ws.input(data_path).string());
    adopt_geometry(cfg, series);
    cfg.model = ablate(cfg.model, ablation);
    cfg.validate();
    write_config(ws, cfg);

    Model<float> model(cfg.model, cfg.init_seed);
    const auto state = fit(model, series, cfg.train_config());
    ckpt::save(model.params, ws.output(kCheckpointFile).string());
    {
        std::ostringstream t, e;
        write_trajectory_csv(t, state);
        write_epochs_csv(e, state);
        write_text(ws.output("trajectory.csv"), t.str());
        write_text(ws.output("epochs.csv"), e.str());
    }
    const auto reports = test_metrics(model, series, cfg);
    write_text(ws.output("metrics.csv"), metrics_csv(reports));

    Summary s;
    s.add("command", "train");
    s.add("ablation", ablation_name(ablation));
    s.add("seed", cfg.train.seed);
    s.add("init_seed", cfg.init_seed);
    s.add("config_hash", config::hash(cfg));
    s.add("params_total", model.params.count(false));
    s.add("params_trainable", model.params.count(true));
    s.add("params_lora", lora_parameter_count(model.params));
    s.add("steps", state.steps.size());
    s.add("epochs", state.epochs.size());
    s.add("best_epoch", state.best_epoch);
    s.add("best_val_loss", state.best_val);
    s.add("stopped_early", state.stopped_early);
    s.add("final_train_loss", state.steps.empty() ? 0.0 : state.steps.back().loss_total);
    for (const auto& r : reports) {
        s.add(std::string("test_") + task_name(r.task) + "_mae", r.macro.mae);
        s.add(std::string("test_") + task_name(r.task) + "_rmse", r.macro.rmse);
    }
    s.add("train_seconds", state.wall_seconds);
    s.add("wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    write_text(ws.output("summary.txt"), s.text());
    return s;
}

// ------------------------------------------------------------------- eval

inline std::unique_ptr<Model<float>> load_model(const RunConfig& cfg, const fs::path& ckpt_path) {
    auto m = std::make_unique<Model<float>>(cfg.model, cfg.init_seed);
    ckpt::load(m->params, ckpt_path.string(), cfg.init_seed);
    return m;
}

inline std::vector<Task> tasks_from(const std::string& which) {
    if (which == "both") return {Task::Predict, Task::Impute};
    return {parse_task(which)};
}

inline std::string eval(const std::string& data_path, const std::string& ckpt_path, const std::string& task,
                        const std::vector<std::string>& overrides, const Workspace& ws, data::Split split = data::Split::Test) {
    const auto ckpt = ws.input(ckpt_path);
    auto cfg = config_for_checkpoint(ckpt, overrides);
    const auto series = data::load_cache(ws.input(data_path).string());
    auto model = load_model(cfg, ckpt);
    std::vector<MetricReport> reports;
    for (Task t : tasks_from(task)) reports.push_back(evaluate_split(*model, series, split, t, cfg.eval_options()));
    const auto csv = metrics_csv(reports);
    write_text(ws.output("eval_metrics.csv"), csv);
    return csv;
}

// --------------------------------------------------------------- zero-shot

inline std::string zeroshot(const std::string& source_ckpt, const std::string& target_data, const std::string& task,
                            const std::vector<std::string>& overrides, const Workspace& ws) {
    const auto ckpt = ws.input(source_ckpt);
    auto cfg = config_for_checkpoint(ckpt, overrides);
    const auto target = data::load_cache(ws.input(target_data).string());
    auto model = load_model(cfg, ckpt);
    std::vector<MetricReport> reports;
    for (Task t : tasks_from(task)) reports.push_back(zero_shot(*model, target, t, cfg.zero_shot_options()));
    const auto csv = metrics_csv(reports);
    write_text(ws.output("zeroshot_metrics.csv"), csv);
    write_config(ws, cfg);
    return csv;
}

// ------------------------------------------------------------------- dump

enum class DumpKind { Attention, Features, Adjacency, Bias };

inline DumpKind parse_dump(const std::string& what) {
    if (what == "attention") return DumpKind::Attention;
    if (what == "features") return DumpKind::Features;
    if (what == "adjacency") return DumpKind::Adjacency;
    if (what == "bias") return DumpKind::Bias;
    throw UsageError("unknown dump '" + what + "' (expected attention|features|adjacency|bias)");
}

inline std::string matrix_header(const std::string& lead, char prefix, std::size_t n) {
    std::string h = lead;
    for (std::size_t j = 0; j < n; ++j) h += (h.empty() ? "" : ",") + std::string(1, prefix) + std::to_string(j);
    return h + "\n";
}

struct DumpArgs {
    std::string what;
    std::string ckpt;
    std::string data;        // not needed for adjacency
    std::size_t sample = 0;  // test window index
    std::string task = "predict";
    std::string out;         // file name inside the workspace
};

/// Writes one CSV and returns its path.
inline fs::path dump(const DumpArgs& a, const std::vector<std::string>& overrides, const Workspace& ws) {
    const auto kind = parse_dump(a.what);
    const auto ckpt = ws.input(a.ckpt);
    auto cfg = config_for_checkpoint(ckpt, overrides);
    auto model = load_model(cfg, ckpt);
    const auto& c = model->config;
    std::ostringstream out;

    if (kind == DumpKind::Adjacency) {
        const auto& v = model->bias.adjacency.values();
        const std::size_t N = c.nodes;
        out << matrix_header("", 'n', N);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) out << fmt_g(v[i * N + j]) << (j + 1 < N ? ',' : '\n');
    } else {
        if (a.data.empty()) throw UsageError("dump '" + a.what + "' needs --data");
        const auto series = data::load_cache(ws.input(a.data).string());
        check_geometry(*model, series);
        const auto w = window_spec(c, cfg.train.stride);
        const auto test = data::split_and_window(series, w).test;
        if (test.empty()) throw EmptyDatasetError("test split has no windows");
        const Task task = parse_task(a.task);
        Rng mask_rng(cfg.eval_seed);
        NoGradGuard ng;
        auto run = [&](const std::vector<std::size_t>& starts, BackboneTrace<float>* trace) {
            const auto b = data::make_batch(series, starts, w);
            auto x = to_tensor<float>(b.x, {b.size, c.history, c.nodes, c.channels});
            const auto mask = batch_mask(b.size, c, cfg.mask, mask_rng);
            ForwardOptions<float> opt;
            opt.trace = trace;
            return model->forward(task, x, task == Task::Impute ? &mask : nullptr, b.times, opt);
        };
        if (kind == DumpKind::Features) {
            const std::size_t d = c.d_model, L = c.history;
            TemporalCalendar cal = TemporalCalendar::from(c);
            out << "hour_of_week";
            for (std::size_t j = 0; j < d; ++j) out << ",f" << j;
            out << '\n';
            for (std::size_t start : test) {
                BackboneTrace<float> trace;
                run({start}, &trace);
                const auto& h = trace.hidden.front().values();
                for (std::size_t l = 0; l < L; ++l) {
                    out << cal.hour_of_week(series.start_step + static_cast<std::int64_t>(start + l));
                    for (std::size_t j = 0; j < d; ++j) out << ',' << fmt_g(h[l * d + j]);
                    out << '\n';
                }
            }
        } else {
            if (a.sample >= test.size()) {
                throw UsageError("--sample " + std::to_string(a.sample) + " out of range (test split has " +
                                 std::to_string(test.size()) + " windows)");
            }
            BackboneTrace<float> trace;
            const auto r = run({test[a.sample]}, &trace);
            const std::size_t L = c.history;
            if (kind == DumpKind::Bias) {
                if (!r.bias.defined()) throw ConfigError("bias injection is disabled for this model");
                const auto& v = r.bias.values();
                out << matrix_header("", 'k', L);
                for (std::size_t i = 0; i < L; ++i)
                    for (std::size_t j = 0; j < L; ++j) out << fmt_g(v[i * L + j]) << (j + 1 < L ? ',' : '\n');
            } else {
                out << matrix_header("layer,query", 'k', L);
                for (std::size_t layer = 0; layer < trace.attention.size(); ++layer) {
                    const auto& p = trace.attention[layer].values();  // [1, H, L, L]
                    const std::size_t H = trace.attention[layer].dim(1);
                    for (std::size_t i = 0; i < L; ++i) {
                        out << layer << ',' << i;
                        for (std::size_t j = 0; j < L; ++j) {
                            double m = 0;
                            for (std::size_t hh = 0; hh < H; ++hh) m += p[(hh * L + i) * L + j];
                            out << ',' << fmt_g(m / static_cast<double>(H));
                        }
                        out << '\n';
                    }
                }
            }
        }
    }
    const auto path = ws.output(a.out.empty() ? a.what + ".csv" : a.out);
    write_text(path, out.str());
    return path;
}

}  // namespace usts::cmd
