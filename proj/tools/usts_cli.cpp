// usts: prepare data, train, evaluate, ablate, zero-shot and dump artifacts.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "usts/commands.hpp"

namespace {

std::string one_line(std::string s) {
    for (auto& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

int report(std::string_view code, const std::string& msg, int status) {
    std::fprintf(stderr, "error: code=%.*s msg=%s\n", static_cast<int>(code.size()), code.data(), one_line(msg).c_str());
    return status;
}

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out = ".";
};

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
    if (with_config) {
        sub->add_option("--config", c.config, "JSON run configuration");
        sub->add_option("--set", c.sets, "Override one key, key=value (repeatable)");
    }
    sub->add_option("--out", c.out, "Output workspace directory");
}

usts::RunConfig load_config(const Common& c, const std::vector<std::string>& extra) {
    auto sets = extra;
    sets.insert(sets.end(), c.sets.begin(), c.sets.end());
    return usts::config::load(c.config, sets);
}

void print(const usts::cmd::Summary& s) { std::cout << s.text(); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unified spatio-temporal traffic forecasting and imputation"};
    app.require_subcommand(1);
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

    Common common;
    std::vector<std::string> extra;

    auto* prepare = app.add_subcommand("prepare", "Ingest a telecom activity TSV into a node-series cache");
    std::string input;
    std::size_t grid_width = 0, clusters = 0;
    prepare->add_option("--input", input, "Activity TSV")->required();
    prepare->add_option("--grid-width", grid_width, "Cells per grid row");
    prepare->add_option("--clusters", clusters, "Number of nodes");
    add_common(prepare, common);

    auto* train = app.add_subcommand("train", "Fit the model, write checkpoint, curves and test metrics");
    std::string data_path = std::string(usts::cmd::kDatasetFile);
    train->add_option("--data", data_path, "Dataset cache");
    add_common(train, common);

    auto* ablate = app.add_subcommand("ablate", "Train an ablated variant");
    std::string which;
    ablate->add_option("--which", which, "ste|gs|ge")->required();
    ablate->add_option("--data", data_path, "Dataset cache");
    add_common(ablate, common);

    auto* eval = app.add_subcommand("eval", "Metrics of a checkpoint on the test split");
    std::string ckpt = usts::cmd::kCheckpointFile, task = "both";
    eval->add_option("--data", data_path, "Dataset cache");
    eval->add_option("--ckpt", ckpt, "Checkpoint");
    eval->add_option("--task", task, "predict|impute|both");
    eval->add_option("--set", common.sets, "Override one key, key=value (repeatable)");
    add_common(eval, common, false);

    auto* zs = app.add_subcommand("zeroshot", "Evaluate a source checkpoint on an unseen target dataset");
    std::string target;
    zs->add_option("--source-ckpt", ckpt, "Source checkpoint")->required();
    zs->add_option("--target-data", target, "Target dataset cache")->required();
    zs->add_option("--task", task, "predict|impute|both");
    zs->add_option("--set", common.sets, "Override one key, key=value (repeatable)");
    add_common(zs, common, false);

    auto* dump = app.add_subcommand("dump", "Write attention, features, adjacency or bias as CSV");
    usts::cmd::DumpArgs da;
    da.ckpt = usts::cmd::kCheckpointFile;
    da.data = usts::cmd::kDatasetFile;
    dump->add_option("--what", da.what, "attention|features|adjacency|bias")->required();
    dump->add_option("--ckpt", da.ckpt, "Checkpoint");
    dump->add_option("--data", da.data, "Dataset cache");
    dump->add_option("--sample", da.sample, "Test window index");
    dump->add_option("--task", da.task, "predict|impute");
    dump->add_option("--file", da.out, "CSV name inside the workspace");
    dump->add_option("--set", common.sets, "Override one key, key=value (repeatable)");
    add_common(dump, common, false);

    auto* synth = app.add_subcommand("synth", "Write a synthetic activity TSV");
    std::string synth_out;
    std::size_t width = 10, height = 10, steps = 1008, period = 144;
    std::uint64_t seed = 0;
    synth->add_option("--file", synth_out, "Output TSV")->required();
    synth->add_option("--width", width, "Grid width");
    synth->add_option("--height", height, "Grid height");
    synth->add_option("--steps", steps, "10-minute steps");
    synth->add_option("--period", period, "Steps per day");
    synth->add_option("--seed", seed, "Random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report("USAGE", e.what(), 2);
    }

    try {
        auto logger = spdlog::stderr_color_mt("usts");
        spdlog::set_default_logger(logger);
        const auto level = spdlog::level::from_str(log_level);
        if (level == spdlog::level::off && log_level != "off") throw usts::UsageError("unknown log level '" + log_level + "'");
        spdlog::set_level(level);

        if (grid_width) extra.push_back("prepare.grid_width=" + std::to_string(grid_width));
        if (clusters) extra.push_back("prepare.clusters=" + std::to_string(clusters));

        if (prepare->parsed()) {
            usts::cmd::Workspace ws(common.out);
            print(usts::cmd::prepare(load_config(common, extra), input, ws));
        } else if (train->parsed()) {
            usts::cmd::Workspace ws(common.out);
            print(usts::cmd::train(load_config(common, extra), data_path, ws));
        } else if (ablate->parsed()) {
            const auto a = usts::parse_ablation(which);
            usts::cmd::Workspace ws(common.out);
            print(usts::cmd::train(load_config(common, extra), data_path, ws, a));
        } else if (eval->parsed()) {
            usts::cmd::Workspace ws(common.out);
            std::cout << usts::cmd::eval(data_path, ckpt, task, common.sets, ws);
        } else if (zs->parsed()) {
            usts::cmd::Workspace ws(common.out);
            std::cout << usts::cmd::zeroshot(ckpt, target, task, common.sets, ws);
        } else if (dump->parsed()) {
            usts::cmd::Workspace ws(common.out);
            std::cout << usts::cmd::dump(da, common.sets, ws).string() << "\n";
        } else if (synth->parsed()) {
            usts::data::write_synthetic_tsv(synth_out, width, height, steps, period, seed);
            std::cout << synth_out << "\n";
        }
    } catch (const usts::UsageError& e) {
        return report(usts::to_string(e.code()), e.what(), 2);
    } catch (const usts::Error& e) {
        return report(usts::to_string(e.code()), e.what(), 1);
    } catch (const std::exception& e) {
        return report("INTERNAL", e.what(), 1);
    }
    return 0;
}
