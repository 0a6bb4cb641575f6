// Command line front end: pvae <generate|baselines|train|evaluate|report> [options] [inputs...]

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "pvae/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Physics-informed VAE for sparse-view tomography"};
    app.set_version_flag("--version", pvae::kVersion);
    app.require_subcommand(1, 1);

    std::string config_file, out;
    std::vector<std::string> overrides, inputs;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    if (const char* env = std::getenv("PVAE_THREADS")) threads = std::max(1, std::atoi(env));

    const char* commands[][2] = {
        {"generate", "simulate phantoms and noisy measurements"},
        {"baselines", "classical reconstructions and their metrics"},
        {"train", "train the model on measurements only"},
        {"evaluate", "posterior sampling, metrics and oracle comparison"},
        {"report", "summary table and bar charts from metrics CSVs"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("-c,--config", config_file, "JSON config file");
        sub->add_option("--seed", seed, "master seed (overrides the config)");
        sub->add_option("-o,--out", out, "output directory")->required();
        sub->add_option("--threads", threads, "worker threads (default: $PVAE_THREADS or 1)")->check(CLI::PositiveNumber);
        sub->add_option("--set", overrides, "override a config key: key=value")->allow_extra_args(false);
        if (std::string(name) == "report") sub->add_option("inputs", inputs, "metrics CSV files");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        pvae::RunContext ctx;
        ctx.settings = pvae::resolve_settings(config_file, overrides, seed, inputs);
        ctx.out = out;
        ctx.threads = threads;
        pvae::run_command(command, ctx);
    } catch (const std::exception& e) {
        std::cerr << "pvae " << command << ": " << e.what() << '\n';
        return pvae::exit_code_for(e);
    }
    return 0;
}
