#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>

#include "diffabm/experiments.hpp"
#include "diffabm/train.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Differentiable agent-based-model calibration toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string estimator;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int horizon = -1;
    bool horizon_set = false;

    CLI::App* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
    run->add_option("config", config_path, "Path to the experiment config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Override the config seed")->each([&](const std::string&) {
        seed_set = true;
    });
    run->add_option("--out", out_dir, "Override the output directory");
    run->add_option("--estimator", estimator,
                    "Override the gradient estimator (pathwise|score|hybrid)");
    run->add_option("--horizon", horizon, "Override the gradient horizon (pathwise only)")
        ->each([&](const std::string&) { horizon_set = true; });

    CLI11_PARSE(app, argc, argv);

    try {
        diffabm::ConfigOverrides overrides;
        if (seed_set) overrides.seed = seed;
        if (!out_dir.empty()) overrides.output_dir = out_dir;
        if (!estimator.empty()) overrides.estimator = estimator;
        if (horizon_set) overrides.horizon = horizon;
        const diffabm::ExperimentConfig config =
            diffabm::load_experiment_config(config_path, overrides);
        return diffabm::run_experiment(config);
    } catch (const diffabm::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const diffabm::TrainAbort& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
