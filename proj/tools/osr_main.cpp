// osr: open-set recognition experiments on tabular data.
//
// Subcommands cover the pipeline stages (synth, impute, train-gmvae,
// train-iiloss, select-threshold, fit-threshold, evaluate, sweep) plus
// `run`, which executes all of them and writes a hashed artifact manifest.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "osr/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> out_override;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", args.seed_override, "override the config seed");
    cmd->add_option("--out", args.out_override, "override the config output directory");
}

osr::experiment::ExperimentConfig load_config(const CommonArgs& args) {
    auto config = osr::experiment::ExperimentConfig::load(args.config_path);
    if (args.seed_override) config.seed = *args.seed_override;
    if (args.out_override) config.output_dir = *args.out_override;
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"open-set recognition pipelines for tabular data"};
    app.require_subcommand(1);

    std::map<std::string, CommonArgs> args;
    const std::vector<std::string> names = {"synth",          "impute",       "train-gmvae",
                                            "train-iiloss",   "select-threshold", "fit-threshold",
                                            "evaluate",       "sweep",        "run"};
    const std::map<std::string, std::string> help = {
        {"synth", "generate the configured synthetic dataset"},
        {"impute", "carry-forward and chained imputation"},
        {"train-gmvae", "pretrain phi_z, train the GMVAE, save the checkpoint"},
        {"train-iiloss", "train the ii-loss benchmark network"},
        {"select-threshold", "validation F1 saturation threshold for the uncertainty rule"},
        {"fit-threshold", "contamination-ratio threshold for the outlier score"},
        {"evaluate", "incremental novel-class curves, confusion matrices, embeddings"},
        {"sweep", "open-set F1 across threshold neighborhoods"},
        {"run", "full pipeline plus the artifact manifest"},
    };
    for (const auto& name : names) add_common(app.add_subcommand(name, help.at(name)), args[name]);

    std::string sweep_rule;
    std::optional<double> sweep_center, sweep_halfwidth;
    CLI::App* sweep_cmd = app.get_subcommand("sweep");
    sweep_cmd->add_option("--rule", sweep_rule, "uncertainty or outlier_score (default both)")
        ->check(CLI::IsMember({"uncertainty", "outlier_score"}));
    sweep_cmd->add_option("--center", sweep_center, "override the sweep center");
    sweep_cmd->add_option("--halfwidth", sweep_halfwidth, "override the sweep halfwidth");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage error
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const auto config = load_config(args.at(command));
        const auto out = config.output_dir;
        using namespace osr::experiment;
        if (command == "synth") stage_synth(config, out);
        else if (command == "impute") stage_impute(config, out);
        else if (command == "train-gmvae") stage_train_gmvae(config, out);
        else if (command == "train-iiloss") stage_train_iiloss(config, out);
        else if (command == "select-threshold") stage_select_threshold(config, out);
        else if (command == "fit-threshold") stage_fit_threshold(config, out);
        else if (command == "evaluate") stage_evaluate(config, out);
        else if (command == "sweep") {
            SweepOverrides overrides;
            if (!sweep_rule.empty())
                overrides.rule = sweep_rule == "uncertainty"
                                     ? osr::decision::SweepRule::uncertainty
                                     : osr::decision::SweepRule::outlier_score;
            overrides.center = sweep_center;
            overrides.halfwidth = sweep_halfwidth;
            stage_sweep(config, out, overrides);
        } else if (command == "run") run_experiment(config, out);
        return 0;
    } catch (const osr::StageError& e) {
        std::cerr << "error in stage " << e.stage << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
