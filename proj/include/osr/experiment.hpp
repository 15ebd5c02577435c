#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/data.hpp"
#include "osr/decision.hpp"
#include "osr/eval.hpp"
#include "osr/gmvae.hpp"
#include "osr/iiloss.hpp"

namespace osr::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct CsvSource {
    fs::path data;
    fs::path schema;
};

/// Full experiment description; see configs/demo.json for the layout.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    fs::path output_dir;

    std::optional<data::SynthConfig> synthetic;
    std::optional<CsvSource> csv;

    std::vector<std::string> known_classes;   // label level names, ordered
    std::vector<std::string> novel_classes;   // novel-introduction order

    int impute_trials = 5;
    int impute_iterations = 10;
    int n_test_sets = 100;

    gmvae::TrainConfig gmvae_train;
    std::vector<int> gmvae_phi_z_hidden{100, 50};
    std::vector<int> gmvae_beta_hidden{20, 20};
    int dim_z = 10;
    int dim_w = 10;

    iiloss::IiConfig ii;

    double epsilon1 = 1.0;
    double epsilon2 = 0.25;
    double grid_step = 0.01;
    double alpha = 0.01;
    double sweep_halfwidth = 0.05;
    double sweep_step = 0.01;

    static ExperimentConfig load(const fs::path& config_path);
    void validate() const;
};

/// Everything the model stages share: the imputed table encoded against the
/// training split, the class id assignment, and the split bundle.
struct PreparedData {
    data::RawTable table;
    data::EncodedDataset dataset;
    data::SplitBundle bundle;
    std::vector<int> known_ids;
    std::vector<int> novel_ids;
};

// Pipeline stages. Each reads its inputs from `config`/`out` and writes its
// artifacts under `out`; missing prerequisites raise StageError naming the
// artifact.
void stage_synth(const ExperimentConfig& config, const fs::path& out);
void stage_impute(const ExperimentConfig& config, const fs::path& out);
PreparedData prepare_data(const ExperimentConfig& config, const fs::path& out);
void stage_train_gmvae(const ExperimentConfig& config, const fs::path& out);
void stage_train_iiloss(const ExperimentConfig& config, const fs::path& out);
void stage_select_threshold(const ExperimentConfig& config, const fs::path& out);
void stage_fit_threshold(const ExperimentConfig& config, const fs::path& out);
void stage_evaluate(const ExperimentConfig& config, const fs::path& out);

/// CLI overrides for a one-off sweep; by default both rules run centered on
/// their fitted thresholds.
struct SweepOverrides {
    std::optional<decision::SweepRule> rule;
    std::optional<double> center;
    std::optional<double> halfwidth;
};
void stage_sweep(const ExperimentConfig& config, const fs::path& out,
                 const SweepOverrides& overrides = {});

/// The whole pipeline: synth (when configured) -> impute -> train both
/// models -> thresholds -> evaluate -> sweep -> manifest.
void run_experiment(const ExperimentConfig& config, const fs::path& out);

/// Writes manifest.json listing every artifact with its SHA-256.
void write_manifest(const ExperimentConfig& config, const fs::path& out);

}  // namespace osr::experiment
