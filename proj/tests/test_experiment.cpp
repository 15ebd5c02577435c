#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "osr/experiment.hpp"
#include "osr/serialize.hpp"
#include "osr/sha256.hpp"

using namespace osr;
using namespace osr::experiment;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("osr_exp_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

/// Small, fast experiment: 3 known + 2 novel classes, 60 samples each.
json small_config_json(const std::string& out_dir, std::uint64_t seed = 11) {
    json classes = json::array();
    const std::vector<std::string> names = {"k1", "k2", "k3", "n1", "n2"};
    for (int c = 0; c < 5; ++c) {
        Vec mean(4, 0.0);
        if (c < 4) mean[c] = 8.0;
        else {
            mean[0] = 8.0;
            mean[1] = 8.0;
        }
        classes.push_back({{"name", names[c]}, {"samples", 60}, {"mean", mean}, {"cov_scale", 1.0}});
    }
    return {
        {"seed", seed},
        {"output_dir", out_dir},
        {"dataset", {{"synthetic", {{"n_numeric", 4}, {"classes", classes}, {"missing_rate", 0.05}}}}},
        {"known_classes", {"k1", "k2", "k3"}},
        {"novel_classes", {"n1", "n2"}},
        {"splits", {{"n_test_sets", 20}}},
        {"gmvae",
         {{"dim_z", 3}, {"dim_w", 2}, {"phi_z_hidden", {16}}, {"beta_hidden", {8}},
          {"batch_size", 32}, {"max_epochs", 8}, {"patience", 8}, {"pretrain_epochs", 15}}},
        {"iiloss",
         {{"dim_z", 3}, {"hidden", {16}}, {"batch_size", 32}, {"max_epochs", 8}, {"patience", 8}}},
    };
}

ExperimentConfig write_and_load(const TempDir& tmp, const json& j) {
    const fs::path cfg_path = tmp.path / "config.json";
    serialize::write_json_file(cfg_path, j);
    return ExperimentConfig::load(cfg_path);
}

}  // namespace

TEST_CASE("config: overlapping known/novel classes rejected before any training") {
    TempDir tmp("cfg");
    json j = small_config_json((tmp.path / "out").string());
    j["novel_classes"] = {"k1", "n2"};
    const fs::path cfg_path = tmp.path / "config.json";
    serialize::write_json_file(cfg_path, j);
    CHECK_THROWS_AS(ExperimentConfig::load(cfg_path), InvalidInput);
}

TEST_CASE("config: classes must jointly cover the label set") {
    TempDir tmp("cfg2");
    json j = small_config_json((tmp.path / "out").string());
    j["novel_classes"] = {"n1"};  // n2 unassigned
    const fs::path cfg_path = tmp.path / "config.json";
    serialize::write_json_file(cfg_path, j);
    CHECK_THROWS_AS(ExperimentConfig::load(cfg_path), InvalidInput);
}

TEST_CASE("config: missing dataset file is caught at load time") {
    TempDir tmp("cfg3");
    json j = small_config_json((tmp.path / "out").string());
    j["dataset"] = {{"csv", {{"data", "/nonexistent/x.csv"}, {"schema", "/nonexistent/s.json"}}}};
    const fs::path cfg_path = tmp.path / "config.json";
    serialize::write_json_file(cfg_path, j);
    CHECK_THROWS_AS(ExperimentConfig::load(cfg_path), InvalidInput);
}

TEST_CASE("evaluate without trained checkpoints names the missing artifact") {
    TempDir tmp("missing");
    const fs::path out = tmp.path / "out";
    auto config = write_and_load(tmp, small_config_json(out.string()));
    stage_synth(config, out);
    stage_impute(config, out);
    try {
        stage_evaluate(config, out);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(std::string(e.what()).find("gmvae.json") != std::string::npos);
        CHECK(e.stage == "evaluate");
    }
}

TEST_CASE("run equals the composition of individual subcommands") {
    TempDir tmp("compose");
    const fs::path out_run = tmp.path / "run";
    const fs::path out_steps = tmp.path / "steps";

    auto config_run = write_and_load(tmp, small_config_json(out_run.string()));
    run_experiment(config_run, out_run);

    auto config_steps = write_and_load(tmp, small_config_json(out_steps.string()));
    stage_synth(config_steps, out_steps);
    stage_impute(config_steps, out_steps);
    stage_train_gmvae(config_steps, out_steps);
    stage_train_iiloss(config_steps, out_steps);
    stage_select_threshold(config_steps, out_steps);
    stage_fit_threshold(config_steps, out_steps);
    stage_evaluate(config_steps, out_steps);
    stage_sweep(config_steps, out_steps);

    for (const char* artifact : {"eval_report.json", "gmvae.json", "iiloss.json", "threshold.json",
                                 "sweep.json", "imputed.csv"}) {
        CAPTURE(artifact);
        CHECK(sha256_file_hex(out_run / artifact) == sha256_file_hex(out_steps / artifact));
    }
}

TEST_CASE("manifest: every listed artifact exists and hash-matches") {
    TempDir tmp("manifest");
    const fs::path out = tmp.path / "out";
    auto config = write_and_load(tmp, small_config_json(out.string()));
    run_experiment(config, out);

    const json manifest = serialize::read_json_file(out / "manifest.json");
    CHECK(manifest.at("artifacts").size() >= 15);
    for (const auto& a : manifest.at("artifacts")) {
        const fs::path p = out / a.at("path").get<std::string>();
        REQUIRE(fs::exists(p));
        CHECK(sha256_file_hex(p) == a.at("sha256").get<std::string>());
        CHECK(fs::file_size(p) == a.at("bytes").get<std::uintmax_t>());
    }
}

TEST_CASE("full pipeline is deterministic per seed and sensitive to it") {
    TempDir tmp("determinism");
    const fs::path out_a = tmp.path / "a";
    const fs::path out_b = tmp.path / "b";
    const fs::path out_c = tmp.path / "c";

    run_experiment(write_and_load(tmp, small_config_json(out_a.string(), 3)), out_a);
    run_experiment(write_and_load(tmp, small_config_json(out_b.string(), 3)), out_b);
    run_experiment(write_and_load(tmp, small_config_json(out_c.string(), 4)), out_c);

    CHECK(sha256_file_hex(out_a / "eval_report.json") == sha256_file_hex(out_b / "eval_report.json"));
    CHECK(sha256_file_hex(out_a / "eval_report.json") != sha256_file_hex(out_c / "eval_report.json"));
}

TEST_CASE("patient columns: carry-forward runs inside the pipeline") {
    TempDir tmp("long");
    const fs::path out = tmp.path / "out";
    json j = small_config_json(out.string());
    j["dataset"]["synthetic"]["patient_columns"] = true;
    j["dataset"]["synthetic"]["encounters_per_patient"] = 5;
    j["dataset"]["synthetic"]["missing_rate"] = 0.3;
    auto config = write_and_load(tmp, j);
    stage_synth(config, out);
    stage_impute(config, out);

    const data::Schema schema =
        data::Schema::from_json(serialize::read_json_file(out / "schema.json"));
    REQUIRE(schema.patient_column().has_value());
    const data::RawTable original = data::load_table(out / "data.csv", schema);
    const data::RawTable imputed = data::load_table(out / "imputed.csv", schema);
    int filled = 0;
    for (std::size_t c = 0; c < schema.columns.size(); ++c) {
        if (schema.columns[c].kind != data::ColumnKind::numeric) continue;
        for (int r = 0; r < imputed.n_rows; ++r) {
            CHECK_FALSE(imputed.is_missing(r, static_cast<int>(c)));
            if (original.is_missing(r, static_cast<int>(c))) ++filled;
            else CHECK(imputed.columns[c].numeric[r] == original.columns[c].numeric[r]);
        }
    }
    CHECK(filled > 0);

    // and the rest of the pipeline accepts the longitudinal table
    stage_train_gmvae(config, out);
    stage_train_iiloss(config, out);
    stage_select_threshold(config, out);
    stage_fit_threshold(config, out);
    stage_evaluate(config, out);
    CHECK(fs::exists(out / "eval_report.json"));
}

TEST_CASE("csv dataset source: pipeline runs on user-supplied files") {
    TempDir tmp("csvsrc");
    // synthesize, then re-feed the files as an external csv dataset
    const fs::path gen_dir = tmp.path / "gen";
    auto gen_config = write_and_load(tmp, small_config_json(gen_dir.string()));
    stage_synth(gen_config, gen_dir);

    json j = small_config_json((tmp.path / "out").string());
    j["dataset"] = {{"csv",
                     {{"data", (gen_dir / "data.csv").string()},
                      {"schema", (gen_dir / "schema.json").string()}}}};
    auto config = write_and_load(tmp, j);
    const fs::path out = tmp.path / "out";
    run_experiment(config, out);
    CHECK(fs::exists(out / "eval_report.json"));
}
