#include "osr/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "osr/serialize.hpp"
#include "osr/sha256.hpp"

namespace osr::experiment {

namespace {

json read_json_or_stage_error(const std::string& stage, const fs::path& path) {
    if (!fs::exists(path)) throw StageError(stage, "missing artifact: " + path.string());
    return serialize::read_json_file(path);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot open for writing: " + path.string());
    out << text;
}

}  // namespace

ExperimentConfig ExperimentConfig::load(const fs::path& config_path) {
    const json j = serialize::read_json_file(config_path);
    ExperimentConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();

    const auto& ds = j.at("dataset");
    if (ds.contains("synthetic")) c.synthetic = data::SynthConfig::from_json(ds.at("synthetic"));
    if (ds.contains("csv")) {
        CsvSource src;
        src.data = ds.at("csv").at("data").get<std::string>();
        src.schema = ds.at("csv").at("schema").get<std::string>();
        require(fs::exists(src.data), "config: dataset file not found: " + src.data.string());
        require(fs::exists(src.schema), "config: schema file not found: " + src.schema.string());
        c.csv = src;
    }

    c.known_classes = j.at("known_classes").get<std::vector<std::string>>();
    c.novel_classes = j.at("novel_classes").get<std::vector<std::string>>();

    if (j.contains("imputation")) {
        c.impute_trials = j.at("imputation").value("trials", 5);
        c.impute_iterations = j.at("imputation").value("iterations", 10);
    }
    if (j.contains("splits")) c.n_test_sets = j.at("splits").value("n_test_sets", 100);

    if (j.contains("gmvae")) {
        const auto& g = j.at("gmvae");
        c.dim_z = g.value("dim_z", 10);
        c.dim_w = g.value("dim_w", 10);
        if (g.contains("phi_z_hidden")) c.gmvae_phi_z_hidden = g.at("phi_z_hidden").get<std::vector<int>>();
        if (g.contains("beta_hidden")) c.gmvae_beta_hidden = g.at("beta_hidden").get<std::vector<int>>();
        c.gmvae_train.batch_size = g.value("batch_size", 128);
        c.gmvae_train.learning_rate = g.value("learning_rate", 1e-3);
        c.gmvae_train.max_epochs = g.value("max_epochs", 500);
        c.gmvae_train.patience = g.value("patience", 10);
        c.gmvae_train.mc_samples = g.value("mc_samples", 1);
        c.gmvae_train.pretrain_epochs = g.value("pretrain_epochs", 60);
    }
    if (j.contains("iiloss")) {
        const auto& i = j.at("iiloss");
        c.ii.dim_z = i.value("dim_z", 10);
        if (i.contains("hidden")) c.ii.hidden = i.at("hidden").get<std::vector<int>>();
        c.ii.dropout = i.value("dropout", 0.2);
        c.ii.batch_size = i.value("batch_size", 128);
        c.ii.learning_rate = i.value("learning_rate", 1e-3);
        c.ii.max_epochs = i.value("max_epochs", 500);
        c.ii.patience = i.value("patience", 10);
    }
    if (j.contains("threshold")) {
        c.epsilon1 = j.at("threshold").value("epsilon1", 1.0);
        c.epsilon2 = j.at("threshold").value("epsilon2", 0.25);
        c.grid_step = j.at("threshold").value("grid_step", 0.01);
    }
    if (j.contains("contamination")) c.alpha = j.at("contamination").value("alpha", 0.01);
    if (j.contains("sweep")) {
        c.sweep_halfwidth = j.at("sweep").value("halfwidth", 0.05);
        c.sweep_step = j.at("sweep").value("step", 0.01);
    }
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    require(synthetic.has_value() != csv.has_value(),
            "config: dataset must be exactly one of synthetic or csv");
    require(known_classes.size() >= 2, "config: need at least 2 known classes");
    require(!novel_classes.empty(), "config: need at least 1 novel class");
    std::set<std::string> known(known_classes.begin(), known_classes.end());
    require(known.size() == known_classes.size(), "config: duplicate known class");
    for (const auto& n : novel_classes)
        require(!known.count(n), "config: class '" + n + "' is both known and novel");
    std::set<std::string> novel(novel_classes.begin(), novel_classes.end());
    require(novel.size() == novel_classes.size(), "config: duplicate novel class");
    require(alpha > 0.0 && alpha < 1.0, "config: alpha must be in (0,1)");
    require(epsilon1 > epsilon2 && epsilon2 > 0.0, "config: need epsilon1 > epsilon2 > 0");
    require(grid_step > 0.0 && sweep_step > 0.0 && sweep_halfwidth >= 0.0,
            "config: grid/sweep steps must be positive");
    require(n_test_sets >= 1, "config: n_test_sets must be >= 1");

    // the known/novel names must jointly cover the label set; checked here
    // for synthetic sources, at prepare time for csv sources
    if (synthetic) {
        std::set<std::string> all;
        for (const auto& cls : synthetic->classes) all.insert(cls.name);
        require(all.size() == synthetic->classes.size(), "config: duplicate synthetic class name");
        for (const auto& k : known_classes)
            require(all.count(k), "config: unknown known class '" + k + "'");
        for (const auto& n : novel_classes)
            require(all.count(n), "config: unknown novel class '" + n + "'");
        require(known_classes.size() + novel_classes.size() == all.size(),
                "config: known and novel classes must jointly cover the label set");
    }
}

namespace {

fs::path data_csv_path(const ExperimentConfig& config, const fs::path& out) {
    return config.synthetic ? out / "data.csv" : config.csv->data;
}

fs::path schema_path(const ExperimentConfig& config, const fs::path& out) {
    return config.synthetic ? out / "schema.json" : config.csv->schema;
}

}  // namespace

void stage_synth(const ExperimentConfig& config, const fs::path& out) {
    if (!config.synthetic)
        throw StageError("synth", "config has no synthetic dataset section");
    fs::create_directories(out);
    const auto result = data::synth_generate(*config.synthetic, derive_seed(config.seed, "synth"));
    data::save_table_csv(result.table, out / "data.csv");
    serialize::write_json_file(out / "schema.json", result.schema.to_json());
    serialize::write_json_file(out / "ground_truth.json", result.ground_truth);
}

void stage_impute(const ExperimentConfig& config, const fs::path& out) {
    fs::create_directories(out);
    const fs::path csv = data_csv_path(config, out);
    if (!fs::exists(csv)) throw StageError("impute", "missing artifact: " + csv.string());
    const data::Schema schema = data::Schema::from_json(
        serialize::read_json_file(schema_path(config, out)));
    data::RawTable table = data::load_table(csv, schema);
    if (schema.patient_column() && schema.order_column()) table = data::carry_forward_impute(table);
    table = data::chained_impute(table, config.impute_trials, config.impute_iterations,
                                 derive_seed(config.seed, "impute"));
    data::save_table_csv(table, out / "imputed.csv");
}

PreparedData prepare_data(const ExperimentConfig& config, const fs::path& out) {
    const fs::path imputed = out / "imputed.csv";
    if (!fs::exists(imputed)) throw StageError("prepare", "missing artifact: " + imputed.string());
    const data::Schema schema = data::Schema::from_json(
        serialize::read_json_file(schema_path(config, out)));

    PreparedData p;
    p.table = data::load_table(imputed, schema);

    const auto& levels = schema.columns[schema.label_column()].levels;
    auto id_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < levels.size(); ++i)
            if (levels[i] == name) return static_cast<int>(i);
        throw InvalidInput("class '" + name + "' is not a label level");
    };
    for (const auto& k : config.known_classes) p.known_ids.push_back(id_of(k));
    for (const auto& n : config.novel_classes) p.novel_ids.push_back(id_of(n));
    require(config.known_classes.size() + config.novel_classes.size() == levels.size(),
            "known and novel classes must jointly cover the label set");

    // splits need class labels only, so they are derived before encoding;
    // normalization statistics then come from the training rows alone
    const std::vector<int> labels(p.table.columns[schema.label_column()].category.begin(),
                                  p.table.columns[schema.label_column()].category.end());
    p.bundle = data::make_splits(labels, p.known_ids, p.novel_ids, config.n_test_sets,
                                 derive_seed(config.seed, "splits"));
    p.dataset = data::encode(p.table, p.bundle.train);
    return p;
}

namespace {

Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
    Matrix out(static_cast<int>(rows.size()), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < m.cols; ++j) out(static_cast<int>(i), j) = m(rows[i], j);
    return out;
}

std::vector<int> labels_of(const data::EncodedDataset& ds, const std::vector<int>& rows) {
    std::vector<int> out;
    for (int r : rows) out.push_back(ds.labels[r]);
    return out;
}

}  // namespace

void stage_train_gmvae(const ExperimentConfig& config, const fs::path& out) {
    PreparedData p = prepare_data(config, out);

    gmvae::GmvaeConfig gcfg;
    gcfg.n_classes = static_cast<int>(p.known_ids.size());
    gcfg.components_per_class.assign(p.known_ids.size(), 1);
    gcfg.dim_z = config.dim_z;
    gcfg.dim_w = config.dim_w;
    gcfg.blocks = p.dataset.blocks;
    gcfg.phi_z_hidden = config.gmvae_phi_z_hidden;
    gcfg.beta_hidden = config.gmvae_beta_hidden;

    RngStream init_rng(derive_seed(config.seed, "gmvae-init"));
    gmvae::GmvaeModel model = gmvae::GmvaeModel::init(gcfg, init_rng);
    const auto pre = gmvae::pretrain_phi_z(model, p.dataset, p.bundle.train, p.known_ids,
                                           config.gmvae_train.pretrain_epochs, config.gmvae_train,
                                           derive_seed(config.seed, "gmvae"));
    const auto log = gmvae::train_gmvae(model, p.dataset, p.bundle.train, p.bundle.validation,
                                        p.known_ids, config.gmvae_train,
                                        derive_seed(config.seed, "gmvae"));
    const CentroidSet centroids =
        gmvae::class_centroids(model, p.dataset, p.bundle.train, p.known_ids);

    json checkpoint = gmvae::model_to_json(model);
    checkpoint["centroids"] = centroids.to_json();
    serialize::write_json_file(out / "gmvae.json", checkpoint);

    json epochs = json::array();
    for (const auto& e : log)
        epochs.push_back({{"epoch", e.epoch},
                          {"train_elbo", e.train.total},
                          {"train_reconstruction", e.train.reconstruction},
                          {"train_latent_covering", e.train.latent_covering},
                          {"train_w_prior", e.train.w_prior},
                          {"train_v_prior", e.train.v_prior},
                          {"validation_objective", e.validation_objective}});
    serialize::write_json_file(out / "gmvae_log.json",
                               json{{"pretrain_initial_loss", pre.initial_loss},
                                    {"pretrain_final_loss", pre.final_loss},
                                    {"epochs", epochs}});
}

void stage_train_iiloss(const ExperimentConfig& config, const fs::path& out) {
    PreparedData p = prepare_data(config, out);
    std::vector<iiloss::IiEpochLog> log;
    const iiloss::IiLossModel model =
        iiloss::train_iiloss(p.dataset, p.bundle.train, p.bundle.validation, p.known_ids,
                             config.ii, derive_seed(config.seed, "iiloss"), &log);
    serialize::write_json_file(out / "iiloss.json", iiloss::model_to_json(model));
    json epochs = json::array();
    for (const auto& e : log)
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"validation_loss", e.validation_loss}});
    serialize::write_json_file(out / "iiloss_log.json", json{{"epochs", epochs}});
}

namespace {

struct GmvaeArtifacts {
    gmvae::GmvaeModel model;
    CentroidSet centroids;
};

GmvaeArtifacts load_gmvae(const std::string& stage, const fs::path& out) {
    const json j = read_json_or_stage_error(stage, out / "gmvae.json");
    GmvaeArtifacts a{gmvae::model_from_json(j), CentroidSet::from_json(j.at("centroids"))};
    return a;
}

}  // namespace

void stage_select_threshold(const ExperimentConfig& config, const fs::path& out) {
    PreparedData p = prepare_data(config, out);
    GmvaeArtifacts gm = load_gmvae("select-threshold", out);

    const Matrix val_emb = gmvae::embed(gm.model, gather_rows(p.dataset.features, p.bundle.validation));
    const auto sel_config = decision::ThresholdSelectionConfig::uniform_grid(
        0.0, 1.0, config.grid_step, config.epsilon1, config.epsilon2);
    decision::ThresholdCurve curve =
        decision::f1_vs_tau_curve(val_emb, labels_of(p.dataset, p.bundle.validation), gm.centroids,
                                  sel_config);

    bool fallback = false;
    double tau_star = 0.0;
    try {
        tau_star = decision::select_threshold_saturation(curve, sel_config);
    } catch (const NoSaturationError&) {
        // fall back to the grid argmax, clearly flagged
        fallback = true;
        std::size_t best = 0;
        for (std::size_t i = 1; i < curve.f1_values.size(); ++i)
            if (curve.f1_values[i] > curve.f1_values[best]) best = i;
        tau_star = curve.tau_grid[best];
        curve.tau_star = tau_star;
    }

    json j = curve.to_json(sel_config);
    j["saturation_fallback"] = fallback;
    serialize::write_json_file(out / "threshold.json", j);
    write_text(out / "threshold_curve.csv", curve.to_csv());
}

void stage_fit_threshold(const ExperimentConfig& config, const fs::path& out) {
    PreparedData p = prepare_data(config, out);
    const json j = read_json_or_stage_error("fit-threshold", out / "iiloss.json");
    const iiloss::IiLossModel model = iiloss::model_from_json(j);

    const Matrix train_emb = iiloss::embed(model, gather_rows(p.dataset.features, p.bundle.train));
    std::vector<double> scores;
    for (int i = 0; i < train_emb.rows; ++i)
        scores.push_back(iiloss::outlier_score(model.centroids, train_emb.row(i)));
    const auto cc = iiloss::fit_contamination_threshold(scores, config.alpha);

    serialize::write_json_file(out / "iiloss.json", iiloss::model_to_json(model, &cc));
    serialize::write_json_file(out / "contamination.json",
                               json{{"alpha", cc.alpha}, {"threshold", cc.threshold}});
}

namespace {

struct EvalInputs {
    PreparedData p;
    GmvaeArtifacts gm;
    iiloss::IiLossModel ii;
    iiloss::ContaminationConfig cc;
    double tau_star = 0.0;
    // per-dataset-row predictions (kNovelLabel placeholder elsewhere)
    std::vector<int> pred_gmvae, pred_ii;
    std::vector<double> os_scores;
    Matrix gm_emb, ii_emb;
};

EvalInputs load_eval_inputs(const std::string& stage, const ExperimentConfig& config,
                            const fs::path& out) {
    EvalInputs in;
    in.p = prepare_data(config, out);
    in.gm = load_gmvae(stage, out);
    const json ji = read_json_or_stage_error(stage, out / "iiloss.json");
    in.ii = iiloss::model_from_json(ji, &in.cc);
    if (!in.cc.fitted)
        throw StageError(stage, "missing artifact: fitted contamination threshold in " +
                                    (out / "iiloss.json").string());
    const json jt = read_json_or_stage_error(stage, out / "threshold.json");
    require(!jt.at("tau_star").is_null(), "threshold.json has no tau_star");
    in.tau_star = jt.at("tau_star").get<double>();

    in.gm_emb = gmvae::embed(in.gm.model, in.p.dataset.features);
    in.ii_emb = iiloss::embed(in.ii, in.p.dataset.features);

    const int n = in.p.dataset.n_rows();
    in.pred_gmvae.assign(n, kNovelLabel);
    in.pred_ii.assign(n, kNovelLabel);
    in.os_scores.assign(n, 0.0);
    for (int r = 0; r < n; ++r) {
        const auto u = decision::uncertainty(in.gm_emb.row(r), in.gm.centroids);
        in.pred_gmvae[r] = (u.u <= in.tau_star) ? u.nearest_class : kNovelLabel;

        const double score = iiloss::outlier_score(in.ii.centroids, in.ii_emb.row(r));
        in.os_scores[r] = score;
        const int nearest = in.ii.centroids.class_ids[in.ii.centroids.nearest(in.ii_emb.row(r))];
        in.pred_ii[r] = (score <= in.cc.threshold) ? nearest : kNovelLabel;
    }
    return in;
}

json curve_to_json(const eval::CurveSeries& s) {
    json points = json::array();
    for (const auto& p : s.points)
        points.push_back({{"k", p.k}, {"min", p.min}, {"mean", p.mean}, {"max", p.max}});
    return points;
}

std::string curve_to_csv(const eval::CurveSeries& s) {
    std::string text = "k,f1_min,f1_mean,f1_max\n";
    for (const auto& p : s.points)
        text += std::to_string(p.k) + "," + serialize::format_double(p.min) + "," +
                serialize::format_double(p.mean) + "," + serialize::format_double(p.max) + "\n";
    return text;
}

/// Rows of the designated test set (set 0) at full novel count, with truth
/// labels keeping per-novel-class ids for the confusion layout.
std::vector<int> designated_test_rows(const PreparedData& p) {
    std::vector<int> rows = p.bundle.known_test;
    rows.insert(rows.end(), p.bundle.novel_test_sets[0].begin(), p.bundle.novel_test_sets[0].end());
    return rows;
}

}  // namespace

void stage_evaluate(const ExperimentConfig& config, const fs::path& out) {
    EvalInputs in = load_eval_inputs("evaluate", config, out);
    const auto& p = in.p;

    const eval::CurveSeries curve_gm =
        eval::incremental_novel_curve(p.bundle, p.dataset.labels, in.pred_gmvae);
    const eval::CurveSeries curve_ii =
        eval::incremental_novel_curve(p.bundle, p.dataset.labels, in.pred_ii);

    json rel = json::array();
    for (std::size_t k = 0; k < curve_gm.points.size(); ++k) {
        const auto change = eval::relative_change(curve_gm.points[k].mean, curve_ii.points[k].mean);
        rel.push_back({{"k", static_cast<int>(k)},
                       {"percent", change ? json(*change) : json()}});
    }

    // designated-set confusion matrices at full novel count
    const auto rows = designated_test_rows(p);
    eval::ConfusionLayout layout{p.known_ids, p.novel_ids};
    std::vector<int> truth, pg, pi;
    for (int r : rows) {
        truth.push_back(p.dataset.labels[r]);
        pg.push_back(in.pred_gmvae[r]);
        pi.push_back(in.pred_ii[r]);
    }
    const auto conf_gm = eval::confusion(truth, pg, layout);
    const auto conf_ii = eval::confusion(truth, pi, layout);

    json report = {
        {"seed", config.seed},
        {"known_classes", config.known_classes},
        {"novel_classes", config.novel_classes},
        {"thresholds",
         {{"tau_star", in.tau_star}, {"alpha", in.cc.alpha}, {"outlier_threshold", in.cc.threshold}}},
        {"curves",
         {{"gmvae_u", curve_to_json(curve_gm)}, {"iiloss_os", curve_to_json(curve_ii)}}},
        {"relative_change_pct", rel},
        {"confusion",
         {{"gmvae_u", conf_gm.to_json(p.dataset.class_names)},
          {"iiloss_os", conf_ii.to_json(p.dataset.class_names)}}},
    };
    serialize::write_json_file(out / "eval_report.json", report);
    serialize::write_json_file(out / "splits.json", p.bundle.to_json());
    write_text(out / "curve_gmvae_u.csv", curve_to_csv(curve_gm));
    write_text(out / "curve_iiloss_os.csv", curve_to_csv(curve_ii));
    write_text(out / "confusion_gmvae_u.csv", conf_gm.to_csv(p.dataset.class_names));
    write_text(out / "confusion_iiloss_os.csv", conf_ii.to_csv(p.dataset.class_names));

    // training latents for external visualization
    std::string emb_csv = "row,class";
    for (int j = 0; j < in.gm_emb.cols; ++j) emb_csv += ",z" + std::to_string(j);
    emb_csv += "\n";
    for (int r : p.bundle.train) {
        emb_csv += std::to_string(r) + "," + p.dataset.class_names[p.dataset.labels[r]];
        for (int j = 0; j < in.gm_emb.cols; ++j)
            emb_csv += "," + serialize::format_double(in.gm_emb(r, j));
        emb_csv += "\n";
    }
    write_text(out / "embeddings.csv", emb_csv);
}

void stage_sweep(const ExperimentConfig& config, const fs::path& out,
                 const SweepOverrides& overrides) {
    EvalInputs in = load_eval_inputs("sweep", config, out);
    const auto& p = in.p;
    const double halfwidth = overrides.halfwidth.value_or(config.sweep_halfwidth);

    // per-set sweep; bands aggregated per grid value over the test sets
    auto banded = [&](decision::SweepRule rule, double center) {
        std::vector<double> train_scores;
        if (rule == decision::SweepRule::outlier_score) {
            for (int r : p.bundle.train) train_scores.push_back(in.os_scores[r]);
        }
        std::vector<std::vector<double>> per_value;  // [grid][set]
        std::vector<double> grid;
        bool clipped = false;
        for (const auto& novel_set : p.bundle.novel_test_sets) {
            std::vector<int> rows = p.bundle.known_test;
            rows.insert(rows.end(), novel_set.begin(), novel_set.end());
            Matrix emb(static_cast<int>(rows.size()),
                       rule == decision::SweepRule::uncertainty ? in.gm_emb.cols : in.ii_emb.cols);
            std::vector<int> labels;
            const std::set<int> novel(p.novel_ids.begin(), p.novel_ids.end());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const Matrix& src = rule == decision::SweepRule::uncertainty ? in.gm_emb : in.ii_emb;
                for (int j = 0; j < emb.cols; ++j) emb(static_cast<int>(i), j) = src(rows[i], j);
                const int lbl = p.dataset.labels[rows[i]];
                labels.push_back(novel.count(lbl) ? kNovelLabel : lbl);
            }
            const auto& centroids =
                rule == decision::SweepRule::uncertainty ? in.gm.centroids : in.ii.centroids;
            const auto table = decision::sweep_thresholds(emb, labels, centroids, train_scores,
                                                          center, halfwidth, config.sweep_step,
                                                          rule);
            clipped = clipped || table.clipped;
            if (grid.empty()) {
                for (const auto& row : table.rows) grid.push_back(row.value);
                per_value.assign(grid.size(), {});
            }
            for (std::size_t g = 0; g < table.rows.size(); ++g)
                per_value[g].push_back(table.rows[g].macro_f1);
        }
        json rows_json = json::array();
        std::string csv = (rule == decision::SweepRule::uncertainty ? std::string("tau")
                                                                    : std::string("alpha")) +
                          ",f1_min,f1_mean,f1_max\n";
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const auto& vals = per_value[g];
            const double mn = *std::min_element(vals.begin(), vals.end());
            const double mx = *std::max_element(vals.begin(), vals.end());
            double mean = 0.0;
            for (double v : vals) mean += v;
            mean /= vals.size();
            rows_json.push_back({{"value", grid[g]}, {"min", mn}, {"mean", mean}, {"max", mx}});
            csv += serialize::format_double(grid[g]) + "," + serialize::format_double(mn) + "," +
                   serialize::format_double(mean) + "," + serialize::format_double(mx) + "\n";
        }
        return std::make_tuple(rows_json, csv, clipped);
    };

    json summary;
    const bool want_u =
        !overrides.rule || *overrides.rule == decision::SweepRule::uncertainty;
    const bool want_os =
        !overrides.rule || *overrides.rule == decision::SweepRule::outlier_score;
    if (want_u) {
        const double center = overrides.center.value_or(in.tau_star);
        auto [rows, csv, clipped] = banded(decision::SweepRule::uncertainty, center);
        summary["uncertainty"] = {{"center", center},
                                  {"halfwidth", halfwidth},
                                  {"clipped", clipped},
                                  {"rows", rows}};
        write_text(out / "sweep_uncertainty.csv", csv);
    }
    if (want_os) {
        const double center = overrides.center.value_or(in.cc.alpha);
        auto [rows, csv, clipped] = banded(decision::SweepRule::outlier_score, center);
        summary["outlier_score"] = {{"center", center},
                                    {"halfwidth", halfwidth},
                                    {"clipped", clipped},
                                    {"rows", rows}};
        write_text(out / "sweep_outlier_score.csv", csv);
    }
    serialize::write_json_file(out / "sweep.json", summary);
}

void write_manifest(const ExperimentConfig& config, const fs::path& out) {
    json artifacts = json::array();
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(out)) {
        if (!entry.is_regular_file()) continue;
        if (entry.path().filename() == "manifest.json") continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
        artifacts.push_back({{"path", f.filename().string()},
                             {"sha256", sha256_file_hex(f)},
                             {"bytes", fs::file_size(f)}});
    serialize::write_json_file(out / "manifest.json",
                               json{{"version", "0.1.0"},
                                    {"seed", config.seed},
                                    {"artifacts", artifacts}});
}

void run_experiment(const ExperimentConfig& config, const fs::path& out) {
    auto guarded = [&](const char* stage, auto&& fn) {
        try {
            fn();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
    };
    fs::create_directories(out);
    if (config.synthetic) guarded("synth", [&] { stage_synth(config, out); });
    guarded("impute", [&] { stage_impute(config, out); });
    guarded("train-gmvae", [&] { stage_train_gmvae(config, out); });
    guarded("train-iiloss", [&] { stage_train_iiloss(config, out); });
    guarded("select-threshold", [&] { stage_select_threshold(config, out); });
    guarded("fit-threshold", [&] { stage_fit_threshold(config, out); });
    guarded("evaluate", [&] { stage_evaluate(config, out); });
    guarded("sweep", [&] { stage_sweep(config, out); });
    guarded("manifest", [&] { write_manifest(config, out); });
}

}  // namespace osr::experiment
