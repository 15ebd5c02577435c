#include "osr/iiloss.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "osr/serialize.hpp"

namespace osr::iiloss {

namespace {

struct BatchCentroids {
    std::vector<int> classes;            // distinct labels in first-seen order, sorted
    std::map<int, int> index_of;         // label -> centroid row
    Matrix centroids;                    // [n_classes x dim]
    std::vector<int> counts;
};

BatchCentroids batch_centroids(const Matrix& embeddings, const std::vector<int>& labels) {
    require(embeddings.rows == static_cast<int>(labels.size()), "ii_loss: label count mismatch");
    require(embeddings.rows >= 1, "ii_loss: empty batch");
    BatchCentroids bc;
    std::vector<int> classes = labels;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    require(classes.size() >= 2, "ii_loss: batch must contain at least 2 classes");
    bc.classes = classes;
    for (std::size_t i = 0; i < classes.size(); ++i) bc.index_of[classes[i]] = static_cast<int>(i);
    bc.centroids = Matrix(static_cast<int>(classes.size()), embeddings.cols);
    bc.counts.assign(classes.size(), 0);
    for (int r = 0; r < embeddings.rows; ++r) {
        const int c = bc.index_of.at(labels[r]);
        ++bc.counts[c];
        for (int j = 0; j < embeddings.cols; ++j) bc.centroids(c, j) += embeddings(r, j);
    }
    for (std::size_t c = 0; c < classes.size(); ++c)
        for (int j = 0; j < embeddings.cols; ++j) bc.centroids(static_cast<int>(c), j) /= bc.counts[c];
    return bc;
}

}  // namespace

double ii_loss(const Matrix& embeddings, const std::vector<int>& labels) {
    const BatchCentroids bc = batch_centroids(embeddings, labels);
    const int n = embeddings.rows;

    double intra = 0.0;
    for (int r = 0; r < n; ++r)
        intra += squared_distance(embeddings.row(r), bc.centroids.row(bc.index_of.at(labels[r])));
    intra /= n;

    double inter = std::numeric_limits<double>::infinity();
    for (int a = 0; a < bc.centroids.rows; ++a)
        for (int b = a + 1; b < bc.centroids.rows; ++b)
            inter = std::min(inter, squared_distance(bc.centroids.row(a), bc.centroids.row(b)));
    return intra - inter;
}

double ii_loss_with_grad(const Matrix& embeddings, const std::vector<int>& labels,
                         Matrix& d_embeddings) {
    const BatchCentroids bc = batch_centroids(embeddings, labels);
    const int n = embeddings.rows;
    const int dim = embeddings.cols;
    d_embeddings = Matrix(n, dim);

    // intra: the dependence through each class centroid cancels, leaving
    // (2/N)(z - centroid) per sample
    double intra = 0.0;
    for (int r = 0; r < n; ++r) {
        const int c = bc.index_of.at(labels[r]);
        intra += squared_distance(embeddings.row(r), bc.centroids.row(c));
        for (int j = 0; j < dim; ++j)
            d_embeddings(r, j) += 2.0 / n * (embeddings(r, j) - bc.centroids(c, j));
    }
    intra /= n;

    // inter: only the argmin centroid pair carries gradient
    double inter = std::numeric_limits<double>::infinity();
    int best_a = 0, best_b = 1;
    for (int a = 0; a < bc.centroids.rows; ++a)
        for (int b = a + 1; b < bc.centroids.rows; ++b) {
            const double d = squared_distance(bc.centroids.row(a), bc.centroids.row(b));
            if (d < inter) {
                inter = d;
                best_a = a;
                best_b = b;
            }
        }
    for (int r = 0; r < n; ++r) {
        const int c = bc.index_of.at(labels[r]);
        double sign = 0.0;
        if (c == best_a) sign = 1.0;
        else if (c == best_b) sign = -1.0;
        if (sign == 0.0) continue;
        // loss has -inter, so the sample gradient is -d(inter)/dz
        for (int j = 0; j < dim; ++j)
            d_embeddings(r, j) -= sign * 2.0 / bc.counts[c] *
                                  (bc.centroids(best_a, j) - bc.centroids(best_b, j));
    }
    return intra - inter;
}

namespace {

/// Stratified batches: each class's shuffled rows are dealt across batches
/// so the inter term stays defined; batches left with fewer than 2 classes
/// merge into their predecessor.
std::vector<std::vector<int>> stratified_batches(const EncodedDataset& ds,
                                                 const std::vector<int>& rows,
                                                 const std::vector<int>& known_ids, int batch_size,
                                                 RngStream& rng) {
    const int n_batches = std::max(1, (static_cast<int>(rows.size()) + batch_size - 1) / batch_size);
    std::vector<std::vector<int>> batches(n_batches);
    for (int cls : known_ids) {
        std::vector<int> cls_rows = ds.rows_of_class(cls, rows);
        rng.shuffle(cls_rows);
        for (std::size_t i = 0; i < cls_rows.size(); ++i)
            batches[i % n_batches].push_back(cls_rows[i]);
    }
    std::vector<std::vector<int>> result;
    for (auto& b : batches) {
        if (b.empty()) continue;
        std::vector<int> classes;
        for (int r : b) classes.push_back(ds.labels[r]);
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
        if (classes.size() < 2 && !result.empty()) {
            result.back().insert(result.back().end(), b.begin(), b.end());
        } else {
            result.push_back(std::move(b));
        }
    }
    require(!result.empty(), "stratified_batches: no usable batch");
    return result;
}

Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
    Matrix out(static_cast<int>(rows.size()), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < m.cols; ++j) out(static_cast<int>(i), j) = m(rows[i], j);
    return out;
}

CentroidSet centroids_over(const IiLossModel& model, const EncodedDataset& ds,
                           const std::vector<int>& rows, const std::vector<int>& known_ids) {
    CentroidSet set;
    set.class_ids = known_ids;
    set.centroids = Matrix(static_cast<int>(known_ids.size()), model.dim_z);
    for (std::size_t c = 0; c < known_ids.size(); ++c) {
        const auto cls_rows = ds.rows_of_class(known_ids[c], rows);
        require(!cls_rows.empty(),
                "train_iiloss: class " + std::to_string(known_ids[c]) + " is empty");
        const Matrix e = nn::forward_infer(model.spec, model.params, gather_rows(ds.features, cls_rows));
        for (int j = 0; j < e.cols; ++j) {
            double m = 0.0;
            for (int i = 0; i < e.rows; ++i) m += e(i, j);
            set.centroids(static_cast<int>(c), j) = m / e.rows;
        }
    }
    set.validate();
    return set;
}

}  // namespace

IiLossModel train_iiloss(const EncodedDataset& ds, const std::vector<int>& train_rows,
                         const std::vector<int>& val_rows, const std::vector<int>& known_ids,
                         const IiConfig& cfg, std::uint64_t seed, std::vector<IiEpochLog>* log) {
    require(known_ids.size() >= 2, "train_iiloss: need at least 2 known classes");
    require(!train_rows.empty() && !val_rows.empty(), "train_iiloss: empty split");

    RngStream rng(derive_seed(seed, "train-iiloss"));

    IiLossModel model;
    model.dim_z = cfg.dim_z;
    // hidden layers: ReLU + batchnorm + dropout; embedding layer: batchnorm only
    model.spec.layers.clear();
    int prev = ds.width();
    for (int h : cfg.hidden) {
        model.spec.layers.push_back({prev, h, nn::Activation::relu, true, cfg.dropout});
        prev = h;
    }
    model.spec.layers.push_back({prev, cfg.dim_z, nn::Activation::identity, true, 0.0});
    model.spec.validate();
    model.params = nn::MlpParams::init(model.spec, rng);

    nn::AdamConfig adam_cfg;
    adam_cfg.learning_rate = cfg.learning_rate;
    nn::AdamState state = nn::AdamState::init(model.spec, adam_cfg);

    const Matrix val_x = gather_rows(ds.features, val_rows);
    std::vector<int> val_labels;
    for (int r : val_rows) val_labels.push_back(ds.labels[r]);

    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;
    nn::MlpParams best_params = model.params;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        double train_loss = 0.0;
        int seen = 0;
        bool diverged = false;
        for (const auto& batch : stratified_batches(ds, train_rows, known_ids, cfg.batch_size, rng)) {
            const Matrix x = gather_rows(ds.features, batch);
            std::vector<int> labels;
            for (int r : batch) labels.push_back(ds.labels[r]);
            try {
                nn::ForwardTrace trace;
                const Matrix emb =
                    nn::forward(model.spec, model.params, x, nn::Mode::train, &rng, &trace, &model.params);
                Matrix d_emb;
                const double loss = ii_loss_with_grad(emb, labels, d_emb);
                if (!std::isfinite(loss)) throw NumericError("ii-loss diverged");
                nn::MlpGrads grads = nn::zeros_like(model.spec);
                nn::backward(model.spec, model.params, trace, d_emb, grads);
                nn::adam_step(model.params, grads, state);
                train_loss += loss * x.rows;
                seen += x.rows;
            } catch (const NumericError&) {
                diverged = true;
                break;
            }
        }
        if (diverged) break;  // the best snapshot is restored below

        const Matrix val_emb = nn::forward_infer(model.spec, model.params, val_x);
        const double val_loss = ii_loss(val_emb, val_labels);
        if (!std::isfinite(val_loss)) break;  // poisoned epoch, same abort path

        if (log) log->push_back({epoch, train_loss / std::max(1, seen), val_loss});

        if (val_loss < best_val) {
            best_val = val_loss;
            epochs_since_best = 0;
            best_params = model.params;
        } else {
            ++epochs_since_best;
            if (epochs_since_best > cfg.patience) break;
        }
    }
    model.params = best_params;
    model.centroids = centroids_over(model, ds, train_rows, known_ids);
    return model;
}

Matrix embed(const IiLossModel& model, const Matrix& x) {
    return nn::forward_infer(model.spec, model.params, x);
}

double outlier_score(const CentroidSet& centroids, std::span<const double> embedding) {
    centroids.validate();
    require(static_cast<int>(embedding.size()) == centroids.dim(),
            "outlier_score: embedding width mismatch");
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < centroids.size(); ++c)
        best = std::min(best, squared_distance(embedding, centroids.centroids.row(c)));
    return best;
}

Vec softmax_posterior(const CentroidSet& centroids, std::span<const double> embedding) {
    centroids.validate();
    Vec neg_d2(centroids.size());
    for (int c = 0; c < centroids.size(); ++c)
        neg_d2[c] = -squared_distance(embedding, centroids.centroids.row(c));
    const double m = *std::max_element(neg_d2.begin(), neg_d2.end());
    double sum = 0.0;
    for (double& v : neg_d2) {
        v = std::exp(v - m);
        sum += v;
    }
    for (double& v : neg_d2) v /= sum;
    return neg_d2;
}

ContaminationConfig fit_contamination_threshold(const std::vector<double>& training_scores,
                                                double alpha) {
    require(!training_scores.empty(), "fit_contamination_threshold: empty scores");
    require(alpha > 0.0 && alpha < 1.0, "fit_contamination_threshold: alpha must be in (0,1)");
    ContaminationConfig c;
    c.alpha = alpha;
    c.threshold = decision::nearest_rank_percentile(training_scores, 1.0 - alpha);
    c.fitted = true;
    return c;
}

OpenSetPrediction predict_open_set_os(const IiLossModel& model, const ContaminationConfig& config,
                                      std::span<const double> x_row) {
    require(config.fitted, "predict_open_set_os: threshold not fitted");
    Matrix x(1, static_cast<int>(x_row.size()));
    for (std::size_t j = 0; j < x_row.size(); ++j) x(0, j) = x_row[j];
    const Matrix e = embed(model, x);

    const Vec posterior = softmax_posterior(model.centroids, e.row(0));
    int best = 0;
    for (std::size_t c = 1; c < posterior.size(); ++c)
        if (posterior[c] > posterior[best]) best = static_cast<int>(c);

    OpenSetPrediction p;
    p.rule_value = outlier_score(model.centroids, e.row(0));
    p.nearest_class = model.centroids.class_ids[best];
    p.label = (p.rule_value <= config.threshold) ? p.nearest_class : kNovelLabel;
    return p;
}

nlohmann::json model_to_json(const IiLossModel& model, const ContaminationConfig* threshold) {
    nlohmann::json j = {{"format", "osr-iiloss-v1"},
                        {"dim_z", model.dim_z},
                        {"net", serialize::params_to_json(model.spec, model.params)},
                        {"centroids", model.centroids.to_json()}};
    if (threshold && threshold->fitted)
        j["contamination"] = {{"alpha", threshold->alpha}, {"threshold", threshold->threshold}};
    return j;
}

IiLossModel model_from_json(const nlohmann::json& j, ContaminationConfig* threshold) {
    require(j.at("format").get<std::string>() == "osr-iiloss-v1", "not an ii-loss checkpoint");
    IiLossModel m;
    m.dim_z = j.at("dim_z").get<int>();
    m.spec = serialize::spec_from_json(j.at("net").at("spec"));
    m.params = serialize::params_from_json(m.spec, j.at("net"));
    m.centroids = CentroidSet::from_json(j.at("centroids"));
    if (threshold) {
        if (j.contains("contamination")) {
            threshold->alpha = j.at("contamination").at("alpha").get<double>();
            threshold->threshold = j.at("contamination").at("threshold").get<double>();
            threshold->fitted = true;
        } else {
            threshold->fitted = false;
        }
    }
    return m;
}

}  // namespace osr::iiloss
