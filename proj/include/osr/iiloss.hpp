#pragma once

#include <vector>

#include "osr/centroids.hpp"
#include "osr/data.hpp"
#include "osr/decision.hpp"
#include "osr/nn.hpp"

namespace osr::iiloss {

using data::EncodedDataset;
using decision::OpenSetPrediction;

struct IiConfig {
    int dim_z = 10;
    std::vector<int> hidden{100, 50};
    double dropout = 0.2;
    int batch_size = 128;
    double learning_rate = 1e-3;
    int max_epochs = 500;
    int patience = 10;
};

struct IiLossModel {
    nn::MlpSpec spec;
    nn::MlpParams params;
    CentroidSet centroids;
    int dim_z = 10;
};

/// Intra-spread minus inter-spread over a batch of embeddings: mean squared
/// distance to the own batch centroid, minus the minimum squared distance
/// between distinct batch centroids. Needs at least two classes present.
double ii_loss(const Matrix& embeddings, const std::vector<int>& labels);

/// Same, also writing d(loss)/d(embedding) rows into `d_embeddings`.
double ii_loss_with_grad(const Matrix& embeddings, const std::vector<int>& labels,
                         Matrix& d_embeddings);

struct IiEpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;
};

/// Minimizes the ii-loss with Adam over class-stratified batches (every
/// batch carries each class when sizes allow, so the inter term is always
/// defined). Early-stops on the validation ii-loss; final centroids are
/// recomputed over the whole training set in infer mode.
IiLossModel train_iiloss(const EncodedDataset& ds, const std::vector<int>& train_rows,
                         const std::vector<int>& val_rows, const std::vector<int>& known_ids,
                         const IiConfig& cfg, std::uint64_t seed,
                         std::vector<IiEpochLog>* log = nullptr);

/// Infer-mode embedding of encoded feature rows.
Matrix embed(const IiLossModel& model, const Matrix& x);

/// Squared distance to the nearest centroid.
double outlier_score(const CentroidSet& centroids, std::span<const double> embedding);

/// P(y = i | x) proportional to exp(-squared distance to centroid i),
/// computed with max subtraction.
Vec softmax_posterior(const CentroidSet& centroids, std::span<const double> embedding);

struct ContaminationConfig {
    double alpha = 0.01;
    double threshold = 0.0;
    bool fitted = false;
};

/// threshold = the empirical (1 - alpha) nearest-rank percentile of the
/// training outlier scores.
ContaminationConfig fit_contamination_threshold(const std::vector<double>& training_scores,
                                                double alpha);

/// Argmax of the softmax posterior when the outlier score is <= the fitted
/// threshold (boundary counts as known), novel otherwise.
OpenSetPrediction predict_open_set_os(const IiLossModel& model, const ContaminationConfig& config,
                                      std::span<const double> x_row);

nlohmann::json model_to_json(const IiLossModel& model, const ContaminationConfig* threshold = nullptr);
IiLossModel model_from_json(const nlohmann::json& j, ContaminationConfig* threshold = nullptr);

}  // namespace osr::iiloss
