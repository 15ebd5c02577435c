#pragma once

#include <optional>
#include <vector>

#include "osr/centroids.hpp"
#include "osr/data.hpp"
#include "osr/nn.hpp"

namespace osr::gmvae {

using data::EncodedDataset;
using data::FeatureBlock;
using data::Likelihood;

/// Batch of diagonal Gaussians: one (mean, log-variance) row per sample.
struct GaussianBatch {
    Matrix mean;
    Matrix log_variance;

    nn::GaussianParams row(int r) const {
        return {mean.row_copy(r), log_variance.row_copy(r)};
    }
};

struct GmvaeConfig {
    int n_classes = 0;                       // C
    std::vector<int> components_per_class;    // K_1..K_C, default all 1
    int dim_z = 10;
    int dim_w = 10;
    std::vector<Vec> component_prior;         // pi(y), per class over K_c, default uniform
    std::vector<FeatureBlock> blocks;          // reconstruction layout
    std::vector<int> phi_z_hidden{100, 50};
    std::vector<int> beta_hidden{20, 20};

    void validate() const;
    int total_components() const;
    int input_width() const;  // encoded feature width from blocks
    Vec prior_for_class(int c) const;
};

/// The conditional generative model and its encoders: phi_z encodes x to a
/// z Gaussian, phi_w encodes (x, y) to a w Gaussian, beta maps w to the
/// per-(class, component) prior Gaussians, theta decodes z back to feature
/// space.
struct GmvaeModel {
    GmvaeConfig config;
    nn::MlpSpec spec_phi_z, spec_phi_w, spec_beta, spec_theta;
    nn::MlpParams phi_z, phi_w, beta, theta;
    bool phi_z_frozen = false;

    static GmvaeModel init(const GmvaeConfig& config, RngStream& rng);
};

struct ElboBreakdown {
    double reconstruction = 0.0;
    double latent_covering = 0.0;
    double w_prior = 0.0;
    double v_prior = 0.0;
    double total = 0.0;  // reconstruction - latent_covering - w_prior - v_prior

    static ElboBreakdown assemble(double recon, double covering, double wp, double vp) {
        return {recon, covering, wp, vp, recon - covering - wp - vp};
    }
};

/// Splits a "2 x dim" Gaussian head output into mean (first half) and
/// clamped log-variance (second half).
GaussianBatch split_gaussian_head(const Matrix& head_output);

GaussianBatch encode_z(const GmvaeModel& model, const Matrix& x);
GaussianBatch encode_w(const GmvaeModel& model, const Matrix& x, const Matrix& y_one_hot);

/// One-hot rows over the model's known classes from per-sample class
/// indices in [0, C).
Matrix one_hot(const std::vector<int>& class_indices, int n_classes);

/// The C x K_c grid of prior component Gaussians read from beta(w) for a
/// single w sample.
struct ComponentGrid {
    std::vector<std::vector<nn::GaussianParams>> by_class;  // [c][k]
};
ComponentGrid prior_components(const GmvaeModel& model, const Vec& w);

struct ComponentPosterior {
    Vec probs;             // over K_c, sums to 1
    bool underflow = false;  // fell back to the prior
};
ComponentPosterior component_posterior(const GmvaeModel& model, const Vec& z, const Vec& w,
                                       int class_index);

/// Per-term weights let the gradient suite isolate a single ELBO term; the
/// trainer uses all ones.
struct ElboTermWeights {
    double reconstruction = 1.0;
    double latent_covering = 1.0;
    double w_prior = 1.0;
    double v_prior = 1.0;
};

struct GmvaeGrads {
    nn::MlpGrads theta, beta, phi_w;
};

/// Deterministic ELBO core: one Monte-Carlo draw with explicit noise
/// (eps_z, eps_w are [batch x dim] matrices). When `grads` is non-null the
/// analytic gradients of the weighted ELBO with respect to theta, beta and
/// phi_w are accumulated (phi_z is treated as frozen).
ElboBreakdown elbo_fixed_noise(const GmvaeModel& model, const Matrix& x,
                               const std::vector<int>& class_indices, const Matrix& eps_z,
                               const Matrix& eps_w, const ElboTermWeights& weights = {},
                               GmvaeGrads* grads = nullptr);

/// Monte-Carlo ELBO estimate with noise drawn from `rng`.
ElboBreakdown elbo(const GmvaeModel& model, const Matrix& x, const std::vector<int>& class_indices,
                   int mc_samples, RngStream& rng);

struct TrainConfig {
    int batch_size = 128;
    double learning_rate = 1e-3;
    int max_epochs = 500;
    int patience = 10;
    int mc_samples = 1;
    int pretrain_epochs = 60;
};

struct PretrainLog {
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Trains phi_z with a softmax classification head on the encoder mean
/// (cross-entropy), then freezes it. The head is discarded. `known_ids`
/// orders the dataset-level class ids onto model class indices 0..C-1.
PretrainLog pretrain_phi_z(GmvaeModel& model, const EncodedDataset& ds,
                           const std::vector<int>& train_rows, const std::vector<int>& known_ids,
                           int epochs, const TrainConfig& cfg, std::uint64_t seed);

struct EpochLog {
    int epoch = 0;
    ElboBreakdown train;
    double validation_objective = 0.0;  // negative ELBO on the validation set
};

/// Maximizes the ELBO over theta, beta, phi_w with Adam; early-stops when
/// the validation objective fails to improve for `patience` epochs and
/// restores the best snapshot. phi_z must already be frozen.
std::vector<EpochLog> train_gmvae(GmvaeModel& model, const EncodedDataset& ds,
                                  const std::vector<int>& train_rows,
                                  const std::vector<int>& val_rows,
                                  const std::vector<int>& known_ids, const TrainConfig& cfg,
                                  std::uint64_t seed);

/// Deterministic embedding: the encoder mean, no sampling.
Matrix embed(const GmvaeModel& model, const Matrix& x);

/// Training-set class centroids of the embedding, ordered by `known_ids`.
CentroidSet class_centroids(const GmvaeModel& model, const EncodedDataset& ds,
                            const std::vector<int>& train_rows, const std::vector<int>& known_ids);

nlohmann::json model_to_json(const GmvaeModel& model);
GmvaeModel model_from_json(const nlohmann::json& j);

}  // namespace osr::gmvae
