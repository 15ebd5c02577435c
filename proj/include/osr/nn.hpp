#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "osr/common.hpp"
#include "osr/matrix.hpp"
#include "osr/rng.hpp"

namespace osr::nn {

enum class Activation { identity, sigmoid, relu };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

/// One affine layer with optional batch normalization, a pointwise
/// activation, and optional (inverted) dropout, applied in that order.
struct LayerSpec {
    int in = 0;
    int out = 0;
    Activation activation = Activation::identity;
    bool batchnorm = false;
    double dropout = 0.0;  // in [0, 1)
};

struct MlpSpec {
    std::vector<LayerSpec> layers;

    /// Plain stack: hidden layers share one activation, the head is linear.
    static MlpSpec stack(const std::vector<int>& sizes, Activation hidden);

    int input_width() const { return layers.empty() ? 0 : layers.front().in; }
    int output_width() const { return layers.empty() ? 0 : layers.back().out; }
    void validate() const;
};

struct BatchNormParams {
    Vec gamma, beta;                 // learned scale/shift
    Vec running_mean, running_var;   // inference statistics
};

struct LayerParams {
    Matrix weight;  // [in x out]
    Vec bias;       // [out]
    std::optional<BatchNormParams> bn;
};

/// Learnable state of an MLP plus batchnorm running statistics.
struct MlpParams {
    std::vector<LayerParams> layers;

    /// Glorot-uniform weights, zero biases, unit batchnorm scale.
    static MlpParams init(const MlpSpec& spec, RngStream& rng);

    /// Visits every trainable array (weights, biases, batchnorm scale/shift)
    /// in a stable order. Running statistics are excluded.
    void for_each_trainable(const std::function<void(const std::string&, Vec&)>& fn);
    void for_each_trainable(const std::function<void(const std::string&, const Vec&)>& fn) const;

    void check_consistent(const MlpSpec& spec) const;
    bool all_finite_params() const;
};

/// Gradient (or moment) buffers shaped like the trainable part of MlpParams.
using MlpGrads = MlpParams;
MlpGrads zeros_like(const MlpSpec& spec);

enum class Mode { train, infer };

/// Per-layer intermediates captured by a train-mode forward pass, consumed
/// by backward().
struct LayerTrace {
    Matrix input;
    Matrix pre_bn;
    Matrix bn_xhat;
    Vec bn_mean, bn_var;
    bool bn_batch_stats = false;
    Matrix pre_act;
    Matrix post_act;
    Matrix dropout_mask;  // scaled inverted-dropout mask, empty when unused
};
using ForwardTrace = std::vector<LayerTrace>;

/// Forward pass.
///  - infer mode: dropout off, batchnorm uses running statistics; pure.
///  - train mode: dropout masks drawn from `rng`, batchnorm uses batch
///    statistics; running statistics are blended only when
///    `update_running_stats` is set (loss probes for finite-difference
///    checks pass false).
Matrix forward(const MlpSpec& spec, const MlpParams& params, const Matrix& input, Mode mode,
               RngStream* rng = nullptr, ForwardTrace* trace = nullptr,
               MlpParams* running_stats_target = nullptr);

inline Matrix forward_infer(const MlpSpec& spec, const MlpParams& params, const Matrix& input) {
    return forward(spec, params, input, Mode::infer);
}

/// Backpropagates `upstream` (d loss / d output) through a traced forward
/// pass. Accumulates parameter gradients into `grads` and returns the input
/// gradient.
Matrix backward(const MlpSpec& spec, const MlpParams& params, const ForwardTrace& trace,
                const Matrix& upstream, MlpGrads& grads);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    MlpGrads m, v;
    long step = 0;

    static AdamState init(const MlpSpec& spec, AdamConfig cfg = {});
};

/// One Adam update on a flat array; exposed for the scalar unit tests.
void adam_update_array(std::span<double> param, std::span<const double> grad,
                       std::span<double> m, std::span<double> v, long step,
                       const AdamConfig& cfg);

/// Standard Adam with bias correction. Throws NumericError on any
/// non-finite gradient entry; params are untouched in that case.
void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state);

/// Diagonal Gaussian given as mean and log-variance.
struct GaussianParams {
    Vec mean;
    Vec log_variance;
};

constexpr double kVarianceFloor = 1e-8;
constexpr double kLogVarClampLo = -10.0;
constexpr double kLogVarClampHi = 10.0;

/// Reparameterized sample: mean + sqrt(max(exp(lv), floor)) * eps.
Vec sample_gaussian(const GaussianParams& p, RngStream& rng);
Vec sample_gaussian_with(const GaussianParams& p, std::span<const double> eps);

/// Diagonal Gaussian log-density with the variance floor.
double gaussian_log_density(std::span<const double> x, std::span<const double> mean,
                            std::span<const double> log_variance);

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace osr::nn
