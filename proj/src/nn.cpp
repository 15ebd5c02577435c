#include "osr/nn.hpp"

#include <algorithm>
#include <cmath>

namespace osr::nn {

namespace {
constexpr double kBnEpsilon = 1e-8;
constexpr double kBnMomentum = 0.9;
constexpr double kPi = 3.14159265358979323846;
}  // namespace

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::sigmoid: return "sigmoid";
        case Activation::relu: return "relu";
    }
    return "identity";
}

Activation activation_from_name(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "relu") return Activation::relu;
    throw InvalidInput("unknown activation: " + name);
}

MlpSpec MlpSpec::stack(const std::vector<int>& sizes, Activation hidden) {
    require(sizes.size() >= 2, "MlpSpec::stack: need at least input and output widths");
    MlpSpec spec;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        LayerSpec layer;
        layer.in = sizes[i];
        layer.out = sizes[i + 1];
        layer.activation = (i + 2 < sizes.size()) ? hidden : Activation::identity;
        spec.layers.push_back(layer);
    }
    spec.validate();
    return spec;
}

void MlpSpec::validate() const {
    require(!layers.empty(), "MlpSpec: at least one layer required");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        require(l.in >= 1 && l.out >= 1, "MlpSpec: layer widths must be >= 1");
        require(l.dropout >= 0.0 && l.dropout < 1.0, "MlpSpec: dropout must be in [0,1)");
        if (i + 1 < layers.size())
            require(l.out == layers[i + 1].in, "MlpSpec: adjacent layer widths disagree");
    }
}

MlpParams MlpParams::init(const MlpSpec& spec, RngStream& rng) {
    spec.validate();
    MlpParams params;
    for (const auto& l : spec.layers) {
        LayerParams lp;
        lp.weight = Matrix(l.in, l.out);
        const double r = std::sqrt(6.0 / (l.in + l.out));
        for (double& w : lp.weight.data) w = (2.0 * rng.uniform() - 1.0) * r;
        lp.bias.assign(l.out, 0.0);
        if (l.batchnorm) {
            BatchNormParams bn;
            bn.gamma.assign(l.out, 1.0);
            bn.beta.assign(l.out, 0.0);
            bn.running_mean.assign(l.out, 0.0);
            bn.running_var.assign(l.out, 1.0);
            lp.bn = std::move(bn);
        }
        params.layers.push_back(std::move(lp));
    }
    return params;
}

void MlpParams::for_each_trainable(const std::function<void(const std::string&, Vec&)>& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string prefix = "layer" + std::to_string(i) + ".";
        fn(prefix + "weight", layers[i].weight.data);
        fn(prefix + "bias", layers[i].bias);
        if (layers[i].bn) {
            fn(prefix + "bn_gamma", layers[i].bn->gamma);
            fn(prefix + "bn_beta", layers[i].bn->beta);
        }
    }
}

void MlpParams::for_each_trainable(const std::function<void(const std::string&, const Vec&)>& fn) const {
    const_cast<MlpParams*>(this)->for_each_trainable(
        [&](const std::string& name, Vec& v) { fn(name, v); });
}

void MlpParams::check_consistent(const MlpSpec& spec) const {
    require(layers.size() == spec.layers.size(), "MlpParams: layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const auto& s = spec.layers[i];
        require(l.weight.rows == s.in && l.weight.cols == s.out, "MlpParams: weight shape mismatch");
        require(static_cast<int>(l.bias.size()) == s.out, "MlpParams: bias shape mismatch");
        require(l.bn.has_value() == s.batchnorm, "MlpParams: batchnorm presence mismatch");
        if (l.bn)
            require(static_cast<int>(l.bn->gamma.size()) == s.out &&
                        static_cast<int>(l.bn->running_mean.size()) == s.out,
                    "MlpParams: batchnorm shape mismatch");
    }
}

bool MlpParams::all_finite_params() const {
    bool ok = true;
    for_each_trainable([&](const std::string&, const Vec& v) { ok = ok && all_finite(v); });
    for (const auto& l : layers)
        if (l.bn) ok = ok && all_finite(l.bn->running_mean) && all_finite(l.bn->running_var);
    return ok;
}

MlpGrads zeros_like(const MlpSpec& spec) {
    MlpGrads g;
    for (const auto& l : spec.layers) {
        LayerParams lp;
        lp.weight = Matrix(l.in, l.out);
        lp.bias.assign(l.out, 0.0);
        if (l.batchnorm) {
            BatchNormParams bn;
            bn.gamma.assign(l.out, 0.0);
            bn.beta.assign(l.out, 0.0);
            lp.bn = std::move(bn);
        }
        g.layers.push_back(std::move(lp));
    }
    return g;
}

namespace {

double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::sigmoid: return sigmoid(x);
        case Activation::relu: return x > 0.0 ? x : 0.0;
    }
    return x;
}

}  // namespace

Matrix forward(const MlpSpec& spec, const MlpParams& params, const Matrix& input, Mode mode,
               RngStream* rng, ForwardTrace* trace, MlpParams* running_stats_target) {
    spec.validate();
    params.check_consistent(spec);
    require(input.cols == spec.input_width(), "forward: input width does not match spec");
    require(all_finite(input.data), "forward: non-finite input");
    const int batch = input.rows;
    if (trace) {
        trace->clear();
        trace->resize(spec.layers.size());
    }

    Matrix x = input;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const auto& ls = spec.layers[li];
        const auto& lp = params.layers[li];
        LayerTrace* lt = trace ? &(*trace)[li] : nullptr;
        if (lt) lt->input = x;

        Matrix u = matmul(x, lp.weight);
        for (int i = 0; i < batch; ++i)
            for (int j = 0; j < ls.out; ++j) u(i, j) += lp.bias[j];
        if (lt) lt->pre_bn = u;

        if (ls.batchnorm) {
            const auto& bn = *lp.bn;
            Vec mean(ls.out, 0.0), var(ls.out, 0.0);
            const bool batch_stats = (mode == Mode::train);
            if (batch_stats) {
                for (int j = 0; j < ls.out; ++j) {
                    double m = 0.0;
                    for (int i = 0; i < batch; ++i) m += u(i, j);
                    m /= batch;
                    double v = 0.0;
                    for (int i = 0; i < batch; ++i) {
                        const double d = u(i, j) - m;
                        v += d * d;
                    }
                    v /= batch;
                    mean[j] = m;
                    var[j] = v;
                }
                if (running_stats_target) {
                    auto& target = *running_stats_target->layers[li].bn;
                    for (int j = 0; j < ls.out; ++j) {
                        target.running_mean[j] = kBnMomentum * target.running_mean[j] + (1.0 - kBnMomentum) * mean[j];
                        target.running_var[j] = kBnMomentum * target.running_var[j] + (1.0 - kBnMomentum) * var[j];
                    }
                }
            } else {
                mean = bn.running_mean;
                var = bn.running_var;
            }
            Matrix xhat(batch, ls.out);
            for (int j = 0; j < ls.out; ++j) {
                const double inv_sd = 1.0 / std::sqrt(var[j] + kBnEpsilon);
                for (int i = 0; i < batch; ++i) {
                    xhat(i, j) = (u(i, j) - mean[j]) * inv_sd;
                    u(i, j) = bn.gamma[j] * xhat(i, j) + bn.beta[j];
                }
            }
            if (lt) {
                lt->bn_xhat = std::move(xhat);
                lt->bn_mean = std::move(mean);
                lt->bn_var = std::move(var);
                lt->bn_batch_stats = batch_stats;
            }
        }
        if (lt) lt->pre_act = u;

        for (double& v : u.data) v = apply_activation(ls.activation, v);
        if (lt) lt->post_act = u;

        if (ls.dropout > 0.0 && mode == Mode::train) {
            require(rng != nullptr, "forward: train-mode dropout needs an rng stream");
            Matrix mask(batch, ls.out);
            const double keep = 1.0 - ls.dropout;
            for (double& m : mask.data) m = (rng->uniform() < ls.dropout) ? 0.0 : 1.0 / keep;
            for (std::size_t k = 0; k < u.data.size(); ++k) u.data[k] *= mask.data[k];
            if (lt) lt->dropout_mask = std::move(mask);
        }
        x = std::move(u);
    }
    return x;
}

Matrix backward(const MlpSpec& spec, const MlpParams& params, const ForwardTrace& trace,
                const Matrix& upstream, MlpGrads& grads) {
    require(trace.size() == spec.layers.size(), "backward: trace missing or stale");
    require(upstream.cols == spec.output_width(), "backward: upstream width mismatch");
    require(upstream.rows == trace.back().input.rows, "backward: upstream batch mismatch");

    Matrix g = upstream;
    for (int li = static_cast<int>(spec.layers.size()) - 1; li >= 0; --li) {
        const auto& ls = spec.layers[li];
        const auto& lp = params.layers[li];
        const auto& lt = trace[li];
        const int batch = g.rows;

        if (lt.dropout_mask.rows > 0)
            for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] *= lt.dropout_mask.data[k];

        switch (ls.activation) {
            case Activation::identity: break;
            case Activation::sigmoid:
                for (std::size_t k = 0; k < g.data.size(); ++k) {
                    const double s = lt.post_act.data[k];
                    g.data[k] *= s * (1.0 - s);
                }
                break;
            case Activation::relu:
                for (std::size_t k = 0; k < g.data.size(); ++k)
                    if (lt.pre_act.data[k] <= 0.0) g.data[k] = 0.0;
                break;
        }

        if (ls.batchnorm) {
            auto& bn_grads = *grads.layers[li].bn;
            const auto& bn = *lp.bn;
            require(lt.bn_batch_stats && lt.bn_xhat.rows == batch,
                    "backward: batchnorm trace must come from a train-mode forward");
            Matrix du(batch, ls.out);
            for (int j = 0; j < ls.out; ++j) {
                const double inv_sd = 1.0 / std::sqrt(lt.bn_var[j] + kBnEpsilon);
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int i = 0; i < batch; ++i) {
                    const double dy = g(i, j);
                    sum_dy += dy;
                    sum_dy_xhat += dy * lt.bn_xhat(i, j);
                    bn_grads.beta[j] += dy;
                    bn_grads.gamma[j] += dy * lt.bn_xhat(i, j);
                }
                const double mean_dy = sum_dy / batch;
                const double mean_dy_xhat = sum_dy_xhat / batch;
                for (int i = 0; i < batch; ++i) {
                    const double dxhat = g(i, j) * bn.gamma[j];
                    const double mdx = mean_dy * bn.gamma[j];
                    const double mdxx = mean_dy_xhat * bn.gamma[j];
                    du(i, j) = inv_sd * (dxhat - mdx - lt.bn_xhat(i, j) * mdxx);
                }
            }
            g = std::move(du);
        }

        // affine: dW = X^T g, db = column sums of g, dX = g W^T
        Matrix dw = matmul_at_b(lt.input, g);
        for (std::size_t k = 0; k < dw.data.size(); ++k) grads.layers[li].weight.data[k] += dw.data[k];
        for (int i = 0; i < batch; ++i)
            for (int j = 0; j < ls.out; ++j) grads.layers[li].bias[j] += g(i, j);
        g = matmul_a_bt(g, lp.weight);
    }
    return g;
}

void adam_update_array(std::span<double> param, std::span<const double> grad,
                       std::span<double> m, std::span<double> v, long step,
                       const AdamConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

AdamState AdamState::init(const MlpSpec& spec, AdamConfig cfg) {
    AdamState s;
    s.config = cfg;
    s.m = zeros_like(spec);
    s.v = zeros_like(spec);
    s.step = 0;
    return s;
}

void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state) {
    bool finite = true;
    grads.for_each_trainable([&](const std::string&, const Vec& g) { finite = finite && all_finite(g); });
    if (!finite) throw NumericError("adam_step: non-finite gradient");

    std::vector<Vec*> ps, ms, vs;
    std::vector<const Vec*> gs;
    params.for_each_trainable([&](const std::string&, Vec& p) { ps.push_back(&p); });
    grads.for_each_trainable([&](const std::string&, const Vec& g) { gs.push_back(&g); });
    state.m.for_each_trainable([&](const std::string&, Vec& m) { ms.push_back(&m); });
    state.v.for_each_trainable([&](const std::string&, Vec& v) { vs.push_back(&v); });
    require(ps.size() == gs.size() && ps.size() == ms.size() && ps.size() == vs.size(),
            "adam_step: gradient shape does not match parameters");
    ++state.step;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        require(ps[i]->size() == gs[i]->size(), "adam_step: array length mismatch");
        adam_update_array(*ps[i], *gs[i], *ms[i], *vs[i], state.step, state.config);
    }
}

Vec sample_gaussian(const GaussianParams& p, RngStream& rng) {
    Vec eps(p.mean.size());
    for (double& e : eps) e = rng.normal();
    return sample_gaussian_with(p, eps);
}

Vec sample_gaussian_with(const GaussianParams& p, std::span<const double> eps) {
    require(p.mean.size() == p.log_variance.size(), "sample_gaussian: mean/log-variance length mismatch");
    require(p.mean.size() == eps.size(), "sample_gaussian: noise length mismatch");
    require(all_finite(p.mean), "sample_gaussian: non-finite mean");
    Vec out(p.mean.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double var = std::max(std::exp(p.log_variance[i]), kVarianceFloor);
        out[i] = p.mean[i] + std::sqrt(var) * eps[i];
    }
    return out;
}

double gaussian_log_density(std::span<const double> x, std::span<const double> mean,
                            std::span<const double> log_variance) {
    require(x.size() == mean.size() && x.size() == log_variance.size(),
            "gaussian_log_density: length mismatch");
    double ld = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double var = std::max(std::exp(log_variance[i]), kVarianceFloor);
        const double d = x[i] - mean[i];
        ld += -0.5 * std::log(2.0 * kPi * var) - 0.5 * d * d / var;
    }
    return ld;
}

}  // namespace osr::nn
