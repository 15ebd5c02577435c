#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "osr/nn.hpp"
#include "osr/serialize.hpp"

using namespace osr;
using namespace osr::nn;

namespace {

MlpSpec single_layer(int in, int out, Activation act) {
    MlpSpec spec;
    spec.layers.push_back({in, out, act, false, 0.0});
    return spec;
}

}  // namespace

TEST_CASE("forward: identity layer with identity weights passes input through") {
    MlpSpec spec = single_layer(2, 2, Activation::identity);
    RngStream rng(1);
    MlpParams params = MlpParams::init(spec, rng);
    params.layers[0].weight = Matrix::from_rows({{1, 0}, {0, 1}});
    params.layers[0].bias = {0, 0};
    Matrix x = Matrix::from_rows({{1, 2}});
    Matrix y = forward_infer(spec, params, x);
    CHECK(y(0, 0) == doctest::Approx(1.0));
    CHECK(y(0, 1) == doctest::Approx(2.0));
}

TEST_CASE("forward: sigmoid layer with zero weights emits 0.5 everywhere") {
    MlpSpec spec = single_layer(4, 3, Activation::sigmoid);
    RngStream rng(1);
    MlpParams params = MlpParams::init(spec, rng);
    params.layers[0].weight = Matrix(4, 3, 0.0);
    params.layers[0].bias = {0, 0, 0};
    Matrix x = Matrix::from_rows({{0.3, -2.0, 5.0, 1.0}});
    Matrix y = forward_infer(spec, params, x);
    for (int j = 0; j < 3; ++j) CHECK(y(0, j) == doctest::Approx(0.5));
}

TEST_CASE("forward: hand-computed 3->2 affine map") {
    MlpSpec spec = single_layer(3, 2, Activation::identity);
    RngStream rng(1);
    MlpParams params = MlpParams::init(spec, rng);
    params.layers[0].weight = Matrix::from_rows({{1, 0}, {0, 1}, {1, 1}});
    params.layers[0].bias = {0.5, -0.5};
    Matrix y = forward_infer(spec, params, Matrix::from_rows({{1, 2, 3}}));
    // oracle: [1*1+2*0+3*1 + 0.5, 1*0+2*1+3*1 - 0.5] = [4.5, 4.5]
    CHECK(y(0, 0) == doctest::Approx(4.5));
    CHECK(y(0, 1) == doctest::Approx(4.5));
}

TEST_CASE("forward: shape and finiteness guards") {
    MlpSpec spec = single_layer(3, 2, Activation::identity);
    RngStream rng(1);
    MlpParams params = MlpParams::init(spec, rng);
    CHECK_THROWS_AS(forward_infer(spec, params, Matrix(1, 4)), InvalidInput);
    Matrix bad(1, 3);
    bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(forward_infer(spec, params, bad), InvalidInput);
}

TEST_CASE("backward: linear layer gradients are g*x^T and g") {
    MlpSpec spec = single_layer(3, 2, Activation::identity);
    RngStream rng(7);
    MlpParams params = MlpParams::init(spec, rng);
    Matrix x = Matrix::from_rows({{1.0, -2.0, 0.5}});
    ForwardTrace trace;
    forward(spec, params, x, Mode::train, &rng, &trace);
    Matrix g = Matrix::from_rows({{0.25, -1.5}});
    MlpGrads grads = zeros_like(spec);
    Matrix dx = backward(spec, params, trace, g, grads);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j)
            CHECK(grads.layers[0].weight(i, j) == doctest::Approx(x(0, i) * g(0, j)));
    CHECK(grads.layers[0].bias[0] == doctest::Approx(0.25));
    CHECK(grads.layers[0].bias[1] == doctest::Approx(-1.5));
    // input gradient = g W^T
    for (int i = 0; i < 3; ++i) {
        double expect = 0.0;
        for (int j = 0; j < 2; ++j) expect += g(0, j) * params.layers[0].weight(i, j);
        CHECK(dx(0, i) == doctest::Approx(expect));
    }
}

TEST_CASE("backward: zero upstream gradient gives zero parameter gradients") {
    MlpSpec spec = MlpSpec::stack({4, 5, 3}, Activation::sigmoid);
    RngStream rng(3);
    MlpParams params = MlpParams::init(spec, rng);
    Matrix x(2, 4);
    for (double& v : x.data) v = rng.normal();
    ForwardTrace trace;
    forward(spec, params, x, Mode::train, &rng, &trace);
    MlpGrads grads = zeros_like(spec);
    backward(spec, params, trace, Matrix(2, 3, 0.0), grads);
    grads.for_each_trainable([&](const std::string&, const Vec& v) {
        for (double g : v) CHECK(g == 0.0);
    });
}

TEST_CASE("backward: 3-layer sigmoid net matches finite differences") {
    MlpSpec spec = MlpSpec::stack({4, 6, 5, 3}, Activation::sigmoid);
    RngStream rng(11);
    MlpParams params = MlpParams::init(spec, rng);
    Matrix x(3, 4);
    for (double& v : x.data) v = rng.normal();
    Matrix target(3, 3);
    for (double& v : target.data) v = rng.normal();

    auto loss_value = [&]() {
        Matrix out = forward_infer(spec, params, x);
        double l = 0.0;
        for (std::size_t k = 0; k < out.data.size(); ++k) {
            const double d = out.data[k] - target.data[k];
            l += 0.5 * d * d;
        }
        return l;
    };

    ForwardTrace trace;
    Matrix out = forward(spec, params, x, Mode::train, &rng, &trace);
    Matrix upstream(3, 3);
    for (std::size_t k = 0; k < out.data.size(); ++k)
        upstream.data[k] = out.data[k] - target.data[k];
    MlpGrads grads = zeros_like(spec);
    backward(spec, params, trace, upstream, grads);

    auto result = testing::gradcheck(params, grads, loss_value);
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("backward: batchnorm + relu + dropout layer matches finite differences") {
    MlpSpec spec;
    spec.layers.push_back({4, 6, Activation::relu, true, 0.3});
    spec.layers.push_back({6, 2, Activation::identity, true, 0.0});
    RngStream init_rng(5);
    MlpParams params = MlpParams::init(spec, init_rng);
    // move batchnorm off the trivial point so gamma/beta gradients are exercised
    for (auto& l : params.layers)
        if (l.bn)
            for (std::size_t j = 0; j < l.bn->gamma.size(); ++j) {
                l.bn->gamma[j] = 1.0 + 0.1 * static_cast<double>(j);
                l.bn->beta[j] = 0.05 * static_cast<double>(j);
            }
    Matrix x(5, 4);
    for (double& v : x.data) v = init_rng.normal();

    const std::uint64_t mask_seed = 99;  // same dropout masks for every probe
    auto traced_loss = [&](ForwardTrace* trace, Matrix* upstream) {
        RngStream rng(mask_seed);
        Matrix out = forward(spec, params, x, Mode::train, &rng, trace);
        double l = 0.0;
        for (double v : out.data) l += std::sin(v);
        if (upstream) {
            *upstream = Matrix(out.rows, out.cols);
            for (std::size_t k = 0; k < out.data.size(); ++k)
                upstream->data[k] = std::cos(out.data[k]);
        }
        return l;
    };

    ForwardTrace trace;
    Matrix upstream;
    traced_loss(&trace, &upstream);
    MlpGrads grads = zeros_like(spec);
    backward(spec, params, trace, upstream, grads);

    auto result = testing::gradcheck(
        params, grads, [&]() { return traced_loss(nullptr, nullptr); });
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("batchnorm: train-mode output has mean shift and variance scale^2") {
    MlpSpec spec;
    spec.layers.push_back({3, 3, Activation::identity, true, 0.0});
    RngStream rng(17);
    MlpParams params = MlpParams::init(spec, rng);
    params.layers[0].weight = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    for (int j = 0; j < 3; ++j) {
        params.layers[0].bn->gamma[j] = 0.5 + j;
        params.layers[0].bn->beta[j] = -1.0 + j;
    }
    Matrix x(64, 3);
    for (double& v : x.data) v = 3.0 * rng.normal() + 1.0;
    Matrix y = forward(spec, params, x, Mode::train, &rng);
    for (int j = 0; j < 3; ++j) {
        double m = 0.0;
        for (int i = 0; i < 64; ++i) m += y(i, j);
        m /= 64;
        double v = 0.0;
        for (int i = 0; i < 64; ++i) v += (y(i, j) - m) * (y(i, j) - m);
        v /= 64;
        CHECK(std::fabs(m - params.layers[0].bn->beta[j]) < 1e-5);
        const double g = params.layers[0].bn->gamma[j];
        CHECK(std::fabs(v - g * g) < 1e-5);
    }
}

TEST_CASE("forward: infer mode is idempotent and deterministic") {
    MlpSpec spec;
    spec.layers.push_back({3, 8, Activation::relu, true, 0.4});
    spec.layers.push_back({8, 2, Activation::identity, false, 0.0});
    RngStream rng(23);
    MlpParams params = MlpParams::init(spec, rng);
    Matrix x(4, 3);
    for (double& v : x.data) v = rng.normal();
    Matrix y1 = forward_infer(spec, params, x);
    Matrix y2 = forward_infer(spec, params, x);
    CHECK(y1.data == y2.data);
}

TEST_CASE("forward: train mode dropout is reproducible per seed") {
    MlpSpec spec;
    spec.layers.push_back({3, 16, Activation::relu, false, 0.5});
    spec.layers.push_back({16, 2, Activation::identity, false, 0.0});
    RngStream init_rng(29);
    MlpParams params = MlpParams::init(spec, init_rng);
    Matrix x(4, 3);
    for (double& v : x.data) v = init_rng.normal();
    RngStream a(1234), b(1234), c(77);
    Matrix ya = forward(spec, params, x, Mode::train, &a);
    Matrix yb = forward(spec, params, x, Mode::train, &b);
    Matrix yc = forward(spec, params, x, Mode::train, &c);
    CHECK(ya.data == yb.data);
    CHECK(ya.data != yc.data);
}

TEST_CASE("adam: zero gradient at fresh state leaves parameters unchanged") {
    MlpSpec spec = single_layer(2, 2, Activation::identity);
    RngStream rng(31);
    MlpParams params = MlpParams::init(spec, rng);
    const Vec before = params.layers[0].weight.data;
    AdamState state = AdamState::init(spec);
    adam_step(params, zeros_like(spec), state);
    CHECK(params.layers[0].weight.data == before);
    CHECK(state.step == 1);
}

TEST_CASE("adam: first step on a scalar moves by ~ -lr") {
    // hand evaluation at t=1: m=0.1, v=0.001, mhat=1, vhat=1,
    // delta = 0.001 * 1/(1+1e-8)
    Vec p{0.0}, g{1.0}, m{0.0}, v{0.0};
    adam_update_array(p, g, m, v, 1, AdamConfig{});
    CHECK(p[0] == doctest::Approx(-0.001).epsilon(1e-6));
}

TEST_CASE("adam: identical seeds give bitwise-identical trajectories") {
    auto run = [](std::uint64_t seed) {
        MlpSpec spec = MlpSpec::stack({3, 4, 2}, Activation::sigmoid);
        RngStream rng(seed);
        MlpParams params = MlpParams::init(spec, rng);
        AdamState state = AdamState::init(spec);
        Matrix x(2, 3);
        for (double& v : x.data) v = rng.normal();
        for (int it = 0; it < 25; ++it) {
            ForwardTrace trace;
            Matrix out = forward(spec, params, x, Mode::train, &rng, &trace);
            MlpGrads grads = zeros_like(spec);
            backward(spec, params, trace, out, grads);  // L = 0.5*||out||^2 upstream=out
            adam_step(params, grads, state);
        }
        Vec flat;
        params.for_each_trainable([&](const std::string&, const Vec& v) {
            flat.insert(flat.end(), v.begin(), v.end());
        });
        return flat;
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
}

TEST_CASE("adam: non-finite gradient aborts without touching parameters") {
    MlpSpec spec = single_layer(2, 1, Activation::identity);
    RngStream rng(37);
    MlpParams params = MlpParams::init(spec, rng);
    const Vec before = params.layers[0].weight.data;
    AdamState state = AdamState::init(spec);
    MlpGrads grads = zeros_like(spec);
    grads.layers[0].weight(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(adam_step(params, grads, state), NumericError);
    CHECK(params.layers[0].weight.data == before);
    CHECK(state.step == 0);
}

TEST_CASE("sample_gaussian: variance floor pins the sample to the mean") {
    GaussianParams p{{1.5, -2.0}, {-1e9, -1e9}};
    for (double e : {-3.0, -1.0, 0.0, 2.5, 3.0}) {
        Vec s = sample_gaussian_with(p, Vec{e, e});
        CHECK(std::fabs(s[0] - 1.5) < 1e-3);
        CHECK(std::fabs(s[1] + 2.0) < 1e-3);
    }
}

TEST_CASE("sample_gaussian: fixed noise evaluates the reparameterization directly") {
    GaussianParams p{{2.0, 2.0}, {0.0, 0.0}};
    Vec s = sample_gaussian_with(p, Vec{1.0, -1.0});
    CHECK(s[0] == doctest::Approx(3.0));
    CHECK(s[1] == doctest::Approx(1.0));
}

TEST_CASE("sample_gaussian: matches N(0,1) moments over 1e5 draws") {
    GaussianParams p{{0.0}, {0.0}};
    RngStream rng(4242);
    double sum = 0.0, sum2 = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double s = sample_gaussian(p, rng)[0];
        sum += s;
        sum2 += s * s;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::fabs(mean) < 0.02);
    CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("sample_gaussian: identical streams give identical draws") {
    GaussianParams p{{0.5, -0.5, 1.0}, {0.2, -0.2, 0.0}};
    RngStream a(9), b(9);
    CHECK(sample_gaussian(p, a) == sample_gaussian(p, b));
}

TEST_CASE("serialization: parameter round-trip is bit-exact") {
    MlpSpec spec;
    spec.layers.push_back({3, 5, Activation::relu, true, 0.25});
    spec.layers.push_back({5, 2, Activation::identity, false, 0.0});
    RngStream rng(51);
    MlpParams params = MlpParams::init(spec, rng);
    // perturb running stats away from the defaults
    for (std::size_t j = 0; j < params.layers[0].bn->running_mean.size(); ++j) {
        params.layers[0].bn->running_mean[j] = rng.normal();
        params.layers[0].bn->running_var[j] = std::exp(rng.normal());
    }
    const auto j = serialize::params_to_json(spec, params);
    const auto text = j.dump();
    const auto j2 = serialize::json::parse(text);
    MlpSpec spec2 = serialize::spec_from_json(j2.at("spec"));
    MlpParams restored = serialize::params_from_json(spec2, j2);
    REQUIRE(restored.layers.size() == params.layers.size());
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        CHECK(restored.layers[i].weight.data == params.layers[i].weight.data);
        CHECK(restored.layers[i].bias == params.layers[i].bias);
        if (params.layers[i].bn) {
            CHECK(restored.layers[i].bn->gamma == params.layers[i].bn->gamma);
            CHECK(restored.layers[i].bn->running_mean == params.layers[i].bn->running_mean);
            CHECK(restored.layers[i].bn->running_var == params.layers[i].bn->running_var);
        }
    }
}
