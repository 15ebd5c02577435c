#pragma once

// Central finite-difference gradient oracle shared by the unit and
// acceptance suites. Kept independent of the backward() implementations it
// checks: it only re-evaluates scalar losses under parameter perturbations.

#include <functional>
#include <string>
#include <vector>

#include "osr/nn.hpp"

namespace osr::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_array;
    std::size_t worst_index = 0;
};

inline double rel_error(double a, double b) {
    const double scale = std::max({1e-6, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / scale;
}

/// Compares an analytic gradient against central differences of `loss`
/// over every trainable entry of `params`.
inline GradCheckResult gradcheck(nn::MlpParams& params, const nn::MlpGrads& analytic,
                                 const std::function<double()>& loss, double h = 1e-5) {
    std::vector<std::pair<std::string, Vec*>> arrays;
    params.for_each_trainable([&](const std::string& name, Vec& v) { arrays.emplace_back(name, &v); });
    std::vector<std::pair<std::string, const Vec*>> grads;
    analytic.for_each_trainable(
        [&](const std::string& name, const Vec& v) { grads.emplace_back(name, &v); });

    GradCheckResult result;
    for (std::size_t a = 0; a < arrays.size(); ++a) {
        Vec& p = *arrays[a].second;
        const Vec& g = *grads[a].second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p[i];
            p[i] = saved + h;
            const double up = loss();
            p[i] = saved - h;
            const double down = loss();
            p[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double err = rel_error(g[i], fd);
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_array = arrays[a].first;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace osr::testing
