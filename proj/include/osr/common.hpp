#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace osr {

using Vec = std::vector<double>;

/// Reserved prediction/truth label for the aggregated novel class; never a
/// valid dataset class id.
constexpr int kNovelLabel = -1;

/// Malformed or inconsistent caller input (shape mismatches, bad labels,
/// invalid configuration values).
struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A numeric failure during training or evaluation (non-finite loss or
/// gradient, divergence).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised by threshold selection when no saturation point exists.
struct NoSaturationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Pipeline stage failure; carries the stage name for CLI reporting.
struct StageError : std::runtime_error {
    std::string stage;
    StageError(std::string stage_name, const std::string& what)
        : std::runtime_error(stage_name + ": " + what), stage(std::move(stage_name)) {}
};

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidInput(msg);
}

inline double clamp(double x, double lo, double hi) {
    return x < lo ? lo : (x > hi ? hi : x);
}

/// Numerically stable log(sum(exp(xs))).
inline double log_sum_exp(std::span<const double> xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace osr
