#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/common.hpp"
#include "osr/data.hpp"

namespace osr::eval {

/// Unweighted mean of per-class F1 over `class_universe`. Per-class
/// F1 = 2TP / (2TP + FP + FN) with 0/0 -> 0. Predictions outside the
/// universe (e.g. a novel rejection scored against known classes only)
/// count as misses for the true class and as no one's false positive.
/// A universe class absent from both truth and prediction contributes 0
/// and is reported through `flagged_empty` when given.
double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted,
                const std::vector<int>& class_universe,
                std::vector<int>* flagged_empty = nullptr);

struct ConfusionLayout {
    std::vector<int> known_ids;
    std::vector<int> novel_ids;  // true novel classes keep their own rows
};

/// Counts with true classes as rows (knowns then novels) and predicted
/// classes as columns (knowns plus one aggregated "Novel" column).
struct ConfusionMatrix {
    ConfusionLayout layout;
    std::vector<std::vector<long>> counts;

    long total() const;
    nlohmann::json to_json(const std::vector<std::string>& class_names) const;
    std::string to_csv(const std::vector<std::string>& class_names) const;
};

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted,
                          const ConfusionLayout& layout);

struct CurvePoint {
    int k = 0;  // number of novel classes introduced
    double min = 0.0, mean = 0.0, max = 0.0;
};

struct CurveSeries {
    std::vector<CurvePoint> points;
    std::vector<std::vector<double>> per_set;  // [k][test set]
};

/// Open-set macro-F1 versus the number of introduced novel classes for one
/// pipeline's per-row predictions. For each k the 100 resampled test sets
/// contribute one F1 each (novel truth collapses to the aggregated novel
/// label; the universe is the known classes plus novel when k >= 1).
CurveSeries incremental_novel_curve(const data::SplitBundle& bundle,
                                    const std::vector<int>& labels,
                                    const std::vector<int>& predictions_by_row);

/// 100 * (a - b) / b; empty when the baseline is zero.
std::optional<double> relative_change(double f1_a, double f1_b);

}  // namespace osr::eval
