#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/centroids.hpp"
#include "osr/common.hpp"
#include "osr/matrix.hpp"

namespace osr::decision {

struct UncertaintyResult {
    double u = 0.0;
    int nearest_class = 0;   // dataset class id of the nearest centroid
    bool degenerate = false; // all centroids coincide with the embedding
};

/// U = distance to the nearest centroid over the mean distance to all other
/// centroids. 0 at a centroid, 1 when equidistant, approaches 1 far away.
/// The all-centroids-identical case is defined as U = 1 with a flag.
UncertaintyResult uncertainty(std::span<const double> embedding, const CentroidSet& centroids);

struct OpenSetPrediction {
    int label = 0;          // class id, or kNovelLabel
    double rule_value = 0;  // the U or outlier score that was thresholded
    int nearest_class = 0;
    bool is_novel() const { return label == kNovelLabel; }
};

/// Nearest centroid when U <= tau, novel otherwise (the boundary counts as
/// known).
OpenSetPrediction predict_open_set_u(std::span<const double> embedding,
                                     const CentroidSet& centroids, double tau);

struct ThresholdSelectionConfig {
    std::vector<double> tau_grid;  // strictly increasing, inside [0, 1]
    double epsilon1 = 1.0;
    double epsilon2 = 0.25;

    static ThresholdSelectionConfig uniform_grid(double lo = 0.0, double hi = 1.0,
                                                 double step = 0.01, double epsilon1 = 1.0,
                                                 double epsilon2 = 0.25);
    void validate() const;
};

struct ThresholdCurve {
    std::vector<double> tau_grid;
    std::vector<double> f1_values;
    std::vector<double> derivative;  // forward differences, one fewer entry
    std::optional<double> tau_tilde;
    std::optional<double> tau_star;

    nlohmann::json to_json(const ThresholdSelectionConfig& config) const;
    std::string to_csv() const;  // columns tau, f1, f1_prime
};

/// Known-validation macro-F1 at each grid threshold. A novel rejection of a
/// known validation sample counts as a miss for its true class; the
/// universe stays the C known classes.
ThresholdCurve f1_vs_tau_curve(const Matrix& embeddings, const std::vector<int>& labels,
                               const CentroidSet& centroids,
                               const ThresholdSelectionConfig& config);

/// First grid point after the F1 ramp where the forward difference falls to
/// epsilon2: tau_tilde = min{tau : F1'(tau) >= epsilon1}, tau_star =
/// min{tau > tau_tilde : F1'(tau) <= epsilon2}. Fills the curve's fields
/// and returns tau_star; throws NoSaturationError when either set is empty.
double select_threshold_saturation(ThresholdCurve& curve, const ThresholdSelectionConfig& config);

enum class SweepRule { uncertainty, outlier_score };

struct SweepRow {
    double value = 0.0;     // the swept tau or alpha
    double macro_f1 = 0.0;  // open-set macro-F1 over C+1 classes
};

struct SweepTable {
    SweepRule rule = SweepRule::uncertainty;
    std::vector<SweepRow> rows;
    bool clipped = false;  // the requested interval left the valid range

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

/// Open-set macro-F1 across a threshold neighborhood [center - halfwidth,
/// center + halfwidth] sampled at `step`. Test labels use kNovelLabel for
/// novel-class rows. For the uncertainty rule the swept value is tau
/// (clipped to [0,1]); for the outlier-score rule it is the contamination
/// ratio alpha (clipped to [0,1)), refit to a score threshold from
/// `train_scores` at every grid point.
SweepTable sweep_thresholds(const Matrix& test_embeddings, const std::vector<int>& test_labels,
                            const CentroidSet& centroids, const std::vector<double>& train_scores,
                            double center, double halfwidth, double step, SweepRule rule);

/// Empirical nearest-rank percentile: the value at 1-based index
/// ceil(q * n) of the ascending sort, clamped to [1, n]. q = 1 is the
/// maximum (the alpha = 0 contamination sweep endpoint).
double nearest_rank_percentile(std::vector<double> values, double q);

}  // namespace osr::decision
