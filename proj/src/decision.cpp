#include "osr/decision.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "osr/eval.hpp"
#include "osr/serialize.hpp"

namespace osr::decision {

UncertaintyResult uncertainty(std::span<const double> embedding, const CentroidSet& centroids) {
    centroids.validate();
    require(static_cast<int>(embedding.size()) == centroids.dim(),
            "uncertainty: embedding width does not match centroids");
    const int c = centroids.size();

    Vec dist(c);
    for (int i = 0; i < c; ++i)
        dist[i] = std::sqrt(squared_distance(embedding, centroids.centroids.row(i)));
    int nearest = 0;
    for (int i = 1; i < c; ++i)
        if (dist[i] < dist[nearest]) nearest = i;

    double denom = 0.0;
    for (int i = 0; i < c; ++i)
        if (i != nearest) denom += dist[i];
    denom /= (c - 1);

    UncertaintyResult r;
    r.nearest_class = centroids.class_ids[nearest];
    if (denom == 0.0) {
        // every other centroid coincides with the embedding, so the nearest
        // does too: maximally uncertain by convention
        r.u = 1.0;
        r.degenerate = true;
    } else {
        r.u = dist[nearest] / denom;
    }
    return r;
}

OpenSetPrediction predict_open_set_u(std::span<const double> embedding,
                                     const CentroidSet& centroids, double tau) {
    require(tau >= 0.0 && tau <= 1.0, "predict_open_set_u: tau must be in [0,1]");
    const UncertaintyResult r = uncertainty(embedding, centroids);
    OpenSetPrediction p;
    p.rule_value = r.u;
    p.nearest_class = r.nearest_class;
    p.label = (r.u <= tau) ? r.nearest_class : kNovelLabel;
    return p;
}

ThresholdSelectionConfig ThresholdSelectionConfig::uniform_grid(double lo, double hi, double step,
                                                                double epsilon1, double epsilon2) {
    ThresholdSelectionConfig c;
    c.epsilon1 = epsilon1;
    c.epsilon2 = epsilon2;
    require(step > 0.0, "uniform_grid: step must be positive");
    const int n = static_cast<int>(std::lround((hi - lo) / step)) + 1;
    for (int i = 0; i < n; ++i) c.tau_grid.push_back(lo + i * step);
    if (!c.tau_grid.empty()) c.tau_grid.back() = hi;  // kill accumulated rounding
    c.validate();
    return c;
}

void ThresholdSelectionConfig::validate() const {
    require(tau_grid.size() >= 3, "ThresholdSelectionConfig: grid needs at least 3 points");
    for (std::size_t i = 0; i < tau_grid.size(); ++i) {
        require(tau_grid[i] >= 0.0 && tau_grid[i] <= 1.0,
                "ThresholdSelectionConfig: grid values must lie in [0,1]");
        if (i) require(tau_grid[i] > tau_grid[i - 1],
                       "ThresholdSelectionConfig: grid must be strictly increasing");
    }
    require(epsilon1 > epsilon2 && epsilon2 > 0.0,
            "ThresholdSelectionConfig: need epsilon1 > epsilon2 > 0");
}

nlohmann::json ThresholdCurve::to_json(const ThresholdSelectionConfig& config) const {
    nlohmann::json j = {{"tau_grid", tau_grid},
                        {"f1_values", f1_values},
                        {"derivative", derivative},
                        {"epsilon1", config.epsilon1},
                        {"epsilon2", config.epsilon2}};
    j["tau_tilde"] = tau_tilde ? nlohmann::json(*tau_tilde) : nlohmann::json();
    j["tau_star"] = tau_star ? nlohmann::json(*tau_star) : nlohmann::json();
    return j;
}

std::string ThresholdCurve::to_csv() const {
    std::ostringstream out;
    out << "tau,f1,f1_prime\n";
    for (std::size_t i = 0; i < tau_grid.size(); ++i) {
        out << serialize::format_double(tau_grid[i]) << ","
            << serialize::format_double(f1_values[i]) << ",";
        if (i < derivative.size()) out << serialize::format_double(derivative[i]);
        out << "\n";
    }
    return out.str();
}

ThresholdCurve f1_vs_tau_curve(const Matrix& embeddings, const std::vector<int>& labels,
                               const CentroidSet& centroids,
                               const ThresholdSelectionConfig& config) {
    config.validate();
    require(embeddings.rows > 0, "f1_vs_tau_curve: empty validation set");
    require(embeddings.rows == static_cast<int>(labels.size()),
            "f1_vs_tau_curve: label count mismatch");

    // U and the nearest class do not depend on tau; compute them once
    std::vector<UncertaintyResult> us;
    us.reserve(embeddings.rows);
    for (int i = 0; i < embeddings.rows; ++i) us.push_back(uncertainty(embeddings.row(i), centroids));

    ThresholdCurve curve;
    curve.tau_grid = config.tau_grid;
    std::vector<int> pred(embeddings.rows);
    for (double tau : config.tau_grid) {
        for (int i = 0; i < embeddings.rows; ++i)
            pred[i] = (us[i].u <= tau) ? us[i].nearest_class : kNovelLabel;
        curve.f1_values.push_back(eval::macro_f1(labels, pred, centroids.class_ids));
    }
    for (std::size_t j = 0; j + 1 < curve.tau_grid.size(); ++j)
        curve.derivative.push_back((curve.f1_values[j + 1] - curve.f1_values[j]) /
                                   (curve.tau_grid[j + 1] - curve.tau_grid[j]));
    return curve;
}

double select_threshold_saturation(ThresholdCurve& curve, const ThresholdSelectionConfig& config) {
    config.validate();
    require(curve.tau_grid.size() == curve.f1_values.size() &&
                curve.derivative.size() + 1 == curve.tau_grid.size(),
            "select_threshold_saturation: curve not populated");

    std::optional<std::size_t> ramp;
    for (std::size_t j = 0; j < curve.derivative.size(); ++j)
        if (curve.derivative[j] >= config.epsilon1) {
            ramp = j;
            break;
        }
    if (!ramp) throw NoSaturationError("no grid point has F1' >= epsilon1");
    curve.tau_tilde = curve.tau_grid[*ramp];

    for (std::size_t j = *ramp + 1; j < curve.derivative.size(); ++j)
        if (curve.derivative[j] <= config.epsilon2) {
            curve.tau_star = curve.tau_grid[j];
            return *curve.tau_star;
        }
    throw NoSaturationError("no saturation point after tau_tilde");
}

double nearest_rank_percentile(std::vector<double> values, double q) {
    require(!values.empty(), "nearest_rank_percentile: empty values");
    require(q >= 0.0 && q <= 1.0, "nearest_rank_percentile: q must be in [0,1]");
    std::sort(values.begin(), values.end());
    const long n = static_cast<long>(values.size());
    long idx = static_cast<long>(std::ceil(q * static_cast<double>(n)));
    idx = std::clamp(idx, 1l, n);
    return values[idx - 1];
}

nlohmann::json SweepTable::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) rows_json.push_back({{"value", r.value}, {"macro_f1", r.macro_f1}});
    return {{"rule", rule == SweepRule::uncertainty ? "uncertainty" : "outlier_score"},
            {"rows", rows_json},
            {"clipped", clipped}};
}

std::string SweepTable::to_csv() const {
    std::ostringstream out;
    out << (rule == SweepRule::uncertainty ? "tau" : "alpha") << ",macro_f1\n";
    for (const auto& r : rows)
        out << serialize::format_double(r.value) << "," << serialize::format_double(r.macro_f1)
            << "\n";
    return out.str();
}

SweepTable sweep_thresholds(const Matrix& test_embeddings, const std::vector<int>& test_labels,
                            const CentroidSet& centroids, const std::vector<double>& train_scores,
                            double center, double halfwidth, double step, SweepRule rule) {
    require(test_embeddings.rows == static_cast<int>(test_labels.size()),
            "sweep_thresholds: label count mismatch");
    require(halfwidth >= 0.0, "sweep_thresholds: halfwidth must be >= 0");
    require(step > 0.0 || halfwidth == 0.0, "sweep_thresholds: step must be positive");
    if (rule == SweepRule::outlier_score)
        require(!train_scores.empty(), "sweep_thresholds: outlier-score rule needs training scores");

    SweepTable table;
    table.rule = rule;

    // grid, clipped into the rule's valid range
    const double lo_limit = 0.0;
    const double hi_limit = rule == SweepRule::uncertainty ? 1.0 : std::nextafter(1.0, 0.0);
    std::vector<double> grid;
    const int n_points = halfwidth == 0.0 ? 1 : static_cast<int>(std::lround(2.0 * halfwidth / step)) + 1;
    for (int i = 0; i < n_points; ++i) {
        double v = center - halfwidth + i * step;
        if (v < lo_limit || v > hi_limit) {
            table.clipped = true;
            v = clamp(v, lo_limit, hi_limit);
        }
        if (grid.empty() || v != grid.back()) grid.push_back(v);
    }

    // per-row statistics are threshold-independent
    std::vector<UncertaintyResult> us;
    Vec scores;
    for (int i = 0; i < test_embeddings.rows; ++i) {
        const UncertaintyResult u = uncertainty(test_embeddings.row(i), centroids);
        us.push_back(u);
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < centroids.size(); ++c)
            best = std::min(best, squared_distance(test_embeddings.row(i), centroids.centroids.row(c)));
        scores.push_back(best);
    }

    std::vector<int> universe = centroids.class_ids;
    universe.push_back(kNovelLabel);

    std::vector<int> pred(test_embeddings.rows);
    for (double v : grid) {
        if (rule == SweepRule::uncertainty) {
            for (int i = 0; i < test_embeddings.rows; ++i)
                pred[i] = (us[i].u <= v) ? us[i].nearest_class : kNovelLabel;
        } else {
            const double tau = nearest_rank_percentile(train_scores, 1.0 - v);
            for (int i = 0; i < test_embeddings.rows; ++i)
                pred[i] = (scores[i] <= tau) ? us[i].nearest_class : kNovelLabel;
        }
        table.rows.push_back({v, eval::macro_f1(test_labels, pred, universe)});
    }
    return table;
}

}  // namespace osr::decision
