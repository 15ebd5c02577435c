#include "osr/eval.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace osr::eval {

double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted,
                const std::vector<int>& class_universe, std::vector<int>* flagged_empty) {
    require(truth.size() == predicted.size(), "macro_f1: label vectors differ in length");
    require(!class_universe.empty(), "macro_f1: empty class universe");
    {
        std::set<int> u(class_universe.begin(), class_universe.end());
        require(u.size() == class_universe.size(), "macro_f1: duplicate universe class");
        for (int t : truth)
            require(u.count(t), "macro_f1: true label " + std::to_string(t) + " not in universe");
    }
    if (flagged_empty) flagged_empty->clear();

    double sum = 0.0;
    for (int cls : class_universe) {
        long tp = 0, fp = 0, fn = 0;
        bool present = false;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool t = truth[i] == cls;
            const bool p = predicted[i] == cls;
            present = present || t || p;
            if (t && p) ++tp;
            else if (!t && p) ++fp;
            else if (t && !p) ++fn;
        }
        if (!present && flagged_empty) flagged_empty->push_back(cls);
        const long denom = 2 * tp + fp + fn;
        sum += denom == 0 ? 0.0 : 2.0 * tp / static_cast<double>(denom);
    }
    return sum / static_cast<double>(class_universe.size());
}

long ConfusionMatrix::total() const {
    long t = 0;
    for (const auto& row : counts)
        for (long c : row) t += c;
    return t;
}

nlohmann::json ConfusionMatrix::to_json(const std::vector<std::string>& class_names) const {
    auto name_of = [&](int id) {
        return id >= 0 && id < static_cast<int>(class_names.size()) ? class_names[id]
                                                                    : std::to_string(id);
    };
    std::vector<std::string> rows, cols;
    for (int id : layout.known_ids) rows.push_back(name_of(id));
    for (int id : layout.novel_ids) rows.push_back(name_of(id));
    for (int id : layout.known_ids) cols.push_back(name_of(id));
    cols.push_back("Novel");
    return {{"rows", rows}, {"cols", cols}, {"counts", counts}};
}

std::string ConfusionMatrix::to_csv(const std::vector<std::string>& class_names) const {
    auto name_of = [&](int id) {
        return id >= 0 && id < static_cast<int>(class_names.size()) ? class_names[id]
                                                                    : std::to_string(id);
    };
    std::ostringstream out;
    out << "true\\predicted";
    for (int id : layout.known_ids) out << "," << name_of(id);
    out << ",Novel\n";
    std::vector<int> row_ids = layout.known_ids;
    row_ids.insert(row_ids.end(), layout.novel_ids.begin(), layout.novel_ids.end());
    for (std::size_t r = 0; r < counts.size(); ++r) {
        out << name_of(row_ids[r]);
        for (long c : counts[r]) out << "," << c;
        out << "\n";
    }
    return out.str();
}

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted,
                          const ConfusionLayout& layout) {
    require(truth.size() == predicted.size(), "confusion: label vectors differ in length");
    std::map<int, int> row_of, col_of;
    for (std::size_t i = 0; i < layout.known_ids.size(); ++i) {
        row_of[layout.known_ids[i]] = static_cast<int>(i);
        col_of[layout.known_ids[i]] = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < layout.novel_ids.size(); ++i)
        row_of[layout.novel_ids[i]] = static_cast<int>(layout.known_ids.size() + i);
    const int novel_col = static_cast<int>(layout.known_ids.size());

    ConfusionMatrix m;
    m.layout = layout;
    m.counts.assign(layout.known_ids.size() + layout.novel_ids.size(),
                    std::vector<long>(layout.known_ids.size() + 1, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto row = row_of.find(truth[i]);
        require(row != row_of.end(),
                "confusion: true label " + std::to_string(truth[i]) + " outside the layout");
        int col = novel_col;
        if (predicted[i] != kNovelLabel) {
            const auto it = col_of.find(predicted[i]);
            require(it != col_of.end(), "confusion: predicted label " +
                                            std::to_string(predicted[i]) + " outside the layout");
            col = it->second;
        }
        ++m.counts[row->second][col];
    }
    return m;
}

CurveSeries incremental_novel_curve(const data::SplitBundle& bundle,
                                    const std::vector<int>& labels,
                                    const std::vector<int>& predictions_by_row) {
    require(labels.size() == predictions_by_row.size(),
            "incremental_novel_curve: predictions must cover every dataset row");
    const std::set<int> known(bundle.known_ids.begin(), bundle.known_ids.end());
    const int n_novel = static_cast<int>(bundle.novel_ids.size());
    const int n_sets = static_cast<int>(bundle.novel_test_sets.size());
    require(n_sets >= 1, "incremental_novel_curve: no novel test sets");

    CurveSeries series;
    for (int k = 0; k <= n_novel; ++k) {
        std::vector<int> universe = bundle.known_ids;
        if (k >= 1) universe.push_back(kNovelLabel);
        const std::set<int> introduced(bundle.novel_ids.begin(), bundle.novel_ids.begin() + k);

        std::vector<double> per_set;
        const int sets_to_run = (k == 0) ? 1 : n_sets;  // no resampling variation at k=0
        for (int s = 0; s < sets_to_run; ++s) {
            std::vector<int> truth, pred;
            for (int r : bundle.known_test) {
                truth.push_back(labels[r]);
                pred.push_back(predictions_by_row[r]);
            }
            for (int r : bundle.novel_test_sets[s]) {
                if (!introduced.count(labels[r])) continue;
                truth.push_back(kNovelLabel);
                pred.push_back(predictions_by_row[r]);
            }
            per_set.push_back(macro_f1(truth, pred, universe));
        }
        if (k == 0) per_set.assign(n_sets, per_set[0]);

        CurvePoint p;
        p.k = k;
        p.min = *std::min_element(per_set.begin(), per_set.end());
        p.max = *std::max_element(per_set.begin(), per_set.end());
        double sum = 0.0;
        for (double v : per_set) sum += v;
        p.mean = sum / per_set.size();
        series.points.push_back(p);
        series.per_set.push_back(std::move(per_set));
    }
    return series;
}

std::optional<double> relative_change(double f1_a, double f1_b) {
    if (f1_b == 0.0) return std::nullopt;
    return 100.0 * (f1_a - f1_b) / f1_b;
}

}  // namespace osr::eval
