#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osr/common.hpp"
#include "osr/matrix.hpp"
#include "osr/rng.hpp"

namespace osr::data {

using json = nlohmann::json;

enum class ColumnKind { numeric, categorical, label, patient_id, encounter_order, ignore };

const char* column_kind_name(ColumnKind k);
ColumnKind column_kind_from_name(const std::string& name);

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    std::vector<std::string> levels;  // categorical / label only
};

struct Schema {
    std::vector<ColumnSpec> columns;

    void validate() const;
    int label_column() const;
    std::optional<int> patient_column() const;
    std::optional<int> order_column() const;
    int column_index(const std::string& name) const;

    json to_json() const;
    static Schema from_json(const json& j);
};

/// Typed tabular data with explicit missing markers. Cell storage is
/// per-column; only the vectors matching the column kind are populated.
struct RawTable {
    struct Column {
        Vec numeric;                     // numeric, encounter_order
        std::vector<int> category;       // categorical/label level index, -1 = missing
        std::vector<std::string> text;   // patient_id, ignore
        std::vector<char> missing;       // numeric/categorical missing flags
    };

    Schema schema;
    int n_rows = 0;
    std::vector<Column> columns;

    bool is_missing(int row, int col) const;
};

/// Parses a headered CSV against the schema. The format is plain
/// comma-separated text without quoting; an empty field is the missing
/// marker. Errors carry the offending row and column.
RawTable load_table(const std::filesystem::path& csv_path, const Schema& schema);
RawTable load_table(const std::filesystem::path& csv_path, const std::filesystem::path& schema_path);
void save_table_csv(const RawTable& table, const std::filesystem::path& csv_path);

/// Within each patient (rows ordered by the encounter_order column), fills a
/// missing numeric cell with the most recent earlier observed value of the
/// same column. Leading missing cells stay missing; patients never share
/// values. Row order of the result matches the input.
RawTable carry_forward_impute(const RawTable& table);

/// Deterministic chained-regression imputation: per trial, missing numeric
/// cells start at the column mean, then each numeric column is refit by
/// least squares on the others (observed rows) and its missing cells are
/// overwritten, for `iterations` rounds. The final value is the mean over
/// trials. Missing categorical cells are filled with the patient's mode,
/// falling back to the global mode. Observed cells never change.
RawTable chained_impute(const RawTable& table, int trials = 5, int iterations = 10,
                        std::uint64_t seed = 0);

enum class Likelihood { gaussian, bernoulli };

struct FeatureBlock {
    std::string source;  // schema column name
    int start = 0;
    int width = 0;
    Likelihood likelihood = Likelihood::gaussian;
};

struct EncodedDataset {
    Matrix features;
    std::vector<int> labels;              // label level index per row
    std::vector<std::string> class_names; // label levels
    std::vector<FeatureBlock> blocks;
    Vec norm_mean, norm_std;              // per numeric block, training statistics
    std::vector<std::string> zero_variance_columns;

    int n_rows() const { return features.rows; }
    int width() const { return features.cols; }
    std::vector<int> rows_of_class(int class_id, const std::vector<int>& within) const;
};

/// Z-scores numeric columns with statistics over `train_indices` rows and
/// one-hot encodes categoricals. Requires a fully observed table.
EncodedDataset encode(const RawTable& table, const std::vector<int>& train_indices);

/// Recovers the categorical level index encoded in a one-hot block.
int decode_one_hot(const EncodedDataset& ds, const FeatureBlock& block, int row);

struct SplitBundle {
    std::vector<int> known_ids;
    std::vector<int> novel_ids;  // ordered novel-introduction sequence
    std::vector<int> train, validation, known_test;
    std::vector<std::vector<int>> novel_test_sets;
    std::uint64_t seed = 0;

    json to_json() const;
    static SplitBundle from_json(const json& j);
};

/// Stratified per-class split: round(2n/3) train, round(n/6) validation,
/// remainder test, plus `n_test_sets` resampled novel test sets each drawing
/// floor(n/6) rows per novel class without replacement within the set.
SplitBundle make_splits(const std::vector<int>& labels, const std::vector<int>& known_ids,
                        const std::vector<int>& novel_ids_ordered, int n_test_sets,
                        std::uint64_t seed);
SplitBundle make_splits(const EncodedDataset& ds, const std::vector<int>& known_ids,
                        const std::vector<int>& novel_ids_ordered, int n_test_sets,
                        std::uint64_t seed);

struct SynthCategorical {
    std::string name;
    std::vector<std::string> levels;
    std::vector<Vec> per_class_probs;  // [class][level]
};

struct SynthClass {
    std::string name;
    int samples = 0;
    Vec mean;
    double cov_scale = 1.0;          // spherical covariance scale^2 * I
    std::optional<Matrix> covariance;  // full covariance overrides cov_scale
};

struct SynthConfig {
    int n_numeric = 0;
    std::vector<SynthClass> classes;
    std::vector<SynthCategorical> categoricals;
    double missing_rate = 0.0;
    bool patient_columns = false;
    int encounters_per_patient = 4;

    static SynthConfig from_json(const json& j);
    json to_json() const;
};

struct SynthResult {
    RawTable table;
    Schema schema;
    json ground_truth;
};

/// Draws per-class Gaussian numeric features (and optional per-class
/// categorical features), inserting missing cells at the configured rate.
SynthResult synth_generate(const SynthConfig& config, std::uint64_t seed);

}  // namespace osr::data
