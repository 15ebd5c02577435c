#include "osr/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "osr/serialize.hpp"

namespace osr::data {

const char* column_kind_name(ColumnKind k) {
    switch (k) {
        case ColumnKind::numeric: return "numeric";
        case ColumnKind::categorical: return "categorical";
        case ColumnKind::label: return "label";
        case ColumnKind::patient_id: return "patient_id";
        case ColumnKind::encounter_order: return "encounter_order";
        case ColumnKind::ignore: return "ignore";
    }
    return "numeric";
}

ColumnKind column_kind_from_name(const std::string& name) {
    if (name == "numeric") return ColumnKind::numeric;
    if (name == "categorical") return ColumnKind::categorical;
    if (name == "label") return ColumnKind::label;
    if (name == "patient_id") return ColumnKind::patient_id;
    if (name == "encounter_order") return ColumnKind::encounter_order;
    if (name == "ignore") return ColumnKind::ignore;
    throw InvalidInput("unknown column kind: " + name);
}

void Schema::validate() const {
    require(!columns.empty(), "Schema: no columns");
    int labels = 0, patients = 0, orders = 0;
    std::set<std::string> names;
    for (const auto& c : columns) {
        require(!c.name.empty(), "Schema: empty column name");
        require(names.insert(c.name).second, "Schema: duplicate column name " + c.name);
        switch (c.kind) {
            case ColumnKind::label: ++labels; break;
            case ColumnKind::patient_id: ++patients; break;
            case ColumnKind::encounter_order: ++orders; break;
            default: break;
        }
        if (c.kind == ColumnKind::categorical || c.kind == ColumnKind::label) {
            require(!c.levels.empty(), "Schema: column " + c.name + " declares no levels");
            std::set<std::string> lv(c.levels.begin(), c.levels.end());
            require(lv.size() == c.levels.size(), "Schema: duplicate levels in " + c.name);
        }
    }
    require(labels == 1, "Schema: exactly one label column required");
    require(patients <= 1, "Schema: at most one patient_id column");
    require(orders <= 1, "Schema: at most one encounter_order column");
}

int Schema::label_column() const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i].kind == ColumnKind::label) return static_cast<int>(i);
    throw InvalidInput("Schema: no label column");
}

std::optional<int> Schema::patient_column() const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i].kind == ColumnKind::patient_id) return static_cast<int>(i);
    return std::nullopt;
}

std::optional<int> Schema::order_column() const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i].kind == ColumnKind::encounter_order) return static_cast<int>(i);
    return std::nullopt;
}

int Schema::column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i].name == name) return static_cast<int>(i);
    throw InvalidInput("Schema: no column named " + name);
}

json Schema::to_json() const {
    json cols = json::array();
    for (const auto& c : columns) {
        json jc = {{"name", c.name}, {"kind", column_kind_name(c.kind)}};
        if (!c.levels.empty()) jc["levels"] = c.levels;
        cols.push_back(jc);
    }
    return {{"columns", cols}};
}

Schema Schema::from_json(const json& j) {
    Schema s;
    for (const auto& jc : j.at("columns")) {
        ColumnSpec c;
        c.name = jc.at("name").get<std::string>();
        c.kind = column_kind_from_name(jc.at("kind").get<std::string>());
        if (jc.contains("levels")) c.levels = jc.at("levels").get<std::vector<std::string>>();
        s.columns.push_back(std::move(c));
    }
    s.validate();
    return s;
}

bool RawTable::is_missing(int row, int col) const {
    const auto& c = columns[col];
    if (c.missing.empty()) return false;
    return c.missing[row] != 0;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

std::string cell_coord(int row, const std::string& col) {
    return "row " + std::to_string(row) + ", column " + col;
}

double parse_numeric_cell(const std::string& cell, int row, const std::string& col) {
    double v = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end)
        throw InvalidInput("non-numeric cell '" + cell + "' at " + cell_coord(row, col));
    return v;
}

int level_index(const ColumnSpec& spec, const std::string& cell, int row) {
    for (std::size_t i = 0; i < spec.levels.size(); ++i)
        if (spec.levels[i] == cell) return static_cast<int>(i);
    throw InvalidInput("unknown level '" + cell + "' at " + cell_coord(row, spec.name));
}

RawTable empty_table(const Schema& schema) {
    RawTable t;
    t.schema = schema;
    t.columns.resize(schema.columns.size());
    return t;
}

void push_cell(RawTable& t, int col, const std::string& cell, int row) {
    const auto& spec = t.schema.columns[col];
    auto& c = t.columns[col];
    switch (spec.kind) {
        case ColumnKind::numeric:
        case ColumnKind::encounter_order:
            if (cell.empty()) {
                require(spec.kind != ColumnKind::encounter_order,
                        "missing encounter_order at " + cell_coord(row, spec.name));
                c.numeric.push_back(0.0);
                c.missing.push_back(1);
            } else {
                c.numeric.push_back(parse_numeric_cell(cell, row, spec.name));
                c.missing.push_back(0);
            }
            break;
        case ColumnKind::categorical:
            if (cell.empty()) {
                c.category.push_back(-1);
                c.missing.push_back(1);
            } else {
                c.category.push_back(level_index(spec, cell, row));
                c.missing.push_back(0);
            }
            break;
        case ColumnKind::label:
            require(!cell.empty(), "missing label at " + cell_coord(row, spec.name));
            c.category.push_back(level_index(spec, cell, row));
            c.missing.push_back(0);
            break;
        case ColumnKind::patient_id:
            require(!cell.empty(), "missing patient_id at " + cell_coord(row, spec.name));
            c.text.push_back(cell);
            break;
        case ColumnKind::ignore:
            c.text.push_back(cell);
            break;
    }
}

}  // namespace

RawTable load_table(const std::filesystem::path& csv_path, const Schema& schema) {
    schema.validate();
    std::ifstream in(csv_path);
    if (!in) throw InvalidInput("cannot open: " + csv_path.string());

    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "empty file: " + csv_path.string());
    const auto header = split_csv_line(line);
    require(header.size() == schema.columns.size(),
            "header width " + std::to_string(header.size()) + " does not match schema width " +
                std::to_string(schema.columns.size()));
    for (std::size_t i = 0; i < header.size(); ++i)
        require(header[i] == schema.columns[i].name,
                "header column '" + header[i] + "' does not match schema column '" +
                    schema.columns[i].name + "'");

    RawTable t = empty_table(schema);
    int row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        require(cells.size() == schema.columns.size(),
                "row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                    " cells, expected " + std::to_string(schema.columns.size()));
        for (std::size_t c = 0; c < cells.size(); ++c)
            push_cell(t, static_cast<int>(c), cells[c], row);
        ++row;
    }
    t.n_rows = row;
    return t;
}

RawTable load_table(const std::filesystem::path& csv_path, const std::filesystem::path& schema_path) {
    return load_table(csv_path, Schema::from_json(serialize::read_json_file(schema_path)));
}

void save_table_csv(const RawTable& table, const std::filesystem::path& csv_path) {
    std::ofstream out(csv_path);
    if (!out) throw InvalidInput("cannot open for writing: " + csv_path.string());
    for (std::size_t c = 0; c < table.schema.columns.size(); ++c)
        out << (c ? "," : "") << table.schema.columns[c].name;
    out << "\n";
    for (int r = 0; r < table.n_rows; ++r) {
        for (std::size_t c = 0; c < table.schema.columns.size(); ++c) {
            if (c) out << ",";
            const auto& spec = table.schema.columns[c];
            const auto& col = table.columns[c];
            switch (spec.kind) {
                case ColumnKind::numeric:
                case ColumnKind::encounter_order:
                    if (!table.is_missing(r, static_cast<int>(c)))
                        out << serialize::format_double(col.numeric[r]);
                    break;
                case ColumnKind::categorical:
                case ColumnKind::label:
                    if (col.category[r] >= 0) out << spec.levels[col.category[r]];
                    break;
                case ColumnKind::patient_id:
                case ColumnKind::ignore:
                    out << col.text[r];
                    break;
            }
        }
        out << "\n";
    }
}

RawTable carry_forward_impute(const RawTable& table) {
    const auto patient = table.schema.patient_column();
    const auto order = table.schema.order_column();
    require(patient.has_value() && order.has_value(),
            "carry_forward_impute: table needs patient_id and encounter_order columns");

    // rows per patient, ordered by encounter_order
    std::map<std::string, std::vector<int>> by_patient;
    for (int r = 0; r < table.n_rows; ++r) by_patient[table.columns[*patient].text[r]].push_back(r);

    RawTable out = table;
    for (auto& [pid, rows] : by_patient) {
        std::stable_sort(rows.begin(), rows.end(), [&](int a, int b) {
            return table.columns[*order].numeric[a] < table.columns[*order].numeric[b];
        });
        for (std::size_t i = 1; i < rows.size(); ++i)
            require(table.columns[*order].numeric[rows[i]] != table.columns[*order].numeric[rows[i - 1]],
                    "carry_forward_impute: duplicate (patient_id, encounter_order) for patient " + pid);

        for (std::size_t c = 0; c < table.schema.columns.size(); ++c) {
            if (table.schema.columns[c].kind != ColumnKind::numeric) continue;
            auto& col = out.columns[c];
            bool seen = false;
            double last = 0.0;
            for (int r : rows) {
                if (!col.missing[r]) {
                    seen = true;
                    last = col.numeric[r];
                } else if (seen) {
                    col.numeric[r] = last;
                    col.missing[r] = 0;
                }
            }
        }
    }
    return out;
}

namespace {

/// Solves A x = b by Gaussian elimination with partial pivoting; retries
/// with a ridge term on a near-singular pivot.
Vec solve_linear_system(Matrix a, Vec b, bool* used_ridge = nullptr) {
    const int n = a.rows;
    require(a.cols == n && static_cast<int>(b.size()) == n, "solve_linear_system: shape");
    const Matrix a0 = a;
    const Vec b0 = b;
    for (int attempt = 0; attempt < 2; ++attempt) {
        bool singular = false;
        for (int k = 0; k < n && !singular; ++k) {
            int pivot = k;
            for (int i = k + 1; i < n; ++i)
                if (std::fabs(a(i, k)) > std::fabs(a(pivot, k))) pivot = i;
            if (std::fabs(a(pivot, k)) < 1e-12) {
                singular = true;
                break;
            }
            if (pivot != k) {
                for (int j = 0; j < n; ++j) std::swap(a(k, j), a(pivot, j));
                std::swap(b[k], b[pivot]);
            }
            for (int i = k + 1; i < n; ++i) {
                const double f = a(i, k) / a(k, k);
                if (f == 0.0) continue;
                for (int j = k; j < n; ++j) a(i, j) -= f * a(k, j);
                b[i] -= f * b[k];
            }
        }
        if (!singular) {
            Vec x(n, 0.0);
            for (int i = n - 1; i >= 0; --i) {
                double s = b[i];
                for (int j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
                x[i] = s / a(i, i);
            }
            return x;
        }
        // ridge fallback
        a = a0;
        b = b0;
        for (int i = 0; i < n; ++i) a(i, i) += 1e-6;
        if (used_ridge) *used_ridge = true;
    }
    throw NumericError("solve_linear_system: singular even with ridge");
}

}  // namespace

RawTable chained_impute(const RawTable& table, int trials, int iterations, std::uint64_t seed) {
    (void)seed;  // reserved; the chained regression path draws no random values
    require(trials >= 1 && iterations >= 1, "chained_impute: trials and iterations must be >= 1");

    std::vector<int> numeric_cols;
    for (std::size_t c = 0; c < table.schema.columns.size(); ++c)
        if (table.schema.columns[c].kind == ColumnKind::numeric) numeric_cols.push_back(static_cast<int>(c));

    // observed means; every numeric column needs at least one observation
    std::map<int, double> col_mean;
    for (int c : numeric_cols) {
        const auto& col = table.columns[c];
        double sum = 0.0;
        int n = 0;
        for (int r = 0; r < table.n_rows; ++r)
            if (!col.missing[r]) {
                sum += col.numeric[r];
                ++n;
            }
        require(n > 0, "chained_impute: column " + table.schema.columns[c].name +
                           " has no observed values");
        col_mean[c] = sum / n;
    }

    std::vector<int> cols_with_missing;
    for (int c : numeric_cols) {
        const auto& col = table.columns[c];
        if (std::any_of(col.missing.begin(), col.missing.end(), [](char m) { return m != 0; }))
            cols_with_missing.push_back(c);
    }

    RawTable out = table;

    if (!cols_with_missing.empty() && numeric_cols.size() >= 2) {
        // accumulate per-trial imputations for the missing cells
        std::map<int, Vec> accum;  // col -> per-row sums (missing rows only meaningful)
        for (int c : cols_with_missing) accum[c] = Vec(table.n_rows, 0.0);

        for (int trial = 0; trial < trials; ++trial) {
            // working copy: column-major snapshot of numeric data
            std::map<int, Vec> work;
            for (int c : numeric_cols) {
                Vec v = table.columns[c].numeric;
                for (int r = 0; r < table.n_rows; ++r)
                    if (table.columns[c].missing[r]) v[r] = col_mean[c];
                work[c] = std::move(v);
            }
            for (int it = 0; it < iterations; ++it) {
                for (int target : cols_with_missing) {
                    std::vector<int> predictors;
                    for (int c : numeric_cols)
                        if (c != target) predictors.push_back(c);
                    const int p = static_cast<int>(predictors.size()) + 1;  // + intercept

                    // normal equations over originally observed rows
                    Matrix xtx(p, p);
                    Vec xty(p, 0.0);
                    Vec xrow(p, 1.0);
                    for (int r = 0; r < table.n_rows; ++r) {
                        if (table.columns[target].missing[r]) continue;
                        xrow[0] = 1.0;
                        for (std::size_t k = 0; k < predictors.size(); ++k)
                            xrow[k + 1] = work[predictors[k]][r];
                        const double y = work[target][r];
                        for (int i = 0; i < p; ++i) {
                            xty[i] += xrow[i] * y;
                            for (int j = 0; j < p; ++j) xtx(i, j) += xrow[i] * xrow[j];
                        }
                    }
                    const Vec beta = solve_linear_system(xtx, xty);
                    for (int r = 0; r < table.n_rows; ++r) {
                        if (!table.columns[target].missing[r]) continue;
                        double pred = beta[0];
                        for (std::size_t k = 0; k < predictors.size(); ++k)
                            pred += beta[k + 1] * work[predictors[k]][r];
                        work[target][r] = pred;
                    }
                }
            }
            for (int c : cols_with_missing)
                for (int r = 0; r < table.n_rows; ++r)
                    if (table.columns[c].missing[r]) accum[c][r] += work[c][r];
        }
        for (int c : cols_with_missing) {
            auto& col = out.columns[c];
            for (int r = 0; r < table.n_rows; ++r)
                if (table.columns[c].missing[r]) {
                    col.numeric[r] = accum[c][r] / trials;
                    col.missing[r] = 0;
                }
        }
    } else if (!cols_with_missing.empty()) {
        // single numeric column: fall back to the column mean
        for (int c : cols_with_missing) {
            auto& col = out.columns[c];
            for (int r = 0; r < table.n_rows; ++r)
                if (table.columns[c].missing[r]) {
                    col.numeric[r] = col_mean[c];
                    col.missing[r] = 0;
                }
        }
    }

    // categorical gaps: patient mode, then global mode; lowest index on ties
    const auto patient = table.schema.patient_column();
    for (std::size_t c = 0; c < table.schema.columns.size(); ++c) {
        if (table.schema.columns[c].kind != ColumnKind::categorical) continue;
        auto& col = out.columns[c];
        const auto& src = table.columns[c];
        const int n_levels = static_cast<int>(table.schema.columns[c].levels.size());
        bool any_missing = std::any_of(src.missing.begin(), src.missing.end(),
                                       [](char m) { return m != 0; });
        if (!any_missing) continue;

        std::vector<int> global_counts(n_levels, 0);
        int observed = 0;
        for (int r = 0; r < table.n_rows; ++r)
            if (!src.missing[r]) {
                ++global_counts[src.category[r]];
                ++observed;
            }
        require(observed > 0, "chained_impute: categorical column " +
                                  table.schema.columns[c].name + " has no observed values");
        const int global_mode = static_cast<int>(
            std::max_element(global_counts.begin(), global_counts.end()) - global_counts.begin());

        for (int r = 0; r < table.n_rows; ++r) {
            if (!src.missing[r]) continue;
            int fill = global_mode;
            if (patient) {
                std::vector<int> counts(n_levels, 0);
                int seen = 0;
                const auto& pid = table.columns[*patient].text[r];
                for (int r2 = 0; r2 < table.n_rows; ++r2)
                    if (!src.missing[r2] && table.columns[*patient].text[r2] == pid) {
                        ++counts[src.category[r2]];
                        ++seen;
                    }
                if (seen > 0)
                    fill = static_cast<int>(std::max_element(counts.begin(), counts.end()) -
                                            counts.begin());
            }
            col.category[r] = fill;
            col.missing[r] = 0;
        }
    }
    return out;
}

std::vector<int> EncodedDataset::rows_of_class(int class_id, const std::vector<int>& within) const {
    std::vector<int> out;
    for (int r : within)
        if (labels[r] == class_id) out.push_back(r);
    return out;
}

EncodedDataset encode(const RawTable& table, const std::vector<int>& train_indices) {
    table.schema.validate();
    require(!train_indices.empty(), "encode: empty training index set");
    for (std::size_t c = 0; c < table.schema.columns.size(); ++c) {
        const auto kind = table.schema.columns[c].kind;
        if (kind != ColumnKind::numeric && kind != ColumnKind::categorical) continue;
        for (int r = 0; r < table.n_rows; ++r)
            require(!table.is_missing(r, static_cast<int>(c)),
                    "encode: missing cell at " + cell_coord(r, table.schema.columns[c].name));
    }

    EncodedDataset ds;
    const int label_col = table.schema.label_column();
    ds.class_names = table.schema.columns[label_col].levels;
    ds.labels.assign(table.columns[label_col].category.begin(),
                     table.columns[label_col].category.end());

    int width = 0;
    for (const auto& c : table.schema.columns) {
        if (c.kind == ColumnKind::numeric) width += 1;
        if (c.kind == ColumnKind::categorical) width += static_cast<int>(c.levels.size());
    }
    ds.features = Matrix(table.n_rows, width);

    int offset = 0;
    for (std::size_t c = 0; c < table.schema.columns.size(); ++c) {
        const auto& spec = table.schema.columns[c];
        const auto& col = table.columns[c];
        if (spec.kind == ColumnKind::numeric) {
            double mean = 0.0;
            for (int r : train_indices) mean += col.numeric[r];
            mean /= static_cast<double>(train_indices.size());
            double var = 0.0;
            for (int r : train_indices) {
                const double d = col.numeric[r] - mean;
                var += d * d;
            }
            var /= static_cast<double>(train_indices.size());
            double sd = std::sqrt(var);
            if (sd < 1e-8) {
                sd = 1e-8;
                ds.zero_variance_columns.push_back(spec.name);
            }
            for (int r = 0; r < table.n_rows; ++r)
                ds.features(r, offset) = (col.numeric[r] - mean) / sd;
            ds.blocks.push_back({spec.name, offset, 1, Likelihood::gaussian});
            ds.norm_mean.push_back(mean);
            ds.norm_std.push_back(sd);
            offset += 1;
        } else if (spec.kind == ColumnKind::categorical) {
            const int w = static_cast<int>(spec.levels.size());
            for (int r = 0; r < table.n_rows; ++r) ds.features(r, offset + col.category[r]) = 1.0;
            ds.blocks.push_back({spec.name, offset, w, Likelihood::bernoulli});
            offset += w;
        }
    }
    return ds;
}

int decode_one_hot(const EncodedDataset& ds, const FeatureBlock& block, int row) {
    require(block.likelihood == Likelihood::bernoulli, "decode_one_hot: not a one-hot block");
    int hit = -1;
    for (int j = 0; j < block.width; ++j) {
        if (ds.features(row, block.start + j) == 1.0) {
            require(hit < 0, "decode_one_hot: multiple ones in block " + block.source);
            hit = j;
        }
    }
    require(hit >= 0, "decode_one_hot: no one set in block " + block.source);
    return hit;
}

json SplitBundle::to_json() const {
    return {{"seed", seed},
            {"known_ids", known_ids},
            {"novel_ids", novel_ids},
            {"train", train},
            {"validation", validation},
            {"known_test", known_test},
            {"novel_test_sets", novel_test_sets}};
}

SplitBundle SplitBundle::from_json(const json& j) {
    SplitBundle b;
    b.seed = j.at("seed").get<std::uint64_t>();
    b.known_ids = j.at("known_ids").get<std::vector<int>>();
    b.novel_ids = j.at("novel_ids").get<std::vector<int>>();
    b.train = j.at("train").get<std::vector<int>>();
    b.validation = j.at("validation").get<std::vector<int>>();
    b.known_test = j.at("known_test").get<std::vector<int>>();
    b.novel_test_sets = j.at("novel_test_sets").get<std::vector<std::vector<int>>>();
    return b;
}

SplitBundle make_splits(const EncodedDataset& ds, const std::vector<int>& known_ids,
                        const std::vector<int>& novel_ids_ordered, int n_test_sets,
                        std::uint64_t seed) {
    return make_splits(ds.labels, known_ids, novel_ids_ordered, n_test_sets, seed);
}

SplitBundle make_splits(const std::vector<int>& labels, const std::vector<int>& known_ids,
                        const std::vector<int>& novel_ids_ordered, int n_test_sets,
                        std::uint64_t seed) {
    require(known_ids.size() >= 2, "make_splits: need at least 2 known classes");
    require(n_test_sets >= 1, "make_splits: need at least one test set");
    {
        std::set<int> k(known_ids.begin(), known_ids.end());
        require(k.size() == known_ids.size(), "make_splits: duplicate known class id");
        for (int nv : novel_ids_ordered)
            require(!k.count(nv), "make_splits: class " + std::to_string(nv) + " is both known and novel");
        std::set<int> nvs(novel_ids_ordered.begin(), novel_ids_ordered.end());
        require(nvs.size() == novel_ids_ordered.size(), "make_splits: duplicate novel class id");
    }

    SplitBundle bundle;
    bundle.known_ids = known_ids;
    bundle.novel_ids = novel_ids_ordered;
    bundle.seed = seed;

    auto rows_of_class = [&](int cls) {
        std::vector<int> rows;
        for (std::size_t r = 0; r < labels.size(); ++r)
            if (labels[r] == cls) rows.push_back(static_cast<int>(r));
        return rows;
    };

    RngStream rng(derive_seed(seed, "known-split"));
    for (int cls : known_ids) {
        std::vector<int> rows = rows_of_class(cls);
        require(rows.size() >= 6, "make_splits: known class " + std::to_string(cls) +
                                      " has fewer than 6 samples");
        rng.shuffle(rows);
        const int n = static_cast<int>(rows.size());
        const int n_train = static_cast<int>(std::lround(2.0 * n / 3.0));
        const int n_val = static_cast<int>(std::lround(n / 6.0));
        const int n_test = n - n_train - n_val;
        require(n_train >= 1 && n_val >= 1 && n_test >= 1,
                "make_splits: class " + std::to_string(cls) + " too small to partition");
        bundle.train.insert(bundle.train.end(), rows.begin(), rows.begin() + n_train);
        bundle.validation.insert(bundle.validation.end(), rows.begin() + n_train,
                                 rows.begin() + n_train + n_val);
        bundle.known_test.insert(bundle.known_test.end(), rows.begin() + n_train + n_val, rows.end());
    }

    bundle.novel_test_sets.resize(n_test_sets);
    for (int s = 0; s < n_test_sets; ++s) {
        RngStream set_rng(derive_seed(derive_seed(seed, "novel-sets"), static_cast<std::uint64_t>(s)));
        for (int cls : novel_ids_ordered) {
            std::vector<int> rows = rows_of_class(cls);
            require(!rows.empty(), "make_splits: novel class " + std::to_string(cls) + " is empty");
            const int take = static_cast<int>(rows.size()) / 6;
            require(take >= 1, "make_splits: novel class " + std::to_string(cls) +
                                   " has fewer than 6 samples");
            set_rng.shuffle(rows);
            bundle.novel_test_sets[s].insert(bundle.novel_test_sets[s].end(), rows.begin(),
                                             rows.begin() + take);
        }
    }
    return bundle;
}

SynthConfig SynthConfig::from_json(const json& j) {
    SynthConfig c;
    c.n_numeric = j.at("n_numeric").get<int>();
    for (const auto& jc : j.at("classes")) {
        SynthClass sc;
        sc.name = jc.at("name").get<std::string>();
        sc.samples = jc.at("samples").get<int>();
        sc.mean = jc.at("mean").get<Vec>();
        if (jc.contains("cov_scale")) sc.cov_scale = jc.at("cov_scale").get<double>();
        if (jc.contains("covariance")) sc.covariance = serialize::matrix_from_json(jc.at("covariance"));
        c.classes.push_back(std::move(sc));
    }
    if (j.contains("categoricals")) {
        for (const auto& jc : j.at("categoricals")) {
            SynthCategorical sc;
            sc.name = jc.at("name").get<std::string>();
            sc.levels = jc.at("levels").get<std::vector<std::string>>();
            sc.per_class_probs = jc.at("per_class_probs").get<std::vector<Vec>>();
            c.categoricals.push_back(std::move(sc));
        }
    }
    if (j.contains("missing_rate")) c.missing_rate = j.at("missing_rate").get<double>();
    if (j.contains("patient_columns")) c.patient_columns = j.at("patient_columns").get<bool>();
    if (j.contains("encounters_per_patient"))
        c.encounters_per_patient = j.at("encounters_per_patient").get<int>();
    return c;
}

json SynthConfig::to_json() const {
    json jclasses = json::array();
    for (const auto& sc : classes) {
        json jc = {{"name", sc.name}, {"samples", sc.samples}, {"mean", sc.mean},
                   {"cov_scale", sc.cov_scale}};
        if (sc.covariance) jc["covariance"] = serialize::matrix_to_json(*sc.covariance);
        jclasses.push_back(std::move(jc));
    }
    json j = {{"n_numeric", n_numeric},
              {"classes", jclasses},
              {"missing_rate", missing_rate},
              {"patient_columns", patient_columns},
              {"encounters_per_patient", encounters_per_patient}};
    if (!categoricals.empty()) {
        json cats = json::array();
        for (const auto& sc : categoricals)
            cats.push_back({{"name", sc.name},
                            {"levels", sc.levels},
                            {"per_class_probs", sc.per_class_probs}});
        j["categoricals"] = cats;
    }
    return j;
}

namespace {

/// Lower-triangular Cholesky factor; throws on a non-positive-definite input.
Matrix cholesky(const Matrix& a) {
    const int n = a.rows;
    require(a.cols == n, "cholesky: not square");
    Matrix l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                require(s > 0.0, "cholesky: covariance not positive definite");
                l(i, j) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return l;
}

}  // namespace

SynthResult synth_generate(const SynthConfig& config, std::uint64_t seed) {
    require(config.n_numeric >= 1, "synth_generate: need at least one numeric feature");
    require(config.classes.size() >= 3,
            "synth_generate: need at least 3 classes so known/novel splits are possible");
    require(config.missing_rate >= 0.0 && config.missing_rate < 1.0,
            "synth_generate: missing_rate must be in [0,1)");
    for (const auto& sc : config.classes) {
        require(sc.samples >= 1, "synth_generate: class " + sc.name + " has no samples");
        require(static_cast<int>(sc.mean.size()) == config.n_numeric,
                "synth_generate: mean width mismatch for class " + sc.name);
        if (!sc.covariance) require(sc.cov_scale > 0.0, "synth_generate: cov_scale must be positive");
    }
    for (const auto& cat : config.categoricals) {
        require(cat.per_class_probs.size() == config.classes.size(),
                "synth_generate: per_class_probs count mismatch for " + cat.name);
        for (const auto& p : cat.per_class_probs)
            require(p.size() == cat.levels.size(),
                    "synth_generate: level probability width mismatch for " + cat.name);
    }

    Schema schema;
    if (config.patient_columns) {
        schema.columns.push_back({"patient", ColumnKind::patient_id, {}});
        schema.columns.push_back({"encounter", ColumnKind::encounter_order, {}});
    }
    {
        ColumnSpec label{"treatment", ColumnKind::label, {}};
        for (const auto& sc : config.classes) label.levels.push_back(sc.name);
        schema.columns.push_back(std::move(label));
    }
    for (int f = 0; f < config.n_numeric; ++f)
        schema.columns.push_back({"num_" + std::to_string(f), ColumnKind::numeric, {}});
    for (const auto& cat : config.categoricals)
        schema.columns.push_back({cat.name, ColumnKind::categorical, cat.levels});
    schema.validate();

    // per-class Cholesky factors (checks positive definiteness up front)
    std::vector<Matrix> chol;
    for (const auto& sc : config.classes) {
        if (sc.covariance) {
            require(sc.covariance->rows == config.n_numeric && sc.covariance->cols == config.n_numeric,
                    "synth_generate: covariance shape mismatch for class " + sc.name);
            chol.push_back(cholesky(*sc.covariance));
        } else {
            Matrix c(config.n_numeric, config.n_numeric);
            for (int i = 0; i < config.n_numeric; ++i) c(i, i) = std::sqrt(sc.cov_scale);
            chol.push_back(std::move(c));
        }
    }

    RawTable t = empty_table(schema);
    RngStream rng(derive_seed(seed, "synth"));
    int patient_counter = 0;
    const int label_col = schema.label_column();

    for (std::size_t cls = 0; cls < config.classes.size(); ++cls) {
        const auto& sc = config.classes[cls];
        int encounter_in_patient = 0;
        for (int s = 0; s < sc.samples; ++s) {
            int col = 0;
            if (config.patient_columns) {
                if (s > 0 && encounter_in_patient == config.encounters_per_patient) {
                    encounter_in_patient = 0;
                }
                if (encounter_in_patient == 0) ++patient_counter;
                t.columns[col].text.push_back("p" + std::to_string(patient_counter));
                ++col;
                t.columns[col].numeric.push_back(static_cast<double>(encounter_in_patient));
                t.columns[col].missing.push_back(0);
                ++col;
                ++encounter_in_patient;
            }
            // label
            t.columns[label_col].category.push_back(static_cast<int>(cls));
            t.columns[label_col].missing.push_back(0);
            col = label_col + 1;

            // numeric draw: mean + L * eps
            Vec eps(config.n_numeric);
            for (double& e : eps) e = rng.normal();
            for (int f = 0; f < config.n_numeric; ++f) {
                double v = sc.mean[f];
                for (int k = 0; k <= f; ++k) v += chol[cls](f, k) * eps[k];
                const bool missing = config.missing_rate > 0.0 && rng.uniform() < config.missing_rate;
                t.columns[col].numeric.push_back(missing ? 0.0 : v);
                t.columns[col].missing.push_back(missing ? 1 : 0);
                ++col;
            }
            for (std::size_t ci = 0; ci < config.categoricals.size(); ++ci) {
                const auto& probs = config.categoricals[ci].per_class_probs[cls];
                double u = rng.uniform();
                int level = 0;
                for (std::size_t l = 0; l < probs.size(); ++l) {
                    if (u < probs[l] || l + 1 == probs.size()) {
                        level = static_cast<int>(l);
                        break;
                    }
                    u -= probs[l];
                }
                t.columns[col].category.push_back(level);
                t.columns[col].missing.push_back(0);
                ++col;
            }
            ++t.n_rows;
        }
    }

    SynthResult result;
    result.schema = schema;
    result.table = std::move(t);
    result.ground_truth = {{"seed", seed}, {"config", config.to_json()}};
    return result;
}

}  // namespace osr::data
