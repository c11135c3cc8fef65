#pragma once

// CSV tables and preprocessing of raw response/time batteries: testlet
// collapsing, summed testlet times, per-MV tail trimming, log10 and min-max
// rescaling.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/simulate.hpp"

namespace semifa {

// ---------------------------------------------------------------------------
// CSV

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cell += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cell += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(cell);
            cell.clear();
        } else if (ch != '\r') {
            cell += ch;
        }
    }
    out.push_back(cell);
    return out;
}

inline std::string trim_space(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace detail

/// Numeric table with a header row. Empty and NA cells read as NaN.
inline RawTable read_csv(std::istream& in, const std::string& source = "csv") {
    RawTable t;
    std::string line;
    if (!std::getline(in, line)) throw DataError(source + ": empty file");
    for (auto& h : detail::split_csv_line(line)) t.header.push_back(detail::trim_space(h));
    std::vector<std::vector<double>> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim_space(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != t.header.size()) {
            throw DataError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                            " fields, found " + std::to_string(cells.size()));
        }
        std::vector<double> row;
        for (const auto& raw : cells) {
            const std::string c = detail::trim_space(raw);
            if (c.empty() || c == "NA" || c == "NaN" || c == "nan") {
                row.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;
            }
            double v = 0.0;
            const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
            if (res.ec != std::errc() || res.ptr != c.data() + c.size()) {
                throw DataError(source + ":" + std::to_string(lineno) + ": not a number: '" + c + "'");
            }
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < t.header.size(); ++j) {
            t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
    }
    return t;
}

inline RawTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return read_csv(in, path);
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header, const Matrix& values) {
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
    out << '\n';
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        for (Eigen::Index j = 0; j < values.cols(); ++j) out << (j ? "," : "") << format_double(values(i, j));
        out << '\n';
    }
}

inline void write_csv_file(const std::string& path, const std::vector<std::string>& header, const Matrix& values) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    write_csv(out, header, values);
}

inline std::vector<std::string> column_names(const Dataset& d) {
    std::vector<std::string> out;
    for (const auto& c : d.columns) out.push_back(c.name);
    return out;
}

/// Values of a processed CSV placed under an existing schema, matched by column name.
inline Dataset dataset_from_table(const RawTable& t, const std::vector<ColumnMeta>& schema) {
    Dataset d;
    d.columns = schema;
    d.values.resize(t.values.rows(), static_cast<Eigen::Index>(schema.size()));
    for (std::size_t j = 0; j < schema.size(); ++j) d.values.col(static_cast<Eigen::Index>(j)) = t.values.col(t.column(schema[j].name));
    if (d.values.hasNaN()) throw DataError("processed data has missing entries");
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// One item or testlet of the raw battery.
struct ItemSpec {
    std::string name;
    std::vector<std::string> responses;  ///< one column, or two for a testlet
    std::vector<std::string> times;      ///< summed into one time; empty for a response-only item
    int categories = 2;                  ///< single-column items only
    bool monotone = false;
};

struct PreprocessSpec {
    std::vector<ItemSpec> items;
    double trim = 0.01;  ///< fraction trimmed from each tail of every time MV

    void validate() const {
        if (items.empty()) throw ConfigError("preprocess spec lists no items");
        if (!(trim >= 0.0 && trim < 0.5)) throw ConfigError("trim must lie in [0, 0.5)");
        for (const auto& it : items) {
            if (it.name.empty()) throw ConfigError("preprocess items need names");
            if (it.responses.empty() && it.times.empty()) throw ConfigError("item '" + it.name + "' has no columns");
            if (it.responses.size() > 2) throw ConfigError("item '" + it.name + "': at most two response columns");
            if (it.responses.size() == 1 && it.categories < 2) {
                throw ConfigError("item '" + it.name + "': categories must be >= 2");
            }
        }
    }
};

struct PreprocessResult {
    Dataset data;
    std::vector<int> retained;  ///< raw row index of each processed record
    int input_rows = 0;
    int dropped_missing = 0;
    int dropped_trimmed = 0;
};

/// Testlet pair recode: (0,0) -> 0, (1,0) -> 1, (0,1) -> 2, (1,1) -> 3.
inline int testlet_category(double first, double second) {
    const auto binary = [](double v) { return v == 0.0 || v == 1.0; };
    if (!binary(first) || !binary(second)) {
        throw DataError("testlet responses must be 0/1, got (" + format_double(first) + ", " + format_double(second) + ")");
    }
    return static_cast<int>(first) + 2 * static_cast<int>(second);
}

/// Testlet score table: number of correct members.
inline std::vector<double> testlet_scores() { return {0.0, 1.0, 1.0, 2.0}; }

/// Sample quantile with linear interpolation between order statistics.
inline double sample_quantile(std::vector<double> v, double p) {
    if (v.empty()) throw DegenerateError("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double h = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

namespace detail {

struct RawItem {
    const ItemSpec* spec;
    Vector time;      ///< summed seconds, NaN when missing
    Vector response;  ///< category, NaN when missing
};

inline std::vector<RawItem> gather_items(const RawTable& raw, const PreprocessSpec& spec) {
    std::vector<RawItem> out;
    const Eigen::Index n = raw.values.rows();
    for (const auto& it : spec.items) {
        RawItem r{&it, Vector(), Vector()};
        if (!it.times.empty()) {
            r.time = Vector::Zero(n);
            for (const auto& c : it.times) r.time += raw.values.col(raw.column(c));
        }
        if (!it.responses.empty()) {
            r.response.resize(n);
            std::vector<int> cols;
            for (const auto& c : it.responses) cols.push_back(raw.column(c));
            for (Eigen::Index i = 0; i < n; ++i) {
                const double a = raw.values(i, cols[0]);
                if (std::isnan(a) || (cols.size() == 2 && std::isnan(raw.values(i, cols[1])))) {
                    r.response[i] = std::numeric_limits<double>::quiet_NaN();
                } else if (cols.size() == 2) {
                    r.response[i] = testlet_category(a, raw.values(i, cols[1]));
                } else {
                    if (a != std::round(a) || a < 0.0 || a >= it.categories) {
                        throw DataError("item '" + it.name + "', row " + std::to_string(i) + ": response " +
                                        format_double(a) + " outside 0.." + std::to_string(it.categories - 1));
                    }
                    r.response[i] = a;
                }
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline ColumnMeta time_column(const ItemSpec& it) {
    ColumnMeta c;
    c.name = it.name + ".rt";
    c.item = it.name;
    c.kind = ItemKind::continuous;
    c.factor = Factor::slowness;
    return c;
}

inline ColumnMeta response_column(const ItemSpec& it) {
    ColumnMeta c;
    c.name = it.name + ".resp";
    c.item = it.name;
    c.kind = ItemKind::discrete;
    c.factor = Factor::ability;
    if (it.responses.size() == 2) {
        c.categories = 4;
        c.category_scores = testlet_scores();
    } else {
        c.categories = it.categories;
        c.monotone = it.monotone;
    }
    return c;
}

inline double checked_log10(double seconds, const std::string& item, int row) {
    if (!(seconds > 0.0)) {
        throw DomainError("item '" + item + "', row " + std::to_string(row) + ": nonpositive response time " +
                          format_double(seconds));
    }
    return std::log10(seconds);
}

/// Processed records from gathered items; `bounds` holds (min, max) per time MV or is empty to fit them.
inline PreprocessResult assemble(const std::vector<RawItem>& items, const std::vector<int>& keep, int input_rows,
                                 const std::vector<std::pair<double, double>>* bounds) {
    PreprocessResult res;
    res.input_rows = input_rows;
    res.retained = keep;
    std::vector<ColumnMeta> cols;
    std::vector<Vector> values;
    const auto n = static_cast<Eigen::Index>(keep.size());
    std::size_t t = 0;
    for (const auto& it : items) {
        if (it.time.size() == 0) continue;
        ColumnMeta c = time_column(*it.spec);
        Vector logt(n);
        for (Eigen::Index i = 0; i < n; ++i) logt[i] = checked_log10(it.time[keep[static_cast<std::size_t>(i)]], it.spec->name, keep[static_cast<std::size_t>(i)]);
        if (bounds) {
            std::tie(c.log_min, c.log_max) = bounds->at(t);
        } else {
            if (n == 0) throw DataError("no records left after preprocessing");
            c.log_min = logt.minCoeff();
            c.log_max = logt.maxCoeff();
        }
        if (!(c.log_max > c.log_min)) throw DegenerateError("time MV '" + c.name + "' is constant; cannot rescale");
        Vector y(n);
        for (Eigen::Index i = 0; i < n; ++i) y[i] = std::clamp(c.from_log_scale(logt[i]), 0.0, 1.0);
        cols.push_back(c);
        values.push_back(y);
        ++t;
    }
    for (const auto& it : items) {
        if (it.response.size() == 0) continue;
        Vector y(n);
        for (Eigen::Index i = 0; i < n; ++i) y[i] = it.response[keep[static_cast<std::size_t>(i)]];
        cols.push_back(response_column(*it.spec));
        values.push_back(y);
    }
    res.data.columns = cols;
    res.data.values.resize(n, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < values.size(); ++j) res.data.values.col(static_cast<Eigen::Index>(j)) = values[j];
    res.data.validate();
    return res;
}

}  // namespace detail

/// Raw battery -> processed dataset. Records with a missing entry are dropped;
/// then every record whose time on any MV falls outside that MV's
/// [trim, 1 - trim] sample quantiles is dropped, so the result stays complete.
inline PreprocessResult preprocess(const RawTable& raw, const PreprocessSpec& spec) {
    spec.validate();
    const auto items = detail::gather_items(raw, spec);
    const int n = static_cast<int>(raw.values.rows());
    std::vector<char> missing(static_cast<std::size_t>(n), 0), trimmed(static_cast<std::size_t>(n), 0);
    for (const auto& it : items) {
        for (int i = 0; i < n; ++i) {
            const bool miss = (it.time.size() && std::isnan(it.time[i])) || (it.response.size() && std::isnan(it.response[i]));
            if (miss) missing[static_cast<std::size_t>(i)] = 1;
        }
    }
    for (const auto& it : items) {
        if (it.time.size() == 0) continue;
        for (int i = 0; i < n; ++i) {
            if (!missing[static_cast<std::size_t>(i)]) detail::checked_log10(it.time[i], it.spec->name, i);
        }
        if (spec.trim == 0.0) continue;
        std::vector<double> observed;
        for (int i = 0; i < n; ++i) {
            if (!std::isnan(it.time[i])) observed.push_back(it.time[i]);
        }
        const double lo = sample_quantile(observed, spec.trim);
        const double hi = sample_quantile(observed, 1.0 - spec.trim);
        for (int i = 0; i < n; ++i) {
            if (!std::isnan(it.time[i]) && (it.time[i] < lo || it.time[i] > hi)) trimmed[static_cast<std::size_t>(i)] = 1;
        }
    }
    std::vector<int> keep;
    int dropped_missing = 0, dropped_trimmed = 0;
    for (int i = 0; i < n; ++i) {
        if (missing[static_cast<std::size_t>(i)]) {
            ++dropped_missing;
        } else if (trimmed[static_cast<std::size_t>(i)]) {
            ++dropped_trimmed;
        } else {
            keep.push_back(i);
        }
    }
    PreprocessResult res = detail::assemble(items, keep, n, nullptr);
    res.dropped_missing = dropped_missing;
    res.dropped_trimmed = dropped_trimmed;
    return res;
}

/// Raw battery processed with the stored rescale bounds of `reference` and no
/// trimming; times outside the bounds are clamped to [0, 1].
inline PreprocessResult preprocess_with_bounds(const RawTable& raw, const PreprocessSpec& spec,
                                               const std::vector<ColumnMeta>& reference) {
    spec.validate();
    std::vector<std::pair<double, double>> bounds;
    for (const auto& c : reference) {
        if (c.kind == ItemKind::continuous) bounds.emplace_back(c.log_min, c.log_max);
    }
    const auto items = detail::gather_items(raw, spec);
    std::size_t time_items = 0;
    for (const auto& it : items) time_items += it.time.size() ? 1 : 0;
    if (time_items != bounds.size()) throw DataError("reference schema does not match the preprocess spec");
    const int n = static_cast<int>(raw.values.rows());
    std::vector<int> keep;
    int dropped = 0;
    for (int i = 0; i < n; ++i) {
        bool miss = false;
        for (const auto& it : items) {
            miss = miss || (it.time.size() && std::isnan(it.time[i])) || (it.response.size() && std::isnan(it.response[i]));
        }
        if (miss) {
            ++dropped;
        } else {
            keep.push_back(i);
        }
    }
    PreprocessResult res = detail::assemble(items, keep, n, &bounds);
    res.dropped_missing = dropped;
    return res;
}

/// log10 times of continuous column j recovered from the rescaled values.
inline Vector restore_log_time(const Dataset& data, int j) {
    const auto& c = data.columns.at(static_cast<std::size_t>(j));
    if (c.kind != ItemKind::continuous) throw ConfigError("column '" + c.name + "' is not a time MV");
    Vector out(data.rows());
    for (int i = 0; i < data.rows(); ++i) out[i] = c.to_log_scale(data.values(i, j));
    return out;
}

/// Preprocess spec describing the raw table written by `simulate`.
inline PreprocessSpec simulation_spec(const GeneratorSpec& g, double trim = 0.0) {
    PreprocessSpec s;
    s.trim = trim;
    for (const auto& it : g.items) {
        ItemSpec i;
        i.name = it.name;
        if (it.testlet) {
            i.responses = {it.name + "_a", it.name + "_b"};
            i.times = {it.name + "_a_time", it.name + "_b_time"};
        } else {
            i.responses = {it.name};
            i.times = {it.name + "_time"};
            i.monotone = it.monotone;
        }
        s.items.push_back(i);
    }
    return s;
}

}  // namespace semifa
