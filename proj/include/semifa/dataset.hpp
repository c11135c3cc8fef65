#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "semifa/errors.hpp"
#include "semifa/measurement.hpp"
#include "semifa/numerics.hpp"

namespace semifa {

/// Per-column metadata of a processed battery.
struct ColumnMeta {
    std::string name;
    std::string item;  ///< item/testlet id shared by the RT and response columns of one item
    ItemKind kind = ItemKind::continuous;
    int categories = 0;
    Factor factor = Factor::slowness;
    bool monotone = false;
    std::vector<int> category_order;
    std::vector<double> category_scores;  ///< MV scoring function for discrete columns; empty = identity
    double log_min = 0.0;                 ///< rescale bounds of the log10 RT (continuous columns)
    double log_max = 1.0;

    [[nodiscard]] double score(double y) const {
        if (kind == ItemKind::discrete && !category_scores.empty()) {
            return category_scores.at(static_cast<std::size_t>(std::lround(y)));
        }
        return y;
    }
    [[nodiscard]] double to_log_scale(double y) const { return log_min + y * (log_max - log_min); }
    [[nodiscard]] double from_log_scale(double z) const { return (z - log_min) / (log_max - log_min); }
};

/// n x m matrix of complete MV records; row i is respondent i.
struct Dataset {
    std::vector<ColumnMeta> columns;
    Matrix values;

    [[nodiscard]] int rows() const { return static_cast<int>(values.rows()); }
    [[nodiscard]] int cols() const { return static_cast<int>(values.cols()); }

    [[nodiscard]] std::vector<int> columns_on(Factor f) const {
        std::vector<int> out;
        for (int j = 0; j < cols(); ++j) {
            if (columns[static_cast<std::size_t>(j)].factor == f) out.push_back(j);
        }
        return out;
    }

    void validate() const {
        if (static_cast<int>(columns.size()) != cols()) {
            throw DataError("dataset has " + std::to_string(cols()) + " value columns but " +
                            std::to_string(columns.size()) + " column descriptions");
        }
        for (int j = 0; j < cols(); ++j) {
            const auto& c = columns[static_cast<std::size_t>(j)];
            if (c.kind == ItemKind::discrete && c.categories < 2) {
                throw DataError("column '" + c.name + "' needs at least 2 categories");
            }
            if (c.kind == ItemKind::discrete && !c.category_scores.empty() &&
                static_cast<int>(c.category_scores.size()) != c.categories) {
                throw DataError("column '" + c.name + "': score table size differs from category count");
            }
            for (int i = 0; i < rows(); ++i) {
                const double y = values(i, j);
                const bool ok = c.kind == ItemKind::continuous
                                    ? (y >= 0.0 && y <= 1.0)
                                    : (std::round(y) == y && y >= 0.0 && y < c.categories);
                if (!ok) {
                    throw DataError("column '" + c.name + "', record " + std::to_string(i) +
                                    ": value out of domain (" + std::to_string(y) + ")");
                }
            }
        }
    }

    [[nodiscard]] Dataset subset_rows(std::span<const int> indices) const {
        Dataset out;
        out.columns = columns;
        out.values.resize(static_cast<Eigen::Index>(indices.size()), values.cols());
        for (std::size_t r = 0; r < indices.size(); ++r) {
            out.values.row(static_cast<Eigen::Index>(r)) = values.row(indices[r]);
        }
        return out;
    }

    [[nodiscard]] Dataset subset_columns(std::span<const int> indices) const {
        Dataset out;
        out.values.resize(values.rows(), static_cast<Eigen::Index>(indices.size()));
        for (std::size_t c = 0; c < indices.size(); ++c) {
            out.columns.push_back(columns.at(static_cast<std::size_t>(indices[c])));
            out.values.col(static_cast<Eigen::Index>(c)) = values.col(indices[c]);
        }
        return out;
    }
};

}  // namespace semifa
