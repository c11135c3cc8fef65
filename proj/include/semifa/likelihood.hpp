#pragma once

// Two-factor simple-structure model: each MV loads on slowness or ability, MVs
// are conditionally independent given their factor, and the factors are joined
// by the B-spline copula. Latent integrals use a tensor Gauss-Legendre rule;
// per-record work is O(Q m) item evaluations plus an O(Q^2) combination.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/latent.hpp"
#include "semifa/measurement.hpp"
#include "semifa/numerics.hpp"
#include "semifa/parallel.hpp"

namespace semifa {

/// Penalty weights shared within the continuous block, the discrete block, and the copula.
struct PenaltyWeights {
    double continuous = 1e-3;
    double discrete = 1e-1;
    double copula = 1e-3;

    void validate() const {
        if (!(continuous > 0.0 && discrete > 0.0 && copula > 0.0)) {
            throw ConfigError("penalty weights must be strictly positive");
        }
    }
    [[nodiscard]] double for_item(const ItemModel& item) const {
        return item.kind == ItemKind::continuous ? continuous : discrete;
    }
};

/// Structural settings used to build a model for a dataset.
struct ModelSettings {
    int basis_size = 13;
    int quadrature_points = 21;
    double x0 = 0.5;
    double y0 = 0.5;
};

struct FactorModel {
    std::shared_ptr<const BasisSet> basis;
    QuadratureRule quad;
    std::vector<ItemModel> items;
    CopulaModel copula;
    /// False when the latent density is held at independence (single-block fits).
    bool copula_free = true;

    [[nodiscard]] int size() const { return static_cast<int>(items.size()); }
    [[nodiscard]] TensorRule quad2d() const { return tensor_rule(quad, quad); }
    [[nodiscard]] LatentDensity latent() const { return LatentDensity{copula}; }
    [[nodiscard]] bool has(Factor f) const {
        for (const auto& it : items) {
            if (it.factor == f) return true;
        }
        return false;
    }
};

/// Flat model matching the columns of `data`. The copula is estimated only
/// when both factors have indicators.
inline FactorModel make_model(const Dataset& data, const ModelSettings& settings) {
    if (settings.quadrature_points < 1) throw ConfigError("quadrature_points must be >= 1");
    if (!(settings.x0 >= 0.0 && settings.x0 <= 1.0) || !(settings.y0 >= 0.0 && settings.y0 <= 1.0)) {
        throw ConfigError("reference levels must lie in [0, 1]");
    }
    FactorModel m;
    m.basis = std::make_shared<const BasisSet>(settings.basis_size);
    m.quad = gauss_legendre_unit(settings.quadrature_points);
    for (const auto& col : data.columns) {
        ItemModel it = col.kind == ItemKind::continuous ? ItemModel::flat_continuous(col.name, m.basis)
                                                        : ItemModel::flat_discrete(col.name, col.categories, m.basis);
        it.factor = col.factor;
        it.monotone = col.monotone;
        it.category_order = col.category_order;
        it.x0 = settings.x0;
        if (it.kind == ItemKind::continuous) it.y0 = settings.y0;
        m.items.push_back(std::move(it));
    }
    m.copula = CopulaModel::independence(m.basis);
    m.copula_free = m.has(Factor::slowness) && m.has(Factor::ability);
    return m;
}

/// Per-item natural parameters and log normalizers at the latent nodes.
struct ItemTable {
    Matrix gamma;      ///< Q x L, row a is alpha + B phi(u_a)
    Vector log_norm;   ///< Q
};

struct ModelTables {
    Matrix phi;                  ///< Q x K latent basis at the nodes
    std::vector<ItemTable> items;
    Matrix copula;               ///< Q x Q, (slowness node, ability node)

    static ItemTable item_table(const ItemModel& item, const Matrix& phi, const QuadratureRule& quad) {
        ItemTable t;
        t.gamma = phi * item.B.transpose();
        t.gamma.rowwise() += item.alpha.transpose();
        const OutcomeGrid grid = OutcomeGrid::make(item, quad);
        const Matrix g = t.gamma * grid.psi.transpose();  // Q x Qy
        const Eigen::ArrayXd log_w = grid.weights.array().log();
        t.log_norm.resize(g.rows());
        for (Eigen::Index a = 0; a < g.rows(); ++a) {
            const Eigen::ArrayXd row = g.row(a).transpose().array() + log_w;
            const double shift = row.maxCoeff();
            t.log_norm[a] = shift + std::log((row - shift).exp().sum());
            if (!std::isfinite(t.log_norm[a])) {
                throw NumericalError("MV '" + item.name + "': non-finite normalizer of the conditional density");
            }
        }
        return t;
    }

    static ModelTables build(const FactorModel& model) { return build(model, model.quad); }

    /// Tables at the nodes of `latent`; continuous MVs stay normalized with the model's rule.
    static ModelTables build(const FactorModel& model, const QuadratureRule& latent) {
        ModelTables t;
        t.phi = model.basis->evaluate(latent.nodes);
        for (const auto& item : model.items) t.items.push_back(item_table(item, t.phi, model.quad));
        t.copula = copula_on_grid(model.copula, latent, latent);
        return t;
    }
};

/// Basis windows of the data, computed once per dataset and basis.
struct DataDesign {
    struct Column {
        std::vector<int> first;                      ///< continuous: first nonzero basis index
        std::vector<std::array<double, 4>> values;   ///< continuous: nonzero basis values
        std::vector<int> category;                   ///< discrete: observed category
    };
    int rows = 0;
    std::vector<Column> columns;

    static DataDesign build(const FactorModel& model, const Dataset& data) {
        if (data.cols() != model.size()) {
            throw DataError("dataset has " + std::to_string(data.cols()) + " columns, model has " +
                            std::to_string(model.size()) + " MVs");
        }
        DataDesign d;
        d.rows = data.rows();
        for (int j = 0; j < model.size(); ++j) {
            const ItemModel& item = model.items[static_cast<std::size_t>(j)];
            const auto& meta = data.columns[static_cast<std::size_t>(j)];
            if (meta.kind != item.kind || (item.kind == ItemKind::discrete && meta.categories != item.categories)) {
                throw DataError("column '" + meta.name + "' does not match MV '" + item.name + "'");
            }
            Column c;
            for (int i = 0; i < d.rows; ++i) {
                const double y = data.values(i, j);
                try {
                    item.check_value(y);
                } catch (const DomainError& e) {
                    throw DomainError(std::string(e.what()) + " (record " + std::to_string(i) + ")");
                }
                if (item.kind == ItemKind::continuous) {
                    const auto l = model.basis->local(y);
                    c.first.push_back(l.first);
                    c.values.push_back(l.values);
                } else {
                    c.category.push_back(static_cast<int>(y));
                }
            }
            d.columns.push_back(std::move(c));
        }
        return d;
    }
};

/// Adds log f_j(y_ij | u_a) over all nodes a to `out`.
inline void accumulate_item_loglik(const ItemModel& item, const ItemTable& table, const DataDesign::Column& col,
                                   int i, Vector& out) {
    out -= table.log_norm;
    if (item.kind == ItemKind::continuous) {
        const int first = col.first[static_cast<std::size_t>(i)];
        const auto& v = col.values[static_cast<std::size_t>(i)];
        for (int r = 0; r < 4; ++r) {
            if (v[static_cast<std::size_t>(r)] != 0.0) out += v[static_cast<std::size_t>(r)] * table.gamma.col(first + r);
        }
    } else {
        const int c = col.category[static_cast<std::size_t>(i)];
        if (c > 0) out += table.gamma.col(c - 1);
    }
}

/// Per-factor log conditional likelihood of record i at every 1D node.
inline void factor_logliks(const FactorModel& model, const ModelTables& tables, const DataDesign& design, int i,
                           Vector& slowness, Vector& ability) {
    const auto Q = tables.phi.rows();
    slowness = Vector::Zero(Q);
    ability = Vector::Zero(Q);
    for (int j = 0; j < model.size(); ++j) {
        const auto& item = model.items[static_cast<std::size_t>(j)];
        Vector& target = item.factor == Factor::slowness ? slowness : ability;
        accumulate_item_loglik(item, tables.items[static_cast<std::size_t>(j)], design.columns[static_cast<std::size_t>(j)], i,
                               target);
    }
}

/// Posterior of one record on the tensor grid, stored in factored form
/// P(a, b) = e1[a] C(a, b) e2[b] / total.
struct RecordPosterior {
    double loglik = 0.0;
    Vector e1, e2;       ///< shifted likelihood times quadrature weight per factor
    double total = 0.0;
    Vector slowness;     ///< marginal posterior over slowness nodes
    Vector ability;      ///< marginal posterior over ability nodes

    [[nodiscard]] Matrix joint(const Matrix& copula) const {
        return (e1.asDiagonal() * copula * e2.asDiagonal()) / total;
    }
};

inline RecordPosterior record_posterior(const Vector& l1, const Vector& l2, const Matrix& copula,
                                        const QuadratureRule& quad) {
    RecordPosterior p;
    const Eigen::Map<const Vector> w(quad.weights.data(), quad.size());
    const double m1 = l1.maxCoeff();
    const double m2 = l2.maxCoeff();
    p.e1 = (l1.array() - m1).exp().matrix().cwiseProduct(w);
    p.e2 = (l2.array() - m2).exp().matrix().cwiseProduct(w);
    const Vector ce2 = copula * p.e2;
    const Vector cte1 = copula.transpose() * p.e1;
    p.total = p.e1.dot(ce2);
    p.loglik = m1 + m2 + std::log(p.total);
    if (p.total > 0.0 && std::isfinite(p.total)) {
        p.slowness = p.e1.cwiseProduct(ce2) / p.total;
        p.ability = p.e2.cwiseProduct(cte1) / p.total;
    }
    return p;
}

/// log f(y | x1, x2) = sum of item log conditional densities by factor.
inline double conditional_joint_logdensity(const FactorModel& model, std::span<const double> y, double x1, double x2) {
    if (static_cast<int>(y.size()) != model.size()) throw DataError("record length differs from the number of MVs");
    double s = 0.0;
    for (int j = 0; j < model.size(); ++j) {
        const auto& item = model.items[static_cast<std::size_t>(j)];
        const double x = item.factor == Factor::slowness ? x1 : x2;
        try {
            s += ConditionalDensity(item, x, model.quad).log_density(y[static_cast<std::size_t>(j)]);
        } catch (const DomainError& e) {
            throw DomainError("MV " + std::to_string(j) + ": " + e.what());
        }
    }
    return s;
}

/// Per-record log marginal likelihoods.
inline Vector record_logliks(const FactorModel& model, const Dataset& data, int threads = 1) {
    const DataDesign design = DataDesign::build(model, data);
    const ModelTables tables = ModelTables::build(model);
    Vector out(data.rows());
    parallel_for(data.rows(), threads, [&](int i) {
        Vector l1, l2;
        factor_logliks(model, tables, design, i, l1, l2);
        const RecordPosterior p = record_posterior(l1, l2, tables.copula, model.quad);
        if (!std::isfinite(p.loglik)) {
            throw NumericalError("non-finite marginal likelihood for record " + std::to_string(i));
        }
        out[i] = p.loglik;
    });
    return out;
}

/// Sample log-likelihood: sum over records of log of the double integral of f(y | x1, x2) c(x1, x2).
inline double marginal_loglik(const FactorModel& model, const Dataset& data, int threads = 1) {
    const Vector r = record_logliks(model, data, threads);
    return pairwise_sum(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
}

/// Sum of item penalties plus the copula penalty (when the copula is estimated).
inline double total_penalty(const FactorModel& model, const PenaltyWeights& w) {
    w.validate();
    double s = 0.0;
    for (const auto& item : model.items) s += item_penalty(item, w.for_item(item)).value;
    if (model.copula_free) s += copula_penalty(model.copula, w.copula).value;
    return s;
}

inline double penalized_objective(const FactorModel& model, const Dataset& data, const PenaltyWeights& w,
                                  int threads = 1) {
    return marginal_loglik(model, data, threads) - data.rows() * total_penalty(model, w);
}

/// Normalized posterior weights of one record on the tensor grid,
/// entry (a, b) for slowness node a and ability node b.
inline Matrix posterior_weights(const FactorModel& model, std::span<const double> y) {
    Dataset one;
    one.values = Eigen::Map<const Eigen::RowVectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    for (const auto& item : model.items) {
        ColumnMeta meta;
        meta.name = item.name;
        meta.kind = item.kind;
        meta.categories = item.categories;
        meta.factor = item.factor;
        one.columns.push_back(meta);
    }
    const DataDesign design = DataDesign::build(model, one);
    const ModelTables tables = ModelTables::build(model);
    Vector l1, l2;
    factor_logliks(model, tables, design, 0, l1, l2);
    const RecordPosterior p = record_posterior(l1, l2, tables.copula, model.quad);
    if (!(p.total > 0.0) || !std::isfinite(p.total)) throw DegenerateError("posterior has no mass on the grid");
    return p.joint(tables.copula);
}

}  // namespace semifa
