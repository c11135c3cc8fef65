#pragma once

// Semiparametric conditional density models for one manifest variable (MV).
//
// The log-density kernel is g(x, y) = psi(y)' alpha + psi(y)' B phi(x), where
// phi is the latent B-spline basis and psi is the B-spline basis in y
// (continuous MVs) or the category indicator basis without the reference
// category 0 (discrete MVs). The coefficient vector theta = (alpha, vec(B))
// uses column-major vec, so B(l, k) sits at index L + l + L * k.

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "semifa/errors.hpp"
#include "semifa/numerics.hpp"

namespace semifa {

enum class ItemKind { continuous, discrete };

/// Latent factor an MV loads on. Continuous log-RT variables load on slowness,
/// item responses on ability.
enum class Factor { slowness = 0, ability = 1 };

/// Linear constraint system on a coefficient vector: equality * c = equality_rhs
/// and inequality * c >= inequality_rhs.
struct ConstraintSet {
    Matrix equality;
    Vector equality_rhs;
    Matrix inequality;
    Vector inequality_rhs;

    [[nodiscard]] Eigen::Index dimension() const {
        return equality.rows() > 0 ? equality.cols() : inequality.cols();
    }
    [[nodiscard]] double equality_residual(const Vector& c) const {
        if (equality.rows() == 0) return 0.0;
        return (equality * c - equality_rhs).cwiseAbs().maxCoeff();
    }
    /// Smallest inequality slack; +inf without inequality rows.
    [[nodiscard]] double min_slack(const Vector& c) const {
        if (inequality.rows() == 0) return std::numeric_limits<double>::infinity();
        return (inequality * c - inequality_rhs).minCoeff();
    }
};

/// Greedy row selection that drops rows lying in the span of earlier rows.
inline Matrix independent_rows(const Matrix& A, double tol = 1e-10) {
    std::vector<Vector> basis;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
        Vector v = A.row(r).transpose();
        const double scale = std::max(1.0, v.norm());
        for (const auto& q : basis) v -= q.dot(v) * q;
        for (const auto& q : basis) v -= q.dot(v) * q;
        if (v.norm() > tol * scale) {
            basis.push_back(v.normalized());
            keep.push_back(r);
        }
    }
    Matrix out(static_cast<Eigen::Index>(keep.size()), A.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = A.row(keep[i]);
    return out;
}

/// Orthonormal basis of the null space of a full-row-rank matrix.
inline Matrix null_space(const Matrix& A, Eigen::Index dimension) {
    if (A.rows() == 0) return Matrix::Identity(dimension, dimension);
    Eigen::HouseholderQR<Matrix> qr(A.transpose());
    const Matrix Q = qr.householderQ() * Matrix::Identity(dimension, dimension);
    return Q.rightCols(dimension - A.rows());
}

/// One MV's coefficients and structural settings.
struct ItemModel {
    std::string name;
    ItemKind kind = ItemKind::continuous;
    int categories = 0;  ///< C_j for discrete MVs
    Factor factor = Factor::slowness;
    bool monotone = false;
    double x0 = 0.5;  ///< latent reference level
    double y0 = 0.5;  ///< continuous MV reference level (discrete MVs use category 0)
    /// Category order used by monotonicity constraints on polytomous items; empty means 0, 1, ..., C-1.
    std::vector<int> category_order;
    std::shared_ptr<const BasisSet> basis;
    Vector alpha;  ///< length L
    Matrix B;      ///< L x K

    [[nodiscard]] int latent_size() const { return basis->size(); }
    [[nodiscard]] int outcome_size() const {
        return kind == ItemKind::continuous ? basis->size() : categories - 1;
    }
    [[nodiscard]] Eigen::Index parameter_count() const {
        return static_cast<Eigen::Index>(outcome_size()) * (1 + latent_size());
    }

    /// Zero-coefficient (flat) item.
    static ItemModel flat_continuous(std::string name, std::shared_ptr<const BasisSet> basis) {
        ItemModel m;
        m.name = std::move(name);
        m.kind = ItemKind::continuous;
        m.factor = Factor::slowness;
        m.basis = std::move(basis);
        m.reset();
        return m;
    }
    static ItemModel flat_discrete(std::string name, int categories, std::shared_ptr<const BasisSet> basis) {
        if (categories < 2) throw ConfigError("discrete MV '" + name + "' needs at least 2 categories");
        ItemModel m;
        m.name = std::move(name);
        m.kind = ItemKind::discrete;
        m.categories = categories;
        m.factor = Factor::ability;
        m.y0 = 0.0;
        m.basis = std::move(basis);
        m.reset();
        return m;
    }

    void reset() {
        alpha = Vector::Zero(outcome_size());
        B = Matrix::Zero(outcome_size(), latent_size());
    }

    [[nodiscard]] Vector parameters() const {
        Vector theta(parameter_count());
        const int L = outcome_size();
        theta.head(L) = alpha;
        theta.tail(parameter_count() - L) = B.reshaped();
        return theta;
    }
    void set_parameters(const Vector& theta) {
        const int L = outcome_size();
        alpha = theta.head(L);
        B = theta.tail(parameter_count() - L).reshaped(L, latent_size());
    }

    /// Validates a value against the MV's domain.
    void check_value(double y) const {
        if (kind == ItemKind::continuous) {
            if (!(y >= 0.0 && y <= 1.0)) {
                throw DomainError("MV '" + name + "': continuous value outside [0, 1]: " + std::to_string(y));
            }
        } else {
            const double r = std::round(y);
            if (!(r == y && r >= 0.0 && r < categories)) {
                throw DomainError("MV '" + name + "': invalid category " + std::to_string(y));
            }
        }
    }

    /// psi(y): dense L-vector.
    [[nodiscard]] Vector outcome_basis(double y) const {
        check_value(y);
        if (kind == ItemKind::continuous) return (*basis)(y);
        Vector v = Vector::Zero(outcome_size());
        const int c = static_cast<int>(y);
        if (c > 0) v[c - 1] = 1.0;
        return v;
    }
};

/// Kernel g(x, y) = psi(y)' (alpha + B phi(x)).
inline double log_kernel(const ItemModel& item, double x, double y) {
    const Vector psi = item.outcome_basis(y);
    const Vector phi = (*item.basis)(x);
    return psi.dot(item.alpha + item.B * phi);
}

/// Discretization of an MV's outcome space used to normalize the conditional density:
/// Gauss-Legendre nodes in y for continuous MVs, the category set for discrete MVs.
struct OutcomeGrid {
    std::vector<double> points;
    Vector weights;
    Matrix psi;  ///< rows psi(points[q])'

    static OutcomeGrid make(const ItemModel& item, const QuadratureRule& quad) {
        OutcomeGrid g;
        if (item.kind == ItemKind::continuous) {
            g.points = quad.nodes;
            g.weights = Eigen::Map<const Vector>(quad.weights.data(), quad.size());
            g.psi = item.basis->evaluate(quad.nodes);
        } else {
            const int C = item.categories;
            g.weights = Vector::Ones(C);
            g.psi = Matrix::Zero(C, C - 1);
            for (int c = 0; c < C; ++c) {
                g.points.push_back(c);
                if (c > 0) g.psi(c, c - 1) = 1.0;
            }
        }
        return g;
    }
};

/// f_j(. | x) for one latent value: stores the natural parameter and log normalizer.
class ConditionalDensity {
public:
    ConditionalDensity(const ItemModel& item, double x, const QuadratureRule& quad)
        : item_(&item), gamma_(item.alpha + item.B * (*item.basis)(x)) {
        const OutcomeGrid grid = OutcomeGrid::make(item, quad);
        const Vector g = grid.psi * gamma_;
        const double shift = g.maxCoeff();
        const double z = (grid.weights.array() * (g.array() - shift).exp()).sum();
        log_normalizer_ = shift + std::log(z);
        if (!std::isfinite(log_normalizer_)) {
            throw NumericalError("MV '" + item.name + "': non-finite normalizer of the conditional density");
        }
    }

    [[nodiscard]] double log_density(double y) const {
        return item_->outcome_basis(y).dot(gamma_) - log_normalizer_;
    }
    [[nodiscard]] double operator()(double y) const { return std::exp(log_density(y)); }
    [[nodiscard]] double log_normalizer() const noexcept { return log_normalizer_; }

private:
    const ItemModel* item_;
    Vector gamma_;
    double log_normalizer_ = 0.0;
};

/// Conditional density of a continuous MV; the normalizing integral uses `quad`.
inline ConditionalDensity continuous_density(const ItemModel& item, double x, const QuadratureRule& quad) {
    if (item.kind != ItemKind::continuous) throw ConfigError("continuous_density called on a discrete MV");
    return ConditionalDensity(item, x, quad);
}

/// Item response function: probabilities of categories 0..C-1 at latent value x.
inline Vector discrete_irf(const ItemModel& item, double x) {
    if (item.kind != ItemKind::discrete) throw ConfigError("discrete_irf called on a continuous MV");
    Vector eta(item.categories);
    eta[0] = 0.0;
    eta.tail(item.categories - 1) = item.alpha + item.B * (*item.basis)(x);
    const double shift = eta.maxCoeff();
    Vector p = (eta.array() - shift).exp();
    return p / p.sum();
}

/// Side conditions: psi(y0)' alpha = 0, B phi(x0) = 0 and B' psi(y0) = 0 (continuous);
/// B phi(x0) = 0 for discrete MVs, whose reference category is removed from psi.
/// Rows in the span of earlier rows are dropped.
inline ConstraintSet equality_constraints(const ItemModel& item) {
    const int L = item.outcome_size();
    const int K = item.latent_size();
    const Eigen::Index p = item.parameter_count();
    const Vector phi0 = (*item.basis)(item.x0);
    std::vector<Vector> rows;
    if (item.kind == ItemKind::continuous) {
        const Vector psi0 = (*item.basis)(item.y0);
        Vector r = Vector::Zero(p);
        r.head(L) = psi0;
        rows.push_back(r);
    }
    for (int l = 0; l < L; ++l) {
        Vector r = Vector::Zero(p);
        for (int k = 0; k < K; ++k) r[L + l + L * k] = phi0[k];
        rows.push_back(r);
    }
    if (item.kind == ItemKind::continuous) {
        const Vector psi0 = (*item.basis)(item.y0);
        for (int k = 0; k < K; ++k) {
            Vector r = Vector::Zero(p);
            for (int l = 0; l < L; ++l) r[L + l + L * k] = psi0[l];
            rows.push_back(r);
        }
    }
    Matrix A(static_cast<Eigen::Index>(rows.size()), p);
    for (std::size_t i = 0; i < rows.size(); ++i) A.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    ConstraintSet cs;
    cs.equality = independent_rows(A);
    cs.equality_rhs = Vector::Zero(cs.equality.rows());
    cs.inequality = Matrix::Zero(0, p);
    cs.inequality_rhs = Vector::Zero(0);
    return cs;
}

/// Likelihood-ratio monotonicity: every 2x2 cross difference of adjacent
/// coefficients is nonnegative. Discrete MVs include the structural zero row
/// of the reference category, so a dichotomous item gets K-1 rows requiring
/// its slope coefficients to be nondecreasing.
inline ConstraintSet monotonicity_constraints(const ItemModel& item) {
    const int L = item.outcome_size();
    const int K = item.latent_size();
    const Eigen::Index p = item.parameter_count();
    ConstraintSet cs;
    cs.equality = Matrix::Zero(0, p);
    cs.equality_rhs = Vector::Zero(0);

    // Ordered list of coefficient rows; -1 denotes the structural zero row.
    std::vector<int> order;
    if (item.kind == ItemKind::continuous) {
        for (int l = 0; l < L; ++l) order.push_back(l);
    } else {
        std::vector<int> cats = item.category_order;
        if (cats.empty()) {
            if (item.categories > 2) {
                throw ConfigError("MV '" + item.name +
                                  "': monotone polytomous items need an explicit category order");
            }
            for (int c = 0; c < item.categories; ++c) cats.push_back(c);
        }
        std::vector<int> sorted = cats;
        std::sort(sorted.begin(), sorted.end());
        for (int c = 0; c < item.categories; ++c) {
            if (static_cast<int>(sorted.size()) != item.categories || sorted[static_cast<std::size_t>(c)] != c) {
                throw ConfigError("MV '" + item.name + "': category order must be a permutation of 0..C-1");
            }
        }
        for (int c : cats) order.push_back(c - 1);
    }

    const int rows = (static_cast<int>(order.size()) - 1) * (K - 1);
    cs.inequality = Matrix::Zero(rows, p);
    cs.inequality_rhs = Vector::Zero(rows);
    int r = 0;
    for (int k = 0; k + 1 < K; ++k) {
        for (std::size_t s = 0; s + 1 < order.size(); ++s) {
            const auto add = [&](int row, int col, double v) {
                if (row >= 0) cs.inequality(r, L + row + L * col) += v;
            };
            add(order[s], k, 1.0);
            add(order[s + 1], k, -1.0);
            add(order[s], k + 1, -1.0);
            add(order[s + 1], k + 1, 1.0);
            ++r;
        }
    }
    return cs;
}

/// All linear constraints of an item (side conditions plus optional monotonicity).
inline ConstraintSet item_constraints(const ItemModel& item) {
    ConstraintSet cs = equality_constraints(item);
    if (item.monotone) {
        const ConstraintSet mono = monotonicity_constraints(item);
        cs.inequality = mono.inequality;
        cs.inequality_rhs = mono.inequality_rhs;
    }
    return cs;
}

/// Quadratic penalty value, gradient and (constant) Hessian.
struct Penalty {
    double value = 0.0;
    Vector gradient;
    Matrix hessian;
};

/// Bivariate P-spline roughness matrix I (x) E'E + E'E (x) I for an L x K coefficient matrix.
inline Matrix bivariate_roughness(int rows, int cols) {
    const Matrix Ey = difference_matrix(2, rows);
    const Matrix Ex = difference_matrix(2, cols);
    const Matrix EtEy = Ey.transpose() * Ey;
    const Matrix EtEx = Ex.transpose() * Ex;
    return Eigen::kroneckerProduct(Matrix::Identity(cols, cols), EtEy) +
           Eigen::kroneckerProduct(EtEx, Matrix::Identity(rows, rows));
}

/// Roughness matrix M of an item so that its penalty is (lambda / 2) theta' M theta.
inline Matrix item_roughness(const ItemModel& item) {
    const int L = item.outcome_size();
    const int K = item.latent_size();
    const Eigen::Index p = item.parameter_count();
    Matrix M = Matrix::Zero(p, p);
    if (item.kind == ItemKind::continuous) {
        const Matrix E = difference_matrix(2, L);
        M.topLeftCorner(L, L) = E.transpose() * E;
        M.bottomRightCorner(p - L, p - L) = bivariate_roughness(L, K);
    } else {
        const Matrix E = difference_matrix(2, K);
        M.bottomRightCorner(p - L, p - L) =
            Eigen::kroneckerProduct(Matrix(E.transpose() * E), Matrix::Identity(L, L));
    }
    return M;
}

inline Penalty item_penalty(const ItemModel& item, double lambda) {
    if (!(lambda > 0.0)) throw ConfigError("penalty weight must be positive");
    const Matrix M = item_roughness(item);
    const Vector theta = item.parameters();
    Penalty out;
    out.hessian = lambda * M;
    out.gradient = out.hessian * theta;
    out.value = 0.5 * theta.dot(out.gradient);
    return out;
}

}  // namespace semifa
