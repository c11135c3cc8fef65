#pragma once

// Tensor-product B-spline copula density c(x1, x2) = phi(x2)' Xi phi(x1) for the
// slowness (x1) and ability (x2) factors, and the joint density of the
// normal-quantile-transformed factors.
//
// vec(Xi) is column-major: Xi(r, c) sits at r + K * c, rows indexing the
// ability basis and columns the slowness basis.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <utility>

#include "semifa/errors.hpp"
#include "semifa/measurement.hpp"
#include "semifa/numerics.hpp"

namespace semifa {

struct CopulaModel {
    std::shared_ptr<const BasisSet> basis;
    Matrix xi;  ///< K x K, nonnegative, Xi kappa = Xi' kappa = 1

    /// Independence copula: Xi is the all-ones matrix, so c == 1.
    static CopulaModel independence(std::shared_ptr<const BasisSet> basis) {
        CopulaModel m;
        const int K = basis->size();
        m.basis = std::move(basis);
        m.xi = Matrix::Ones(K, K);
        return m;
    }

    [[nodiscard]] int size() const { return basis->size(); }
    [[nodiscard]] const Vector& kappa() const { return basis->integrals(); }

    /// Largest deviation of Xi kappa and Xi' kappa from 1.
    [[nodiscard]] double marginal_residual() const {
        const Vector& k = kappa();
        const double rows = ((xi * k).array() - 1.0).abs().maxCoeff();
        const double cols = ((xi.transpose() * k).array() - 1.0).abs().maxCoeff();
        return std::max(rows, cols);
    }
};

inline double copula_density(const CopulaModel& cop, double x1, double x2) {
    return (*cop.basis)(x2).dot(cop.xi * (*cop.basis)(x1));
}

/// c at every tensor node: entry (a, b) is c(first.nodes[a], second.nodes[b]).
inline Matrix copula_on_grid(const CopulaModel& cop, const QuadratureRule& first, const QuadratureRule& second) {
    const Matrix Phi1 = cop.basis->evaluate(first.nodes);   // Q1 x K
    const Matrix Phi2 = cop.basis->evaluate(second.nodes);  // Q2 x K
    return Phi1 * cop.xi.transpose() * Phi2.transpose();
}

/// Uniform-marginal rows Xi kappa = 1 and Xi' kappa = 1 (the last row, which is
/// implied by the others, is dropped) and nonnegativity bounds on every entry.
inline ConstraintSet copula_constraints(const BasisSet& basis) {
    const int K = basis.size();
    const Vector& kappa = basis.integrals();
    const Eigen::Index p = static_cast<Eigen::Index>(K) * K;
    ConstraintSet cs;
    cs.equality = Matrix::Zero(2 * K - 1, p);
    for (int r = 0; r < K; ++r) {
        for (int c = 0; c < K; ++c) cs.equality(r, r + K * c) = kappa[c];
    }
    for (int c = 0; c + 1 < K; ++c) {
        for (int r = 0; r < K; ++r) cs.equality(K + c, r + K * c) = kappa[r];
    }
    cs.equality_rhs = Vector::Ones(2 * K - 1);
    cs.inequality = Matrix::Identity(p, p);
    cs.inequality_rhs = Vector::Zero(p);
    return cs;
}

inline Penalty copula_penalty(const CopulaModel& cop, double nu) {
    if (!(nu > 0.0)) throw ConfigError("copula penalty weight must be positive");
    const int K = cop.size();
    Penalty out;
    out.hessian = nu * bivariate_roughness(K, K);
    const Vector v = cop.xi.reshaped();
    out.gradient = out.hessian * v;
    out.value = 0.5 * v.dot(out.gradient);
    return out;
}

/// Copula together with standard normal marginals on the transformed scale.
struct LatentDensity {
    CopulaModel copula;
};

/// h(a, b) = c(Phi(a), Phi(b)) phi(a) phi(b).
inline double transformed_joint_density(const LatentDensity& lat, double x1s, double x2s) {
    if (!std::isfinite(x1s) || !std::isfinite(x2s)) throw DomainError("transformed density needs finite inputs");
    return copula_density(lat.copula, normal_cdf(x1s), normal_cdf(x2s)) * normal_pdf(x1s) * normal_pdf(x2s);
}

/// Conditional mean of the transformed ability given slowness at each node u1 of
/// `quad`: m(u1) = int Phi^{-1}(u2) c(u1, u2) du2.
inline Vector conditional_ability_mean(const CopulaModel& cop, const QuadratureRule& quad) {
    const Matrix C = copula_on_grid(cop, quad, quad);  // (slowness node, ability node)
    Vector zw(quad.size());
    for (int b = 0; b < quad.size(); ++b) {
        zw[b] = quad.weights[static_cast<std::size_t>(b)] * normal_quantile(quad.nodes[static_cast<std::size_t>(b)]);
    }
    return C * zw;
}

/// Share of the transformed ability variance explained by the conditional mean given slowness.
inline double eta_squared(const LatentDensity& lat, const QuadratureRule& quad) {
    const Vector m = conditional_ability_mean(lat.copula, quad);
    double s = 0.0;
    for (int a = 0; a < quad.size(); ++a) s += quad.weights[static_cast<std::size_t>(a)] * m[a] * m[a];
    return std::clamp(s, 0.0, 1.0);
}

}  // namespace semifa
