#pragma once

// Dense convex QP by the primal active-set method, and the SQP ascent step used
// by every M-step subproblem (concave objective, linear constraints eliminated
// to a null space plus linear inequalities).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "semifa/errors.hpp"
#include "semifa/numerics.hpp"

namespace semifa {

/// Cholesky of a symmetric matrix that should be positive definite; a growing
/// diagonal shift is added when it is only semidefinite.
inline Eigen::LLT<Matrix> regularized_llt(Matrix P) {
    P = 0.5 * (P + P.transpose());
    const double scale = std::max(1.0, P.diagonal().cwiseAbs().maxCoeff());
    double shift = 1e-12 * scale;
    for (int attempt = 0; attempt < 12; ++attempt) {
        Eigen::LLT<Matrix> llt(P + shift * Matrix::Identity(P.rows(), P.cols()));
        if (llt.info() == Eigen::Success) return llt;
        shift *= 10.0;
    }
    throw NumericalError("QP Hessian is not positive definite after regularization");
}

struct QpResult {
    Vector x;
    std::vector<int> working;  ///< constraints active at the solution
    int iterations = 0;
    bool converged = false;
};

/// Minimizes 0.5 x'Px + q'x subject to A x >= b from a feasible start x.
/// `working` seeds the working set (indices of constraints active at x).
inline QpResult solve_qp(const Eigen::LLT<Matrix>& P_llt, const Matrix& P, const Vector& q, const Matrix& A,
                         const Vector& b, Vector x, std::vector<int> working = {}, int max_iterations = 1000) {
    QpResult res;
    const Eigen::Index n = x.size();
    if (A.rows() == 0) {
        res.x = P_llt.solve(-q);
        res.converged = true;
        return res;
    }
    const double x_tol = 1e-12;

    // Keep only seeds that are active and independent of earlier seeds.
    {
        std::vector<int> filtered;
        std::vector<Vector> ortho;
        for (int i : working) {
            if (i < 0 || i >= A.rows()) continue;
            if (std::abs(A.row(i).dot(x) - b[i]) > 1e-10 * (1.0 + std::abs(b[i]))) continue;
            Vector v = A.row(i).transpose();
            const double scale = v.norm();
            for (const auto& u : ortho) v -= u.dot(v) * u;
            if (v.norm() > 1e-9 * scale) {
                ortho.push_back(v.normalized());
                filtered.push_back(i);
            }
        }
        working = std::move(filtered);
    }

    std::vector<char> in_working(static_cast<std::size_t>(A.rows()), 0);
    for (int i : working) in_working[static_cast<std::size_t>(i)] = 1;

    for (res.iterations = 0; res.iterations < max_iterations; ++res.iterations) {
        const Vector g = P * x + q;
        const Vector Pinv_g = P_llt.solve(g);
        Vector p;
        Vector lambda;
        if (working.empty()) {
            p = -Pinv_g;
        } else {
            Matrix Aw(static_cast<Eigen::Index>(working.size()), n);
            for (std::size_t k = 0; k < working.size(); ++k) Aw.row(static_cast<Eigen::Index>(k)) = A.row(working[k]);
            const Matrix Y = P_llt.solve(Aw.transpose());
            const Matrix S = Aw * Y;
            lambda = S.ldlt().solve(Aw * Pinv_g);
            p = Y * lambda - Pinv_g;
        }

        if (p.lpNorm<Eigen::Infinity>() <= x_tol * (1.0 + x.lpNorm<Eigen::Infinity>())) {
            if (working.empty()) {
                res.converged = true;
                break;
            }
            Eigen::Index worst = 0;
            const double min_lambda = lambda.minCoeff(&worst);
            if (min_lambda >= -1e-12 * (1.0 + lambda.cwiseAbs().maxCoeff())) {
                res.converged = true;
                break;
            }
            in_working[static_cast<std::size_t>(working[static_cast<std::size_t>(worst)])] = 0;
            working.erase(working.begin() + worst);
            continue;
        }

        double step = 1.0;
        int blocking = -1;
        for (Eigen::Index i = 0; i < A.rows(); ++i) {
            if (in_working[static_cast<std::size_t>(i)]) continue;
            const double ap = A.row(i).dot(p);
            if (ap >= -1e-14 * p.norm() * A.row(i).norm()) continue;
            const double slack = std::max(0.0, A.row(i).dot(x) - b[i]);
            const double s = slack / -ap;
            if (s < step) {
                step = s;
                blocking = static_cast<int>(i);
            }
        }
        x += step * p;
        if (blocking >= 0) {
            working.push_back(blocking);
            in_working[static_cast<std::size_t>(blocking)] = 1;
        }
    }
    res.x = std::move(x);
    res.working = std::move(working);
    return res;
}

struct SqpOutcome {
    Vector x;
    double value = 0.0;
    double kkt_residual = 0.0;  ///< max-norm of the last QP step
    bool stalled = false;       ///< line search failed; x is the entry point
    int iterations = 0;
    std::vector<int> working;
};

/// Maximizes a concave `problem` over {x0 + Z d : G(x0 + Z d) >= h} by SQP with
/// the exact Hessian and Armijo backtracking. Problem provides
///   double value(const Vector&) const;
///   void derivatives(const Vector&, Vector& grad, Matrix& hess) const;
/// The entry point must be feasible. Each accepted step increases the value.
template <class Problem>
SqpOutcome sqp_ascent(const Problem& problem, Vector x, const Matrix& Z, const Matrix& G, const Vector& h,
                      int max_iterations, double tolerance, std::vector<int> working = {}) {
    SqpOutcome out;
    out.value = problem.value(x);
    if (!std::isfinite(out.value)) throw NumericalError("SQP entry point has a non-finite objective");
    const Matrix GZ = G.rows() > 0 ? Matrix(G * Z) : Matrix(0, Z.cols());

    for (out.iterations = 0; out.iterations < max_iterations; ++out.iterations) {
        Vector grad;
        Matrix hess;
        problem.derivatives(x, grad, hess);
        const Vector gz = Z.transpose() * grad;
        const Matrix Pz = -(Z.transpose() * hess * Z);
        const auto llt = regularized_llt(Pz);
        const Matrix P = llt.reconstructedMatrix();

        Vector d;
        if (GZ.rows() > 0) {
            const Vector rhs = h - G * x;
            QpResult qp = solve_qp(llt, P, -gz, GZ, rhs, Vector::Zero(Z.cols()), working);
            d = std::move(qp.x);
            working = std::move(qp.working);
        } else {
            d = llt.solve(gz);
        }
        const Vector step = Z * d;
        out.kkt_residual = step.lpNorm<Eigen::Infinity>();
        const double predicted = gz.dot(d);
        if (out.kkt_residual <= tolerance || predicted <= 1e-14 * (1.0 + std::abs(out.value))) break;

        double t = 1.0;
        bool accepted = false;
        for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
            const Vector trial = x + t * step;
            const double v = problem.value(trial);
            if (std::isfinite(v) && v >= out.value + 1e-4 * t * predicted) {
                x = trial;
                out.value = v;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            out.stalled = true;
            break;
        }
    }
    out.x = std::move(x);
    out.working = std::move(working);
    return out;
}

}  // namespace semifa
