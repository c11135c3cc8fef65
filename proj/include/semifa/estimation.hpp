#pragma once

// Penalized maximum marginal likelihood by generalized EM. The E-step stores
// per-record marginal posteriors on the 1D node sets and the pooled joint
// posterior on the tensor grid; the M-step runs SQP passes on each item's
// expected complete-data objective and on the copula's.

#include <Eigen/Dense>
#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/latent.hpp"
#include "semifa/likelihood.hpp"
#include "semifa/measurement.hpp"
#include "semifa/numerics.hpp"
#include "semifa/parallel.hpp"
#include "semifa/qp.hpp"

namespace semifa {

struct FitConfig {
    double em_tolerance = 1e-3;
    int max_em_iterations = 500;
    double qp_tolerance = 1e-8;
    /// SQP passes per subproblem and EM iteration (1 = generalized EM).
    int inner_iterations = 1;
    /// Start from a sum-score pseudo-posterior instead of the flat model.
    bool warm_start = true;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const {
        if (!(em_tolerance > 0.0) || !(qp_tolerance > 0.0)) throw ConfigError("fit tolerances must be positive");
        if (max_em_iterations < 1) throw ConfigError("max_em_iterations must be >= 1");
        if (inner_iterations < 1) throw ConfigError("inner_iterations must be >= 1");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

/// Allowed EM objective decrease before an iteration is treated as a failure.
inline constexpr double kAscentSlack = 1e-8;

struct FitResult {
    FactorModel model;
    std::vector<double> trace;  ///< penalized objective after each E-step
    bool converged = false;
    int iterations = 0;
    int stalled_subproblems = 0;
    double loglik = 0.0;        ///< unpenalized log-likelihood of the returned model
};

/// Posterior summaries from one E-step.
struct EStepResult {
    Vector record_loglik;  ///< n
    double loglik = 0.0;
    Matrix slowness;       ///< n x Q marginal posteriors
    Matrix ability;        ///< n x Q
    Matrix pooled;         ///< Q x Q sum over records of the joint posterior (slowness node, ability node)
};

inline EStepResult e_step(const FactorModel& model, const ModelTables& tables, const DataDesign& design, int threads) {
    const int n = design.rows;
    const int Q = model.quad.size();
    constexpr int kBlock = 64;
    const int blocks = (n + kBlock - 1) / kBlock;
    EStepResult out;
    out.record_loglik.resize(n);
    out.slowness.resize(n, Q);
    out.ability.resize(n, Q);
    std::vector<Matrix> partial(static_cast<std::size_t>(blocks));
    parallel_for(blocks, threads, [&](int blk) {
        Matrix pooled = Matrix::Zero(Q, Q);
        Vector l1, l2;
        for (int i = blk * kBlock; i < std::min(n, (blk + 1) * kBlock); ++i) {
            factor_logliks(model, tables, design, i, l1, l2);
            const RecordPosterior p = record_posterior(l1, l2, tables.copula, model.quad);
            if (!(p.total > 0.0) || !std::isfinite(p.loglik)) {
                throw NumericalError("non-finite marginal likelihood for record " + std::to_string(i));
            }
            out.record_loglik[i] = p.loglik;
            out.slowness.row(i) = p.slowness.transpose();
            out.ability.row(i) = p.ability.transpose();
            pooled.noalias() += (p.e1 * p.e2.transpose()).cwiseProduct(tables.copula) / p.total;
        }
        partial[static_cast<std::size_t>(blk)] = std::move(pooled);
    });
    out.pooled = Matrix::Zero(Q, Q);
    for (const auto& m : partial) out.pooled += m;
    out.loglik = pairwise_sum(std::span<const double>(out.record_loglik.data(), static_cast<std::size_t>(n)));
    return out;
}

/// Sufficient statistics of one item's expected complete-data log-likelihood.
struct ItemStatistics {
    Matrix S;  ///< Q x L, S(a, :) = sum_i w_ia psi(y_ij)'
    Vector N;  ///< Q, N_a = sum_i w_ia
};

inline ItemStatistics item_statistics(const ItemModel& item, const DataDesign::Column& col, const Matrix& posterior) {
    const Eigen::Index Q = posterior.cols();
    ItemStatistics st;
    st.S = Matrix::Zero(Q, item.outcome_size());
    st.N = posterior.colwise().sum().transpose();
    for (Eigen::Index i = 0; i < posterior.rows(); ++i) {
        if (item.kind == ItemKind::continuous) {
            const int first = col.first[static_cast<std::size_t>(i)];
            const auto& v = col.values[static_cast<std::size_t>(i)];
            for (int r = 0; r < 4; ++r) {
                if (v[static_cast<std::size_t>(r)] != 0.0) {
                    st.S.col(first + r) += v[static_cast<std::size_t>(r)] * posterior.row(i).transpose();
                }
            }
        } else {
            const int c = col.category[static_cast<std::size_t>(i)];
            if (c > 0) st.S.col(c - 1) += posterior.row(i).transpose();
        }
    }
    return st;
}

/// Expected complete-data penalized log-likelihood of one item as a function of theta.
class ItemSubproblem {
public:
    ItemSubproblem(const ItemModel& item, const QuadratureRule& quad, ItemStatistics stats, double records,
                   double lambda)
        : L_(item.outcome_size()),
          K_(item.latent_size()),
          stats_(std::move(stats)),
          records_(records),
          grid_(OutcomeGrid::make(item, quad)),
          penalty_(lambda * item_roughness(item)) {
        const Matrix phi = item.basis->evaluate(quad.nodes);
        design_.resize(phi.rows(), K_ + 1);
        design_.col(0).setOnes();
        design_.rightCols(K_) = phi;
        log_w_ = grid_.weights.array().log().matrix();
    }

    [[nodiscard]] double value(const Vector& theta) const {
        const Matrix gamma = natural(theta);
        Vector log_z;
        probabilities(gamma, log_z);
        const double fit = stats_.S.cwiseProduct(gamma).sum() - stats_.N.dot(log_z);
        return fit - 0.5 * records_ * theta.dot(penalty_ * theta);
    }

    void derivatives(const Vector& theta, Vector& grad, Matrix& hess) const {
        const Matrix gamma = natural(theta);
        Vector log_z;
        const Matrix P = probabilities(gamma, log_z);  // Q x Qy
        const Matrix pi = P * grid_.psi;                // Q x L
        const Matrix R = stats_.S - stats_.N.asDiagonal() * pi;
        grad = Matrix(R.transpose() * design_).reshaped();
        grad -= records_ * (penalty_ * theta);

        hess = -records_ * penalty_;
        Matrix V(L_, L_);
        for (Eigen::Index a = 0; a < P.rows(); ++a) {
            if (stats_.N[a] == 0.0) continue;
            V.noalias() = grid_.psi.transpose() * P.row(a).transpose().asDiagonal() * grid_.psi;
            V.noalias() -= pi.row(a).transpose() * pi.row(a);
            const Vector e = design_.row(a).transpose();
            hess.noalias() -= stats_.N[a] * Eigen::kroneckerProduct(Matrix(e * e.transpose()), V).eval();
        }
    }

private:
    [[nodiscard]] Matrix natural(const Vector& theta) const {
        // gamma rows are (alpha + B phi(u_a))'; theta = vec([alpha, B]).
        const Eigen::Map<const Matrix> A(theta.data(), L_, K_ + 1);
        return design_ * A.transpose();
    }

    Matrix probabilities(const Matrix& gamma, Vector& log_z) const {
        Matrix G = gamma * grid_.psi.transpose();
        G.rowwise() += log_w_.transpose();
        log_z.resize(G.rows());
        for (Eigen::Index a = 0; a < G.rows(); ++a) {
            const double shift = G.row(a).maxCoeff();
            G.row(a) = (G.row(a).array() - shift).exp().matrix();
            const double z = G.row(a).sum();
            log_z[a] = shift + std::log(z);
            G.row(a) /= z;
        }
        return G;
    }

    int L_;
    int K_;
    ItemStatistics stats_;
    double records_;
    OutcomeGrid grid_;
    Matrix penalty_;
    Matrix design_;  ///< Q x (K + 1), rows (1, phi(u_a)')
    Vector log_w_;
};

/// Expected complete-data penalized copula log-likelihood as a function of vec(Xi).
class CopulaSubproblem {
public:
    static constexpr double kDensityFloor = 1e-300;

    CopulaSubproblem(const BasisSet& basis, const QuadratureRule& quad, const Matrix& pooled, double records,
                     double nu)
        : records_(records), penalty_(nu * bivariate_roughness(basis.size(), basis.size())) {
        const Matrix phi = basis.evaluate(quad.nodes);
        const Eigen::Index Q = phi.rows();
        const int K = basis.size();
        // Row a + Q b holds d c(u_a, u_b) / d vec(Xi): kron(phi(u_a), phi(u_b)).
        T_.resize(Q * Q, static_cast<Eigen::Index>(K) * K);
        weights_ = pooled.reshaped();
        for (Eigen::Index b = 0; b < Q; ++b) {
            for (Eigen::Index a = 0; a < Q; ++a) {
                T_.row(a + Q * b) =
                    Eigen::kroneckerProduct(phi.row(a).transpose(), phi.row(b).transpose()).eval().transpose();
            }
        }
    }

    [[nodiscard]] double value(const Vector& xi) const {
        const Vector c = T_ * xi;
        double s = 0.0;
        for (Eigen::Index r = 0; r < c.size(); ++r) {
            if (weights_[r] > 0.0) s += weights_[r] * std::log(std::max(c[r], kDensityFloor));
        }
        return s - 0.5 * records_ * xi.dot(penalty_ * xi);
    }

    void derivatives(const Vector& xi, Vector& grad, Matrix& hess) const {
        const Vector c = T_ * xi;
        Vector g1(c.size()), g2(c.size());
        for (Eigen::Index r = 0; r < c.size(); ++r) {
            const double cc = std::max(c[r], kDensityFloor);
            g1[r] = weights_[r] / cc;
            g2[r] = weights_[r] / (cc * cc);
        }
        grad = T_.transpose() * g1 - records_ * (penalty_ * xi);
        hess = -(T_.transpose() * g2.asDiagonal() * T_) - records_ * penalty_;
    }

private:
    double records_;
    Matrix penalty_;
    Matrix T_;
    Vector weights_;
};

struct SubproblemOutcome {
    double value_before = 0.0;
    double value_after = 0.0;
    bool stalled = false;
    double kkt_residual = 0.0;
    std::vector<int> working;
};

/// Projects coefficients onto {A c = b} along the row space of A.
inline Vector project_equalities(const ConstraintSet& cs, Vector c) {
    if (cs.equality.rows() == 0 || cs.equality_residual(c) <= 1e-12) return c;
    const Matrix& A = cs.equality;
    const Vector r = A * c - cs.equality_rhs;
    c -= A.transpose() * (A * A.transpose()).ldlt().solve(r);
    return c;
}

/// One M-step update of an item: maximizes the expected complete-data log-likelihood
/// minus n q_j over the item's constraint set, starting from the current coefficients.
inline SubproblemOutcome solve_item_subproblem(ItemModel& item, const ItemStatistics& stats,
                                               const QuadratureRule& quad, double records, double lambda,
                                               const FitConfig& config, std::vector<int> working = {}) {
    if (!(lambda > 0.0)) throw ConfigError("penalty weight must be positive");
    const ConstraintSet cs = item_constraints(item);
    const Eigen::Index p = item.parameter_count();
    const Matrix Z = null_space(cs.equality, p);
    Vector x = project_equalities(cs, item.parameters());
    if (cs.min_slack(x) < -1e-8) throw NumericalError("MV '" + item.name + "': infeasible entry point for the M-step");
    const ItemSubproblem problem(item, quad, stats, records, lambda);
    const SqpOutcome sqp =
        sqp_ascent(problem, x, Z, cs.inequality, cs.inequality_rhs, config.inner_iterations, config.qp_tolerance,
                   std::move(working));
    SubproblemOutcome out;
    out.value_before = problem.value(x);
    out.value_after = sqp.value;
    out.stalled = sqp.stalled;
    out.kkt_residual = sqp.kkt_residual;
    out.working = sqp.working;
    item.set_parameters(sqp.x);
    return out;
}

/// One M-step update of the copula coefficients from pooled joint posterior weights.
inline SubproblemOutcome solve_copula_subproblem(CopulaModel& cop, const QuadratureRule& quad, const Matrix& pooled,
                                                 double records, double nu, const FitConfig& config,
                                                 std::vector<int> working = {}) {
    if (!(nu > 0.0)) throw ConfigError("copula penalty weight must be positive");
    if (pooled.minCoeff() < 0.0) throw NumericalError("pooled posterior weights must be nonnegative");
    const ConstraintSet cs = copula_constraints(*cop.basis);
    const Eigen::Index p = cs.dimension();
    const Matrix Z = null_space(cs.equality, p);
    const Vector x = project_equalities(cs, cop.xi.reshaped());
    const CopulaSubproblem problem(*cop.basis, quad, pooled, records, nu);
    const SqpOutcome sqp = sqp_ascent(problem, x, Z, cs.inequality, cs.inequality_rhs, config.inner_iterations,
                                      config.qp_tolerance, std::move(working));
    SubproblemOutcome out;
    out.value_before = problem.value(x);
    out.value_after = sqp.value;
    out.stalled = sqp.stalled;
    out.kkt_residual = sqp.kkt_residual;
    out.working = sqp.working;
    cop.xi = sqp.x.reshaped(cop.size(), cop.size());
    return out;
}

/// Gradient of the penalized objective with respect to all coefficients:
/// item thetas in model order, then vec(Xi) when the copula is estimated.
inline Vector penalized_gradient(const FactorModel& model, const Dataset& data, const PenaltyWeights& w,
                                 int threads = 1) {
    w.validate();
    const DataDesign design = DataDesign::build(model, data);
    const ModelTables tables = ModelTables::build(model);
    const EStepResult post = e_step(model, tables, design, threads);
    const double n = data.rows();
    std::vector<Vector> parts;
    Eigen::Index total = 0;
    for (int j = 0; j < model.size(); ++j) {
        const ItemModel& item = model.items[static_cast<std::size_t>(j)];
        const Matrix& P = item.factor == Factor::slowness ? post.slowness : post.ability;
        const ItemSubproblem problem(item, model.quad,
                                     item_statistics(item, design.columns[static_cast<std::size_t>(j)], P), n,
                                     w.for_item(item));
        Vector g;
        Matrix h;
        problem.derivatives(item.parameters(), g, h);
        total += g.size();
        parts.push_back(std::move(g));
    }
    if (model.copula_free) {
        const CopulaSubproblem problem(*model.basis, model.quad, post.pooled, n, w.copula);
        Vector g;
        Matrix h;
        problem.derivatives(model.copula.xi.reshaped(), g, h);
        total += g.size();
        parts.push_back(std::move(g));
    }
    Vector out(total);
    Eigen::Index at = 0;
    for (const auto& g : parts) {
        out.segment(at, g.size()) = g;
        at += g.size();
    }
    return out;
}

namespace detail {

/// Ranks of a block sum score mapped to normal quantiles.
inline Vector sum_score_quantiles(const Dataset& data, const std::vector<int>& cols) {
    const int n = data.rows();
    Vector score = Vector::Zero(n);
    for (int j : cols) {
        const auto& meta = data.columns[static_cast<std::size_t>(j)];
        Vector v(n);
        for (int i = 0; i < n; ++i) v[i] = meta.score(data.values(i, j));
        const double mean = v.mean();
        const double sd = std::sqrt((v.array() - mean).square().sum() / std::max(1, n - 1));
        if (sd > 0.0) score += (v.array() - mean).matrix() / sd;
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] < score[b]; });
    Vector z(n);
    // Tied scores share the mean of their ranks.
    for (int s = 0; s < n;) {
        int e = s;
        while (e + 1 < n && score[order[static_cast<std::size_t>(e + 1)]] == score[order[static_cast<std::size_t>(s)]]) ++e;
        const double u = (0.5 * (s + e) + 0.5) / n;
        for (int r = s; r <= e; ++r) z[order[static_cast<std::size_t>(r)]] = normal_quantile(u);
        s = e + 1;
    }
    return z;
}

/// Smooth pseudo-posterior over the nodes centered near the shrunken score.
inline Matrix pseudo_posterior(const Vector& z, const QuadratureRule& quad) {
    constexpr double kShrink = 0.8;
    constexpr double kSpread = 0.6;
    const int Q = quad.size();
    Matrix P(z.size(), Q);
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        for (int a = 0; a < Q; ++a) {
            const double d = normal_quantile(quad.nodes[static_cast<std::size_t>(a)]) - kShrink * z[i];
            P(i, a) = quad.weights[static_cast<std::size_t>(a)] * std::exp(-d * d / (2.0 * kSpread * kSpread));
        }
        P.row(i) /= P.row(i).sum();
    }
    return P;
}

}  // namespace detail

/// Orients each factor with its block sum score and takes a few M-step passes
/// against the resulting pseudo-posterior. The flat model is an exact EM fixed
/// point (its posterior equals the prior), so EM cannot leave it on its own.
inline void sum_score_start(FactorModel& model, const Dataset& data, const DataDesign& design,
                            const PenaltyWeights& w, const FitConfig& config) {
    const int n = data.rows();
    const int Q = model.quad.size();
    const Matrix prior = Eigen::Map<const Vector>(model.quad.weights.data(), Q).transpose().replicate(n, 1);
    Matrix post[2] = {prior, prior};
    for (Factor f : {Factor::slowness, Factor::ability}) {
        const auto cols = data.columns_on(f);
        if (!cols.empty()) {
            post[static_cast<int>(f)] = detail::pseudo_posterior(detail::sum_score_quantiles(data, cols), model.quad);
        }
    }
    FitConfig inner = config;
    inner.inner_iterations = std::max(config.inner_iterations, 5);
    parallel_for(model.size(), config.threads, [&](int j) {
        ItemModel& item = model.items[static_cast<std::size_t>(j)];
        const ItemStatistics st =
            item_statistics(item, design.columns[static_cast<std::size_t>(j)], post[static_cast<int>(item.factor)]);
        solve_item_subproblem(item, st, model.quad, n, w.for_item(item), inner);
    });
    if (model.copula_free) {
        const Matrix pooled = post[0].transpose() * post[1];
        solve_copula_subproblem(model.copula, model.quad, pooled, n, w.copula, inner);
    }
}

/// EM iterations from a given starting model until the objective increment
/// falls below the tolerance or the iteration cap is reached.
inline FitResult em_iterate(FactorModel model, const Dataset& data, const DataDesign& design, const PenaltyWeights& w,
                            const FitConfig& config) {
    FitResult res;
    res.model = std::move(model);
    const double n = data.rows();
    const int m = res.model.size();
    std::vector<std::vector<int>> working(static_cast<std::size_t>(m));
    std::vector<int> copula_working;
    std::vector<char> stalled(static_cast<std::size_t>(m), 0);

    ModelTables tables = ModelTables::build(res.model);
    EStepResult post = e_step(res.model, tables, design, config.threads);
    double objective = post.loglik - n * total_penalty(res.model, w);
    res.trace.push_back(objective);

    for (res.iterations = 1; res.iterations <= config.max_em_iterations; ++res.iterations) {
        parallel_for(m, config.threads, [&](int j) {
            ItemModel& item = res.model.items[static_cast<std::size_t>(j)];
            const Matrix& P = item.factor == Factor::slowness ? post.slowness : post.ability;
            const ItemStatistics st = item_statistics(item, design.columns[static_cast<std::size_t>(j)], P);
            auto out = solve_item_subproblem(item, st, res.model.quad, n, w.for_item(item), config,
                                             working[static_cast<std::size_t>(j)]);
            working[static_cast<std::size_t>(j)] = std::move(out.working);
            stalled[static_cast<std::size_t>(j)] = out.stalled ? 1 : 0;
        });
        for (char s : stalled) res.stalled_subproblems += s;
        if (res.model.copula_free) {
            auto out = solve_copula_subproblem(res.model.copula, res.model.quad, post.pooled, n, w.copula, config,
                                               copula_working);
            copula_working = std::move(out.working);
            res.stalled_subproblems += out.stalled ? 1 : 0;
        }

        tables = ModelTables::build(res.model);
        post = e_step(res.model, tables, design, config.threads);
        const double next = post.loglik - n * total_penalty(res.model, w);
        if (!std::isfinite(next)) throw NumericalError("penalized objective became non-finite");
        if (next < objective - kAscentSlack - 1e-12 * std::abs(objective)) {
            throw NumericalError("EM objective decreased from " + std::to_string(objective) + " to " +
                                 std::to_string(next) + " at iteration " + std::to_string(res.iterations));
        }
        res.trace.push_back(next);
        const double increment = next - objective;
        objective = next;
        if (increment < config.em_tolerance) {
            res.converged = true;
            break;
        }
    }
    res.iterations = std::min(res.iterations, config.max_em_iterations);
    res.loglik = post.loglik;
    return res;
}

/// Penalized maximum marginal likelihood fit. `init`, when given, must match
/// the data columns and is the only starting point. Otherwise EM runs from the
/// flat model and, with warm_start, also from the sum-score start; the fit with
/// the larger final objective is returned.
inline FitResult em_fit(const Dataset& data, const PenaltyWeights& w, const FitConfig& config,
                        const ModelSettings& settings, const std::optional<FactorModel>& init = std::nullopt) {
    config.validate();
    w.validate();
    if (data.rows() == 0) throw DataError("cannot fit an empty dataset");
    data.validate();

    if (init) {
        const DataDesign design = DataDesign::build(*init, data);
        return em_iterate(*init, data, design, w, config);
    }
    FactorModel flat = make_model(data, settings);
    const DataDesign design = DataDesign::build(flat, data);
    if (!config.warm_start) return em_iterate(std::move(flat), data, design, w, config);
    FactorModel warm = flat;
    sum_score_start(warm, data, design, w, config);
    FitResult from_warm = em_iterate(std::move(warm), data, design, w, config);
    FitResult from_flat = em_iterate(std::move(flat), data, design, w, config);
    return from_flat.trace.back() > from_warm.trace.back() ? from_flat : from_warm;
}

}  // namespace semifa
