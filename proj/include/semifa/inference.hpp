#pragma once

// Bootstrap refits at fixed penalty weights, model-implied moments of MV
// scores, and residual-correlation diagnostics with percentile intervals.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/estimation.hpp"
#include "semifa/likelihood.hpp"
#include "semifa/parallel.hpp"

namespace semifa {

/// MV scoring functions: a category table for discrete MVs (empty = identity)
/// followed by an affine map.
struct ScoreFunction {
    struct Entry {
        std::vector<double> table;
        double scale = 1.0;
        double shift = 0.0;
    };
    std::vector<Entry> entries;

    static ScoreFunction from(const Dataset& data) {
        ScoreFunction s;
        for (const auto& c : data.columns) s.entries.push_back({c.kind == ItemKind::discrete ? c.category_scores : std::vector<double>{}});
        return s;
    }
    static ScoreFunction identity(int m) {
        ScoreFunction s;
        s.entries.resize(static_cast<std::size_t>(m));
        return s;
    }

    [[nodiscard]] double operator()(int j, double y) const {
        const Entry& e = entries.at(static_cast<std::size_t>(j));
        double v = y;
        if (!e.table.empty()) v = e.table.at(static_cast<std::size_t>(std::lround(y)));
        return e.scale * v + e.shift;
    }
};

// ---------------------------------------------------------------------------
// Model-implied moments

/// Conditional score moments of one MV at the latent nodes.
struct ScoreMoments {
    Vector first;   ///< Q, E[s(Y) | x_a]
    Vector second;  ///< Q, E[s(Y)^2 | x_a]
};

inline ScoreMoments conditional_score_moments(const FactorModel& model, const ScoreFunction& score, int j) {
    const ItemModel& item = model.items.at(static_cast<std::size_t>(j));
    const Matrix phi = model.basis->evaluate(model.quad.nodes);
    const ItemTable t = ModelTables::item_table(item, phi, model.quad);
    const OutcomeGrid grid = OutcomeGrid::make(item, model.quad);
    Vector s(static_cast<Eigen::Index>(grid.points.size()));
    for (Eigen::Index g = 0; g < s.size(); ++g) s[g] = score(j, grid.points[static_cast<std::size_t>(g)]);
    const Matrix logp = t.gamma * grid.psi.transpose();
    ScoreMoments out{Vector(model.quad.size()), Vector(model.quad.size())};
    for (int a = 0; a < model.quad.size(); ++a) {
        const Vector p = ((logp.row(a).transpose().array() - t.log_norm[a]).exp() * grid.weights.array()).matrix();
        out.first[a] = p.dot(s);
        out.second[a] = p.dot(s.cwiseProduct(s));
    }
    return out;
}

/// Covariance of two conditional means under the copula grid, computed from
/// centered means so that it is exactly invariant to score shifts even though
/// the grid copula integrates to one only up to quadrature error.
inline double cross_covariance(const Matrix& C, const Eigen::Map<const Vector>& w, const Vector& slowness_mean,
                               const Vector& ability_mean) {
    const Vector u = w.cwiseProduct((slowness_mean.array() - w.dot(slowness_mean)).matrix());
    const Vector v = w.cwiseProduct((ability_mean.array() - w.dot(ability_mean)).matrix());
    return u.dot(C * v);
}

struct MomentTriple {
    double first_j = 0.0;
    double first_k = 0.0;
    double second = 0.0;  ///< E[s_j s_k]
};

/// First moments of MVs j and k and their mixed second moment. The three cases
/// are j == k, both on one factor, and one on each factor (integrated against the copula).
inline MomentTriple model_implied_moments(const FactorModel& model, const ScoreFunction& score, int j, int k) {
    if (j < 0 || k < 0 || j >= model.size() || k >= model.size()) throw ConfigError("MV index out of range");
    const Eigen::Map<const Vector> w(model.quad.weights.data(), model.quad.size());
    const ScoreMoments mj = conditional_score_moments(model, score, j);
    const ScoreMoments mk = j == k ? mj : conditional_score_moments(model, score, k);
    MomentTriple out;
    out.first_j = w.dot(mj.first);
    out.first_k = w.dot(mk.first);
    const Factor fj = model.items[static_cast<std::size_t>(j)].factor;
    const Factor fk = model.items[static_cast<std::size_t>(k)].factor;
    if (j == k) {
        out.second = w.dot(mj.second);
    } else if (fj == fk) {
        out.second = w.dot(mj.first.cwiseProduct(mk.first));
    } else {
        const Matrix C = copula_on_grid(model.copula, model.quad, model.quad);
        const Vector& ms = fj == Factor::slowness ? mj.first : mk.first;
        const Vector& ma = fj == Factor::slowness ? mk.first : mj.first;
        out.second = out.first_j * out.first_k + cross_covariance(C, w, ms, ma);
    }
    return out;
}

namespace detail {

inline double correlation_from(double mj, double mk, double vj, double vk, double mjk, const std::string& what) {
    if (!(vj > 0.0) || !(vk > 0.0)) throw DegenerateError(what + ": zero variance");
    return std::clamp((mjk - mj * mk) / std::sqrt(vj * vk), -1.0, 1.0);
}

}  // namespace detail

inline double model_implied_correlation(const FactorModel& model, const ScoreFunction& score, int j, int k) {
    const MomentTriple jj = model_implied_moments(model, score, j, j);
    const MomentTriple kk = model_implied_moments(model, score, k, k);
    const MomentTriple jk = model_implied_moments(model, score, j, k);
    return detail::correlation_from(jj.first_j, kk.first_j, jj.second - jj.first_j * jj.first_j,
                                    kk.second - kk.first_j * kk.first_j, jk.second,
                                    "model-implied correlation of MVs " + std::to_string(j) + " and " + std::to_string(k));
}

/// All model-implied correlations; the diagonal is 1.
inline Matrix model_implied_correlations(const FactorModel& model, const ScoreFunction& score) {
    const int m = model.size();
    const Eigen::Map<const Vector> w(model.quad.weights.data(), model.quad.size());
    std::vector<ScoreMoments> mom;
    for (int j = 0; j < m; ++j) mom.push_back(conditional_score_moments(model, score, j));
    const Matrix C = copula_on_grid(model.copula, model.quad, model.quad);
    Vector mean(m), var(m);
    for (int j = 0; j < m; ++j) {
        mean[j] = w.dot(mom[static_cast<std::size_t>(j)].first);
        var[j] = w.dot(mom[static_cast<std::size_t>(j)].second) - mean[j] * mean[j];
    }
    Matrix R = Matrix::Identity(m, m);
    for (int j = 0; j < m; ++j) {
        for (int k = j + 1; k < m; ++k) {
            const auto& a = mom[static_cast<std::size_t>(j)];
            const auto& b = mom[static_cast<std::size_t>(k)];
            const Factor fj = model.items[static_cast<std::size_t>(j)].factor;
            const Factor fk = model.items[static_cast<std::size_t>(k)].factor;
            double second;
            if (fj == fk) {
                second = w.dot(a.first.cwiseProduct(b.first));
            } else if (fj == Factor::slowness) {
                second = mean[j] * mean[k] + cross_covariance(C, w, a.first, b.first);
            } else {
                second = mean[j] * mean[k] + cross_covariance(C, w, b.first, a.first);
            }
            R(j, k) = R(k, j) = detail::correlation_from(mean[j], mean[k], var[j], var[k], second,
                                                         "MVs '" + model.items[static_cast<std::size_t>(j)].name + "' and '" +
                                                             model.items[static_cast<std::size_t>(k)].name + "'");
        }
    }
    return R;
}

/// Pearson correlations of the scored columns.
inline Matrix sample_correlations(const Dataset& data, const ScoreFunction& score) {
    const int n = data.rows(), m = data.cols();
    Matrix S(n, m);
    for (int j = 0; j < m; ++j) {
        for (int i = 0; i < n; ++i) S(i, j) = score(j, data.values(i, j));
    }
    const Eigen::RowVectorXd mean = S.colwise().mean();
    S.rowwise() -= mean;
    const Matrix cov = S.transpose() * S;
    Matrix R(m, m);
    for (int j = 0; j < m; ++j) {
        if (!(cov(j, j) > 0.0)) throw DegenerateError("MV '" + data.columns[static_cast<std::size_t>(j)].name + "' is constant");
    }
    for (int j = 0; j < m; ++j) {
        for (int k = 0; k < m; ++k) R(j, k) = j == k ? 1.0 : cov(j, k) / std::sqrt(cov(j, j) * cov(k, k));
    }
    return R;
}

struct ResidualTable {
    Matrix sample;
    Matrix implied;
    Matrix residual;  ///< sample - implied; meaningful for j < k
};

inline ResidualTable residual_correlations(const FactorModel& model, const Dataset& data, const ScoreFunction& score) {
    if (data.cols() != model.size()) throw DataError("data columns differ from the model's MVs");
    ResidualTable t;
    t.sample = sample_correlations(data, score);
    t.implied = model_implied_correlations(model, score);
    t.residual = t.sample - t.implied;
    return t;
}

// ---------------------------------------------------------------------------
// Bootstrap

/// Independent seed for replicate r of a run seeded with `seed`.
inline std::uint64_t replicate_seed(std::uint64_t seed, int r) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(r)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// n row indices drawn uniformly with replacement.
inline std::vector<int> resample_indices(int n, std::uint64_t seed) {
    if (n < 1) throw DataError("cannot resample an empty dataset");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int& i : idx) i = pick(rng);
    return idx;
}

struct Replicate {
    std::uint64_t seed = 0;
    std::vector<int> indices;
    std::optional<FitResult> fit;
    std::string failure;  ///< set when the refit threw
};

struct BootstrapEnsemble {
    FactorModel base;  ///< full-data fit the replicates started from
    PenaltyWeights weights;
    std::vector<Replicate> replicates;

    [[nodiscard]] int successes() const {
        int s = 0;
        for (const auto& r : replicates) s += r.fit ? 1 : 0;
        return s;
    }
};

/// B row-resample refits at weights `w`, each started from `base`. Replicate
/// failures are recorded, not thrown.
inline BootstrapEnsemble bootstrap_refit(const Dataset& data, const FactorModel& base, const PenaltyWeights& w, int B,
                                         const FitConfig& config) {
    if (B < 1) throw ConfigError("bootstrap needs at least one replicate");
    config.validate();
    w.validate();
    BootstrapEnsemble ens;
    ens.base = base;
    ens.weights = w;
    ens.replicates.resize(static_cast<std::size_t>(B));
    FitConfig inner = config;
    inner.threads = 1;
    parallel_for(B, config.threads, [&](int r) {
        Replicate& rep = ens.replicates[static_cast<std::size_t>(r)];
        rep.seed = replicate_seed(config.seed, r);
        rep.indices = resample_indices(data.rows(), rep.seed);
        try {
            rep.fit = em_fit(data.subset_rows(rep.indices), w, inner, ModelSettings{}, base);
        } catch (const Error& e) {
            rep.failure = e.what();
        }
    });
    return ens;
}

/// Percentile interval from the order statistics at ranks ceil(B a/2) and
/// ceil(B (1 - a/2)), a = 1 - level.
inline std::pair<double, double> percentile_interval(std::vector<double> values, double level) {
    if (values.empty()) throw DegenerateError("percentile interval of an empty sample");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("interval level must lie in (0, 1)");
    std::sort(values.begin(), values.end());
    const double B = static_cast<double>(values.size());
    const double a = 1.0 - level;
    const auto rank = [&](double q) {
        const long r = static_cast<long>(std::ceil(B * q - 1e-9));
        return static_cast<std::size_t>(std::clamp(r, 1L, static_cast<long>(values.size())) - 1);
    };
    return {values[rank(a / 2.0)], values[rank(1.0 - a / 2.0)]};
}

/// Flag rule: the interval lies entirely above `threshold` or entirely below -threshold.
inline bool interval_flagged(double lo, double hi, double threshold) { return lo > threshold || hi < -threshold; }

struct ResidualDiagnostic {
    int j = 0, k = 0;
    double estimate = 0.0;  ///< full-data residual correlation
    double lo = 0.0, hi = 0.0;
    bool flagged = false;
};

struct ResidualReport {
    std::vector<ResidualDiagnostic> pairs;  ///< all j < k, row-major
    int replicates_used = 0;

    [[nodiscard]] std::vector<ResidualDiagnostic> flagged() const {
        std::vector<ResidualDiagnostic> out;
        for (const auto& p : pairs) {
            if (p.flagged) out.push_back(p);
        }
        return out;
    }
};

/// Residual correlations of the base fit with percentile intervals from the
/// replicates, each replicate evaluated on its own resample.
inline ResidualReport flag_residuals(const BootstrapEnsemble& ens, const Dataset& data, const ScoreFunction& score,
                                     double threshold = 0.1, double level = 0.90, int threads = 1) {
    if (ens.successes() < 1) throw DegenerateError("bootstrap ensemble has no successful replicate");
    const ResidualTable full = residual_correlations(ens.base, data, score);
    const int m = data.cols();
    std::vector<std::optional<Matrix>> reps(ens.replicates.size());
    parallel_for(static_cast<int>(ens.replicates.size()), threads, [&](int r) {
        const Replicate& rep = ens.replicates[static_cast<std::size_t>(r)];
        if (!rep.fit) return;
        try {
            reps[static_cast<std::size_t>(r)] =
                residual_correlations(rep.fit->model, data.subset_rows(rep.indices), score).residual;
        } catch (const DegenerateError&) {
            // a resample with a constant column carries no information on that pair
        }
    });
    ResidualReport out;
    for (const auto& r : reps) out.replicates_used += r ? 1 : 0;
    if (out.replicates_used == 0) throw DegenerateError("no replicate produced residual correlations");
    for (int j = 0; j < m; ++j) {
        for (int k = j + 1; k < m; ++k) {
            std::vector<double> vals;
            for (const auto& r : reps) {
                if (r) vals.push_back((*r)(j, k));
            }
            ResidualDiagnostic d;
            d.j = j;
            d.k = k;
            d.estimate = full.residual(j, k);
            std::tie(d.lo, d.hi) = percentile_interval(std::move(vals), level);
            d.flagged = interval_flagged(d.lo, d.hi, threshold);
            out.pairs.push_back(d);
        }
    }
    return out;
}

}  // namespace semifa
