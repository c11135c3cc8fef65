#pragma once

// Latent scores on the normal-quantile scale: joint EAPs from the two-factor
// posterior, response-only EAPs from the ability items with a uniform latent,
// and bootstrap predictive precisions (inverse variance of the uniform
// mixture of replicate posteriors). Posterior moments are integrated on a
// composite rule in z = Phi^-1(x) rather than the estimation nodes: z is
// unbounded near x = 0 and 1, where a Gauss-Legendre rule in x converges slowly.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/inference.hpp"
#include "semifa/likelihood.hpp"
#include "semifa/numerics.hpp"
#include "semifa/parallel.hpp"

namespace semifa {

/// Posterior mean and second moment of one factor on the transformed scale.
struct PosteriorMoments {
    double mean = 0.0;
    double second = 0.0;

    [[nodiscard]] double variance() const { return std::max(0.0, second - mean * mean); }
};

struct ScoreRecord {
    double eap_slowness = 0.0, eap_ability = 0.0;
    double sd_slowness = 0.0, sd_ability = 0.0;
    /// Predictive precisions; the plug-in 1 / sd^2 until a bootstrap ensemble replaces them.
    double precision_slowness = 0.0, precision_ability = 0.0;
    /// Response-only ability score and its precision (plug-in or predictive).
    double eap_marginal = 0.0, sd_marginal = 0.0, precision_marginal = 0.0;
};

/// Composite Gauss-Legendre rule on z in [-half_width, half_width] with
/// standard normal weights; as a rule on [0, 1] its nodes are Phi(z).
struct ScoringGrid {
    QuadratureRule rule;
    Vector z;

    static ScoringGrid make(int panels = 24, int order = 5, double half_width = 8.0) {
        if (panels < 1 || order < 1 || !(half_width > 0.0)) throw ConfigError("invalid scoring grid");
        const QuadratureRule gl = gauss_legendre_unit(order);
        const double h = 2.0 * half_width / panels;
        ScoringGrid g;
        g.z.resize(panels * order);
        for (int p = 0; p < panels; ++p) {
            for (int q = 0; q < order; ++q) {
                const double z = -half_width + h * (p + gl.nodes[static_cast<std::size_t>(q)]);
                g.z[p * order + q] = z;
                g.rule.nodes.push_back(normal_cdf(z));
                g.rule.weights.push_back(h * gl.weights[static_cast<std::size_t>(q)] * normal_pdf(z));
            }
        }
        return g;
    }
    static const ScoringGrid& standard() {
        static const ScoringGrid g = make();
        return g;
    }
};

namespace detail {

inline PosteriorMoments moments_of(const Vector& p, const Vector& z) {
    return {p.dot(z), p.dot(z.cwiseProduct(z))};
}

/// Single-record dataset whose column metadata mirrors the model's items.
inline Dataset record_dataset(const FactorModel& model, std::span<const double> y) {
    if (static_cast<int>(y.size()) != model.size()) throw DataError("record length differs from the number of MVs");
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
    return one;
}

/// Joint-posterior moments of (slowness, ability) for every record.
inline std::vector<std::array<PosteriorMoments, 2>> joint_moments(const FactorModel& model, const Dataset& data,
                                                                  int threads, const ScoringGrid& grid) {
    const DataDesign design = DataDesign::build(model, data);
    const ModelTables tables = ModelTables::build(model, grid.rule);
    const Vector& z = grid.z;
    std::vector<std::array<PosteriorMoments, 2>> out(static_cast<std::size_t>(data.rows()));
    parallel_for(data.rows(), threads, [&](int i) {
        Vector l1, l2;
        factor_logliks(model, tables, design, i, l1, l2);
        const RecordPosterior p = record_posterior(l1, l2, tables.copula, grid.rule);
        if (!(p.total > 0.0) || !std::isfinite(p.total)) {
            throw DegenerateError("record " + std::to_string(i) + ": posterior has no mass on the grid");
        }
        out[static_cast<std::size_t>(i)] = {moments_of(p.slowness, z), moments_of(p.ability, z)};
    });
    return out;
}

/// Ability-posterior moments from the ability items alone under a uniform latent.
inline std::vector<PosteriorMoments> marginal_moments(const FactorModel& model, const Dataset& data, int threads,
                                                     const ScoringGrid& grid) {
    if (!model.has(Factor::ability)) throw ConfigError("response-only scores need ability MVs");
    const DataDesign design = DataDesign::build(model, data);
    const ModelTables tables = ModelTables::build(model, grid.rule);
    const Vector& z = grid.z;
    const Eigen::Map<const Vector> w(grid.rule.weights.data(), grid.rule.size());
    std::vector<PosteriorMoments> out(static_cast<std::size_t>(data.rows()));
    parallel_for(data.rows(), threads, [&](int i) {
        Vector l1, l2;
        factor_logliks(model, tables, design, i, l1, l2);
        Vector p = (l2.array() - l2.maxCoeff()).exp().matrix().cwiseProduct(w);
        const double total = p.sum();
        if (!(total > 0.0) || !std::isfinite(total)) {
            throw DegenerateError("record " + std::to_string(i) + ": posterior has no mass on the grid");
        }
        p /= total;
        out[static_cast<std::size_t>(i)] = moments_of(p, z);
    });
    return out;
}

inline double precision_of(double variance, const char* what) {
    if (!(variance > 0.0)) throw DegenerateError(std::string(what) + ": zero posterior variance");
    return 1.0 / variance;
}

}  // namespace detail

/// Joint EAP scores with plug-in precisions for every record.
inline std::vector<ScoreRecord> eap_joint_all(const FactorModel& model, const Dataset& data, int threads = 1,
                                              const ScoringGrid& grid = ScoringGrid::standard()) {
    const auto mom = detail::joint_moments(model, data, threads, grid);
    std::vector<ScoreRecord> out(mom.size());
    for (std::size_t i = 0; i < mom.size(); ++i) {
        ScoreRecord& r = out[i];
        r.eap_slowness = mom[i][0].mean;
        r.eap_ability = mom[i][1].mean;
        r.sd_slowness = std::sqrt(mom[i][0].variance());
        r.sd_ability = std::sqrt(mom[i][1].variance());
        r.precision_slowness = detail::precision_of(mom[i][0].variance(), "slowness");
        r.precision_ability = detail::precision_of(mom[i][1].variance(), "ability");
    }
    return out;
}

inline ScoreRecord eap_joint(const FactorModel& model, std::span<const double> y,
                             const ScoringGrid& grid = ScoringGrid::standard()) {
    return eap_joint_all(model, detail::record_dataset(model, y), 1, grid).front();
}

struct MarginalScore {
    double eap = 0.0;
    double sd = 0.0;
};

inline std::vector<MarginalScore> eap_marginal_all(const FactorModel& model, const Dataset& data, int threads = 1,
                                                   const ScoringGrid& grid = ScoringGrid::standard()) {
    const auto mom = detail::marginal_moments(model, data, threads, grid);
    std::vector<MarginalScore> out;
    out.reserve(mom.size());
    for (const auto& m : mom) out.push_back({m.mean, std::sqrt(m.variance())});
    return out;
}

/// Response-only EAP of the ability factor for one record of the model's MVs;
/// slowness MVs in the record are ignored.
inline MarginalScore eap_marginal(const FactorModel& model, std::span<const double> y,
                                  const ScoringGrid& grid = ScoringGrid::standard()) {
    return eap_marginal_all(model, detail::record_dataset(model, y), 1, grid).front();
}

// ---------------------------------------------------------------------------
// Predictive precision

namespace detail {

inline std::vector<const FactorModel*> replicate_models(const BootstrapEnsemble& ens) {
    std::vector<const FactorModel*> out;
    for (const auto& r : ens.replicates) {
        if (r.fit) out.push_back(&r.fit->model);
    }
    if (out.size() < 2) {
        throw DegenerateError("predictive precision needs at least 2 successful replicates, have " +
                              std::to_string(out.size()));
    }
    return out;
}

/// Law of total variance over equally weighted replicate posteriors.
inline double mixture_variance(std::span<const PosteriorMoments> reps) {
    double mean = 0.0, second = 0.0;
    for (const auto& m : reps) {
        mean += m.mean;
        second += m.second;
    }
    mean /= static_cast<double>(reps.size());
    second /= static_cast<double>(reps.size());
    return second - mean * mean;
}

}  // namespace detail

/// Predictive precisions (slowness, ability) of the joint model, n x 2.
inline Matrix predictive_precision_joint(const BootstrapEnsemble& ens, const Dataset& data, int threads = 1,
                                         const ScoringGrid& grid = ScoringGrid::standard()) {
    const auto models = detail::replicate_models(ens);
    std::vector<std::vector<std::array<PosteriorMoments, 2>>> per;
    for (const FactorModel* m : models) per.push_back(detail::joint_moments(*m, data, threads, grid));
    Matrix out(data.rows(), 2);
    std::vector<PosteriorMoments> buf(models.size());
    for (int i = 0; i < data.rows(); ++i) {
        for (int f = 0; f < 2; ++f) {
            for (std::size_t r = 0; r < models.size(); ++r) buf[r] = per[r][static_cast<std::size_t>(i)][static_cast<std::size_t>(f)];
            out(i, f) = detail::precision_of(detail::mixture_variance(buf), "predictive");
        }
    }
    return out;
}

/// Predictive precisions of the response-only ability score, n.
inline Vector predictive_precision_marginal(const BootstrapEnsemble& ens, const Dataset& data, int threads = 1,
                                            const ScoringGrid& grid = ScoringGrid::standard()) {
    const auto models = detail::replicate_models(ens);
    std::vector<std::vector<PosteriorMoments>> per;
    for (const FactorModel* m : models) per.push_back(detail::marginal_moments(*m, data, threads, grid));
    Vector out(data.rows());
    std::vector<PosteriorMoments> buf(models.size());
    for (int i = 0; i < data.rows(); ++i) {
        for (std::size_t r = 0; r < models.size(); ++r) buf[r] = per[r][static_cast<std::size_t>(i)];
        out[i] = detail::precision_of(detail::mixture_variance(buf), "predictive");
    }
    return out;
}

/// Predictive precisions (slowness, ability) of one record of the ensemble's MVs.
inline Eigen::Vector2d predictive_precision(const BootstrapEnsemble& ens, std::span<const double> y) {
    return predictive_precision_joint(ens, detail::record_dataset(ens.base, y)).row(0).transpose();
}

// ---------------------------------------------------------------------------
// Precision comparison

struct Spread {
    double mean = 0.0, median = 0.0, q1 = 0.0, q3 = 0.0;
};

/// Mean, median and quartiles (linear interpolation between order statistics).
inline Spread spread_of(std::vector<double> v) {
    if (v.empty()) throw DegenerateError("summary of an empty sample");
    std::sort(v.begin(), v.end());
    const auto q = [&](double p) {
        const double h = p * static_cast<double>(v.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const std::size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    return {std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()), q(0.5), q(0.25), q(0.75)};
}

struct PrecisionGroup {
    int size = 0;
    double eap_min = 0.0, eap_max = 0.0;
    double marginal = 0.0;  ///< mean response-only precision
    double joint = 0.0;     ///< mean joint-model ability precision
    double improvement_pct = 0.0;
};

struct PrecisionComparison {
    std::vector<PrecisionGroup> groups;
    Spread marginal, joint;
    double improvement_pct = 0.0;  ///< of the overall means
};

/// Groups records by the joint ability EAP into `groups` near-equal bins and
/// compares the mean precisions within each.
inline PrecisionComparison precision_by_quantile(std::span<const ScoreRecord> scores, int groups) {
    if (groups < 2) throw ConfigError("precision comparison needs at least 2 groups");
    const int n = static_cast<int>(scores.size());
    if (n < groups) throw ConfigError("fewer records than precision groups");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)].eap_ability < scores[static_cast<std::size_t>(b)].eap_ability;
    });
    PrecisionComparison out;
    for (int g = 0; g < groups; ++g) {
        const int lo = static_cast<int>(static_cast<long>(g) * n / groups);
        const int hi = static_cast<int>(static_cast<long>(g + 1) * n / groups);
        PrecisionGroup grp;
        grp.size = hi - lo;
        double sm = 0.0, sj = 0.0;
        for (int r = lo; r < hi; ++r) {
            const ScoreRecord& s = scores[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
            sm += s.precision_marginal;
            sj += s.precision_ability;
        }
        grp.eap_min = scores[static_cast<std::size_t>(order[static_cast<std::size_t>(lo)])].eap_ability;
        grp.eap_max = scores[static_cast<std::size_t>(order[static_cast<std::size_t>(hi - 1)])].eap_ability;
        grp.marginal = sm / grp.size;
        grp.joint = sj / grp.size;
        grp.improvement_pct = 100.0 * (grp.joint / grp.marginal - 1.0);
        out.groups.push_back(grp);
    }
    std::vector<double> pm, pj;
    for (const auto& s : scores) {
        pm.push_back(s.precision_marginal);
        pj.push_back(s.precision_ability);
    }
    out.marginal = spread_of(pm);
    out.joint = spread_of(pj);
    out.improvement_pct = 100.0 * (out.joint.mean / out.marginal.mean - 1.0);
    return out;
}

}  // namespace semifa
