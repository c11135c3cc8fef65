#pragma once

// Penalty weight selection: S-fold cross-validated risk, the one-SE rule, and
// the three-stage search (continuous block, discrete block, then the copula
// with both item weights fixed).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/estimation.hpp"
#include "semifa/likelihood.hpp"
#include "semifa/parallel.hpp"

namespace semifa {

/// Assignment of records to S validation folds.
struct CvPlan {
    int folds = 5;
    std::uint64_t seed = 0;
    std::vector<int> assignment;  ///< fold of each record

    /// Seeded shuffle, then round-robin over the shuffled order.
    static CvPlan make(int n, int folds, std::uint64_t seed) {
        if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
        if (n < folds) throw ConfigError("fewer records (" + std::to_string(n) + ") than folds");
        CvPlan plan;
        plan.folds = folds;
        plan.seed = seed;
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
        plan.assignment.assign(static_cast<std::size_t>(n), 0);
        for (int r = 0; r < n; ++r) plan.assignment[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r % folds;
        return plan;
    }

    void validate(int n) const {
        if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
        if (static_cast<int>(assignment.size()) != n) {
            throw ConfigError("fold assignment covers " + std::to_string(assignment.size()) + " records, data has " +
                              std::to_string(n));
        }
        std::vector<int> count(static_cast<std::size_t>(folds), 0);
        for (int f : assignment) {
            if (f < 0 || f >= folds) throw ConfigError("fold index out of range");
            ++count[static_cast<std::size_t>(f)];
        }
        for (int c : count) {
            if (c == 0) throw ConfigError("empty cross-validation fold");
        }
    }

    [[nodiscard]] std::vector<int> validation(int fold) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < assignment.size(); ++i) {
            if (assignment[i] == fold) out.push_back(static_cast<int>(i));
        }
        return out;
    }
    [[nodiscard]] std::vector<int> calibration(int fold) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < assignment.size(); ++i) {
            if (assignment[i] != fold) out.push_back(static_cast<int>(i));
        }
        return out;
    }
};

struct CvRisk {
    double risk = 0.0;
    double se = 0.0;
    std::vector<double> fold_loss;  ///< minus the mean held-out log-likelihood per fold
};

/// Mean and sample SD (divisor S - 1) of the fold losses.
inline CvRisk summarize_folds(std::vector<double> losses) {
    if (losses.size() < 2) throw ConfigError("cross-validation needs at least 2 folds");
    CvRisk out;
    const double S = static_cast<double>(losses.size());
    out.risk = std::accumulate(losses.begin(), losses.end(), 0.0) / S;
    double ss = 0.0;
    for (double l : losses) ss += (l - out.risk) * (l - out.risk);
    out.se = std::sqrt(ss / (S - 1.0));
    out.fold_loss = std::move(losses);
    return out;
}

/// Cross-validated risk of weights `w`: each fold is predicted by a fit to the
/// remaining records, scored by the unpenalized held-out log-likelihood.
inline CvRisk cv_risk(const Dataset& data, const PenaltyWeights& w, const CvPlan& plan, const FitConfig& config,
                      const ModelSettings& settings) {
    plan.validate(data.rows());
    w.validate();
    config.validate();
    std::vector<double> losses(static_cast<std::size_t>(plan.folds));
    FitConfig inner = config;
    inner.threads = 1;
    parallel_for(plan.folds, config.threads, [&](int s) {
        try {
            const std::vector<int> held = plan.validation(s);
            const Dataset calibration = data.subset_rows(plan.calibration(s));
            const Dataset validation = data.subset_rows(held);
            const FitResult fit = em_fit(calibration, w, inner, settings);
            losses[static_cast<std::size_t>(s)] = -marginal_loglik(fit.model, validation) / static_cast<double>(held.size());
        } catch (...) {
            rethrow_with_context("cross-validation fold " + std::to_string(s));
        }
    });
    return summarize_folds(std::move(losses));
}

struct Candidate {
    double weight = 0.0;
    double risk = 0.0;
    double se = 0.0;
};

/// Largest weight whose risk is within one SE (of the minimizer) of the minimum risk.
inline double one_se_select(std::span<const Candidate> candidates) {
    if (candidates.empty()) throw ConfigError("no candidate weights");
    const auto best = std::min_element(candidates.begin(), candidates.end(),
                                       [](const Candidate& a, const Candidate& b) { return a.risk < b.risk; });
    const double bound = best->risk + best->se;
    double chosen = best->weight;
    for (const auto& c : candidates) {
        if (c.risk <= bound && c.weight > chosen) chosen = c.weight;
    }
    return chosen;
}

/// Candidate weights per stage, each strictly decreasing.
struct WeightGrid {
    std::vector<double> continuous{1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
    std::vector<double> discrete{1e1, 1e0, 1e-1, 1e-2, 1e-3, 1e-4};
    std::vector<double> copula{1e-2, 1e-4, 1e-6, 1e-8};

    void validate() const {
        for (const auto* g : {&continuous, &discrete, &copula}) {
            if (g->empty()) throw ConfigError("empty penalty weight grid");
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (!((*g)[i] > 0.0)) throw ConfigError("penalty weight grid values must be positive");
                if (i > 0 && !((*g)[i] < (*g)[i - 1])) throw ConfigError("penalty weight grid must be strictly decreasing");
            }
        }
    }
};

struct StageResult {
    std::vector<Candidate> candidates;
    double selected = 0.0;
};

struct WeightSelection {
    PenaltyWeights weights;
    StageResult continuous, discrete, copula;
};

namespace detail {

inline StageResult run_stage(const Dataset& data, const std::vector<double>& grid, const CvPlan& plan,
                             const FitConfig& config, const ModelSettings& settings,
                             const std::function<PenaltyWeights(double)>& weights_for, const char* stage) {
    StageResult out;
    for (double g : grid) {
        try {
            const CvRisk r = cv_risk(data, weights_for(g), plan, config, settings);
            out.candidates.push_back({g, r.risk, r.se});
        } catch (...) {
            rethrow_with_context(std::string(stage) + " stage, weight " + std::to_string(g));
        }
    }
    out.selected = one_se_select(out.candidates);
    return out;
}

}  // namespace detail

/// Three-stage selection. Stages 1 and 2 fit one-factor models (uniform latent
/// prior, no copula) to the continuous and discrete blocks; stage 3 fits the
/// full model with the item weights from stages 1 and 2.
inline WeightSelection select_weights(const Dataset& data, const WeightGrid& grid, const CvPlan& plan,
                                      const FitConfig& config, const ModelSettings& settings) {
    grid.validate();
    plan.validate(data.rows());
    std::vector<int> cont, disc;
    for (int j = 0; j < data.cols(); ++j) {
        (data.columns[static_cast<std::size_t>(j)].kind == ItemKind::continuous ? cont : disc).push_back(j);
    }
    if (cont.empty() || disc.empty()) {
        throw ConfigError("weight selection needs both continuous and discrete MVs");
    }
    WeightSelection sel;
    const PenaltyWeights base;
    sel.continuous = detail::run_stage(
        data.subset_columns(cont), grid.continuous, plan, config, settings,
        [&](double g) { return PenaltyWeights{g, base.discrete, base.copula}; }, "continuous");
    sel.discrete = detail::run_stage(
        data.subset_columns(disc), grid.discrete, plan, config, settings,
        [&](double g) { return PenaltyWeights{base.continuous, g, base.copula}; }, "discrete");
    const double lc = sel.continuous.selected;
    const double ld = sel.discrete.selected;
    sel.copula = detail::run_stage(
        data, grid.copula, plan, config, settings, [&](double g) { return PenaltyWeights{lc, ld, g}; }, "copula");
    sel.weights = PenaltyWeights{lc, ld, sel.copula.selected};
    return sel;
}

}  // namespace semifa
