#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "semifa/estimation.hpp"
#include "semifa/simulate.hpp"
#include "test_support.hpp"

using namespace semifa;
namespace st = semifa::testing;

namespace {

void expect_ascent(const FitResult& fit) {
    for (std::size_t t = 1; t < fit.trace.size(); ++t) EXPECT_GE(fit.trace[t], fit.trace[t - 1] - kAscentSlack);
}

void expect_feasible(const FactorModel& m) {
    for (const auto& item : m.items) {
        const ConstraintSet cs = item_constraints(item);
        EXPECT_LT(cs.equality_residual(item.parameters()), 1e-8) << item.name;
        EXPECT_GT(cs.min_slack(item.parameters()), -1e-8) << item.name;
    }
    EXPECT_LT(m.copula.marginal_residual(), 1e-8);
    EXPECT_GT(m.copula.xi.minCoeff(), -1e-10);
}

ModelSettings small_settings(int K = 5, int Q = 11) {
    ModelSettings s;
    s.basis_size = K;
    s.quadrature_points = Q;
    return s;
}

}  // namespace

TEST(ItemSubproblem, HessianIsNegativeSemidefinite) {
    std::mt19937_64 rng(6);
    const auto quad = gauss_legendre_unit(9);
    const auto b = std::make_shared<const BasisSet>(5);
    for (bool continuous : {true, false}) {
        auto item = continuous ? ItemModel::flat_continuous("rt", b) : ItemModel::flat_discrete("r", 3, b);
        st::randomize_item(item, rng, 1.0);
        ItemStatistics stats;
        stats.N = Vector::Constant(9, 10.0);
        stats.S = Matrix::Random(9, item.outcome_size()).cwiseAbs();
        const ItemSubproblem p(item, quad, stats, 90.0, 0.01);
        Vector g;
        Matrix H;
        p.derivatives(item.parameters(), g, H);
        Eigen::SelfAdjointEigenSolver<Matrix> es(H);
        EXPECT_LE(es.eigenvalues().maxCoeff(), 1e-8);
        // Gradient against central differences of the subproblem value.
        const Vector th = item.parameters();
        for (Eigen::Index i = 0; i < th.size(); ++i) {
            Vector a = th, c = th;
            a[i] += 1e-6;
            c[i] -= 1e-6;
            const double fd = (p.value(a) - p.value(c)) / 2e-6;
            EXPECT_NEAR(fd, g[i], 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(ItemSubproblem, ConcentratedCorrectResponsesRaiseIntercept) {
    const auto quad = gauss_legendre_unit(7);
    auto item = ItemModel::flat_discrete("r", 2, std::make_shared<const BasisSet>(5));
    ItemStatistics stats;
    stats.N = Vector::Zero(7);
    stats.N[3] = 100.0;
    stats.S = Matrix::Zero(7, 1);
    stats.S(3, 0) = 100.0;  // every record answered 1
    const ItemSubproblem p(item, quad, stats, 100.0, 0.1);
    const double before = p.value(item.parameters());
    FitConfig cfg;
    cfg.inner_iterations = 1;
    double last = before;
    double last_alpha = 0.0;
    for (int pass = 0; pass < 4; ++pass) {
        const auto out = solve_item_subproblem(item, stats, quad, 100.0, 0.1, cfg);
        EXPECT_GE(out.value_after, out.value_before - 1e-10);
        EXPECT_GT(out.value_after, last - 1e-12);
        last = out.value_after;
        EXPECT_GT(item.alpha[0], last_alpha);
        last_alpha = item.alpha[0];
    }
    EXPECT_GT(last, before);
}

TEST(ItemSubproblem, OptimalEntryIsFixedPoint) {
    std::mt19937_64 rng(2);
    const auto quad = gauss_legendre_unit(9);
    auto item = ItemModel::flat_continuous("rt", std::make_shared<const BasisSet>(5));
    ItemStatistics stats;
    stats.N = Vector::Constant(9, 20.0);
    stats.S = Matrix::Random(9, 5).cwiseAbs() * 4.0;
    FitConfig cfg;
    cfg.inner_iterations = 100;
    solve_item_subproblem(item, stats, quad, 180.0, 0.05, cfg);
    const Vector opt = item.parameters();
    const auto again = solve_item_subproblem(item, stats, quad, 180.0, 0.05, cfg);
    EXPECT_LT((item.parameters() - opt).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(again.value_after, again.value_before, 1e-9);
}

TEST(ItemSubproblem, MonotoneItemStaysMonotone) {
    const auto quad = gauss_legendre_unit(9);
    auto item = ItemModel::flat_discrete("r", 2, std::make_shared<const BasisSet>(6));
    item.monotone = true;
    // Correct responses concentrated at low ability push toward a decreasing IRF.
    ItemStatistics stats;
    stats.N = Vector::Constant(9, 30.0);
    stats.S = Matrix::Zero(9, 1);
    for (int a = 0; a < 9; ++a) stats.S(a, 0) = 30.0 * (1.0 - a / 8.0);
    FitConfig cfg;
    cfg.inner_iterations = 50;
    solve_item_subproblem(item, stats, quad, 270.0, 0.01, cfg);
    const ConstraintSet cs = item_constraints(item);
    EXPECT_GT(cs.min_slack(item.parameters()), -1e-8);
    EXPECT_LT(cs.equality_residual(item.parameters()), 1e-8);
    const Vector lo = discrete_irf(item, 0.1), hi = discrete_irf(item, 0.9);
    EXPECT_GE(hi[1], lo[1] - 1e-8);
}

TEST(CopulaSubproblem, IndependenceIsFixedPoint) {
    const auto quad = gauss_legendre_unit(11);
    // With K = 4 the basis is polynomial, so the 11-point rule integrates it exactly
    // and all-ones is stationary up to rounding.
    auto cop = CopulaModel::independence(std::make_shared<const BasisSet>(4));
    const double n = 500.0;
    Matrix pooled(11, 11);
    for (int a = 0; a < 11; ++a) {
        for (int b = 0; b < 11; ++b) pooled(a, b) = n * quad.weights[static_cast<std::size_t>(a)] * quad.weights[static_cast<std::size_t>(b)];
    }
    FitConfig cfg;
    cfg.inner_iterations = 10;
    solve_copula_subproblem(cop, quad, pooled, n, 0.01, cfg);
    EXPECT_LT((cop.xi.array() - 1.0).abs().maxCoeff(), 1e-8);
}

TEST(CopulaSubproblem, DiagonalWeightsRaiseDiagonalMass) {
    const auto quad = gauss_legendre_unit(11);
    auto cop = CopulaModel::independence(std::make_shared<const BasisSet>(7));
    Matrix pooled = Matrix::Zero(11, 11);
    for (int a = 0; a < 11; ++a) pooled(a, a) = 50.0;
    FitConfig cfg;
    cfg.inner_iterations = 30;
    const auto out = solve_copula_subproblem(cop, quad, pooled, 550.0, 0.001, cfg);
    EXPECT_GT(out.value_after, out.value_before);
    EXPECT_LT(cop.marginal_residual(), 1e-8);
    EXPECT_GT(cop.xi.minCoeff(), -1e-10);
    const double diag = gauss_legendre_unit(21).integrate([&](double u) { return copula_density(cop, u, u); });
    EXPECT_GT(diag, 1.0);
}

/// Uniform continuous columns and fair-coin dichotomous columns.
Dataset noise_dataset(int n, int continuous, int discrete, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Dataset d;
    for (int j = 0; j < continuous; ++j) d.columns.push_back(st::continuous_column("rt" + std::to_string(j)));
    for (int j = 0; j < discrete; ++j) d.columns.push_back(st::discrete_column("r" + std::to_string(j), 2));
    d.values.resize(n, continuous + discrete);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < continuous; ++j) d.values(i, j) = U(rng);
        for (int j = continuous; j < continuous + discrete; ++j) d.values(i, j) = U(rng) < 0.5 ? 0.0 : 1.0;
    }
    return d;
}

TEST(EmFit, FlatDataGivesNearlyFlatFit) {
    const Dataset d = noise_dataset(500, 3, 3, 44);
    // Zero-coefficient start. On pure noise the penalized likelihood also has
    // non-flat stationary points (the bilinear interaction is unpenalized), which
    // the sum-score start can reach; see DefaultStartNeverWorseThanFlatStart.
    const PenaltyWeights w{10.0, 10.0, 10.0};
    FitConfig cfg;
    cfg.warm_start = false;
    const FitResult fit = em_fit(d, w, cfg, small_settings(7, 21));
    expect_ascent(fit);
    expect_feasible(fit.model);
    EXPECT_TRUE(fit.converged);
    double sup = 0.0;
    for (int j = 0; j < 6; ++j) {
        const auto& item = fit.model.items[static_cast<std::size_t>(j)];
        for (int g = 0; g <= 20; ++g) {
            const double x = g / 20.0;
            if (item.kind == ItemKind::continuous) {
                const auto f = continuous_density(item, x, fit.model.quad);
                for (int h = 0; h <= 20; ++h) sup = std::max(sup, std::abs(f(h / 20.0) - 1.0));
            } else {
                sup = std::max(sup, std::abs(discrete_irf(item, x)[1] - 0.5));
            }
        }
    }
    EXPECT_LT(sup, 0.1);
    EXPECT_LT(eta_squared(fit.model.latent(), fit.model.quad), 0.05);
}

TEST(EmFit, DefaultStartNeverWorseThanFlatStart) {
    const Dataset d = noise_dataset(500, 3, 3, 17);
    const PenaltyWeights w{10.0, 10.0, 10.0};
    FitConfig flat_cfg;
    flat_cfg.warm_start = false;
    const FitResult flat = em_fit(d, w, flat_cfg, small_settings(7, 21));
    const FitResult best = em_fit(d, w, FitConfig{}, small_settings(7, 21));
    EXPECT_GE(best.trace.back(), flat.trace.back());
}

TEST(EmFit, InitAtTruthConvergesQuickly) {
    const auto sim = simulate(standard_generator(5, 0.5), 600, 3);
    const PenaltyWeights w{1e-3, 1e-2, 1e-3};
    FitConfig cfg;
    const FitResult first = em_fit(sim.data, w, cfg, small_settings());
    ASSERT_TRUE(first.converged);
    // Refit from a tightly converged model: the first increment is already below tolerance.
    FitConfig tight = cfg;
    tight.em_tolerance = 1e-7;
    tight.max_em_iterations = 2000;
    const FitResult converged = em_fit(sim.data, w, tight, small_settings(), first.model);
    const FitResult again = em_fit(sim.data, w, cfg, small_settings(), converged.model);
    EXPECT_TRUE(again.converged);
    EXPECT_LE(again.iterations, 5);
    expect_ascent(first);
    expect_ascent(converged);
    expect_ascent(again);
}

TEST(EmFit, RecoversSimulatedStructure) {
    const auto sim = simulate(standard_generator(6, 0.5), 1200, 11);
    const PenaltyWeights w{1e-3, 1e-2, 1e-3};
    const FitResult fit = em_fit(sim.data, w, FitConfig{}, small_settings(7, 15));
    expect_ascent(fit);
    expect_feasible(fit.model);
    EXPECT_TRUE(fit.converged);
    const double eta2 = eta_squared(fit.model.latent(), fit.model.quad);
    EXPECT_GT(eta2, 0.1);
    EXPECT_LT(eta2, 0.4);
    // IRFs increase with the recovered ability factor.
    for (int j = 6; j < 12; ++j) {
        const auto& item = fit.model.items[static_cast<std::size_t>(j)];
        EXPECT_GT(discrete_irf(item, 0.9)[1], discrete_irf(item, 0.1)[1]) << item.name;
    }
}

TEST(EmFit, DeterministicAcrossRunsAndThreads) {
    const auto sim = simulate(standard_generator(4, 0.3), 300, 8);
    const PenaltyWeights w{1e-2, 1e-1, 1e-2};
    FitConfig cfg;
    const FitResult a = em_fit(sim.data, w, cfg, small_settings());
    const FitResult b = em_fit(sim.data, w, cfg, small_settings());
    cfg.threads = 3;
    const FitResult c = em_fit(sim.data, w, cfg, small_settings());
    ASSERT_EQ(a.trace.size(), b.trace.size());
    ASSERT_EQ(a.trace.size(), c.trace.size());
    for (std::size_t t = 0; t < a.trace.size(); ++t) {
        EXPECT_EQ(a.trace[t], b.trace[t]);
        EXPECT_EQ(a.trace[t], c.trace[t]);
    }
}

TEST(EmFit, SingleBlockUsesFixedIndependenceCopula) {
    const auto sim = simulate(standard_generator(4, 0.5), 300, 9);
    const auto cols = sim.data.columns_on(Factor::ability);
    const Dataset d = sim.data.subset_columns(cols);
    const FitResult fit = em_fit(d, PenaltyWeights{}, FitConfig{}, small_settings());
    EXPECT_FALSE(fit.model.copula_free);
    EXPECT_EQ((fit.model.copula.xi.array() - 1.0).abs().maxCoeff(), 0.0);
    expect_ascent(fit);
}

TEST(EmFit, Preconditions) {
    Dataset d;
    d.columns.push_back(st::continuous_column("rt"));
    d.values.resize(0, 1);
    EXPECT_THROW(em_fit(d, PenaltyWeights{}, FitConfig{}, small_settings()), DataError);
    d.values = Matrix::Constant(5, 1, 0.3);
    PenaltyWeights bad;
    bad.discrete = -1.0;
    EXPECT_THROW(em_fit(d, bad, FitConfig{}, small_settings()), ConfigError);
    FitConfig cfg;
    cfg.max_em_iterations = 0;
    EXPECT_THROW(em_fit(d, PenaltyWeights{}, cfg, small_settings()), ConfigError);
}
