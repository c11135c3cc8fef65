#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "semifa/inference.hpp"
#include "semifa/simulate.hpp"
#include "test_support.hpp"

using namespace semifa;
namespace st = semifa::testing;
using st::dense_cross_moment;
using st::dense_score_mean;
using st::two_pl_like;

TEST(Moments, FlatItems) {
    const FactorModel m = make_model([] {
        Dataset d = st::mixed_schema(0, 2, 2);
        d.values.resize(0, 2);
        return d;
    }(), ModelSettings{});
    const auto sc = ScoreFunction::identity(2);
    const MomentTriple jj = model_implied_moments(m, sc, 0, 0);
    EXPECT_NEAR(jj.first_j, 0.5, 1e-14);
    EXPECT_NEAR(jj.second, 0.5, 1e-14);
    const MomentTriple jk = model_implied_moments(m, sc, 0, 1);
    EXPECT_NEAR(jk.second, jk.first_j * jk.first_k, 1e-14);
    EXPECT_THROW(model_implied_moments(m, sc, 0, 2), ConfigError);
}

TEST(Moments, MatchDenseGridOracle) {
    for (std::uint64_t seed : {1u, 2u}) {
        const FactorModel m = st::random_model(1, 2, 4, 4, 5, 0.05, seed);
        ScoreFunction sc = ScoreFunction::identity(3);
        sc.entries[1].table = {0, 1, 1, 2};
        // Same MV, same factor, and cross-factor cases.
        const MomentTriple rt = model_implied_moments(m, sc, 0, 0);
        const MomentTriple resp = model_implied_moments(m, sc, 1, 2);
        const MomentTriple cross = model_implied_moments(m, sc, 0, 2);
        const int G = 500;
        double mu0 = 0.0, mu00 = 0.0, mu12 = 0.0;
        for (int g = 0; g < G; ++g) {
            const double x = (g + 0.5) / G;
            const double s0 = dense_score_mean(m.items[0], sc, 0, x);
            mu0 += s0 / G;
            mu12 += dense_score_mean(m.items[1], sc, 1, x) * dense_score_mean(m.items[2], sc, 2, x) / G;
            // E[y^2 | x] for the continuous item.
            constexpr int kY = 4000;
            double z = 0.0, s2 = 0.0;
            for (int t = 0; t < kY; ++t) {
                const double y = (t + 0.5) / kY;
                const double f = std::exp(log_kernel(m.items[0], x, y));
                z += f;
                s2 += f * y * y;
            }
            mu00 += s2 / z / G;
        }
        EXPECT_NEAR(rt.first_j, mu0, 1e-6);
        EXPECT_NEAR(rt.second, mu00, 1e-6);
        EXPECT_NEAR(resp.second, mu12, 1e-6);
        EXPECT_NEAR(cross.second, dense_cross_moment(m, sc, 0, 2, G), 1e-6);
        // Argument order does not matter for the cross case.
        EXPECT_NEAR(model_implied_moments(m, sc, 2, 0).second, cross.second, 1e-15);
    }
}

TEST(Correlation, IndependenceCrossFactorIsZero) {
    FactorModel m = st::random_model(2, 2, 2, 6, 21, 1.0, 9);
    m.copula = CopulaModel::independence(m.basis);
    const auto sc = ScoreFunction::identity(4);
    EXPECT_NEAR(model_implied_correlation(m, sc, 0, 3), 0.0, 1e-10);
    EXPECT_NEAR(model_implied_correlation(m, sc, 2, 1), 0.0, 1e-10);
    EXPECT_NEAR(model_implied_correlation(m, sc, 1, 1), 1.0, 1e-12);
}

TEST(Correlation, InvariantToAffineScore) {
    const FactorModel m = st::random_model(2, 2, 3, 6, 21, 1.0, 21);
    ScoreFunction a = ScoreFunction::identity(4);
    a.entries[3].table = {0.0, 1.0, 3.0};
    ScoreFunction b = a;
    b.entries[0].scale = 2.5;
    b.entries[0].shift = -1.0;
    b.entries[3].scale = 0.3;
    b.entries[3].shift = 7.0;
    const Matrix Ra = model_implied_correlations(m, a);
    const Matrix Rb = model_implied_correlations(m, b);
    EXPECT_LT((Ra - Rb).cwiseAbs().maxCoeff(), 1e-10);
    for (int j = 0; j < 4; ++j) {
        for (int k = 0; k < 4; ++k) {
            EXPECT_NEAR(Ra(j, k), model_implied_correlation(m, a, j, k), 1e-12);
            EXPECT_LE(std::abs(Ra(j, k)), 1.0);
        }
    }
}

TEST(Correlation, TwoPlPairMatchesMonteCarlo) {
    Dataset schema = st::mixed_schema(0, 2, 2);
    schema.values.resize(0, 2);
    ModelSettings s;
    s.basis_size = 9;
    FactorModel m = make_model(schema, s);
    m.items[0] = two_pl_like(m.basis, "r0", -0.3);
    m.items[1] = two_pl_like(m.basis, "r1", 0.4);
    std::mt19937_64 rng(77);
    const Dataset draws = st::draw_from_model(m, 1000000, rng);
    const Matrix r = sample_correlations(draws, ScoreFunction::identity(2));
    EXPECT_NEAR(model_implied_correlation(m, ScoreFunction::identity(2), 0, 1), r(0, 1), 0.01);
    EXPECT_GT(r(0, 1), 0.1);
}

TEST(Residuals, ModelGeneratedDataHasSmallResiduals) {
    const FactorModel m = st::random_model(2, 2, 2, 5, 21, 1.0, 5);
    std::mt19937_64 rng(6);
    const Dataset d = st::draw_from_model(m, 5000, rng);
    const ResidualTable t = residual_correlations(m, d, ScoreFunction::identity(4));
    for (int j = 0; j < 4; ++j) {
        for (int k = j + 1; k < 4; ++k) EXPECT_LT(std::abs(t.residual(j, k)), 0.05) << j << "," << k;
    }
    EXPECT_LT((t.residual - (t.sample - t.implied)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Residuals, ConstantColumnIsDegenerate) {
    const FactorModel m = st::random_model(1, 1, 2, 5, 9, 1.0, 5);
    Dataset d = st::mixed_schema(1, 1, 2);
    d.values = Matrix::Constant(10, 2, 0.0);
    for (int i = 0; i < 10; ++i) d.values(i, 0) = 0.1 * i;
    EXPECT_THROW(residual_correlations(m, d, ScoreFunction::identity(2)), DegenerateError);
}

TEST(Bootstrap, ResampleIndices) {
    EXPECT_EQ(resample_indices(50, 9), resample_indices(50, 9));
    const auto idx = resample_indices(3, 4);
    EXPECT_EQ(idx.size(), 3u);
    for (int i : idx) {
        EXPECT_GE(i, 0);
        EXPECT_LT(i, 3);
    }
    EXPECT_NE(replicate_seed(1, 0), replicate_seed(1, 1));
    EXPECT_NE(replicate_seed(1, 0), replicate_seed(2, 0));
    EXPECT_THROW(resample_indices(0, 1), DataError);
}

TEST(Bootstrap, SampleMeanSdMatchesClassicalFormula) {
    std::mt19937_64 rng(10);
    std::normal_distribution<double> Z(3.0, 2.0);
    const int n = 1000, B = 200;
    std::vector<double> x(n);
    for (double& v : x) v = Z(rng);
    std::vector<double> means;
    for (int r = 0; r < B; ++r) {
        double s = 0.0;
        for (int i : resample_indices(n, replicate_seed(5, r))) s += x[static_cast<std::size_t>(i)];
        means.push_back(s / n);
    }
    const double mbar = std::accumulate(means.begin(), means.end(), 0.0) / B;
    double ss = 0.0;
    for (double m : means) ss += (m - mbar) * (m - mbar);
    const double sd = std::sqrt(ss / (B - 1));
    EXPECT_NEAR(sd / (2.0 / std::sqrt(n)), 1.0, 0.15);
}

TEST(Bootstrap, RefitsAreSeededAndThreadIndependent) {
    const auto sim = simulate(standard_generator(3, 0.4), 250, 3);
    ModelSettings s;
    s.basis_size = 5;
    s.quadrature_points = 11;
    const PenaltyWeights w{1e-4, 1e-1, 1e-4};
    const FitResult full = em_fit(sim.data, w, FitConfig{}, s);
    FitConfig cfg;
    cfg.seed = 42;
    const auto a = bootstrap_refit(sim.data, full.model, w, 3, cfg);
    cfg.threads = 3;
    const auto b = bootstrap_refit(sim.data, full.model, w, 3, cfg);
    ASSERT_EQ(a.successes(), 3);
    for (int r = 0; r < 3; ++r) {
        const auto& ra = a.replicates[static_cast<std::size_t>(r)];
        const auto& rb = b.replicates[static_cast<std::size_t>(r)];
        EXPECT_EQ(ra.indices, rb.indices);
        EXPECT_EQ(ra.fit->trace, rb.fit->trace);
        for (std::size_t t = 1; t < ra.fit->trace.size(); ++t) {
            EXPECT_GE(ra.fit->trace[t], ra.fit->trace[t - 1] - kAscentSlack);
        }
    }
    EXPECT_NE(a.replicates[0].indices, a.replicates[1].indices);
    EXPECT_THROW(bootstrap_refit(sim.data, full.model, w, 0, cfg), ConfigError);
}

TEST(Bootstrap, ReplicateFailuresAreRecorded) {
    const auto sim = simulate(standard_generator(2, 0.0), 60, 3);
    FactorModel wrong = make_model(sim.data, ModelSettings{});
    wrong.items.pop_back();
    const auto ens = bootstrap_refit(sim.data, wrong, PenaltyWeights{}, 2, FitConfig{});
    EXPECT_EQ(ens.successes(), 0);
    for (const auto& r : ens.replicates) EXPECT_FALSE(r.failure.empty());
    EXPECT_THROW(flag_residuals(ens, sim.data, ScoreFunction::from(sim.data)), DegenerateError);
}

namespace {

/// 100 replicate values whose 90% percentile interval is exactly [lo, hi].
std::vector<double> sample_with_interval(double lo, double hi) {
    std::vector<double> v;
    for (int i = 0; i < 4; ++i) v.push_back(lo - 0.01 * (i + 1));
    for (int i = 0; i < 91; ++i) v.push_back(lo + (hi - lo) * i / 90.0);
    for (int i = 0; i < 5; ++i) v.push_back(hi + 0.01 * (i + 1));
    std::shuffle(v.begin(), v.end(), std::mt19937_64(1));
    return v;
}

}  // namespace

TEST(Flagging, PublishedIntervals) {
    const auto [lo1, hi1] = percentile_interval(sample_with_interval(0.12, 0.15), 0.90);
    EXPECT_DOUBLE_EQ(lo1, 0.12);
    EXPECT_DOUBLE_EQ(hi1, 0.15);
    EXPECT_TRUE(interval_flagged(lo1, hi1, 0.1));
    const auto [lo2, hi2] = percentile_interval(sample_with_interval(-0.13, -0.09), 0.90);
    EXPECT_DOUBLE_EQ(lo2, -0.13);
    EXPECT_DOUBLE_EQ(hi2, -0.09);
    EXPECT_FALSE(interval_flagged(lo2, hi2, 0.1));
    EXPECT_FALSE(interval_flagged(-0.05, 0.05, 0.1));
    EXPECT_FALSE(interval_flagged(-0.13, -0.1, 0.1));
    EXPECT_TRUE(interval_flagged(-0.2, -0.11, 0.1));
}

TEST(Flagging, IntervalsAreOrderStatisticsAndNest) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> Z(0.0, 1.0);
    std::vector<double> v(57);
    for (double& x : v) x = Z(rng);
    double prev_lo = INFINITY, prev_hi = -INFINITY;
    for (double level : {0.5, 0.8, 0.9, 0.95, 0.99}) {
        const auto [lo, hi] = percentile_interval(v, level);
        EXPECT_NE(std::find(v.begin(), v.end(), lo), v.end());
        EXPECT_NE(std::find(v.begin(), v.end(), hi), v.end());
        EXPECT_LE(lo, prev_lo);
        EXPECT_GE(hi, prev_hi);
        prev_lo = lo;
        prev_hi = hi;
    }
    EXPECT_THROW(percentile_interval({}, 0.9), DegenerateError);
    EXPECT_THROW(percentile_interval(v, 1.0), ConfigError);
}

TEST(Flagging, ModelGeneratedDataIsNotFlagged) {
    // Reduced version of the 20-repetition property (n = 2000, B = 50).
    ModelSettings s;
    s.basis_size = 5;
    s.quadrature_points = 11;
    const PenaltyWeights w{1e-4, 1e-1, 1e-4};
    for (std::uint64_t rep : {1u, 2u}) {
        const auto sim = simulate(standard_generator(3, 0.5), 800, 100 + rep);
        const FitResult full = em_fit(sim.data, w, FitConfig{}, s);
        FitConfig cfg;
        cfg.seed = rep;
        const auto ens = bootstrap_refit(sim.data, full.model, w, 20, cfg);
        const auto report = flag_residuals(ens, sim.data, ScoreFunction::from(sim.data));
        EXPECT_EQ(report.replicates_used, 20);
        EXPECT_EQ(report.pairs.size(), 15u);
        EXPECT_TRUE(report.flagged().empty());
        for (const auto& p : report.flagged()) {
            ADD_FAILURE() << p.j << "," << p.k << " est " << p.estimate << " [" << p.lo << ", " << p.hi << "]";
        }
        for (const auto& p : report.pairs) EXPECT_LE(p.lo, p.hi);
    }
}
