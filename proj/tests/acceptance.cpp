// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "semifa/semifa.hpp"
#include "test_support.hpp"

using namespace semifa;
namespace st = semifa::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Row {
    int id = 0;
    std::string name;
    Outcome outcome;
    double seconds = 0.0;
};

std::string fmt(double v, int precision = 3) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

/// Every fit seen by the acceptance run, for the ascent criterion.
struct FitAudit {
    int fits = 0;
    int not_converged = 0;
    int descents = 0;
    int failed_replicates = 0;
    double worst_drop = 0.0;

    void add(const FitResult& f) {
        ++fits;
        if (!f.converged) ++not_converged;
        for (std::size_t t = 1; t < f.trace.size(); ++t) {
            const double drop = f.trace[t - 1] - f.trace[t];
            worst_drop = std::max(worst_drop, drop);
            if (drop > kAscentSlack) {
                ++descents;
                break;
            }
        }
    }
    void add(const BootstrapEnsemble& ens) {
        for (const auto& r : ens.replicates) {
            if (r.fit) {
                add(*r.fit);
            } else {
                ++failed_replicates;
            }
        }
    }
    void add(const AnalysisReport& rep) {
        for (const auto& r : rep.rounds) add(r.fit);
        add(rep.ensemble);
        if (rep.response_fit) add(*rep.response_fit);
    }
};

FitAudit audit;

const PenaltyWeights kWeights{1e-4, 1e-1, 1e-4};

ModelSettings settings(int K, int Q) {
    ModelSettings s;
    s.basis_size = K;
    s.quadrature_points = Q;
    return s;
}

// ---------------------------------------------------------------------------

Outcome normalization() {
    double density = 0.0, marginals = 0.0, plane = 0.0;
    double min_xi = 0.0;
    const int ks[] = {4, 7, 13};
    for (int r = 0; r < 100; ++r) {
        const int K = ks[r % 3];
        const FactorModel m = st::random_model(2, 2, 3, K, 21, 1.0 + (r % 4) * 0.5, 1000 + static_cast<std::uint64_t>(r));
        std::vector<double> xs = m.quad.nodes;
        xs.insert(xs.end(), {0.0, 0.5, 1.0});
        for (const auto& item : m.items) {
            for (double x : xs) {
                double s = 0.0;
                if (item.kind == ItemKind::continuous) {
                    const auto f = continuous_density(item, x, m.quad);
                    s = m.quad.integrate([&](double y) { return f(y); });
                } else {
                    s = discrete_irf(item, x).sum();
                }
                density = std::max(density, std::abs(s - 1.0));
            }
        }
        marginals = std::max(marginals, m.copula.marginal_residual());
        min_xi = std::min(min_xi, m.copula.xi.minCoeff());
        plane = std::max(plane, std::abs(st::plane_integral(LatentDensity{m.copula}, 600, 8.5) - 1.0));
    }
    const bool pass = density <= 1e-10 && marginals <= 1e-8 && min_xi >= 0.0 && plane <= 1e-6;
    return {pass, "max |sum-1| " + fmt(density) + ", copula marginals " + fmt(marginals) + ", plane " + fmt(plane)};
}

Outcome oracles() {
    double ll = 0.0, mom = 0.0, eap = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const FactorModel m = st::random_model(1, 2, 2, 4, 5, 0.05, seed);
        std::mt19937_64 rng(seed + 100);
        const Dataset d = st::draw_from_model(m, 8, rng);
        ll = std::max(ll, std::abs(marginal_loglik(m, d) - st::dense_loglik(m, d, 1000)));
    }
    for (std::uint64_t seed = 1; seed <= 2; ++seed) {
        const FactorModel m = st::random_model(1, 2, 4, 4, 5, 0.05, seed);
        ScoreFunction sc = ScoreFunction::identity(3);
        sc.entries[1].table = {0, 1, 1, 2};
        const int G = 500;
        double mu0 = 0.0, mu12 = 0.0;
        for (int g = 0; g < G; ++g) {
            const double x = (g + 0.5) / G;
            mu0 += st::dense_score_mean(m.items[0], sc, 0, x) / G;
            mu12 += st::dense_score_mean(m.items[1], sc, 1, x) * st::dense_score_mean(m.items[2], sc, 2, x) / G;
        }
        const MomentTriple resp = model_implied_moments(m, sc, 1, 2);
        const MomentTriple cross = model_implied_moments(m, sc, 0, 2);
        mom = std::max({mom, std::abs(cross.first_j - mu0), std::abs(resp.second - mu12),
                        std::abs(cross.second - st::dense_cross_moment(m, sc, 0, 2, G))});
    }
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Dataset schema = st::mixed_schema(1, 2, 2);
        schema.values.resize(0, 3);
        FactorModel m = make_model(schema, settings(4, 5));
        std::mt19937_64 rng(seed);
        for (auto& item : m.items) st::randomize_item(item, rng, 1.5);
        for (double r : {0.0, 1.0}) {
            const std::vector<double> y{0.4, r, 1.0 - r};
            const MarginalScore got = eap_marginal(m, y);
            const auto [mean, sd] = st::dense_marginal_eap(m, y, 2000000);
            eap = std::max({eap, std::abs(got.eap - mean), std::abs(got.sd - sd)});
        }
    }
    const bool pass = ll <= 1e-6 && mom <= 1e-6 && eap <= 1e-4;
    return {pass, "loglik " + fmt(ll) + ", moments " + fmt(mom) + ", EAP " + fmt(eap)};
}

Outcome gradient() {
    struct Shape {
        int continuous, discrete, categories, K;
    };
    const Shape shapes[] = {{1, 1, 2, 4}, {2, 1, 3, 4}, {1, 2, 2, 5}, {2, 2, 3, 5}};
    double worst = 0.0;
    const double h = 1e-5;
    for (int r = 0; r < 20; ++r) {
        const Shape& sh = shapes[r % 4];
        FactorModel m = st::random_model(sh.continuous, sh.discrete, sh.categories, sh.K, 7, 0.7,
                                         500 + static_cast<std::uint64_t>(r));
        std::mt19937_64 rng(static_cast<std::uint64_t>(r));
        const Dataset d = st::draw_from_model(m, 50, rng);
        const PenaltyWeights w{0.05, 0.02, 0.03};
        const Vector g = penalized_gradient(m, d, w);
        Eigen::Index at = 0;
        const auto check = [&](double fp, double fm) {
            const double fd = (fp - fm) / (2 * h);
            worst = std::max(worst, std::abs(fd - g[at]) / std::max(1.0, std::abs(fd)));
            ++at;
        };
        for (auto& item : m.items) {
            const Vector theta = item.parameters();
            for (Eigen::Index i = 0; i < theta.size(); ++i) {
                Vector tp = theta, tm = theta;
                tp[i] += h;
                tm[i] -= h;
                item.set_parameters(tp);
                const double fp = penalized_objective(m, d, w);
                item.set_parameters(tm);
                const double fm = penalized_objective(m, d, w);
                item.set_parameters(theta);
                check(fp, fm);
            }
        }
        const Matrix xi = m.copula.xi;
        for (Eigen::Index i = 0; i < xi.size(); ++i) {
            m.copula.xi = xi;
            m.copula.xi.reshaped()[i] += h;
            const double fp = penalized_objective(m, d, w);
            m.copula.xi = xi;
            m.copula.xi.reshaped()[i] -= h;
            const double fm = penalized_objective(m, d, w);
            check(fp, fm);
        }
        if (at != g.size()) return {false, "gradient length mismatch"};
    }
    return {worst < 1e-5, "max relative error " + fmt(worst)};
}

Outcome ascent() {
    const bool pass = audit.fits > 0 && audit.not_converged == 0 && audit.descents == 0 && audit.failed_replicates == 0;
    return {pass, std::to_string(audit.fits) + " fits, " + std::to_string(audit.descents) + " with descent, " +
                      std::to_string(audit.not_converged) + " not converged, " +
                      std::to_string(audit.failed_replicates) + " failed replicates, largest drop " +
                      fmt(audit.worst_drop)};
}

SimulationResult recovery_data() { return simulate(standard_generator(10, 0.5), 2000, 1); }

Outcome recovery() {
    const int items = 10;
    const SimulationResult sim = recovery_data();
    const auto t0 = std::chrono::steady_clock::now();
    FitConfig fc;
    fc.threads = 1;
    const FitResult fit = em_fit(sim.data, kWeights, fc, settings(7, 21));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    audit.add(fit);
    double se = 0.0;
    int count = 0;
    for (int j = 0; j < items; ++j) {
        const ItemModel& item = fit.model.items[static_cast<std::size_t>(items + j)];
        for (int g = 0; g <= 90; ++g) {
            const double u = 0.05 + 0.9 * g / 90.0;
            const double diff = discrete_irf(item, u)[1] - sim.truth.irf(j, u);
            se += diff * diff;
            ++count;
        }
    }
    const double rmse = std::sqrt(se / count);
    const double eta2 = eta_squared(LatentDensity{fit.model.copula}, fit.model.quad);
    const ResidualTable res = residual_correlations(fit.model, sim.data, ScoreFunction::from(sim.data));
    Matrix off = res.residual;
    off.diagonal().setZero();
    const double max_res = off.cwiseAbs().maxCoeff();
    const bool pass = rmse < 0.05 && eta2 >= 0.15 && eta2 <= 0.35 && max_res < 0.05 && secs < 600.0;
    return {pass, "IRF RMSE " + fmt(rmse) + ", eta2 " + fmt(eta2) + ", max |residual| " + fmt(max_res) + ", fit " +
                      fmt(secs) + " s"};
}

/// 100 values whose percentile interval at level 0.90 is exactly [lo, hi].
std::vector<double> sample_with_interval(double lo, double hi) {
    std::vector<double> v;
    for (int i = 0; i < 4; ++i) v.push_back(lo - 0.01 * (i + 1));
    for (int i = 0; i < 91; ++i) v.push_back(lo + (hi - lo) * i / 90.0);
    for (int i = 0; i < 5; ++i) v.push_back(hi + 0.01 * (i + 1));
    std::shuffle(v.begin(), v.end(), std::mt19937_64(3));
    return v;
}

Outcome flagging_rule() {
    const auto [lo1, hi1] = percentile_interval(sample_with_interval(0.12, 0.15), 0.90);
    const auto [lo2, hi2] = percentile_interval(sample_with_interval(-0.13, -0.09), 0.90);
    const bool exact = lo1 == 0.12 && hi1 == 0.15 && lo2 == -0.13 && hi2 == -0.09;
    const bool first = interval_flagged(lo1, hi1, 0.1);
    const bool second = interval_flagged(lo2, hi2, 0.1);
    return {exact && first && !second, "[" + fmt(lo1) + ", " + fmt(hi1) + "] flagged " + (first ? "yes" : "no") +
                                           "; [" + fmt(lo2) + ", " + fmt(hi2) + "] flagged " + (second ? "yes" : "no")};
}

Outcome one_se() {
    struct Case {
        std::vector<Candidate> table;
        double expected;
    };
    const std::vector<Case> cases = {
        {{{1e-1, 1.00, 0.05}, {1e-2, 0.90, 0.05}, {1e-3, 0.95, 0.05}}, 1e-2},
        {{{1e-1, 0.93, 0.05}, {1e-2, 0.90, 0.05}, {1e-3, 0.95, 0.05}}, 1e-1},
        // Band from the minimizer's own SE, not the smallest SE.
        {{{1e1, 2.07, 0.01}, {1e0, 2.05, 0.01}, {1e-1, 2.00, 0.08}, {1e-2, 2.03, 0.01}}, 1e1},
        {{{1e1, 2.07, 0.20}, {1e0, 2.05, 0.20}, {1e-1, 2.00, 0.04}, {1e-2, 2.03, 0.20}}, 1e-1},
        // Minimum at the largest weight.
        {{{1e-2, 0.50, 0.02}, {1e-4, 0.60, 0.02}, {1e-6, 0.61, 0.02}, {1e-8, 0.62, 0.02}}, 1e-2},
        // Only the minimizer inside the band.
        {{{1e-1, 3.0, 0.1}, {1e-2, 2.0, 0.1}, {1e-3, 1.0, 0.1}, {1e-4, 1.5, 0.1}}, 1e-3},
        // Boundary: risk exactly at minimum + SE is inside.
        {{{1.0, 1.5, 0.5}, {0.5, 1.0, 0.5}}, 1.0},
        // Unsorted input.
        {{{1e-3, 0.95, 0.05}, {1e-1, 0.93, 0.05}, {1e-2, 0.90, 0.05}}, 1e-1},
    };
    int ok = 0;
    for (const auto& c : cases) ok += one_se_select(c.table) == c.expected ? 1 : 0;
    return {ok == static_cast<int>(cases.size()), std::to_string(ok) + " of " + std::to_string(cases.size()) +
                                                      " tables match"};
}

Outcome planted_dependence() {
    GeneratorSpec g = standard_generator(6, 0.5);
    g.items[1].shock_sd = 1.5;
    int exact = 0;
    std::string misses;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const SimulationResult sim = simulate(g, 3000, seed);
        const Dataset& d = sim.data;
        FitConfig fc;
        const FitResult fit = em_fit(d, kWeights, fc, settings(5, 11));
        audit.add(fit);
        fc.seed = replicate_seed(seed, 3);
        const BootstrapEnsemble ens = bootstrap_refit(d, fit.model, kWeights, 50, fc);
        audit.add(ens);
        const auto flagged = flag_residuals(ens, d, ScoreFunction::from(d), 0.1, 0.90).flagged();
        bool hit = flagged.size() == 1;
        if (hit) {
            const std::string a = d.columns[static_cast<std::size_t>(flagged[0].j)].name;
            const std::string b = d.columns[static_cast<std::size_t>(flagged[0].k)].name;
            hit = (a == "item2.rt" && b == "item2.resp") || (a == "item2.resp" && b == "item2.rt");
        }
        if (hit) {
            ++exact;
        } else {
            misses += " " + std::to_string(seed) + "(" + std::to_string(flagged.size()) + " flags)";
        }
    }
    return {exact >= 18, std::to_string(exact) + " of 20 seeds flag exactly the planted pair" +
                             (misses.empty() ? "" : "; misses:" + misses)};
}

AnalysisConfig precision_config() {
    AnalysisConfig c;
    c.model = settings(7, 21);
    c.weights = kWeights;
    c.bootstrap = 20;
    c.max_rounds = 1;
    c.grid_points = 9;
    c.seed = 1;
    return c;
}

Outcome precision() {
    const AnalysisReport gauss = run_analysis(recovery_data().data, precision_config());
    audit.add(gauss);
    GeneratorSpec g = standard_generator(10, 0.0);
    g.latent.kind = LatentSpec::Kind::mixture;
    MixtureComponent lower;
    lower.weight = 0.5;
    lower.mean_slowness = -1.0;
    lower.rho = 0.8;
    MixtureComponent upper = lower;
    upper.mean_slowness = 1.0;
    upper.rho = -0.8;
    g.latent.components = {lower, upper};
    const AnalysisReport mix = run_analysis(simulate(g, 2000, 1).data, precision_config());
    audit.add(mix);
    if (!gauss.precision || !mix.precision) return {false, "precision comparison missing"};
    const auto& groups = mix.precision->groups;
    int best = 0;
    for (int k = 1; k < static_cast<int>(groups.size()); ++k) {
        if (groups[static_cast<std::size_t>(k)].improvement_pct > groups[static_cast<std::size_t>(best)].improvement_pct) {
            best = k;
        }
    }
    const bool mean_ok = gauss.precision->joint.mean >= gauss.precision->marginal.mean;
    const bool interior = best >= 1 && best <= static_cast<int>(groups.size()) - 2;
    std::string gains;
    for (const auto& gr : groups) gains += (gains.empty() ? "" : "/") + fmt(gr.improvement_pct, 2);
    return {mean_ok && interior, "recovery joint " + fmt(gauss.precision->joint.mean) + " vs marginal " +
                                     fmt(gauss.precision->marginal.mean) + "; mixture group gains % " + gains +
                                     ", largest in group " + std::to_string(best + 1)};
}

std::string shell_quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

bool same_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    const std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return sa == sb;
}

std::map<std::string, fs::path> files_in(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file()) out[e.path().filename().string()] = e.path();
    }
    return out;
}

Outcome determinism(const std::string& cli, const fs::path& work) {
    if (cli.empty()) return {false, "no CLI path given"};
    fs::remove_all(work);
    fs::create_directories(work);
    const fs::path config = work / "config.json";
    {
        std::ofstream out(config);
        out << R"({
  "seed": 7,
  "model": {"basis_size": 5, "quadrature_points": 11},
  "selection": {"folds": 3, "continuous": [1e-2, 1e-4], "discrete": [1e0, 1e-1], "copula": [1e-2, 1e-4]},
  "bootstrap": {"replicates": 10},
  "analysis": {"grid_points": 9},
  "generator": {"standard": {"items": 4, "rho": 0.5}}
}
)";
    }
    const auto run = [&](const std::string& args) {
        return std::system((shell_quoted(cli) + " " + args + " > " + shell_quoted(work / "cli.log") + " 2>&1").c_str());
    };
    const fs::path sim = work / "sim";
    if (run("simulate --config " + shell_quoted(config) + " --n 400 --out-dir " + shell_quoted(sim)) != 0) {
        return {false, "simulate failed"};
    }
    const std::string data = " --data " + shell_quoted(sim / "data.csv") + " --schema " + shell_quoted(sim / "schema.json");
    const std::string runs[] = {"run1", "run2", "run3"};
    const std::string threads[] = {"1", "1", "2"};
    for (int r = 0; r < 3; ++r) {
        if (run("run --config " + shell_quoted(config) + data + " --threads " + threads[r] + " --out-dir " +
                shell_quoted(work / runs[r])) != 0) {
            return {false, runs[r] + " failed"};
        }
    }
    const auto first = files_in(work / runs[0]);
    if (first.size() < 10) return {false, "report has only " + std::to_string(first.size()) + " files"};
    for (int r = 1; r < 3; ++r) {
        const auto other = files_in(work / runs[r]);
        if (other.size() != first.size()) return {false, runs[r] + " wrote a different file set"};
        for (const auto& [name, path] : first) {
            const auto it = other.find(name);
            if (it == other.end()) return {false, runs[r] + " lacks " + name};
            if (!same_bytes(path, it->second)) return {false, name + " differs in " + runs[r]};
        }
    }
    return {true, std::to_string(first.size()) + " report files byte-identical over 3 runs (threads 1, 1, 2)"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string cli;
    std::string work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--cli", cli, "Path to the semifa executable");
    app.add_option("--work-dir", work, "Scratch directory for the CLI runs");
    app.add_option("--only", only, "Run only these criteria (4 then audits only the fits of the others run)");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<int, std::function<Outcome()>>> plan = {
        {1, normalization},
        {2, oracles},
        {3, gradient},
        {5, recovery},
        {6, flagging_rule},
        {7, one_se},
        {8, planted_dependence},
        {9, precision},
        {10, [&] { return determinism(cli, work); }},
        {4, ascent},
    };
    const std::map<int, std::string> names = {
        {1, "normalization"}, {2, "oracle equivalence"}, {3, "gradient check"}, {4, "EM ascent"},
        {5, "parameter recovery"}, {6, "flagging rule"}, {7, "one-SE rule"}, {8, "planted local dependence"},
        {9, "precision comparison"}, {10, "determinism"}};

    std::vector<Row> rows;
    for (const auto& [id, fn] : plan) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Row row{id, names.at(id), {}, 0.0};
        const auto t0 = std::chrono::steady_clock::now();
        try {
            row.outcome = fn();
        } catch (const std::exception& e) {
            row.outcome = {false, std::string("exception: ") + e.what()};
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "criterion " << id << " done in " << fmt(row.seconds) << " s\n";
        rows.push_back(row);
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
    bool all = true;
    for (const auto& r : rows) {
        all = all && r.outcome.pass;
        std::cout << (r.outcome.pass ? "PASS" : "FAIL") << "  " << r.id << ". " << r.name << ": " << r.outcome.detail
                  << " (" << fmt(r.seconds) << " s)\n";
    }
    return all ? 0 : 1;
}
