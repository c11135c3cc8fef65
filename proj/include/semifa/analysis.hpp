#pragma once

// Full analysis loop: weight selection, fit, bootstrap, residual flagging and
// removal of locally dependent MVs, then density tables, eta^2, scores and the
// precision comparison against a response-only model. Report writing.

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/estimation.hpp"
#include "semifa/inference.hpp"
#include "semifa/io.hpp"
#include "semifa/latent.hpp"
#include "semifa/scoring.hpp"
#include "semifa/selection.hpp"

namespace semifa {

struct IntervalEstimate {
    double estimate = 0.0, lo = 0.0, hi = 0.0;
};

struct RoundRecord {
    int round = 1;
    std::vector<std::string> columns;
    std::optional<WeightSelection> selection;  ///< empty when weights were fixed
    PenaltyWeights weights;
    FitResult fit;
    int replicates = 0;
    int failed_replicates = 0;
    ResidualReport residuals;
    std::vector<std::string> removed;  ///< columns dropped after this round
};

/// Latent-grid tables of the final fit; bands are percentile intervals over the replicates.
struct DensityTables {
    std::vector<double> z;  ///< transformed latent grid
    std::vector<double> y;  ///< continuous MV grid on [0, 1]
    struct Continuous {
        std::string name;
        Matrix density;  ///< z x y
        Vector mean, lo, hi;
    };
    struct Discrete {
        std::string name;
        Matrix probability;  ///< z x C
        Matrix lo, hi;
    };
    std::vector<Continuous> continuous;
    std::vector<Discrete> discrete;
    Matrix latent;  ///< z (slowness) x z (ability), transformed joint density
    Vector ability_mean, ability_lo, ability_hi;
};

struct AnalysisReport {
    std::vector<RoundRecord> rounds;
    bool complete = true;
    std::string status;
    Dataset data;  ///< MVs of the final round
    FactorModel model;
    BootstrapEnsemble ensemble;
    IntervalEstimate eta2;
    DensityTables densities;
    std::vector<ScoreRecord> scores;  ///< precisions are predictive (bootstrap mixture)
    std::optional<FitResult> response_fit;
    std::optional<PrecisionComparison> precision;
    std::vector<std::string> log;
};

/// Seed of one stage of one round, derived from the run seed.
inline std::uint64_t stage_seed(std::uint64_t seed, int round, int stage) { return replicate_seed(seed, 16 * round + stage); }

/// Within-item pairs (same item id, different kinds) among flagged diagnostics.
inline std::vector<std::pair<int, int>> flagged_within_item(const ResidualReport& rep, const Dataset& data) {
    std::vector<std::pair<int, int>> out;
    for (const auto& p : rep.flagged()) {
        const auto& a = data.columns[static_cast<std::size_t>(p.j)];
        const auto& b = data.columns[static_cast<std::size_t>(p.k)];
        if (a.item == b.item && a.kind != b.kind) out.emplace_back(p.j, p.k);
    }
    return out;
}

namespace detail {

inline std::vector<int> columns_of_kind(const Dataset& d, ItemKind k) {
    std::vector<int> out;
    for (int j = 0; j < d.cols(); ++j) {
        if (d.columns[static_cast<std::size_t>(j)].kind == k) out.push_back(j);
    }
    return out;
}

inline std::vector<const FactorModel*> fitted_models(const BootstrapEnsemble& ens) {
    std::vector<const FactorModel*> out;
    for (const auto& r : ens.replicates) {
        if (r.fit) out.push_back(&r.fit->model);
    }
    return out;
}

/// Percentile band per entry of the values produced by `f` for each replicate.
template <class F>
std::pair<Matrix, Matrix> band(const std::vector<const FactorModel*>& reps, double level, F&& f) {
    std::vector<Matrix> vals;
    for (const auto* m : reps) vals.push_back(f(*m));
    Matrix lo(vals.front().rows(), vals.front().cols()), hi(lo.rows(), lo.cols());
    for (Eigen::Index r = 0; r < lo.rows(); ++r) {
        for (Eigen::Index c = 0; c < lo.cols(); ++c) {
            std::vector<double> v;
            for (const auto& x : vals) v.push_back(x(r, c));
            std::tie(lo(r, c), hi(r, c)) = percentile_interval(v, level);
        }
    }
    return {lo, hi};
}

inline Vector continuous_mean(const ItemModel& item, const std::vector<double>& x, const QuadratureRule& quad) {
    Vector out(static_cast<Eigen::Index>(x.size()));
    for (std::size_t a = 0; a < x.size(); ++a) {
        const ConditionalDensity f = continuous_density(item, x[a], quad);
        out[static_cast<Eigen::Index>(a)] = quad.integrate([&](double y) { return y * f(y); });
    }
    return out;
}

inline Matrix irf_table(const ItemModel& item, const std::vector<double>& x) {
    Matrix out(static_cast<Eigen::Index>(x.size()), item.categories);
    for (std::size_t a = 0; a < x.size(); ++a) out.row(static_cast<Eigen::Index>(a)) = discrete_irf(item, x[a]).transpose();
    return out;
}

/// E[ability | slowness = Phi^-1(x)] on the transformed scale.
inline Vector ability_given_slowness(const CopulaModel& cop, const std::vector<double>& x) {
    const ScoringGrid& g = ScoringGrid::standard();
    QuadratureRule at;
    at.nodes = x;
    at.weights.assign(x.size(), 1.0);
    const Matrix C = copula_on_grid(cop, at, g.rule);
    const Eigen::Map<const Vector> w(g.rule.weights.data(), g.rule.size());
    return C * w.cwiseProduct(g.z);
}

inline DensityTables density_tables(const FactorModel& model, const BootstrapEnsemble& ens, int points, double level) {
    DensityTables t;
    const auto reps = fitted_models(ens);
    std::vector<double> x;
    for (int a = 0; a < points; ++a) {
        const double z = -3.0 + 6.0 * a / (points - 1);
        t.z.push_back(z);
        x.push_back(normal_cdf(z));
    }
    for (int b = 0; b < points; ++b) t.y.push_back((b + 0.5) / points);
    for (std::size_t j = 0; j < model.items.size(); ++j) {
        const ItemModel& item = model.items[j];
        if (item.kind == ItemKind::continuous) {
            DensityTables::Continuous c;
            c.name = item.name;
            c.density.resize(points, points);
            for (int a = 0; a < points; ++a) {
                const ConditionalDensity f = continuous_density(item, x[static_cast<std::size_t>(a)], model.quad);
                for (int b = 0; b < points; ++b) c.density(a, b) = f(t.y[static_cast<std::size_t>(b)]);
            }
            c.mean = continuous_mean(item, x, model.quad);
            const auto [lo, hi] = band(reps, level, [&](const FactorModel& m) -> Matrix {
                return continuous_mean(m.items[j], x, m.quad);
            });
            c.lo = lo.col(0);
            c.hi = hi.col(0);
            t.continuous.push_back(std::move(c));
        } else {
            DensityTables::Discrete d;
            d.name = item.name;
            d.probability = irf_table(item, x);
            std::tie(d.lo, d.hi) = band(reps, level, [&](const FactorModel& m) -> Matrix { return irf_table(m.items[j], x); });
            t.discrete.push_back(std::move(d));
        }
    }
    const LatentDensity lat{model.copula};
    t.latent.resize(points, points);
    for (int a = 0; a < points; ++a) {
        for (int b = 0; b < points; ++b) t.latent(a, b) = transformed_joint_density(lat, t.z[static_cast<std::size_t>(a)], t.z[static_cast<std::size_t>(b)]);
    }
    t.ability_mean = ability_given_slowness(model.copula, x);
    const auto [lo, hi] = band(reps, level, [&](const FactorModel& m) -> Matrix { return ability_given_slowness(m.copula, x); });
    t.ability_lo = lo.col(0);
    t.ability_hi = hi.col(0);
    return t;
}

inline std::string join(const std::vector<std::string>& v, const char* sep = ", ") {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
    return s;
}

inline std::string weights_text(const PenaltyWeights& w) {
    return "continuous=" + format_double(w.continuous) + " discrete=" + format_double(w.discrete) +
           " copula=" + format_double(w.copula);
}

}  // namespace detail

using ProgressFn = std::function<void(const std::string&)>;

/// Runs the analysis loop on processed data. Deterministic for a fixed config seed.
inline AnalysisReport run_analysis(const Dataset& input, const AnalysisConfig& config, const ProgressFn& progress = {}) {
    config.validate();
    input.validate();
    AnalysisReport rep;
    const auto note = [&](const std::string& s) {
        rep.log.push_back(s);
        if (progress) progress(s);
    };
    Dataset data = input;
    apply_monotone(data, config.monotone);
    FitConfig fit_config = config.fit;
    fit_config.threads = config.threads;

    for (int round = 1;; ++round) {
        RoundRecord rr;
        rr.round = round;
        rr.columns = column_names(data);
        note("round " + std::to_string(round) + ": " + std::to_string(data.cols()) + " MVs, n = " + std::to_string(data.rows()));

        if (config.weights) {
            rr.weights = *config.weights;
        } else {
            const CvPlan plan = CvPlan::make(data.rows(), config.folds, stage_seed(config.seed, round, 0));
            FitConfig cv = fit_config;
            cv.seed = stage_seed(config.seed, round, 1);
            rr.selection = select_weights(data, config.grid, plan, cv, config.model);
            rr.weights = rr.selection->weights;
        }
        note("  weights: " + detail::weights_text(rr.weights));

        FitConfig fc = fit_config;
        fc.seed = stage_seed(config.seed, round, 2);
        rr.fit = em_fit(data, rr.weights, fc, config.model);
        note("  fit: " + std::to_string(rr.fit.iterations) + " EM iterations, objective " +
             format_double(rr.fit.trace.back()) + (rr.fit.converged ? "" : " (not converged)"));

        FitConfig bc = fit_config;
        bc.seed = stage_seed(config.seed, round, 3);
        BootstrapEnsemble ens = bootstrap_refit(data, rr.fit.model, rr.weights, config.bootstrap, bc);
        rr.replicates = config.bootstrap;
        rr.failed_replicates = config.bootstrap - ens.successes();
        note("  bootstrap: " + std::to_string(ens.successes()) + " of " + std::to_string(config.bootstrap) + " refits");

        rr.residuals = flag_residuals(ens, data, ScoreFunction::from(data), config.threshold, config.level, config.threads);
        const auto flagged = rr.residuals.flagged();
        for (const auto& p : flagged) {
            note("  flagged: " + data.columns[static_cast<std::size_t>(p.j)].name + " ~ " +
                 data.columns[static_cast<std::size_t>(p.k)].name + " " + format_double(p.estimate) + " [" +
                 format_double(p.lo) + ", " + format_double(p.hi) + "]");
        }

        const auto within = flagged_within_item(rr.residuals, data);
        std::vector<int> drop;
        for (const auto& [j, k] : within) {
            const ItemKind want = config.removal == RemovalPolicy::continuous ? ItemKind::continuous : ItemKind::discrete;
            const int c = data.columns[static_cast<std::size_t>(j)].kind == want ? j : k;
            if (std::find(drop.begin(), drop.end(), c) == drop.end()) drop.push_back(c);
        }
        std::sort(drop.begin(), drop.end());

        const bool last = drop.empty() || round == config.max_rounds;
        if (!last) {
            for (int c : drop) rr.removed.push_back(data.columns[static_cast<std::size_t>(c)].name);
            note("  removing: " + detail::join(rr.removed));
            std::vector<int> keep;
            for (int j = 0; j < data.cols(); ++j) {
                if (!std::binary_search(drop.begin(), drop.end(), j)) keep.push_back(j);
            }
            data = data.subset_columns(keep);
            rep.rounds.push_back(std::move(rr));
            continue;
        }

        if (!drop.empty()) {
            rep.complete = false;
            rep.status = "flags remain after " + std::to_string(config.max_rounds) + " rounds; results are from the last round";
        } else if (!flagged.empty()) {
            rep.status = "flags remain on pairs that are not within one item; no MV removed";
        } else {
            rep.status = "no large residual correlation";
        }
        note("  " + rep.status);
        rep.model = rr.fit.model;
        rep.ensemble = std::move(ens);
        rep.rounds.push_back(std::move(rr));
        break;
    }
    rep.data = data;

    // eta^2 of the final fit with its bootstrap interval.
    const auto reps = detail::fitted_models(rep.ensemble);
    rep.eta2.estimate = eta_squared(rep.model.latent(), rep.model.quad);
    {
        std::vector<double> v;
        for (const auto* m : reps) v.push_back(eta_squared(m->latent(), m->quad));
        std::tie(rep.eta2.lo, rep.eta2.hi) = percentile_interval(v, config.level);
    }
    note("eta^2 = " + format_double(rep.eta2.estimate) + " [" + format_double(rep.eta2.lo) + ", " +
         format_double(rep.eta2.hi) + "]");
    rep.densities = detail::density_tables(rep.model, rep.ensemble, config.grid_points, config.level);

    rep.scores = eap_joint_all(rep.model, data, config.threads);
    if (reps.size() >= 2) {
        const Matrix pred = predictive_precision_joint(rep.ensemble, data, config.threads);
        for (int i = 0; i < data.rows(); ++i) {
            rep.scores[static_cast<std::size_t>(i)].precision_slowness = pred(i, 0);
            rep.scores[static_cast<std::size_t>(i)].precision_ability = pred(i, 1);
        }
    }

    if (config.compare_precision) {
        const std::vector<int> resp = detail::columns_of_kind(data, ItemKind::discrete);
        const Dataset rdata = data.subset_columns(resp);
        const PenaltyWeights w = rep.rounds.back().weights;
        FitConfig fc = fit_config;
        fc.seed = stage_seed(config.seed, 0, 4);
        rep.response_fit = em_fit(rdata, w, fc, config.model);
        FitConfig bc = fit_config;
        bc.seed = stage_seed(config.seed, 0, 5);
        const BootstrapEnsemble rens = bootstrap_refit(rdata, rep.response_fit->model, w, config.bootstrap, bc);
        const auto marg = eap_marginal_all(rep.response_fit->model, rdata, config.threads);
        const Vector pm = predictive_precision_marginal(rens, rdata, config.threads);
        for (int i = 0; i < data.rows(); ++i) {
            auto& s = rep.scores[static_cast<std::size_t>(i)];
            s.eap_marginal = marg[static_cast<std::size_t>(i)].eap;
            s.sd_marginal = marg[static_cast<std::size_t>(i)].sd;
            s.precision_marginal = pm[i];
        }
        rep.precision = precision_by_quantile(rep.scores, config.score_groups);
        note("precision: response-only mean " + format_double(rep.precision->marginal.mean) + ", joint mean " +
             format_double(rep.precision->joint.mean) + ", improvement " + format_double(rep.precision->improvement_pct) +
             "%");
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw DataError("cannot write '" + path.string() + "'");
        for (std::size_t j = 0; j < header.size(); ++j) out_ << (j ? "," : "") << header[j];
        out_ << '\n';
    }
    CsvWriter& cell(const std::string& s) {
        out_ << (first_ ? "" : ",") << s;
        first_ = false;
        return *this;
    }
    CsvWriter& cell(double v) { return cell(format_double(v)); }
    CsvWriter& cell(int v) { return cell(std::to_string(v)); }
    void end() {
        out_ << '\n';
        first_ = true;
    }

private:
    std::ofstream out_;
    bool first_ = true;
};

inline void write_residuals(const std::filesystem::path& path, const ResidualReport& r, const std::vector<std::string>& names) {
    CsvWriter w(path, {"pair", "estimate", "ci_lo", "ci_hi", "flagged"});
    for (const auto& p : r.pairs) {
        w.cell(names[static_cast<std::size_t>(p.j)] + "~" + names[static_cast<std::size_t>(p.k)])
            .cell(p.estimate)
            .cell(p.lo)
            .cell(p.hi)
            .cell(p.flagged ? 1 : 0);
        w.end();
    }
}

}  // namespace detail

/// Writes the report tables, the model document and the run log into `dir`.
inline void write_report(const AnalysisReport& rep, const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path out(dir);
    fs::create_directories(out);

    for (const auto& r : rep.rounds) {
        detail::write_residuals(out / ("residuals_round" + std::to_string(r.round) + ".csv"), r.residuals, r.columns);
    }
    detail::write_residuals(out / "residuals.csv", rep.rounds.back().residuals, rep.rounds.back().columns);

    {
        detail::CsvWriter w(out / "weights.csv", {"round", "stage", "weight", "risk", "se", "selected"});
        for (const auto& r : rep.rounds) {
            if (!r.selection) {
                const std::pair<const char*, double> fixed[] = {
                    {"continuous", r.weights.continuous}, {"discrete", r.weights.discrete}, {"copula", r.weights.copula}};
                for (const auto& [name, v] : fixed) {
                    w.cell(r.round).cell(std::string(name)).cell(v).cell(std::string("")).cell(std::string("")).cell(1);
                    w.end();
                }
                continue;
            }
            const std::pair<const char*, const StageResult*> stages[] = {
                {"continuous", &r.selection->continuous}, {"discrete", &r.selection->discrete}, {"copula", &r.selection->copula}};
            for (const auto& [name, st] : stages) {
                for (const auto& c : st->candidates) {
                    w.cell(r.round).cell(std::string(name)).cell(c.weight).cell(c.risk).cell(c.se).cell(c.weight == st->selected ? 1 : 0);
                    w.end();
                }
            }
        }
    }

    {
        detail::CsvWriter w(out / "eta2.csv", {"estimate", "ci_lo", "ci_hi"});
        w.cell(rep.eta2.estimate).cell(rep.eta2.lo).cell(rep.eta2.hi);
        w.end();
    }

    {
        detail::CsvWriter w(out / "scores.csv", {"record", "eap_slowness", "sd_slowness", "eap_ability", "sd_ability",
                                                 "eap_marginal", "sd_marginal", "precision_slowness", "precision_ability",
                                                 "precision_marginal"});
        for (std::size_t i = 0; i < rep.scores.size(); ++i) {
            const auto& s = rep.scores[i];
            w.cell(static_cast<int>(i)).cell(s.eap_slowness).cell(s.sd_slowness).cell(s.eap_ability).cell(s.sd_ability);
            if (rep.precision) {
                w.cell(s.eap_marginal).cell(s.sd_marginal);
            } else {
                w.cell(std::string("")).cell(std::string(""));
            }
            w.cell(s.precision_slowness).cell(s.precision_ability);
            if (rep.precision) {
                w.cell(s.precision_marginal);
            } else {
                w.cell(std::string(""));
            }
            w.end();
        }
    }

    if (rep.precision) {
        detail::CsvWriter g(out / "precision_groups.csv",
                            {"group", "size", "eap_min", "eap_max", "marginal", "joint", "improvement_pct"});
        for (std::size_t k = 0; k < rep.precision->groups.size(); ++k) {
            const auto& p = rep.precision->groups[k];
            g.cell(static_cast<int>(k + 1)).cell(p.size).cell(p.eap_min).cell(p.eap_max).cell(p.marginal).cell(p.joint).cell(p.improvement_pct);
            g.end();
        }
        detail::CsvWriter s(out / "precision_summary.csv", {"model", "mean", "median", "q1", "q3", "improvement_pct"});
        s.cell(std::string("response_only")).cell(rep.precision->marginal.mean).cell(rep.precision->marginal.median)
            .cell(rep.precision->marginal.q1).cell(rep.precision->marginal.q3).cell(std::string(""));
        s.end();
        s.cell(std::string("joint")).cell(rep.precision->joint.mean).cell(rep.precision->joint.median)
            .cell(rep.precision->joint.q1).cell(rep.precision->joint.q3).cell(rep.precision->improvement_pct);
        s.end();
    }

    const DensityTables& t = rep.densities;
    {
        detail::CsvWriter w(out / "rt_densities.csv", {"mv", "slowness", "y", "density"});
        for (const auto& c : t.continuous) {
            for (std::size_t a = 0; a < t.z.size(); ++a) {
                for (std::size_t b = 0; b < t.y.size(); ++b) {
                    w.cell(c.name).cell(t.z[a]).cell(t.y[b]).cell(c.density(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
                    w.end();
                }
            }
        }
        detail::CsvWriter m(out / "rt_means.csv", {"mv", "slowness", "mean", "band_lo", "band_hi"});
        for (const auto& c : t.continuous) {
            for (std::size_t a = 0; a < t.z.size(); ++a) {
                const auto i = static_cast<Eigen::Index>(a);
                m.cell(c.name).cell(t.z[a]).cell(c.mean[i]).cell(c.lo[i]).cell(c.hi[i]);
                m.end();
            }
        }
    }
    {
        detail::CsvWriter w(out / "irfs.csv", {"mv", "ability", "category", "probability", "band_lo", "band_hi"});
        for (const auto& d : t.discrete) {
            for (std::size_t a = 0; a < t.z.size(); ++a) {
                const auto i = static_cast<Eigen::Index>(a);
                for (Eigen::Index c = 0; c < d.probability.cols(); ++c) {
                    w.cell(d.name).cell(t.z[a]).cell(static_cast<int>(c)).cell(d.probability(i, c)).cell(d.lo(i, c)).cell(d.hi(i, c));
                    w.end();
                }
            }
        }
    }
    {
        detail::CsvWriter w(out / "latent_density.csv", {"slowness", "ability", "density"});
        for (std::size_t a = 0; a < t.z.size(); ++a) {
            for (std::size_t b = 0; b < t.z.size(); ++b) {
                w.cell(t.z[a]).cell(t.z[b]).cell(t.latent(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
                w.end();
            }
        }
        detail::CsvWriter m(out / "ability_given_slowness.csv", {"slowness", "mean", "band_lo", "band_hi"});
        for (std::size_t a = 0; a < t.z.size(); ++a) {
            const auto i = static_cast<Eigen::Index>(a);
            m.cell(t.z[a]).cell(t.ability_mean[i]).cell(t.ability_lo[i]).cell(t.ability_hi[i]);
            m.end();
        }
    }

    json doc = model_json(rep.model);
    doc["columns"] = schema_json(rep.data.columns);
    doc["weights"] = weights_json(rep.rounds.back().weights);
    write_json_file((out / "model.json").string(), doc);

    std::ofstream log(out / "run_log.txt");
    if (!log) throw DataError("cannot write run log");
    for (const auto& line : rep.log) log << line << '\n';
    log << "status: " << rep.status << '\n';
    for (const auto& r : rep.rounds) {
        log << "round " << r.round << " objective trace:";
        for (double v : r.fit.trace) log << ' ' << format_double(v);
        log << '\n';
    }
    if (rep.response_fit) {
        log << "response-only objective trace:";
        for (double v : rep.response_fit->trace) log << ' ' << format_double(v);
        log << '\n';
    }
}

}  // namespace semifa
