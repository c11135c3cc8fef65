// semifa command-line interface.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "semifa/semifa.hpp"

namespace fs = std::filesystem;
using namespace semifa;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out_dir = ".";
    bool verbose = false;
};

struct Inputs {
    std::string data, schema, model, weights, ensemble, input;
    int n = 0;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON configuration file");
    cmd->add_option("--seed", c.seed, "Override the configured seed");
    cmd->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out-dir", c.out_dir, "Output directory");
    cmd->add_flag("-v,--verbose", c.verbose, "Progress on stderr");
}

AnalysisConfig load(const Common& c) {
    AnalysisConfig cfg = c.config.empty() ? config_from(json::object()) : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    cfg.fit.threads = cfg.threads;
    cfg.fit.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

fs::path out_dir(const Common& c) {
    fs::path p(c.out_dir);
    fs::create_directories(p);
    return p;
}

Dataset load_data(const Inputs& in, const AnalysisConfig& cfg) {
    if (in.data.empty()) throw ConfigError("--data is required");
    if (in.schema.empty()) throw ConfigError("--schema is required with processed data");
    Dataset d = dataset_from_table(read_csv_file(in.data), schema_from(read_json_file(in.schema)));
    apply_monotone(d, cfg.monotone);
    return d;
}

void save_data(const Dataset& d, const fs::path& dir) {
    write_csv_file((dir / "data.csv").string(), column_names(d), d.values);
    write_json_file((dir / "schema.json").string(), schema_json(d.columns));
}

PenaltyWeights resolve_weights(const Inputs& in, const AnalysisConfig& cfg, const json* model_doc) {
    if (!in.weights.empty()) {
        const json j = read_json_file(in.weights);
        return weights_from(j.contains("weights") ? j.at("weights") : j);
    }
    if (model_doc && model_doc->contains("weights")) return weights_from(model_doc->at("weights"));
    if (cfg.weights) return *cfg.weights;
    throw ConfigError("no penalty weights: pass --weights, or set selection.weights in the config");
}

void write_model(const fs::path& path, const FactorModel& m, const Dataset& d, const PenaltyWeights& w) {
    json doc = model_json(m);
    doc["columns"] = schema_json(d.columns);
    doc["weights"] = weights_json(w);
    write_json_file(path.string(), doc);
}

int cmd_preprocess(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    if (in.input.empty()) throw ConfigError("--input is required");
    const PreprocessResult res = preprocess(read_csv_file(in.input), cfg.preprocess);
    const fs::path dir = out_dir(c);
    save_data(res.data, dir);
    write_json_file((dir / "preprocess.json").string(), json{{"input_rows", res.input_rows},
                                                             {"dropped_missing", res.dropped_missing},
                                                             {"dropped_trimmed", res.dropped_trimmed},
                                                             {"retained_rows", res.data.rows()},
                                                             {"retained", res.retained}});
    std::cout << "retained " << res.data.rows() << " of " << res.input_rows << " records\n";
    return 0;
}

int cmd_simulate(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    if (!cfg.generator) throw ConfigError("simulate needs a 'generator' section in the config");
    const SimulationResult sim = simulate(*cfg.generator, in.n, cfg.seed);
    const fs::path dir = out_dir(c);
    write_csv_file((dir / "raw.csv").string(), sim.raw.header, sim.raw.values);
    write_csv_file((dir / "latent.csv").string(), {"slowness", "ability"}, sim.truth.latent_draws);
    save_data(sim.data, dir);
    std::cout << "simulated " << in.n << " records\n";
    return 0;
}

int cmd_select(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    const Dataset d = load_data(in, cfg);
    const WeightSelection sel =
        select_weights(d, cfg.grid, CvPlan::make(d.rows(), cfg.folds, stage_seed(cfg.seed, 1, 0)), cfg.fit, cfg.model);
    const fs::path dir = out_dir(c);
    write_json_file((dir / "weights.json").string(), weights_json(sel.weights));
    std::ofstream out(dir / "weights.csv");
    out << "stage,weight,risk,se,selected\n";
    const std::pair<const char*, const StageResult*> stages[] = {
        {"continuous", &sel.continuous}, {"discrete", &sel.discrete}, {"copula", &sel.copula}};
    for (const auto& [name, st] : stages) {
        for (const auto& cand : st->candidates) {
            out << name << ',' << format_double(cand.weight) << ',' << format_double(cand.risk) << ','
                << format_double(cand.se) << ',' << (cand.weight == st->selected ? 1 : 0) << '\n';
        }
    }
    std::cout << detail::weights_text(sel.weights) << '\n';
    return 0;
}

int cmd_fit(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    const Dataset d = load_data(in, cfg);
    const PenaltyWeights w = resolve_weights(in, cfg, nullptr);
    const FitResult fit = em_fit(d, w, cfg.fit, cfg.model);
    const fs::path dir = out_dir(c);
    write_model(dir / "model.json", fit.model, d, w);
    std::ofstream trace(dir / "trace.csv");
    trace << "iteration,objective\n";
    for (std::size_t t = 0; t < fit.trace.size(); ++t) trace << t << ',' << format_double(fit.trace[t]) << '\n';
    std::cout << "EM iterations " << fit.iterations << (fit.converged ? ", converged" : ", not converged")
              << ", log-likelihood " << format_double(fit.loglik) << '\n';
    return 0;
}

int cmd_bootstrap(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    const Dataset d = load_data(in, cfg);
    if (in.model.empty()) throw ConfigError("--model is required");
    const json doc = read_json_file(in.model);
    const PenaltyWeights w = resolve_weights(in, cfg, &doc);
    FitConfig fc = cfg.fit;
    fc.seed = stage_seed(cfg.seed, 1, 3);
    const BootstrapEnsemble ens = bootstrap_refit(d, model_from(doc), w, cfg.bootstrap, fc);
    write_json_file((out_dir(c) / "ensemble.json").string(), ensemble_json(ens));
    std::cout << ens.successes() << " of " << cfg.bootstrap << " replicates succeeded\n";
    return 0;
}

int cmd_diagnose(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    const Dataset d = load_data(in, cfg);
    if (in.ensemble.empty()) throw ConfigError("--ensemble is required");
    const BootstrapEnsemble ens = ensemble_from(read_json_file(in.ensemble));
    const ResidualReport rep = flag_residuals(ens, d, ScoreFunction::from(d), cfg.threshold, cfg.level, cfg.threads);
    detail::write_residuals(out_dir(c) / "residuals.csv", rep, column_names(d));
    for (const auto& p : rep.flagged()) {
        std::cout << "flagged " << d.columns[static_cast<std::size_t>(p.j)].name << " ~ "
                  << d.columns[static_cast<std::size_t>(p.k)].name << '\n';
    }
    std::cout << rep.flagged().size() << " flagged pairs\n";
    return 0;
}

int cmd_score(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    const Dataset d = load_data(in, cfg);
    if (in.model.empty()) throw ConfigError("--model is required");
    const FactorModel m = model_from(read_json_file(in.model));
    std::vector<ScoreRecord> scores = eap_joint_all(m, d, cfg.threads);
    if (!in.ensemble.empty()) {
        const Matrix pred = predictive_precision_joint(ensemble_from(read_json_file(in.ensemble)), d, cfg.threads);
        for (int i = 0; i < d.rows(); ++i) {
            scores[static_cast<std::size_t>(i)].precision_slowness = pred(i, 0);
            scores[static_cast<std::size_t>(i)].precision_ability = pred(i, 1);
        }
    }
    Matrix out(d.rows(), 6);
    for (int i = 0; i < d.rows(); ++i) {
        const auto& s = scores[static_cast<std::size_t>(i)];
        out.row(i) << s.eap_slowness, s.sd_slowness, s.eap_ability, s.sd_ability, s.precision_slowness, s.precision_ability;
    }
    write_csv_file((out_dir(c) / "scores.csv").string(),
                   {"eap_slowness", "sd_slowness", "eap_ability", "sd_ability", "precision_slowness", "precision_ability"}, out);
    std::cout << "scored " << d.rows() << " records\n";
    return 0;
}

int cmd_run(const Common& c, const Inputs& in) {
    const AnalysisConfig cfg = load(c);
    if (in.data.empty()) throw ConfigError("--data is required");
    Dataset d;
    if (in.schema.empty()) {
        d = preprocess(read_csv_file(in.data), cfg.preprocess).data;
    } else {
        d = dataset_from_table(read_csv_file(in.data), schema_from(read_json_file(in.schema)));
    }
    ProgressFn progress;
    if (c.verbose) progress = [](const std::string& s) { std::cerr << s << '\n'; };
    const AnalysisReport rep = run_analysis(d, cfg, progress);
    const fs::path dir = out_dir(c);
    write_report(rep, dir.string());
    std::cout << rep.status << '\n';
    return rep.complete ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semiparametric two-factor analysis of item responses and response times"};
    app.require_subcommand(1);
    Common common;
    Inputs in;

    auto* pre = app.add_subcommand("preprocess", "Collapse testlets, log-rescale and trim a raw battery");
    add_common(pre, common);
    pre->add_option("--input", in.input, "Raw CSV")->required();

    auto* sim = app.add_subcommand("simulate", "Draw a dataset from the configured generator");
    add_common(sim, common);
    sim->add_option("--n", in.n, "Records")->required()->check(CLI::PositiveNumber);

    auto* sel = app.add_subcommand("select-weights", "Cross-validated penalty weight selection");
    auto* fit = app.add_subcommand("fit", "Penalized EM fit at fixed weights");
    auto* boot = app.add_subcommand("bootstrap", "Bootstrap refits of a fitted model");
    auto* diag = app.add_subcommand("diagnose", "Residual correlations with bootstrap flags");
    auto* score = app.add_subcommand("score", "EAP scores and precisions");
    auto* run = app.add_subcommand("run", "Full analysis loop and report");
    for (auto* cmd : {sel, fit, boot, diag, score, run}) {
        add_common(cmd, common);
        cmd->add_option("--data", in.data, "Processed CSV (raw CSV for run without --schema)")->required();
        cmd->add_option("--schema", in.schema, "Column schema JSON");
    }
    for (auto* cmd : {fit, boot}) cmd->add_option("--weights", in.weights, "Penalty weights JSON");
    for (auto* cmd : {boot, score}) cmd->add_option("--model", in.model, "Model JSON")->required();
    diag->add_option("--ensemble", in.ensemble, "Bootstrap ensemble JSON")->required();
    score->add_option("--ensemble", in.ensemble, "Bootstrap ensemble JSON for predictive precision");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) return cmd_preprocess(common, in);
        if (sim->parsed()) return cmd_simulate(common, in);
        if (sel->parsed()) return cmd_select(common, in);
        if (fit->parsed()) return cmd_fit(common, in);
        if (boot->parsed()) return cmd_bootstrap(common, in);
        if (diag->parsed()) return cmd_diagnose(common, in);
        if (score->parsed()) return cmd_score(common, in);
        if (run->parsed()) return cmd_run(common, in);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
