#pragma once

// JSON documents: analysis configuration, dataset schema, generator specs,
// fitted models and bootstrap ensembles.

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/estimation.hpp"
#include "semifa/inference.hpp"
#include "semifa/likelihood.hpp"
#include "semifa/preprocess.hpp"
#include "semifa/selection.hpp"
#include "semifa/simulate.hpp"

namespace semifa {

using json = nlohmann::json;

enum class RemovalPolicy { continuous, discrete };

struct AnalysisConfig {
    ModelSettings model;
    FitConfig fit;
    WeightGrid grid;
    int folds = 5;
    /// Skips cross-validation when set.
    std::optional<PenaltyWeights> weights;
    int bootstrap = 100;
    double threshold = 0.1;
    double level = 0.90;
    int max_rounds = 5;
    RemovalPolicy removal = RemovalPolicy::continuous;
    int score_groups = 5;
    int grid_points = 41;  ///< latent grid size of the density tables
    bool compare_precision = true;
    std::vector<std::string> monotone;  ///< items (or columns) with monotone response functions
    std::uint64_t seed = 0;
    int threads = 1;
    PreprocessSpec preprocess;
    std::optional<GeneratorSpec> generator;

    void validate() const {
        ModelSettings m = model;
        if (m.basis_size < 4) throw ConfigError("basis_size must be >= 4");
        if (m.quadrature_points < 2) throw ConfigError("quadrature_points must be >= 2");
        fit.validate();
        grid.validate();
        if (weights) weights->validate();
        if (folds < 2) throw ConfigError("folds must be >= 2");
        if (bootstrap < 2) throw ConfigError("bootstrap must be >= 2");
        if (!(threshold >= 0.0)) throw ConfigError("threshold must be nonnegative");
        if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0, 1)");
        if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
        if (score_groups < 2) throw ConfigError("score_groups must be >= 2");
        if (grid_points < 2) throw ConfigError("grid_points must be >= 2");
        if (threads < 1) throw ConfigError("threads must be >= 1");
        if (generator) generator->validate();
    }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items()) {
        if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <class T>
T get_required(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
    return get_or<T>(j, key, T{}, where);
}

inline json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vector_json(m.row(r).transpose()));
    return rows;
}

inline Vector vector_from(const json& j, const std::string& where) {
    try {
        const auto v = j.get<std::vector<double>>();
        return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    } catch (const json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

inline Matrix matrix_from(const json& j, const std::string& where) {
    if (!j.is_array()) throw ConfigError(where + ": expected an array of rows");
    Matrix m;
    for (std::size_t r = 0; r < j.size(); ++r) {
        const Vector row = vector_from(j[r], where);
        if (r == 0) m.resize(static_cast<Eigen::Index>(j.size()), row.size());
        if (row.size() != m.cols()) throw ConfigError(where + ": ragged matrix");
        m.row(static_cast<Eigen::Index>(r)) = row.transpose();
    }
    return m;
}

inline const char* kind_name(ItemKind k) { return k == ItemKind::continuous ? "continuous" : "discrete"; }
inline const char* factor_name(Factor f) { return f == Factor::slowness ? "slowness" : "ability"; }

inline ItemKind kind_from(const std::string& s, const std::string& where) {
    if (s == "continuous") return ItemKind::continuous;
    if (s == "discrete") return ItemKind::discrete;
    throw ConfigError(where + ": unknown kind '" + s + "'");
}

inline Factor factor_from(const std::string& s, const std::string& where) {
    if (s == "slowness") return Factor::slowness;
    if (s == "ability") return Factor::ability;
    throw ConfigError(where + ": unknown factor '" + s + "'");
}

}  // namespace detail

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Schema

inline json schema_json(const std::vector<ColumnMeta>& cols) {
    json arr = json::array();
    for (const auto& c : cols) {
        json j{{"name", c.name}, {"item", c.item}, {"kind", detail::kind_name(c.kind)}, {"factor", detail::factor_name(c.factor)}};
        if (c.kind == ItemKind::discrete) {
            j["categories"] = c.categories;
            j["monotone"] = c.monotone;
            if (!c.category_order.empty()) j["category_order"] = c.category_order;
            if (!c.category_scores.empty()) j["scores"] = c.category_scores;
        } else {
            j["monotone"] = c.monotone;
            j["log_min"] = c.log_min;
            j["log_max"] = c.log_max;
        }
        arr.push_back(j);
    }
    return arr;
}

inline std::vector<ColumnMeta> schema_from(const json& arr) {
    if (!arr.is_array()) throw ConfigError("schema: expected an array of columns");
    std::vector<ColumnMeta> out;
    for (const auto& j : arr) {
        const std::string where = "schema column";
        detail::check_keys(j, {"name", "item", "kind", "factor", "categories", "monotone", "category_order", "scores", "log_min", "log_max"}, where);
        ColumnMeta c;
        c.name = detail::get_required<std::string>(j, "name", where);
        c.item = detail::get_or<std::string>(j, "item", c.name, where);
        c.kind = detail::kind_from(detail::get_required<std::string>(j, "kind", where), where);
        c.factor = detail::factor_from(
            detail::get_or<std::string>(j, "factor", c.kind == ItemKind::continuous ? "slowness" : "ability", where), where);
        c.categories = detail::get_or<int>(j, "categories", 0, where);
        c.monotone = detail::get_or<bool>(j, "monotone", false, where);
        c.category_order = detail::get_or<std::vector<int>>(j, "category_order", {}, where);
        c.category_scores = detail::get_or<std::vector<double>>(j, "scores", {}, where);
        c.log_min = detail::get_or<double>(j, "log_min", 0.0, where);
        c.log_max = detail::get_or<double>(j, "log_max", 1.0, where);
        out.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Models

inline json model_json(const FactorModel& m) {
    json items = json::array();
    for (const auto& it : m.items) {
        json j{{"name", it.name},
               {"kind", detail::kind_name(it.kind)},
               {"factor", detail::factor_name(it.factor)},
               {"monotone", it.monotone},
               {"x0", it.x0},
               {"alpha", detail::vector_json(it.alpha)},
               {"B", detail::matrix_json(it.B)}};
        if (it.kind == ItemKind::discrete) {
            j["categories"] = it.categories;
            if (!it.category_order.empty()) j["category_order"] = it.category_order;
        } else {
            j["y0"] = it.y0;
        }
        items.push_back(j);
    }
    return json{{"basis_size", m.basis->size()},
                {"quadrature_points", m.quad.size()},
                {"copula_free", m.copula_free},
                {"items", items},
                {"copula", detail::matrix_json(m.copula.xi)}};
}

inline FactorModel model_from(const json& j) {
    const std::string where = "model";
    detail::check_keys(j, {"basis_size", "quadrature_points", "copula_free", "items", "copula", "columns", "weights"}, where);
    FactorModel m;
    m.basis = std::make_shared<const BasisSet>(detail::get_required<int>(j, "basis_size", where));
    m.quad = gauss_legendre_unit(detail::get_required<int>(j, "quadrature_points", where));
    m.copula_free = detail::get_or<bool>(j, "copula_free", true, where);
    const int K = m.basis->size();
    for (const auto& ji : j.at("items")) {
        const std::string w = "model item";
        ItemModel it;
        it.name = detail::get_required<std::string>(ji, "name", w);
        it.kind = detail::kind_from(detail::get_required<std::string>(ji, "kind", w), w);
        it.factor = detail::factor_from(detail::get_required<std::string>(ji, "factor", w), w);
        it.monotone = detail::get_or<bool>(ji, "monotone", false, w);
        it.x0 = detail::get_or<double>(ji, "x0", 0.5, w);
        it.y0 = detail::get_or<double>(ji, "y0", 0.5, w);
        it.categories = detail::get_or<int>(ji, "categories", 0, w);
        it.category_order = detail::get_or<std::vector<int>>(ji, "category_order", {}, w);
        it.basis = m.basis;
        it.alpha = detail::vector_from(ji.at("alpha"), w + " '" + it.name + "' alpha");
        it.B = detail::matrix_from(ji.at("B"), w + " '" + it.name + "' B");
        if (it.alpha.size() != it.outcome_size() || it.B.rows() != it.outcome_size() || it.B.cols() != K) {
            throw ConfigError("model item '" + it.name + "': coefficient shapes do not match the basis");
        }
        m.items.push_back(std::move(it));
    }
    m.copula.basis = m.basis;
    m.copula.xi = detail::matrix_from(j.at("copula"), "model copula");
    if (m.copula.xi.rows() != K || m.copula.xi.cols() != K) throw ConfigError("model copula: expected a K x K matrix");
    return m;
}

inline json weights_json(const PenaltyWeights& w) {
    return json{{"continuous", w.continuous}, {"discrete", w.discrete}, {"copula", w.copula}};
}

inline PenaltyWeights weights_from(const json& j) {
    const std::string where = "weights";
    detail::check_keys(j, {"continuous", "discrete", "copula"}, where);
    PenaltyWeights w;
    w.continuous = detail::get_required<double>(j, "continuous", where);
    w.discrete = detail::get_required<double>(j, "discrete", where);
    w.copula = detail::get_required<double>(j, "copula", where);
    w.validate();
    return w;
}

inline json ensemble_json(const BootstrapEnsemble& ens) {
    json reps = json::array();
    for (const auto& r : ens.replicates) {
        json j{{"seed", r.seed}, {"indices", r.indices}};
        if (r.fit) {
            j["model"] = model_json(r.fit->model);
            j["iterations"] = r.fit->iterations;
            j["converged"] = r.fit->converged;
        } else {
            j["failure"] = r.failure;
        }
        reps.push_back(j);
    }
    return json{{"weights", weights_json(ens.weights)}, {"base", model_json(ens.base)}, {"replicates", reps}};
}

inline BootstrapEnsemble ensemble_from(const json& j) {
    BootstrapEnsemble ens;
    ens.weights = weights_from(j.at("weights"));
    ens.base = model_from(j.at("base"));
    for (const auto& jr : j.at("replicates")) {
        Replicate r;
        r.seed = jr.at("seed").get<std::uint64_t>();
        r.indices = jr.at("indices").get<std::vector<int>>();
        if (jr.contains("model")) {
            FitResult f;
            f.model = model_from(jr.at("model"));
            f.iterations = jr.value("iterations", 0);
            f.converged = jr.value("converged", false);
            r.fit = std::move(f);
        } else {
            r.failure = jr.value("failure", std::string("unknown failure"));
        }
        ens.replicates.push_back(std::move(r));
    }
    return ens;
}

// ---------------------------------------------------------------------------
// Generator specs

inline GeneratorSpec generator_from(const json& j) {
    const std::string where = "generator";
    detail::check_keys(j, {"latent", "items", "standard"}, where);
    GeneratorSpec g;
    if (j.contains("standard")) {
        const json& s = j.at("standard");
        detail::check_keys(s, {"items", "rho"}, where + ".standard");
        g = standard_generator(detail::get_required<int>(s, "items", where), detail::get_or<double>(s, "rho", 0.0, where));
    }
    if (j.contains("latent")) {
        const json& l = j.at("latent");
        const std::string lw = where + ".latent";
        detail::check_keys(l, {"kind", "rho", "components", "xi"}, lw);
        const auto kind = detail::get_required<std::string>(l, "kind", lw);
        g.latent = LatentSpec{};
        if (kind == "gaussian") {
            g.latent.kind = LatentSpec::Kind::gaussian;
            g.latent.rho = detail::get_or<double>(l, "rho", 0.0, lw);
        } else if (kind == "mixture") {
            g.latent.kind = LatentSpec::Kind::mixture;
            for (const auto& c : l.at("components")) {
                detail::check_keys(c, {"weight", "mean_slowness", "mean_ability", "sd_slowness", "sd_ability", "rho"}, lw);
                MixtureComponent mc;
                mc.weight = detail::get_or<double>(c, "weight", 1.0, lw);
                mc.mean_slowness = detail::get_or<double>(c, "mean_slowness", 0.0, lw);
                mc.mean_ability = detail::get_or<double>(c, "mean_ability", 0.0, lw);
                mc.sd_slowness = detail::get_or<double>(c, "sd_slowness", 1.0, lw);
                mc.sd_ability = detail::get_or<double>(c, "sd_ability", 1.0, lw);
                mc.rho = detail::get_or<double>(c, "rho", 0.0, lw);
                g.latent.components.push_back(mc);
            }
        } else if (kind == "copula") {
            g.latent.kind = LatentSpec::Kind::copula;
            g.latent.xi = detail::matrix_from(l.at("xi"), lw + ".xi");
        } else {
            throw ConfigError(lw + ": unknown kind '" + kind + "'");
        }
    }
    if (j.contains("items")) {
        g.items.clear();
        for (const auto& ji : j.at("items")) {
            const std::string w = where + ".items";
            detail::check_keys(ji, {"name", "a", "b", "testlet", "a2", "b2", "time_intercept", "time_slope", "time_sd",
                                    "shock_sd", "monotone"},
                               w);
            SimulatedItem it;
            it.name = detail::get_required<std::string>(ji, "name", w);
            it.a = detail::get_or(ji, "a", it.a, w);
            it.b = detail::get_or(ji, "b", it.b, w);
            it.testlet = detail::get_or(ji, "testlet", it.testlet, w);
            it.a2 = detail::get_or(ji, "a2", it.a2, w);
            it.b2 = detail::get_or(ji, "b2", it.b2, w);
            it.time_intercept = detail::get_or(ji, "time_intercept", it.time_intercept, w);
            it.time_slope = detail::get_or(ji, "time_slope", it.time_slope, w);
            it.time_sd = detail::get_or(ji, "time_sd", it.time_sd, w);
            it.shock_sd = detail::get_or(ji, "shock_sd", it.shock_sd, w);
            it.monotone = detail::get_or(ji, "monotone", it.monotone, w);
            g.items.push_back(it);
        }
    }
    g.validate();
    return g;
}

// ---------------------------------------------------------------------------
// Analysis configuration

inline AnalysisConfig config_from(const json& j) {
    AnalysisConfig c;
    detail::check_keys(j, {"seed", "threads", "model", "fit", "selection", "bootstrap", "analysis", "preprocess", "generator"},
                       "config");
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed, "config");
    c.threads = detail::get_or<int>(j, "threads", c.threads, "config");
    if (j.contains("model")) {
        const json& m = j.at("model");
        detail::check_keys(m, {"basis_size", "quadrature_points", "x0", "y0", "monotone"}, "model");
        c.model.basis_size = detail::get_or(m, "basis_size", c.model.basis_size, "model");
        c.model.quadrature_points = detail::get_or(m, "quadrature_points", c.model.quadrature_points, "model");
        c.model.x0 = detail::get_or(m, "x0", c.model.x0, "model");
        c.model.y0 = detail::get_or(m, "y0", c.model.y0, "model");
        c.monotone = detail::get_or(m, "monotone", c.monotone, "model");
    }
    if (j.contains("fit")) {
        const json& f = j.at("fit");
        detail::check_keys(f, {"em_tolerance", "max_em_iterations", "qp_tolerance", "inner_iterations", "warm_start"}, "fit");
        c.fit.em_tolerance = detail::get_or(f, "em_tolerance", c.fit.em_tolerance, "fit");
        c.fit.max_em_iterations = detail::get_or(f, "max_em_iterations", c.fit.max_em_iterations, "fit");
        c.fit.qp_tolerance = detail::get_or(f, "qp_tolerance", c.fit.qp_tolerance, "fit");
        c.fit.inner_iterations = detail::get_or(f, "inner_iterations", c.fit.inner_iterations, "fit");
        c.fit.warm_start = detail::get_or(f, "warm_start", c.fit.warm_start, "fit");
    }
    if (j.contains("selection")) {
        const json& s = j.at("selection");
        detail::check_keys(s, {"folds", "continuous", "discrete", "copula", "weights"}, "selection");
        c.folds = detail::get_or(s, "folds", c.folds, "selection");
        c.grid.continuous = detail::get_or(s, "continuous", c.grid.continuous, "selection");
        c.grid.discrete = detail::get_or(s, "discrete", c.grid.discrete, "selection");
        c.grid.copula = detail::get_or(s, "copula", c.grid.copula, "selection");
        if (s.contains("weights")) c.weights = weights_from(s.at("weights"));
    }
    if (j.contains("bootstrap")) {
        const json& b = j.at("bootstrap");
        detail::check_keys(b, {"replicates", "threshold", "level"}, "bootstrap");
        c.bootstrap = detail::get_or(b, "replicates", c.bootstrap, "bootstrap");
        c.threshold = detail::get_or(b, "threshold", c.threshold, "bootstrap");
        c.level = detail::get_or(b, "level", c.level, "bootstrap");
    }
    if (j.contains("analysis")) {
        const json& a = j.at("analysis");
        detail::check_keys(a, {"max_rounds", "removal", "score_groups", "grid_points", "compare_precision"}, "analysis");
        c.max_rounds = detail::get_or(a, "max_rounds", c.max_rounds, "analysis");
        const auto removal = detail::get_or<std::string>(a, "removal", "continuous", "analysis");
        if (removal == "continuous") {
            c.removal = RemovalPolicy::continuous;
        } else if (removal == "discrete") {
            c.removal = RemovalPolicy::discrete;
        } else {
            throw ConfigError("analysis.removal must be 'continuous' or 'discrete'");
        }
        c.score_groups = detail::get_or(a, "score_groups", c.score_groups, "analysis");
        c.grid_points = detail::get_or(a, "grid_points", c.grid_points, "analysis");
        c.compare_precision = detail::get_or(a, "compare_precision", c.compare_precision, "analysis");
    }
    if (j.contains("preprocess")) {
        const json& p = j.at("preprocess");
        detail::check_keys(p, {"trim", "items"}, "preprocess");
        c.preprocess.trim = detail::get_or(p, "trim", c.preprocess.trim, "preprocess");
        for (const auto& ji : p.value("items", json::array())) {
            const std::string w = "preprocess.items";
            detail::check_keys(ji, {"name", "responses", "times", "categories", "monotone"}, w);
            ItemSpec it;
            it.name = detail::get_required<std::string>(ji, "name", w);
            it.responses = detail::get_or<std::vector<std::string>>(ji, "responses", {}, w);
            it.times = detail::get_or<std::vector<std::string>>(ji, "times", {}, w);
            it.categories = detail::get_or(ji, "categories", it.categories, w);
            it.monotone = detail::get_or(ji, "monotone", it.monotone, w);
            c.preprocess.items.push_back(it);
        }
    }
    if (j.contains("generator")) c.generator = generator_from(j.at("generator"));
    c.validate();
    return c;
}

inline AnalysisConfig load_config(const std::string& path) { return config_from(read_json_file(path)); }

/// Marks the configured monotone items, matched by item id or column name.
inline void apply_monotone(Dataset& data, const std::vector<std::string>& names) {
    for (const auto& n : names) {
        bool found = false;
        for (auto& c : data.columns) {
            if (c.item == n || c.name == n) {
                c.monotone = true;
                found = true;
            }
        }
        if (!found) throw ConfigError("monotone item '" + n + "' matches no column");
    }
}

}  // namespace semifa
