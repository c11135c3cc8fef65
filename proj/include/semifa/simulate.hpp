#pragma once

// Ground-truth generator for recovery and diagnostic checks: latent pairs on
// the normal scale (slowness, ability), 2PL responses (optionally testlet
// pairs), linear-normal log10 response times, and an optional item-specific
// shock shared by an item's response and its time.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "semifa/dataset.hpp"
#include "semifa/errors.hpp"
#include "semifa/latent.hpp"
#include "semifa/numerics.hpp"

namespace semifa {

struct MixtureComponent {
    double weight = 1.0;
    double mean_slowness = 0.0;
    double mean_ability = 0.0;
    double sd_slowness = 1.0;
    double sd_ability = 1.0;
    double rho = 0.0;
};

struct LatentSpec {
    enum class Kind { gaussian, mixture, copula };
    Kind kind = Kind::gaussian;
    double rho = 0.0;                          ///< gaussian
    std::vector<MixtureComponent> components;  ///< mixture
    Matrix xi;                                 ///< copula coefficients (K x K), drawn by rejection

    void validate() const {
        switch (kind) {
            case Kind::gaussian:
                if (!(rho > -1.0 && rho < 1.0)) throw ConfigError("gaussian latent needs -1 < rho < 1");
                break;
            case Kind::mixture: {
                if (components.empty()) throw ConfigError("mixture latent needs at least one component");
                for (const auto& c : components) {
                    if (!(c.weight > 0.0) || !(c.sd_slowness > 0.0) || !(c.sd_ability > 0.0) ||
                        !(c.rho > -1.0 && c.rho < 1.0)) {
                        throw ConfigError("invalid mixture component");
                    }
                }
                break;
            }
            case Kind::copula:
                if (xi.rows() < 4 || xi.rows() != xi.cols() || xi.minCoeff() < 0.0) {
                    throw ConfigError("copula latent needs a nonnegative square Xi with at least 4 rows");
                }
                break;
        }
    }
};

struct SimulatedItem {
    std::string name;
    double a = 1.0;  ///< 2PL discrimination on the normal ability scale
    double b = 0.0;  ///< 2PL difficulty
    bool testlet = false;
    double a2 = 1.0;  ///< second testlet member
    double b2 = 0.0;
    double time_intercept = 1.5;  ///< log10 seconds at slowness 0
    double time_slope = 0.25;
    double time_sd = 0.15;
    /// SD of a per-record shock added to the response logit; the same standardized
    /// shock shifts log10 time by shock_sd * time_sd.
    double shock_sd = 0.0;
    bool monotone = false;
};

struct GeneratorSpec {
    LatentSpec latent;
    std::vector<SimulatedItem> items;

    void validate() const {
        latent.validate();
        if (items.empty()) throw ConfigError("generator needs at least one item");
        for (const auto& it : items) {
            if (it.name.empty()) throw ConfigError("generator items need names");
            if (!(it.time_sd > 0.0) || it.shock_sd < 0.0) throw ConfigError("item '" + it.name + "': invalid time or shock SD");
        }
    }
};

/// Raw table: numeric columns with a header, as read from or written to CSV.
struct RawTable {
    std::vector<std::string> header;
    Matrix values;

    [[nodiscard]] int column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw DataError("raw table has no column '" + name + "'");
        return static_cast<int>(it - header.begin());
    }
};

struct SimulationTruth {
    LatentSpec latent;
    std::vector<SimulatedItem> items;
    Matrix latent_draws;  ///< n x 2 normal-scale (slowness, ability)

    /// Marginal CDF of the ability factor on the normal scale.
    [[nodiscard]] double ability_cdf(double t) const {
        if (latent.kind != LatentSpec::Kind::mixture) return normal_cdf(t);
        double total = 0.0, s = 0.0;
        for (const auto& c : latent.components) {
            total += c.weight;
            s += c.weight * normal_cdf((t - c.mean_ability) / c.sd_ability);
        }
        return s / total;
    }

    /// Normal-scale ability at uniform-scale position u.
    [[nodiscard]] double ability_at(double u) const {
        if (latent.kind != LatentSpec::Kind::mixture) return normal_quantile(u);
        double lo = -40.0, hi = 40.0;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (ability_cdf(mid) < u ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
    }

    /// True probability of a correct response (dichotomous) at uniform-scale ability u.
    [[nodiscard]] double irf(int item, double u) const {
        const auto& it = items.at(static_cast<std::size_t>(item));
        return 1.0 / (1.0 + std::exp(-it.a * (ability_at(u) - it.b)));
    }
};

struct SimulationResult {
    Dataset data;      ///< processed: rescaled log10 times, then responses
    RawTable raw;      ///< seconds and 0/1 responses, one or two columns per item
    SimulationTruth truth;
};

namespace detail {

inline std::pair<double, double> draw_latent(const LatentSpec& spec, std::mt19937_64& rng) {
    std::normal_distribution<double> Z(0.0, 1.0);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    switch (spec.kind) {
        case LatentSpec::Kind::gaussian: {
            const double z1 = Z(rng);
            const double z2 = spec.rho * z1 + std::sqrt(1.0 - spec.rho * spec.rho) * Z(rng);
            return {z1, z2};
        }
        case LatentSpec::Kind::mixture: {
            double total = 0.0;
            for (const auto& c : spec.components) total += c.weight;
            double pick = U(rng) * total;
            const MixtureComponent* comp = &spec.components.back();
            for (const auto& c : spec.components) {
                if (pick < c.weight) {
                    comp = &c;
                    break;
                }
                pick -= c.weight;
            }
            const double z1 = Z(rng);
            const double z2 = comp->rho * z1 + std::sqrt(1.0 - comp->rho * comp->rho) * Z(rng);
            return {comp->mean_slowness + comp->sd_slowness * z1, comp->mean_ability + comp->sd_ability * z2};
        }
        case LatentSpec::Kind::copula: {
            const auto basis = std::make_shared<const BasisSet>(static_cast<int>(spec.xi.rows()));
            CopulaModel cop{basis, spec.xi};
            const double cmax = spec.xi.maxCoeff();
            for (;;) {
                const double u1 = U(rng), u2 = U(rng);
                if (U(rng) * cmax <= copula_density(cop, u1, u2)) {
                    const double eps = 1e-12;
                    return {normal_quantile(std::clamp(u1, eps, 1 - eps)), normal_quantile(std::clamp(u2, eps, 1 - eps))};
                }
            }
        }
    }
    return {0.0, 0.0};
}

}  // namespace detail

/// Draws n records. Processed times are min-max rescaled per column on the drawn
/// sample; responses are 0/1, or testlet categories 0..3.
inline SimulationResult simulate(const GeneratorSpec& spec, int n, std::uint64_t seed) {
    spec.validate();
    if (n < 2) throw ConfigError("simulate needs n >= 2");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> Z(0.0, 1.0);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const int m = static_cast<int>(spec.items.size());

    SimulationResult out;
    out.truth.latent = spec.latent;
    out.truth.items = spec.items;
    out.truth.latent_draws.resize(n, 2);
    Matrix log_time(n, m), response(n, m), first(n, m), second(n, m), split(n, m);
    for (int i = 0; i < n; ++i) {
        const auto [slow, abil] = detail::draw_latent(spec.latent, rng);
        out.truth.latent_draws(i, 0) = slow;
        out.truth.latent_draws(i, 1) = abil;
        for (int j = 0; j < m; ++j) {
            const auto& it = spec.items[static_cast<std::size_t>(j)];
            const double shock = Z(rng);
            const double time_noise = Z(rng);
            log_time(i, j) = it.time_intercept + it.time_slope * slow + it.time_sd * time_noise +
                             it.shock_sd * it.time_sd * shock;
            const double p1 = 1.0 / (1.0 + std::exp(-(it.a * (abil - it.b) + it.shock_sd * shock)));
            first(i, j) = U(rng) < p1 ? 1.0 : 0.0;
            if (it.testlet) {
                const double p2 = 1.0 / (1.0 + std::exp(-(it.a2 * (abil - it.b2) + it.shock_sd * shock)));
                second(i, j) = U(rng) < p2 ? 1.0 : 0.0;
                response(i, j) = first(i, j) + 2.0 * second(i, j);
            } else {
                second(i, j) = 0.0;
                response(i, j) = first(i, j);
            }
            split(i, j) = 0.2 + 0.6 * U(rng);
        }
    }

    // Raw table: per item its response column(s) then its time column(s).
    int raw_cols = 0;
    for (const auto& it : spec.items) raw_cols += it.testlet ? 4 : 2;
    out.raw.values.resize(n, raw_cols);
    int c = 0;
    for (int j = 0; j < m; ++j) {
        const auto& it = spec.items[static_cast<std::size_t>(j)];
        if (it.testlet) {
            out.raw.header.push_back(it.name + "_a");
            out.raw.header.push_back(it.name + "_b");
            out.raw.header.push_back(it.name + "_a_time");
            out.raw.header.push_back(it.name + "_b_time");
            for (int i = 0; i < n; ++i) {
                const double seconds = std::pow(10.0, log_time(i, j));
                out.raw.values(i, c) = first(i, j);
                out.raw.values(i, c + 1) = second(i, j);
                out.raw.values(i, c + 2) = split(i, j) * seconds;
                out.raw.values(i, c + 3) = seconds - split(i, j) * seconds;
            }
            c += 4;
        } else {
            out.raw.header.push_back(it.name);
            out.raw.header.push_back(it.name + "_time");
            for (int i = 0; i < n; ++i) {
                out.raw.values(i, c) = first(i, j);
                out.raw.values(i, c + 1) = std::pow(10.0, log_time(i, j));
            }
            c += 2;
        }
    }

    Dataset& d = out.data;
    d.values.resize(n, 2 * m);
    for (int j = 0; j < m; ++j) {
        const auto& it = spec.items[static_cast<std::size_t>(j)];
        ColumnMeta t;
        t.name = it.name + ".rt";
        t.item = it.name;
        t.kind = ItemKind::continuous;
        t.factor = Factor::slowness;
        t.log_min = log_time.col(j).minCoeff();
        t.log_max = log_time.col(j).maxCoeff();
        for (int i = 0; i < n; ++i) d.values(i, j) = std::clamp(t.from_log_scale(log_time(i, j)), 0.0, 1.0);
        d.columns.push_back(t);
    }
    for (int j = 0; j < m; ++j) {
        const auto& it = spec.items[static_cast<std::size_t>(j)];
        ColumnMeta r;
        r.name = it.name + ".resp";
        r.item = it.name;
        r.kind = ItemKind::discrete;
        r.factor = Factor::ability;
        r.categories = it.testlet ? 4 : 2;
        r.monotone = it.monotone && !it.testlet;
        if (it.testlet) r.category_scores = {0.0, 1.0, 1.0, 2.0};
        d.values.col(m + j) = response.col(j);
        d.columns.push_back(r);
    }
    d.validate();
    return out;
}

/// Standard recovery design: m dichotomous 2PL items with spread difficulties,
/// linear-normal log times, Gaussian latent correlation rho.
inline GeneratorSpec standard_generator(int items, double rho) {
    GeneratorSpec g;
    g.latent.kind = LatentSpec::Kind::gaussian;
    g.latent.rho = rho;
    for (int j = 0; j < items; ++j) {
        SimulatedItem it;
        it.name = "item" + std::to_string(j + 1);
        const double t = items > 1 ? static_cast<double>(j) / (items - 1) : 0.5;
        it.a = 1.2 + 0.6 * std::sin(3.0 * j);
        it.b = -1.2 + 2.4 * t;
        it.time_intercept = 1.4 + 0.3 * std::cos(2.0 * j);
        it.time_slope = 0.2;
        it.time_sd = 0.12;
        g.items.push_back(it);
    }
    return g;
}

}  // namespace semifa
