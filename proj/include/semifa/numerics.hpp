#pragma once

// Shared numerical substrate: clamped cubic B-spline bases on [0, 1],
// difference matrices for P-spline penalties and monotonicity constraints,
// and Gauss-Legendre rules rescaled to the unit interval.

#include <Eigen/Dense>

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "semifa/errors.hpp"

namespace semifa {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Cubic B-spline basis with clamped, equally spaced knots on [0, 1].
class BasisSet {
public:
    static constexpr int kDegree = 3;

    /// Nonzero window of the basis at a point: values[r] belongs to function first + r.
    struct Local {
        int first = 0;
        std::array<double, 4> values{};
    };

    explicit BasisSet(int size) : size_(size) {
        if (size < kDegree + 1) {
            throw ConfigError("B-spline basis needs at least 4 functions, got " + std::to_string(size));
        }
        const int interior = size - kDegree - 1;
        knots_.reserve(static_cast<std::size_t>(size + kDegree + 1));
        for (int i = 0; i <= kDegree; ++i) knots_.push_back(0.0);
        for (int i = 1; i <= interior; ++i) {
            knots_.push_back(static_cast<double>(i) / static_cast<double>(interior + 1));
        }
        for (int i = 0; i <= kDegree; ++i) knots_.push_back(1.0);

        integrals_.resize(size);
        for (int k = 0; k < size; ++k) {
            integrals_[k] = (knots_[k + kDegree + 1] - knots_[k]) / (kDegree + 1);
        }
    }

    [[nodiscard]] int size() const noexcept { return size_; }
    [[nodiscard]] int degree() const noexcept { return kDegree; }
    [[nodiscard]] const std::vector<double>& knots() const noexcept { return knots_; }

    /// kappa: integral of each basis function over [0, 1].
    [[nodiscard]] const Vector& integrals() const noexcept { return integrals_; }

    /// Cox-de Boor evaluation of the (at most) four nonzero functions at x.
    [[nodiscard]] Local local(double x) const {
        if (!(x >= 0.0 && x <= 1.0)) {
            throw DomainError("basis evaluation point outside [0, 1]: " + std::to_string(x));
        }
        const int span = find_span(x);
        Local out;
        out.first = span - kDegree;
        std::array<double, kDegree + 1> left{}, right{};
        auto& N = out.values;
        N[0] = 1.0;
        for (int j = 1; j <= kDegree; ++j) {
            left[j] = x - knots_[span + 1 - j];
            right[j] = knots_[span + j] - x;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                const double denom = right[r + 1] + left[j - r];
                const double temp = N[r] / denom;
                N[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            N[j] = saved;
        }
        return out;
    }

    /// Dense K-vector of basis values at x.
    [[nodiscard]] Vector operator()(double x) const {
        Vector v = Vector::Zero(size_);
        const Local l = local(x);
        for (int r = 0; r <= kDegree; ++r) v[l.first + r] = l.values[r];
        return v;
    }

    /// Rows are basis vectors at each point.
    [[nodiscard]] Matrix evaluate(std::span<const double> xs) const {
        Matrix out = Matrix::Zero(static_cast<Eigen::Index>(xs.size()), size_);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const Local l = local(xs[i]);
            for (int r = 0; r <= kDegree; ++r) out(static_cast<Eigen::Index>(i), l.first + r) = l.values[r];
        }
        return out;
    }

private:
    // Index s with t_s <= x < t_{s+1}; x == 1 goes to the last nonempty interval.
    [[nodiscard]] int find_span(double x) const {
        if (x >= 1.0) return size_ - 1;
        const auto it = std::upper_bound(knots_.begin() + kDegree, knots_.begin() + size_ + 1, x);
        return static_cast<int>(it - knots_.begin()) - 1;
    }

    int size_;
    std::vector<double> knots_;
    Vector integrals_;
};

/// Banded difference operator: order 1 stencil (1, -1), order 2 stencil (1, -2, 1).
/// Size (K - order) x K. The first-order operator on a single coefficient is the scalar 1.
inline Matrix difference_matrix(int order, int size) {
    if (order != 1 && order != 2) {
        throw ConfigError("difference order must be 1 or 2, got " + std::to_string(order));
    }
    if (order == 1 && size == 1) return Matrix::Ones(1, 1);
    if (size <= order) {
        throw ConfigError("difference matrix of order " + std::to_string(order) + " needs more than " +
                          std::to_string(order) + " columns, got " + std::to_string(size));
    }
    Matrix D = Matrix::Zero(size - order, size);
    for (int r = 0; r < size - order; ++r) {
        if (order == 1) {
            D(r, r) = 1.0;
            D(r, r + 1) = -1.0;
        } else {
            D(r, r) = 1.0;
            D(r, r + 1) = -2.0;
            D(r, r + 2) = 1.0;
        }
    }
    return D;
}

/// One-dimensional quadrature rule on [0, 1].
struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;

    [[nodiscard]] int size() const noexcept { return static_cast<int>(nodes.size()); }

    template <class F>
    [[nodiscard]] double integrate(F&& f) const {
        double s = 0.0;
        for (std::size_t q = 0; q < nodes.size(); ++q) s += weights[q] * f(nodes[q]);
        return s;
    }
};

/// Gauss-Legendre rule with Q nodes, mapped from [-1, 1] to [0, 1].
inline QuadratureRule gauss_legendre_unit(int points) {
    if (points < 1) throw ConfigError("quadrature needs at least one node");
    const int n = points;
    // Returns (P_n(z), P_n'(z)) by the three-term recurrence.
    const auto legendre = [n](double z) {
        double p0 = 1.0, p1 = z;
        for (int k = 2; k <= n; ++k) {
            const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        return std::pair{p1, n * (z * p1 - p0) / (z * z - 1.0)};
    };
    std::vector<double> x(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        for (int it = 0; it < 100; ++it) {
            const auto [p, dp] = legendre(z);
            const double dz = p / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        const double dp = legendre(z).second;
        const double weight = 1.0 / ((1.0 - z * z) * dp * dp);
        // z is the i-th largest root; mirror it so the rule is exactly symmetric.
        const auto lo = static_cast<std::size_t>(i);
        const auto hi = static_cast<std::size_t>(n - 1 - i);
        x[lo] = 0.5 * (1.0 - z);
        x[hi] = 0.5 * (1.0 + z);
        w[lo] = w[hi] = weight;
    }
    if (n % 2 == 1) x[static_cast<std::size_t>(n / 2)] = 0.5;
    return QuadratureRule{std::move(x), std::move(w)};
}

/// Tensor-product rule on the unit square. Node (a, b) has coordinates
/// (first.nodes[a], second.nodes[b]) and weight first.weights[a] * second.weights[b].
struct TensorRule {
    QuadratureRule first;
    QuadratureRule second;

    [[nodiscard]] int size() const noexcept { return first.size() * second.size(); }
    [[nodiscard]] double weight(int a, int b) const {
        return first.weights[static_cast<std::size_t>(a)] * second.weights[static_cast<std::size_t>(b)];
    }

    template <class F>
    [[nodiscard]] double integrate(F&& f) const {
        double s = 0.0;
        for (int a = 0; a < first.size(); ++a) {
            for (int b = 0; b < second.size(); ++b) {
                s += weight(a, b) * f(first.nodes[static_cast<std::size_t>(a)], second.nodes[static_cast<std::size_t>(b)]);
            }
        }
        return s;
    }
};

inline TensorRule tensor_rule(const QuadratureRule& first, const QuadratureRule& second) {
    return TensorRule{first, second};
}

// Standard normal helpers.
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_quantile(double p) {
    static const boost::math::normal_distribution<double> standard;
    return boost::math::quantile(standard, p);
}

/// Pairwise (tree) summation; result depends only on the order of the input.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t mid = v.size() / 2;
    return pairwise_sum(v.first(mid)) + pairwise_sum(v.subspan(mid));
}

/// Log-sum-exp of a vector with a max shift.
inline double log_sum_exp(const Vector& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

}  // namespace semifa
