#pragma once

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <utility>

#include "mixinf/errors.hpp"

namespace mixinf {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double normal_pdf(double x) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ArgumentError("normal_quantile: probability must lie in (0,1)");
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// Parameters of a quantile lookup. `noncentrality` is ignored for the range law.
struct QuantileRequest {
    int df = 1;
    double noncentrality = 0.0;
    double prob = 0.95;

    void validate() const {
        if (df < 1) throw ArgumentError("QuantileRequest: df must be >= 1");
        if (!(noncentrality >= 0.0) || !std::isfinite(noncentrality))
            throw ArgumentError("QuantileRequest: noncentrality must be finite and >= 0");
        if (!(prob > 0.0 && prob < 1.0)) throw ArgumentError("QuantileRequest: prob must lie in (0,1)");
    }
};

namespace detail {

inline void check_prob(double p, const char* who) {
    if (!(p > 0.0 && p < 1.0)) throw ArgumentError(std::string(who) + ": probability must lie in (0,1)");
}

/// Find x in [lo, hi) with f(x) = 0 for increasing f; expands hi geometrically.
template <class F>
double invert_increasing(F f, double lo, double hi, int bits) {
    int guard = 0;
    while (f(hi) < 0.0) {
        lo = hi;
        hi *= 2.0;
        if (++guard > 200) throw NumericError("quantile bracket expansion failed");
    }
    if (f(lo) >= 0.0) return lo;
    boost::math::tools::eps_tolerance<double> tol(bits);
    std::uintmax_t iters = 200;
    const auto r = boost::math::tools::toms748_solve(f, lo, hi, tol, iters);
    return 0.5 * (r.first + r.second);
}

}  // namespace detail

inline double chi2_cdf(double x, int df) {
    if (df < 1) throw ArgumentError("chi2_cdf: df must be >= 1");
    if (x <= 0.0) return 0.0;
    return boost::math::gamma_p(0.5 * df, 0.5 * x);
}

/// Non-central chi-square CDF as a Poisson(λ/2) mixture of central CDFs.
/// Summation starts at the Poisson mode and walks outwards until the neglected
/// Poisson mass is below `trunc`.
inline double noncentral_chi2_cdf(double x, int df, double lambda, double trunc = 1e-14,
                                  long max_terms = 20'000'000) {
    if (df < 1) throw ArgumentError("noncentral_chi2_cdf: df must be >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
        throw ArgumentError("noncentral_chi2_cdf: noncentrality must be finite and >= 0");
    if (lambda == 0.0) return chi2_cdf(x, df);
    if (x <= 0.0) return 0.0;

    const double mu = 0.5 * lambda;
    const double hx = 0.5 * x;
    const long mode = static_cast<long>(std::floor(mu));
    auto log_weight = [&](long j) { return -mu + j * std::log(mu) - std::lgamma(static_cast<double>(j) + 1.0); };

    double sum = 0.0, mass = 0.0;
    long terms = 0;
    // Backwards from the mode: weights decrease geometrically once below it.
    for (long j = mode; j >= 0; --j) {
        const double w = std::exp(log_weight(j));
        sum += w * boost::math::gamma_p(0.5 * df + j, hx);
        mass += w;
        if (++terms > max_terms) break;
        if (w < trunc * 1e-3 && j < mode) break;
    }
    // Forwards until the Poisson mass is exhausted.
    for (long j = mode + 1; 1.0 - mass > trunc; ++j) {
        const double w = std::exp(log_weight(j));
        const double gp = boost::math::gamma_p(0.5 * df + j, hx);
        sum += w * gp;
        mass += w;
        if (++terms > max_terms) {
            throw NumericError("noncentral_chi2_cdf: series did not converge (df=" + std::to_string(df) +
                               ", lambda=" + std::to_string(lambda) + ", x=" + std::to_string(x) +
                               ", terms=" + std::to_string(terms) + ", missing mass=" +
                               std::to_string(1.0 - mass) + ")");
        }
        // Remaining terms are bounded by their Poisson mass times gp, and gp decreases in j.
        if (gp < trunc && j > mode) break;
        if (w == 0.0 && j > mode + 10) break;
    }
    if (terms > max_terms)
        throw NumericError("noncentral_chi2_cdf: series did not converge (lambda=" + std::to_string(lambda) + ")");
    return std::min(1.0, std::max(0.0, sum));
}

inline double chi2_quantile(int df, double prob) {
    if (df < 1) throw ArgumentError("chi2_quantile: df must be >= 1");
    detail::check_prob(prob, "chi2_quantile");
    return 2.0 * boost::math::gamma_p_inv(0.5 * df, prob);
}

inline double noncentral_chi2_quantile(int df, double lambda, double prob) {
    QuantileRequest{df, lambda, prob}.validate();
    if (lambda == 0.0) return chi2_quantile(df, prob);
    const double start = df + lambda;
    return detail::invert_increasing(
        [&](double q) { return noncentral_chi2_cdf(q, df, lambda) - prob; }, 0.0, start + 1.0, 50);
}

inline double noncentral_chi2_quantile(const QuantileRequest& r) {
    return noncentral_chi2_quantile(r.df, r.noncentrality, r.prob);
}

/// CDF of the range of m iid standard normals.
inline double range_cdf(double q, int m) {
    if (m < 2) throw ArgumentError("range_cdf: m must be >= 2");
    if (q <= 0.0) return 0.0;
    auto f = [&](double z) {
        const double d = normal_cdf(z) - normal_cdf(z - q);
        return normal_pdf(z) * std::pow(d, m - 1);
    };
    double err = 0.0;
    const double v = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, -9.0, 9.0, 20, 1e-13, &err);
    return std::min(1.0, std::max(0.0, m * v));
}

namespace detail {
struct RangeCache {
    std::mutex mu;
    std::map<std::pair<int, double>, double> values;
};
inline RangeCache& range_cache() {
    static RangeCache c;
    return c;
}
}  // namespace detail

inline double range_quantile(int m, double prob) {
    if (m < 2) throw ArgumentError("range_quantile: m must be >= 2");
    detail::check_prob(prob, "range_quantile");
    auto& cache = detail::range_cache();
    {
        std::lock_guard<std::mutex> lock(cache.mu);
        const auto it = cache.values.find({m, prob});
        if (it != cache.values.end()) return it->second;
    }
    const double q = detail::invert_increasing([&](double x) { return range_cdf(x, m) - prob; }, 0.0, 8.0, 45);
    std::lock_guard<std::mutex> lock(cache.mu);
    cache.values.emplace(std::make_pair(m, prob), q);
    return q;
}

}  // namespace mixinf
