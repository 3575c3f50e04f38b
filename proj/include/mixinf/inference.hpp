#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mixinf/covariance.hpp"
#include "mixinf/distributions.hpp"
#include "mixinf/errors.hpp"
#include "mixinf/numerics.hpp"

namespace mixinf {

struct EllipsoidTest {
    double statistic = 0.0;
    double threshold = 0.0;
    Index df = 0;
    double noncentrality = 0.0;
    double p_value = 1.0;
    bool reject = false;
    Law law = Law::Marginal;
};

namespace detail {
inline void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("alpha must lie in (0,1)");
}

inline EllipsoidTest finish_test(double stat, Index df, double lambda, double alpha, Law law) {
    EllipsoidTest t;
    t.statistic = stat;
    t.df = df;
    t.law = law;
    t.noncentrality = law == Law::Conditional ? lambda : 0.0;
    const int k = static_cast<int>(df);
    t.threshold = noncentral_chi2_quantile(k, t.noncentrality, 1.0 - alpha);
    t.p_value = 1.0 - noncentral_chi2_cdf(stat, k, t.noncentrality);
    t.reject = stat > t.threshold;
    return t;
}
}  // namespace detail

/// Threshold of the confidence ellipsoid: central or non-central chi-square quantile at 1 - alpha.
inline double ellipsoid_threshold(Index df, double lambda, double alpha) {
    detail::check_alpha(alpha);
    return noncentral_chi2_quantile(static_cast<int>(df), lambda, 1.0 - alpha);
}

inline EllipsoidTest ellipsoid_contains(const VectorXd& mu_hat, const CovEstimate& cov, const VectorXd& mu0,
                                        double alpha) {
    detail::check_alpha(alpha);
    if (mu_hat.size() != cov.m() || mu0.size() != cov.m())
        throw ArgumentError("ellipsoid_contains: dimension mismatch");
    if (cov.law == Law::Conditional && !cov.lambda_hat)
        throw ArgumentError("ellipsoid_contains: conditional estimate lacks a non-centrality estimate");
    const SymmetricRoot root(cov.sigma);
    if (!root.positive_definite()) throw DegeneracyError("ellipsoid_contains: covariance is not positive definite");
    const double stat = root.inv_quad(mu_hat - mu0);
    return detail::finish_test(stat, cov.m(), cov.lambda_hat.value_or(0.0), alpha, cov.law);
}

/// H0: L(mu - a) = 0.
struct LinearHypothesis {
    MatrixXd L;
    VectorXd a;

    Index u() const { return L.rows(); }

    void validate(Index m) const {
        if (L.cols() != m || a.size() != m) throw ArgumentError("LinearHypothesis: dimensions do not match m");
        if (L.rows() < 1 || L.rows() > m) throw RankError("LinearHypothesis: L must have between 1 and m rows");
        if (!L.allFinite() || !a.allFinite()) throw ArgumentError("LinearHypothesis: non-finite entries");
        Eigen::JacobiSVD<MatrixXd> svd(L);
        const VectorXd sv = svd.singularValues();
        if (!(sv(sv.size() - 1) > 1e-10 * sv(0)))
            throw RankError("LinearHypothesis: L is rank deficient (rank < " + std::to_string(L.rows()) + ")");
    }
};

/// Rows e_j - mean over the subset for all but the last subset member.
inline MatrixXd within_subset_contrasts(Index m, const std::vector<Index>& subset) {
    const Index w = static_cast<Index>(subset.size());
    if (w < 2) throw ArgumentError("within_subset_contrasts: subset needs at least two clusters");
    MatrixXd L = MatrixXd::Zero(w - 1, m);
    for (Index r = 0; r < w - 1; ++r) {
        for (Index j : subset) {
            if (j < 0 || j >= m) throw ArgumentError("within_subset_contrasts: index out of range");
            L(r, j) -= 1.0 / static_cast<double>(w);
        }
        L(r, subset[static_cast<std::size_t>(r)]) += 1.0;
    }
    return L;
}

inline double linear_statistic(const LinearHypothesis& hyp, const VectorXd& mu_hat, const MatrixXd& sigma) {
    const MatrixXd lsl = hyp.L * sigma * hyp.L.transpose();
    const SymmetricRoot root(0.5 * (lsl + lsl.transpose()));
    if (!root.positive_definite()) throw DegeneracyError("test_linear: L Sigma L' is not positive definite");
    return root.inv_quad(hyp.L * (mu_hat - hyp.a));
}

/// Conditional tests need the non-centrality inputs of the fitted dataset.
inline EllipsoidTest test_linear(const LinearHypothesis& hyp, const VectorXd& mu_hat, const CovEstimate& cov,
                                 double alpha, const NoncentralityInputs* inputs = nullptr) {
    detail::check_alpha(alpha);
    hyp.validate(cov.m());
    if (mu_hat.size() != cov.m()) throw ArgumentError("test_linear: dimension mismatch");
    double lambda = 0.0;
    if (cov.law == Law::Conditional) {
        if (!inputs) throw ArgumentError("test_linear: conditional tests require the full dataset");
        lambda = lambda_hat_linear(hyp.L, cov.sigma, *inputs);
    }
    return detail::finish_test(linear_statistic(hyp, mu_hat, cov.sigma), hyp.u(), lambda, alpha, cov.law);
}

// ---------------------------------------------------------------------------
// Tukey-type comparisons.
// ---------------------------------------------------------------------------

struct TukeyContrast {
    Index i = 0, j = 0;
    double difference = 0.0;  // mu_hat_i - mu_hat_j
    double c_plus = 0.0;
    double statistic = 0.0;
    double p_value = 1.0;
    bool reject = false;
};

struct TukeyResult {
    std::vector<TukeyContrast> contrasts;
    Index m_prime = 2;
    double threshold = 0.0;
    bool m_prime_floored = false;
    std::vector<std::string> warnings;
};

/// Sum of the positive entries of c' S^{1/2}, with the simple contrast oriented from the smaller index.
inline double c_plus_pair(const MatrixXd& root, Index i, Index j) {
    const Index lo = std::min(i, j), hi = std::max(i, j);
    const Eigen::RowVectorXd row = root.row(lo) - root.row(hi);
    return row.cwiseMax(0.0).sum();
}

inline double c_plus(const MatrixXd& root, const VectorXd& c) {
    return (c.transpose() * root).cwiseMax(0.0).sum();
}

inline Index tukey_m_prime(Index m, Index w, bool* floored = nullptr) {
    const Index raw = m - w + 1;
    if (floored) *floored = raw < 2;
    return std::max<Index>(2, raw);
}

inline TukeyResult tukey_all_pairs(const VectorXd& mu_hat, const CovEstimate& cov, const std::vector<Index>& subset,
                                   double alpha, bool p_values = true) {
    detail::check_alpha(alpha);
    const Index m = mu_hat.size(), w = static_cast<Index>(subset.size());
    if (cov.m() != m) throw ArgumentError("tukey_all_pairs: dimension mismatch");
    if (w < 2) throw ArgumentError("tukey_all_pairs: subset needs at least two clusters");
    for (Index k : subset)
        if (k < 0 || k >= m) throw ArgumentError("tukey_all_pairs: subset index out of range");
    TukeyResult out;
    out.m_prime = tukey_m_prime(m, w, &out.m_prime_floored);
    if (out.m_prime_floored)
        out.warnings.push_back("m' = m - w + 1 < 2 floored at 2; the classical Tukey procedure applies when w = m");
    out.threshold = range_quantile(static_cast<int>(out.m_prime), 1.0 - alpha);
    const MatrixXd root = SymmetricRoot(cov.sigma).sqrt();
    for (Index a = 0; a < w; ++a) {
        for (Index b = a + 1; b < w; ++b) {
            TukeyContrast c;
            c.i = subset[static_cast<std::size_t>(a)];
            c.j = subset[static_cast<std::size_t>(b)];
            c.difference = mu_hat(c.i) - mu_hat(c.j);
            c.c_plus = c_plus_pair(root, c.i, c.j);
            if (!(c.c_plus > 0.0)) throw DegeneracyError("tukey_all_pairs: zero standardizer for a contrast");
            c.statistic = std::abs(c.difference) / c.c_plus;
            c.reject = c.statistic > out.threshold;
            c.p_value = p_values ? 1.0 - range_cdf(c.statistic, static_cast<int>(out.m_prime)) : std::nan("");
            out.contrasts.push_back(c);
        }
    }
    return out;
}

struct TukeyInterval {
    double center = 0.0, lower = 0.0, upper = 0.0, c_plus = 0.0, quantile = 0.0;
};

inline TukeyInterval tukey_interval(const VectorXd& c, const VectorXd& mu_hat, const CovEstimate& cov, double alpha,
                                    Index m_prime, double eta) {
    detail::check_alpha(alpha);
    if (c.size() != mu_hat.size() || c.size() != cov.m()) throw ArgumentError("tukey_interval: dimension mismatch");
    if (!(eta >= 0.0)) throw ArgumentError("tukey_interval: eta must be >= 0");
    TukeyInterval out;
    out.center = c.dot(mu_hat);
    out.c_plus = c_plus(SymmetricRoot(cov.sigma).sqrt(), c);
    out.quantile = range_quantile(static_cast<int>(m_prime), 1.0 - alpha);
    const double half = out.c_plus * (eta + out.quantile);
    out.lower = out.center - half;
    out.upper = out.center + half;
    return out;
}

// ---------------------------------------------------------------------------
// Projection onto the acceptance ellipsoid.
// ---------------------------------------------------------------------------

struct ProjectionResult {
    bool adjusted = false;
    VectorXd t, t_star;                // L(mu_hat - a) before and after
    VectorXd contrast_adjustment;      // t - t_star
    VectorXd coordinate_delta;         // length m, nonzero on designated coordinates
    VectorXd mu_star;                  // mu_hat + coordinate_delta
    VectorXd a_star;                   // a - coordinate_delta
    double total = 0.0;
    double statistic_before = 0.0, statistic_after = 0.0, threshold = 0.0;
    std::optional<std::string> attribution_error;
};

/// Radial shrinkage of t = L(mu_hat - a) onto the boundary, attributed to one coordinate per row.
inline ProjectionResult project_onto_ellipsoid(const LinearHypothesis& hyp, const VectorXd& mu_hat,
                                               const CovEstimate& cov, const EllipsoidTest& test,
                                               const std::vector<Index>& designated) {
    hyp.validate(cov.m());
    ProjectionResult out;
    const Index m = cov.m(), u = hyp.u();
    out.t = hyp.L * (mu_hat - hyp.a);
    out.statistic_before = test.statistic;
    out.threshold = test.threshold;
    out.coordinate_delta = VectorXd::Zero(m);
    if (!(test.statistic > test.threshold)) {
        out.t_star = out.t;
        out.contrast_adjustment = VectorXd::Zero(u);
        out.mu_star = mu_hat;
        out.a_star = hyp.a;
        out.statistic_after = test.statistic;
        return out;
    }
    out.adjusted = true;
    out.t_star = out.t * std::sqrt(test.threshold / test.statistic);
    out.contrast_adjustment = out.t - out.t_star;
    const MatrixXd lsl = hyp.L * cov.sigma * hyp.L.transpose();
    out.statistic_after = SymmetricRoot(0.5 * (lsl + lsl.transpose())).inv_quad(out.t_star);
    out.mu_star = mu_hat;
    out.a_star = hyp.a;
    if (static_cast<Index>(designated.size()) != u) {
        out.attribution_error = "one designated coordinate per contrast row is required";
        return out;
    }
    MatrixXd lj(u, u);
    for (Index r = 0; r < u; ++r) {
        const Index j = designated[static_cast<std::size_t>(r)];
        if (j < 0 || j >= m) {
            out.attribution_error = "designated coordinate out of range";
            return out;
        }
        lj.col(r) = hyp.L.col(j);
    }
    Eigen::FullPivLU<MatrixXd> lu(lj);
    if (!lu.isInvertible()) {
        out.attribution_error = "designated coordinates do not identify the contrasts";
        return out;
    }
    const VectorXd dj = lu.solve(out.t_star - out.t);
    for (Index r = 0; r < u; ++r) out.coordinate_delta(designated[static_cast<std::size_t>(r)]) += dj(r);
    out.mu_star = mu_hat + out.coordinate_delta;
    out.a_star = hyp.a - out.coordinate_delta;
    out.total = out.coordinate_delta.sum();
    return out;
}

// ---------------------------------------------------------------------------
// Cluster-wise marginal intervals under the conditional law.
// ---------------------------------------------------------------------------

struct ClusterwiseCoverage {
    double bias = 0.0;     // E(mu_tilde_i - mu_i | v)
    double sd_cond = 0.0;
    double sd_marg = 0.0;
    double coverage = 0.0;
};

/// Exact coverage of mu_tilde_i +- z sd_marg given v (known delta): Phi(rho z - bias/s) - Phi(-rho z - bias/s).
inline ClusterwiseCoverage clusterwise_coverage_shift(double bias, double var_cond, double var_marg, double alpha) {
    detail::check_alpha(alpha);
    if (!(var_cond > 0.0)) throw DegeneracyError("clusterwise_coverage_shift: zero conditional variance");
    ClusterwiseCoverage out;
    out.bias = bias;
    out.sd_cond = std::sqrt(var_cond);
    out.sd_marg = std::sqrt(std::max(0.0, var_marg));
    const double z = normal_quantile(1.0 - alpha / 2.0);
    const double rho = out.sd_marg / out.sd_cond;
    const double shift = bias / out.sd_cond;
    out.coverage = normal_cdf(rho * z - shift) - normal_cdf(-rho * z - shift);
    return out;
}

/// All clusters at once; zv is the stacked Z v of the realized random effects.
inline std::vector<ClusterwiseCoverage> clusterwise_coverage(const LmmDataset& data, const ModelState& st,
                                                             const MixedTargets& t, const VectorXd& zv, double alpha) {
    const AMatrix a = a_matrix(data, st, t);
    const VectorXd bias = a.A * zv;
    const MatrixXd cond = l1(st) + l2(st);
    const MatrixXd marg = k1(data, st, t) + k2(st);
    std::vector<ClusterwiseCoverage> out;
    for (Index i = 0; i < data.m(); ++i)
        out.push_back(clusterwise_coverage_shift(bias(i), cond(i, i), marg(i, i), alpha));
    return out;
}

inline ClusterwiseCoverage clusterwise_coverage_shift(Index i, const LmmDataset& data, const ModelState& st,
                                                      const MixedTargets& t, const VectorXd& zv, double alpha) {
    if (i < 0 || i >= data.m()) throw ArgumentError("clusterwise_coverage_shift: index out of range");
    return clusterwise_coverage(data, st, t, zv, alpha)[static_cast<std::size_t>(i)];
}

}  // namespace mixinf
