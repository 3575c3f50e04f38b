#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "mixinf/covariance.hpp"
#include "mixinf/distributions.hpp"
#include "mixinf/errors.hpp"
#include "mixinf/estimation.hpp"
#include "mixinf/inference.hpp"
#include "mixinf/lmm.hpp"
#include "mixinf/prediction.hpp"

namespace mixinf {

// ---------------------------------------------------------------------------
// Random streams keyed by (seed, rep, role).
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

enum class StreamRole : std::uint64_t { Population = 1, Errors = 2, RandomEffects = 3, Pilot = 4 };

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t rep, StreamRole role) {
    std::uint64_t k = splitmix64(seed);
    k = splitmix64(k ^ rep);
    k = splitmix64(k ^ static_cast<std::uint64_t>(role));
    return std::mt19937_64(k);
}

// ---------------------------------------------------------------------------
// Configuration and population.
// ---------------------------------------------------------------------------

struct SimConfig {
    Index m = 100;
    std::vector<Index> n_i;  // one entry per cluster; see balanced()/split()
    double sigma_v2 = 8.0;
    double sigma_e2 = 2.0;
    int reps = 5000;
    double alpha = 0.05;
    std::optional<std::uint64_t> seed;
    Law law = Law::Conditional;
    EstimationMethod estimator = EstimationMethod::Reml;  // Known skips the estimated columns
    bool oracle_lambda = true;
    int threads = 1;
    double beta_low = 0.0, beta_high = 1.0;
    bool record_errors = false;  // keep mu_hat - mu and the covariance diagonal per rep
    std::optional<VectorXd> known_delta;  // overrides the delta used by the known-delta columns
    int pilot_reps = 0;                   // REML fits used to estimate E(delta_hat | v); 0 means reps

    static std::vector<Index> balanced(Index m, Index n) { return std::vector<Index>(static_cast<std::size_t>(m), n); }

    /// First half of the clusters with n_a observations, the rest with n_b.
    static std::vector<Index> split(Index m, Index n_a, Index n_b) {
        std::vector<Index> out(static_cast<std::size_t>(m), n_b);
        for (Index i = 0; i < m / 2; ++i) out[static_cast<std::size_t>(i)] = n_a;
        return out;
    }

    VectorXd delta() const {
        VectorXd d(2);
        d << sigma_v2, sigma_e2;
        return d;
    }

    void validate() const {
        if (!seed) throw ArgumentError("SimConfig: a seed is required");
        if (m < 2) throw ArgumentError("SimConfig: m must be >= 2");
        if (static_cast<Index>(n_i.size()) != m) throw ArgumentError("SimConfig: n_i must list one size per cluster");
        for (Index n : n_i)
            if (n < 1) throw ArgumentError("SimConfig: cluster sizes must be >= 1");
        if (reps < 1) throw ArgumentError("SimConfig: reps must be >= 1");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ArgumentError("SimConfig: alpha must lie in (0,1)");
        if (!(sigma_v2 >= 0.0) || !(sigma_e2 > 0.0)) throw ArgumentError("SimConfig: invalid variance components");
        if (pilot_reps < 0) throw ArgumentError("SimConfig: pilot_reps must be >= 0");
        if (threads < 1) throw ArgumentError("SimConfig: threads must be >= 1");
        if (!(beta_high >= beta_low)) throw ArgumentError("SimConfig: invalid beta range");
        if (known_delta && (known_delta->size() != 2 || !((*known_delta)(1) > 0.0) || !((*known_delta)(0) >= 0.0)))
            throw ArgumentError("SimConfig: known_delta must be (sigma_v2 >= 0, sigma_e2 > 0)");
        if (estimator == EstimationMethod::Henderson3)
            throw ArgumentError(
                "SimConfig: Henderson III needs rank(X, Z) = p + m, which the intercept-only design violates");
    }
};

/// Fixed design of the experiments: NER with an intercept column and cluster-mean targets.
struct Population {
    double beta = 0.0;
    VectorXd v;       // length m
    LmmDataset design;  // y = 0 placeholder
    MixedTargets targets;
    NerStructure structure;

    VectorXd zv(const VectorXd& vv) const {
        VectorXd out(design.n());
        for (Index i = 0; i < design.m(); ++i) out.segment(design.offset(i), design.block(i).size()).setConstant(vv(i));
        return out;
    }
    VectorXd mu(const VectorXd& vv) const {
        VectorXd b(1);
        b << beta;
        return targets.evaluate(b, vv);
    }
};

inline LmmDataset intercept_design(const std::vector<Index>& n_i) {
    std::vector<ClusterBlock> blocks;
    for (std::size_t i = 0; i < n_i.size(); ++i) {
        const Index n = n_i[i];
        blocks.push_back({"c" + std::to_string(i + 1), VectorXd::Zero(n), MatrixXd::Ones(n, 1), MatrixXd::Ones(n, 1)});
    }
    return LmmDataset(std::move(blocks), {"intercept"});
}

inline VectorXd draw_normal(std::mt19937_64& rng, Index n, double sd) {
    std::normal_distribution<double> nd(0.0, 1.0);
    VectorXd out(n);
    for (Index k = 0; k < n; ++k) out(k) = sd * nd(rng);
    return out;
}

inline Population generate_population(const SimConfig& cfg) {
    cfg.validate();
    Population pop;
    auto rng = stream_rng(*cfg.seed, 0, StreamRole::Population);
    std::uniform_real_distribution<double> ud(cfg.beta_low, cfg.beta_high);
    pop.beta = cfg.beta_high > cfg.beta_low ? ud(rng) : cfg.beta_low;
    pop.v = draw_normal(rng, cfg.m, std::sqrt(cfg.sigma_v2));
    pop.design = intercept_design(cfg.n_i);
    pop.targets = cluster_mean_targets(pop.design);
    return pop;
}

/// Condition C1 diagnostic: |sum v_i| / sqrt(m).
inline double c1_statistic(const VectorXd& v) { return std::abs(v.sum()) / std::sqrt(static_cast<double>(v.size())); }

/// Random effects behind replication `rep`: the population draw under the conditional law, a fresh draw otherwise.
inline VectorXd rep_effects(const SimConfig& cfg, const Population& pop, int rep) {
    if (cfg.law == Law::Conditional) return pop.v;
    auto rv = stream_rng(*cfg.seed, static_cast<std::uint64_t>(rep), StreamRole::RandomEffects);
    return draw_normal(rv, cfg.m, std::sqrt(cfg.sigma_v2));
}

// ---------------------------------------------------------------------------
// Deterministic parallel loop over reps.
// ---------------------------------------------------------------------------

template <class Fn>
void parallel_reps(int reps, int threads, Fn&& fn) {
    if (threads <= 1 || reps <= 1) {
        for (int r = 0; r < reps; ++r) fn(r);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (int r = next++; r < reps; r = next++) {
                try {
                    fn(r);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Shared pieces.
// ---------------------------------------------------------------------------

namespace detail {

/// Inverse, log-determinant and threshold of one confidence ellipsoid.
struct Ellipsoid {
    MatrixXd inv;
    double logdet = 0.0;
    double threshold = 0.0;

    Ellipsoid() = default;
    Ellipsoid(const MatrixXd& sigma, double thr) : threshold(thr) {
        const SymmetricRoot root(sigma);
        if (!root.positive_definite()) throw DegeneracyError("ellipsoid covariance is not positive definite");
        inv = root.inverse();
        logdet = root.logdet();
    }
    double stat(const VectorXd& x) const { return x.dot(inv * x); }
    double log_volume() const { return 0.5 * logdet + 0.5 * static_cast<double>(inv.rows()) * std::log(threshold); }
};

/// Known-delta quantities of the fixed design.
struct KnownCache {
    ModelState st;
    AMatrix A;
    MatrixXd AX;
    MatrixXd ARA;
    MatrixXd sigma_marg, sigma_cond;
    Ellipsoid marg;
    MatrixXd cond_inv;
    double cond_logdet = 0.0;
    double trace_term = 0.0;  // tr(Sigma_v^{-1} A R A')

    MatrixXd exact_cond;
    MatrixXd oracle_inv;  // inverse of the exact conditional covariance W' R W under the generating delta
    double oracle_logdet = 0.0;

    KnownCache(const Population& pop, const VectorXd& delta, const VectorXd& generating, double alpha) {
        st = make_state(pop.design, pop.structure, pop.targets, delta);
        VarianceFit known;
        known.delta_hat = delta;
        known.method = EstimationMethod::Known;
        sigma_marg = sigma_marginal(pop.design, st, pop.targets, known).sigma;
        sigma_cond = detail::finalize(l1(st) + l2(st), Law::Conditional, {}, delta, EstimationMethod::Known).sigma;
        marg = Ellipsoid(sigma_marg, chi2_quantile(static_cast<int>(pop.design.m()), 1.0 - alpha));
        const SymmetricRoot rc(sigma_cond);
        cond_inv = rc.inverse();
        cond_logdet = rc.logdet();
        A = a_matrix(pop.design, st, pop.targets);
        AX = A.A * pop.design.X();
        ARA = noncentrality_inputs(A, pop.design, st.sys, VectorXd::Zero(pop.design.n()), VectorXd::Zero(1)).ARA;
        trace_term = trace_of_product(cond_inv, ARA);
        const MatrixXd W = w_vectors(pop.design, st, false).W;
        const MatrixXd exact = W.transpose() * evaluate_blocks(pop.design, pop.structure, generating).apply_r(W);
        exact_cond = 0.5 * (exact + exact.transpose());
        const SymmetricRoot ro(exact_cond);
        oracle_inv = ro.inverse();
        oracle_logdet = ro.logdet();
    }

    VectorXd beta_hat(const VectorXd& y) const { return gls_beta(st.sys, y); }

    double lambda_hat(const VectorXd& y, const VectorXd& beta) const {
        const VectorXd ay = A.A * y, axb = AX * beta;
        return std::max(0.0, ay.dot(cond_inv * ay) - trace_term - axb.dot(cond_inv * axb));
    }

    double oracle_lambda(const VectorXd& zv) const {
        const VectorXd bias = A.A * zv;
        return bias.dot(oracle_inv * bias);
    }
};

inline VectorXd predict(const LmmDataset& design, const ModelState& st, const MixedTargets& t, const VectorXd& y,
                        const VectorXd& beta) {
    VectorXd mu(design.m());
    for (Index i = 0; i < design.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const Index o = design.offset(i), ni = design.block(i).size();
        mu(i) = t.l[ui].dot(beta) + st.blup.b[ui].dot(y.segment(o, ni) - design.block(i).X * beta);
    }
    return mu;
}

struct MethodTally {
    long covered = 0, valid = 0, failed = 0;
    double log_volume_sum = 0.0;
    long log_volume_n = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Coverage study under either law.
// ---------------------------------------------------------------------------

enum class CoverageMethod { MarginalKnown, MarginalReml, ConditionalOracle, ConditionalKnown, ConditionalReml };

inline const char* coverage_method_name(CoverageMethod m) {
    switch (m) {
        case CoverageMethod::MarginalKnown: return "marginal_known_delta";
        case CoverageMethod::MarginalReml: return "marginal_reml";
        case CoverageMethod::ConditionalOracle: return "conditional_known_lambda_delta";
        case CoverageMethod::ConditionalKnown: return "conditional_known_delta";
        case CoverageMethod::ConditionalReml: return "conditional_reml";
    }
    return "?";
}

struct MethodCoverage {
    std::string method;
    double coverage = 0.0;
    double se = 0.0;
    double rel_log_volume = 0.0;
    long valid_reps = 0;
    long failed_reps = 0;
};

/// Per-rep error vectors and covariance summaries of one method.
struct ErrorRecord {
    std::vector<VectorXd> err;        // mu_hat - mu
    std::vector<VectorXd> sigma_diag;
    std::vector<double> sigma_offdiag_mean;
    std::vector<bool> ok;
};

struct CoverageReport {
    std::vector<MethodCoverage> methods;
    int reps = 0;
    double beta = 0.0;
    VectorXd v;
    double c1 = 0.0;
    double lambda_oracle = 0.0;  // conditional law only
    VectorXd delta_known;        // delta behind the known-delta columns
    std::optional<ErrorRecord> marginal_errors;     // recorded for the estimated marginal set
    std::optional<ErrorRecord> conditional_errors;  // recorded for the estimated conditional set

    const MethodCoverage* find(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return &m;
        return nullptr;
    }
};

namespace detail {

struct RepOutcome {
    std::array<int, 5> status{};  // 0 failed / skipped, 1 covered, 2 not covered
    std::array<double, 5> log_volume{};
    VectorXd err_marg, err_cond, diag_marg, diag_cond;
    double off_marg = 0.0, off_cond = 0.0;
    bool rec_marg = false, rec_cond = false;
};

inline double offdiag_mean(const MatrixXd& s) {
    const Index m = s.rows();
    return (s.sum() - s.trace()) / static_cast<double>(m * (m - 1));
}

inline MethodTally tally(const std::vector<RepOutcome>& out, std::size_t k, std::size_t ref) {
    MethodTally t;
    for (const auto& o : out) {
        if (o.status[k] == 0) {
            ++t.failed;
            continue;
        }
        ++t.valid;
        if (o.status[k] == 1) ++t.covered;
        if (o.status[ref] != 0) {
            t.log_volume_sum += o.log_volume[k] - o.log_volume[ref];
            ++t.log_volume_n;
        }
    }
    return t;
}

}  // namespace detail

/// Delta used by the known-delta columns: the override if given, E(delta_hat | v) from pilot REML fits under the
/// conditional law, the generating delta under the marginal law.
inline VectorXd resolve_known_delta(const SimConfig& cfg, const Population& pop) {
    if (cfg.known_delta) return *cfg.known_delta;
    if (cfg.law == Law::Marginal) return cfg.delta();
    const int n_pilot = cfg.pilot_reps > 0 ? cfg.pilot_reps : cfg.reps;
    std::vector<std::optional<VectorXd>> fits(static_cast<std::size_t>(n_pilot));
    const VectorXd zv = pop.zv(pop.v);
    parallel_reps(n_pilot, cfg.threads, [&](int rep) {
        auto rng = stream_rng(*cfg.seed, static_cast<std::uint64_t>(rep), StreamRole::Pilot);
        const VectorXd y = VectorXd::Constant(pop.design.n(), pop.beta) + zv +
                           draw_normal(rng, pop.design.n(), std::sqrt(cfg.sigma_e2));
        try {
            const VarianceFit fit = fit_reml(pop.design.with_y(y), pop.structure);
            if (fit.converged) fits[static_cast<std::size_t>(rep)] = fit.delta_hat;
        } catch (const Error&) {
        }
    });
    VectorXd sum = VectorXd::Zero(2);
    long used = 0;
    for (const auto& f : fits)
        if (f) {
            sum += *f;
            ++used;
        }
    if (used == 0) throw NumericError("resolve_known_delta: every pilot REML fit failed");
    VectorXd out = sum / static_cast<double>(used);
    out(1) = std::max(out(1), 1e-10);
    return out;
}

/// Coverage of the five confidence sets; v fixed (conditional law) or redrawn per rep (marginal law).
inline CoverageReport run_coverage(const SimConfig& cfg) {
    const Population pop = generate_population(cfg);
    const VectorXd delta_v = resolve_known_delta(cfg, pop);
    const detail::KnownCache known(pop, delta_v, cfg.delta(), cfg.alpha);
    const bool conditional = cfg.law == Law::Conditional;
    const bool estimate = cfg.estimator == EstimationMethod::Reml;
    const Index m = cfg.m;
    const double thr_marg = chi2_quantile(static_cast<int>(m), 1.0 - cfg.alpha);

    const VectorXd zv_fixed = pop.zv(pop.v);
    const double lambda_fixed = known.oracle_lambda(zv_fixed);
    const double thr_oracle_fixed = noncentral_chi2_quantile(static_cast<int>(m), lambda_fixed, 1.0 - cfg.alpha);

    std::vector<detail::RepOutcome> outcomes(static_cast<std::size_t>(cfg.reps));
    parallel_reps(cfg.reps, cfg.threads, [&](int rep) {
        auto& o = outcomes[static_cast<std::size_t>(rep)];
        const VectorXd v = rep_effects(cfg, pop, rep);
        auto re = stream_rng(*cfg.seed, static_cast<std::uint64_t>(rep), StreamRole::Errors);
        const VectorXd zv = pop.zv(v);
        const VectorXd y = VectorXd::Constant(pop.design.n(), pop.beta) + zv +
                           draw_normal(re, pop.design.n(), std::sqrt(cfg.sigma_e2));
        const VectorXd mu = pop.mu(v);

        // Known delta.
        const VectorXd beta_k = known.beta_hat(y);
        const VectorXd mu_k = detail::predict(pop.design, known.st, pop.targets, y, beta_k);
        const VectorXd e_k = mu_k - mu;
        o.status[0] = known.marg.stat(e_k) <= known.marg.threshold ? 1 : 2;
        o.log_volume[0] = known.marg.log_volume();
        if (conditional) {
            if (cfg.oracle_lambda) {
                o.status[2] = e_k.dot(known.oracle_inv * e_k) <= thr_oracle_fixed ? 1 : 2;
                o.log_volume[2] = 0.5 * known.oracle_logdet + 0.5 * static_cast<double>(m) * std::log(thr_oracle_fixed);
            }
            const double stat_c = e_k.dot(known.cond_inv * e_k);
            const double lh = known.lambda_hat(y, beta_k);
            const double thr_k = noncentral_chi2_quantile(static_cast<int>(m), lh, 1.0 - cfg.alpha);
            o.status[3] = stat_c <= thr_k ? 1 : 2;
            o.log_volume[3] = 0.5 * known.cond_logdet + 0.5 * static_cast<double>(m) * std::log(thr_k);
        }
        if (!estimate) return;

        // Estimated delta.
        try {
            const LmmDataset data = pop.design.with_y(y);
            const VarianceFit fit = fit_reml(data, pop.structure);
            if (!fit.converged) return;
            const ModelState st = make_state(data, pop.structure, pop.targets, fit.delta_hat, conditional);
            const VectorXd mu_h = detail::predict(data, st, pop.targets, y, fit.beta_hat);
            const VectorXd e_h = mu_h - mu;
            const CovEstimate sm = sigma_marginal(data, st, pop.targets, fit);
            const detail::Ellipsoid em(sm.sigma, thr_marg);
            o.status[1] = em.stat(e_h) <= thr_marg ? 1 : 2;
            o.log_volume[1] = em.log_volume();
            if (cfg.record_errors) {
                o.rec_marg = true;
                o.err_marg = e_h;
                o.diag_marg = sm.sigma.diagonal();
                o.off_marg = detail::offdiag_mean(sm.sigma);
            }
            if (conditional) {
                const CovEstimate sc = sigma_conditional(data, pop.structure, pop.targets, fit, st);
                const double thr = noncentral_chi2_quantile(static_cast<int>(m), *sc.lambda_hat, 1.0 - cfg.alpha);
                const detail::Ellipsoid ec(sc.sigma, thr);
                o.status[4] = ec.stat(e_h) <= thr ? 1 : 2;
                o.log_volume[4] = ec.log_volume();
                if (cfg.record_errors) {
                    o.rec_cond = true;
                    o.err_cond = e_h;
                    o.diag_cond = sc.sigma.diagonal();
                    o.off_cond = detail::offdiag_mean(sc.sigma);
                }
            }
        } catch (const Error&) {
            o.status[1] = 0;
            o.status[4] = 0;
        }
    });

    CoverageReport rep;
    rep.reps = cfg.reps;
    rep.beta = pop.beta;
    rep.v = pop.v;
    rep.c1 = c1_statistic(pop.v);
    rep.lambda_oracle = conditional ? lambda_fixed : 0.0;
    rep.delta_known = delta_v;
    const std::size_t ref = estimate ? 1 : 0;
    std::vector<CoverageMethod> cols = {CoverageMethod::MarginalKnown};
    if (estimate) cols.push_back(CoverageMethod::MarginalReml);
    if (conditional) {
        if (cfg.oracle_lambda) cols.push_back(CoverageMethod::ConditionalOracle);
        cols.push_back(CoverageMethod::ConditionalKnown);
        if (estimate) cols.push_back(CoverageMethod::ConditionalReml);
    }
    for (CoverageMethod c : cols) {
        const auto k = static_cast<std::size_t>(c);
        const detail::MethodTally t = detail::tally(outcomes, k, ref);
        MethodCoverage mc;
        mc.method = coverage_method_name(c);
        mc.valid_reps = t.valid;
        mc.failed_reps = t.failed;
        mc.coverage = t.valid ? static_cast<double>(t.covered) / static_cast<double>(t.valid) : std::nan("");
        mc.se = t.valid ? std::sqrt(mc.coverage * (1.0 - mc.coverage) / static_cast<double>(t.valid)) : std::nan("");
        mc.rel_log_volume = t.log_volume_n ? t.log_volume_sum / static_cast<double>(t.log_volume_n) : std::nan("");
        rep.methods.push_back(mc);
    }
    if (cfg.record_errors && estimate) {
        ErrorRecord rm, rc;
        for (const auto& o : outcomes) {
            rm.ok.push_back(o.rec_marg);
            rm.err.push_back(o.err_marg);
            rm.sigma_diag.push_back(o.diag_marg);
            rm.sigma_offdiag_mean.push_back(o.off_marg);
            rc.ok.push_back(o.rec_cond);
            rc.err.push_back(o.err_cond);
            rc.sigma_diag.push_back(o.diag_cond);
            rc.sigma_offdiag_mean.push_back(o.off_cond);
        }
        rep.marginal_errors = std::move(rm);
        if (conditional) rep.conditional_errors = std::move(rc);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Cluster-wise intervals.
// ---------------------------------------------------------------------------

struct ClusterwiseReport {
    VectorXd empirical;    // per-cluster coverage
    VectorXd theoretical;  // closed form, known delta
    VectorXd v;
    double average_empirical = 0.0;
    double average_theoretical = 0.0;
    long valid_reps = 0, failed_reps = 0;
};

/// Marginal intervals mu_hat_i +- z sqrt(Sigma_ii) under the conditional law.
inline ClusterwiseReport run_clusterwise(const SimConfig& cfg) {
    const Population pop = generate_population(cfg);
    const detail::KnownCache known(pop, resolve_known_delta(cfg, pop), cfg.delta(), cfg.alpha);
    const Index m = cfg.m;
    const double z = normal_quantile(1.0 - cfg.alpha / 2.0);
    const VectorXd zv = pop.zv(pop.v);
    const VectorXd mu = pop.mu(pop.v);
    const bool estimate = cfg.estimator == EstimationMethod::Reml;

    std::vector<std::vector<char>> hit(static_cast<std::size_t>(cfg.reps));
    parallel_reps(cfg.reps, cfg.threads, [&](int rep) {
        auto re = stream_rng(*cfg.seed, static_cast<std::uint64_t>(rep), StreamRole::Errors);
        const VectorXd y = VectorXd::Constant(pop.design.n(), pop.beta) + zv +
                           draw_normal(re, pop.design.n(), std::sqrt(cfg.sigma_e2));
        VectorXd mu_h, var;
        try {
            if (estimate) {
                const LmmDataset data = pop.design.with_y(y);
                const VarianceFit fit = fit_reml(data, pop.structure);
                if (!fit.converged) return;
                const ModelState st = make_state(data, pop.structure, pop.targets, fit.delta_hat);
                mu_h = detail::predict(data, st, pop.targets, y, fit.beta_hat);
                var = sigma_marginal(data, st, pop.targets, fit).sigma.diagonal();
            } else {
                mu_h = detail::predict(pop.design, known.st, pop.targets, y, known.beta_hat(y));
                var = known.sigma_marg.diagonal();
            }
        } catch (const Error&) {
            return;
        }
        auto& h = hit[static_cast<std::size_t>(rep)];
        h.resize(static_cast<std::size_t>(m));
        for (Index i = 0; i < m; ++i) h[static_cast<std::size_t>(i)] = std::abs(mu_h(i) - mu(i)) <= z * std::sqrt(var(i));
    });

    ClusterwiseReport out;
    out.v = pop.v;
    out.empirical = VectorXd::Zero(m);
    for (const auto& h : hit) {
        if (h.empty()) {
            ++out.failed_reps;
            continue;
        }
        ++out.valid_reps;
        for (Index i = 0; i < m; ++i) out.empirical(i) += h[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    }
    if (out.valid_reps) out.empirical /= static_cast<double>(out.valid_reps);
    const VectorXd bias = known.A.A * zv;
    out.theoretical.resize(m);
    for (Index i = 0; i < m; ++i)
        out.theoretical(i) =
            clusterwise_coverage_shift(bias(i), known.exact_cond(i, i), known.sigma_marg(i, i), cfg.alpha).coverage;
    out.average_empirical = out.empirical.mean();
    out.average_theoretical = out.theoretical.mean();
    return out;
}

// ---------------------------------------------------------------------------
// Power curves.
// ---------------------------------------------------------------------------

struct PowerPoint {
    double delta = 0.0;
    std::string method;
    double power = 0.0;
    double se = 0.0;
    long valid_reps = 0;
};

struct PowerReport {
    std::vector<PowerPoint> points;

    std::vector<PowerPoint> curve(const std::string& method) const {
        std::vector<PowerPoint> out;
        for (const auto& p : points)
            if (p.method == method) out.push_back(p);
        return out;
    }
};

namespace detail {
inline void add_power(PowerReport& rep, const std::vector<double>& grid, const std::string& name,
                      const std::vector<std::vector<int>>& status, std::size_t slot) {
    for (std::size_t g = 0; g < grid.size(); ++g) {
        long rej = 0, valid = 0;
        for (const auto& s : status) {
            if (s.empty()) continue;
            const int x = s[slot * grid.size() + g];
            if (x == 0) continue;
            ++valid;
            if (x == 1) ++rej;
        }
        PowerPoint p;
        p.delta = grid[g];
        p.method = name;
        p.valid_reps = valid;
        p.power = valid ? static_cast<double>(rej) / static_cast<double>(valid) : std::nan("");
        p.se = valid ? std::sqrt(p.power * (1.0 - p.power) / static_cast<double>(valid)) : std::nan("");
        rep.points.push_back(p);
    }
}
}  // namespace detail

/// H0: mu = a against mu = a + 1 Delta, with a = mu - 1 Delta so that the truth sits at the alternative.
inline PowerReport run_power_linear(const SimConfig& cfg, const std::vector<double>& grid) {
    if (grid.empty()) throw ArgumentError("run_power_linear: empty grid");
    const Population pop = generate_population(cfg);
    const detail::KnownCache known(pop, resolve_known_delta(cfg, pop), cfg.delta(), cfg.alpha);
    const Index m = cfg.m;
    const VectorXd zv = pop.zv(pop.v);
    const VectorXd mu = pop.mu(pop.v);
    const bool estimate = cfg.estimator == EstimationMethod::Reml;
    const double thr_marg = chi2_quantile(static_cast<int>(m), 1.0 - cfg.alpha);
    const std::size_t slots = estimate ? 4 : 2;

    std::vector<std::vector<int>> status(static_cast<std::size_t>(cfg.reps));
    parallel_reps(cfg.reps, cfg.threads, [&](int rep) {
        auto re = stream_rng(*cfg.seed, static_cast<std::uint64_t>(rep), StreamRole::Errors);
        const VectorXd y = VectorXd::Constant(pop.design.n(), pop.beta) + zv +
                           draw_normal(re, pop.design.n(), std::sqrt(cfg.sigma_e2));
        auto& s = status[static_cast<std::size_t>(rep)];
        s.assign(slots * grid.size(), 0);
        const VectorXd beta_k = known.beta_hat(y);
        const VectorXd mu_k = detail::predict(pop.design, known.st, pop.targets, y, beta_k);
        const double thr_c = noncentral_chi2_quantile(static_cast<int>(m), known.lambda_hat(y, beta_k), 1.0 - cfg.alpha);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const VectorXd d = mu_k - (mu - VectorXd::Constant(m, grid[g]));
            s[0 * grid.size() + g] = known.marg.stat(d) > known.marg.threshold ? 1 : 2;
            s[1 * grid.size() + g] = d.dot(known.cond_inv * d) > thr_c ? 1 : 2;
        }
        if (!estimate) return;
        try {
            const LmmDataset data = pop.design.with_y(y);
            const VarianceFit fit = fit_reml(data, pop.structure);
            if (!fit.converged) return;
            const ModelState st = make_state(data, pop.structure, pop.targets, fit.delta_hat, true);
            const VectorXd mu_h = detail::predict(data, st, pop.targets, y, fit.beta_hat);
            const detail::Ellipsoid em(sigma_marginal(data, st, pop.targets, fit).sigma, thr_marg);
            const CovEstimate sc = sigma_conditional(data, pop.structure, pop.targets, fit, st);
            const detail::Ellipsoid ec(sc.sigma,
                                       noncentral_chi2_quantile(static_cast<int>(m), *sc.lambda_hat, 1.0 - cfg.alpha));
            for (std::size_t g = 0; g < grid.size(); ++g) {
                const VectorXd d = mu_h - (mu - VectorXd::Constant(m, grid[g]));
                s[2 * grid.size() + g] = em.stat(d) > em.threshold ? 1 : 2;
                s[3 * grid.size() + g] = ec.stat(d) > ec.threshold ? 1 : 2;
            }
        } catch (const Error&) {
        }
    });
    PowerReport out;
    detail::add_power(out, grid, "marginal_known_delta", status, 0);
    detail::add_power(out, grid, "conditional_known_delta", status, 1);
    if (estimate) {
        detail::add_power(out, grid, "marginal_reml", status, 2);
        detail::add_power(out, grid, "conditional_reml", status, 3);
    }
    return out;
}

/// Tukey screen over the first m/2 clusters, which share one random effect; cluster 1 is shifted by Delta.
inline PowerReport run_power_tukey(const SimConfig& cfg, const std::vector<double>& grid) {
    if (grid.empty()) throw ArgumentError("run_power_tukey: empty grid");
    Population pop = generate_population(cfg);
    const Index m = cfg.m, w = m / 2;
    if (w < 2) throw ArgumentError("run_power_tukey: m must be >= 4");
    for (Index i = 1; i < w; ++i) pop.v(i) = pop.v(0);
    const detail::KnownCache known(pop, resolve_known_delta(cfg, pop), cfg.delta(), cfg.alpha);
    const bool estimate = cfg.estimator == EstimationMethod::Reml;
    const Index mp = tukey_m_prime(m, w);
    const double q = range_quantile(static_cast<int>(mp), 1.0 - cfg.alpha);
    const MatrixXd root_k = SymmetricRoot(known.sigma_cond).sqrt();
    MatrixXd cplus_k = MatrixXd::Zero(w, w);
    for (Index i = 0; i < w; ++i)
        for (Index j = i + 1; j < w; ++j) cplus_k(i, j) = c_plus_pair(root_k, i, j);
    const std::size_t slots = estimate ? 2 : 1;

    auto any_reject = [&](const VectorXd& mu_h, const MatrixXd& cp) {
        for (Index i = 0; i < w; ++i)
            for (Index j = i + 1; j < w; ++j)
                if (std::abs(mu_h(i) - mu_h(j)) / cp(i, j) > q) return true;
        return false;
    };

    std::vector<std::vector<int>> status(static_cast<std::size_t>(cfg.reps));
    parallel_reps(cfg.reps, cfg.threads, [&](int rep) {
        auto re = stream_rng(*cfg.seed, static_cast<std::uint64_t>(rep), StreamRole::Errors);
        const VectorXd e = draw_normal(re, pop.design.n(), std::sqrt(cfg.sigma_e2));
        auto& s = status[static_cast<std::size_t>(rep)];
        s.assign(slots * grid.size(), 0);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            VectorXd v = pop.v;
            v(0) += grid[g];
            const VectorXd y = VectorXd::Constant(pop.design.n(), pop.beta) + pop.zv(v) + e;
            const VectorXd mu_k = detail::predict(pop.design, known.st, pop.targets, y, known.beta_hat(y));
            s[g] = any_reject(mu_k, cplus_k) ? 1 : 2;
            if (!estimate) continue;
            try {
                const LmmDataset data = pop.design.with_y(y);
                const VarianceFit fit = fit_reml(data, pop.structure);
                if (!fit.converged) continue;
                const ModelState st = make_state(data, pop.structure, pop.targets, fit.delta_hat, true);
                const VectorXd mu_h = detail::predict(data, st, pop.targets, y, fit.beta_hat);
                const CovEstimate sc = sigma_conditional(data, pop.structure, pop.targets, fit, st);
                const MatrixXd root = SymmetricRoot(sc.sigma).sqrt();
                MatrixXd cp = MatrixXd::Zero(w, w);
                for (Index i = 0; i < w; ++i)
                    for (Index j = i + 1; j < w; ++j) cp(i, j) = c_plus_pair(root, i, j);
                s[grid.size() + g] = any_reject(mu_h, cp) ? 1 : 2;
            } catch (const Error&) {
            }
        }
    });
    PowerReport out;
    detail::add_power(out, grid, "tukey_known_delta", status, 0);
    if (estimate) detail::add_power(out, grid, "tukey_reml", status, 1);
    return out;
}

/// Marginal-law coverage of the marginal set (known delta and REML) for a list of configurations.
inline std::vector<CoverageReport> run_marginal_table(const std::vector<SimConfig>& cfgs) {
    std::vector<CoverageReport> out;
    for (SimConfig c : cfgs) {
        c.law = Law::Marginal;
        out.push_back(run_coverage(c));
    }
    return out;
}

}  // namespace mixinf
