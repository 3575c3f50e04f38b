#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mixinf/errors.hpp"
#include "mixinf/lmm.hpp"
#include "mixinf/numerics.hpp"

namespace mixinf {

enum class EstimationMethod { Reml, Henderson3, Known };

inline const char* method_name(EstimationMethod m) {
    switch (m) {
        case EstimationMethod::Reml: return "reml";
        case EstimationMethod::Henderson3: return "henderson3";
        case EstimationMethod::Known: return "known";
    }
    return "?";
}

struct VarianceFit {
    VectorXd delta_hat;
    VectorXd beta_hat;
    MatrixXd vbar;  // asymptotic covariance of delta_hat (zero for known delta)
    EstimationMethod method = EstimationMethod::Reml;
    int iterations = 0;
    bool converged = true;
    std::vector<bool> boundary_flags;
    bool singular_information = false;
    bool ols_fallback = false;
    std::vector<std::string> warnings;
};

struct GlsResult {
    VectorXd beta;
    MatrixXd omega;  // (X'V^{-1}X)^{-1}
};

inline VectorXd gls_beta(const BlockSystem& sys, const VectorXd& y) {
    return sys.omega * (sys.F.transpose() * y);
}

inline GlsResult gls_beta(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta) {
    const BlockSystem sys = evaluate_blocks(data, s, delta);
    return {gls_beta(sys, data.y()), sys.omega};
}

/// V^{-1}(y - X beta_hat) = P y.
inline VectorXd p_times_y(const BlockSystem& sys, const VectorXd& y) {
    return sys.apply_vinv(y) - sys.F * gls_beta(sys, y);
}

inline double restricted_loglik(const BlockSystem& sys, const VectorXd& y) {
    double logdet_v = 0.0;
    for (Index i = 0; i < sys.m(); ++i) {
        Eigen::LLT<MatrixXd> llt(sys.V[static_cast<std::size_t>(i)]);
        if (llt.info() != Eigen::Success)
            throw DegeneracyError("restricted_loglik: V_i is not positive definite for block " + std::to_string(i));
        logdet_v += 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    }
    const double logdet_info = logdet_spd(sys.info);
    const double ypy = y.dot(p_times_y(sys, y));
    return -0.5 * logdet_v - 0.5 * logdet_info - 0.5 * ypy;
}

inline double restricted_loglik(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta) {
    return restricted_loglik(evaluate_blocks(data, s, delta), data.y());
}

/// s_e = -tr(P dV_e)/2 + (Py)' dV_e (Py) / 2.
inline VectorXd reml_score(const BlockSystem& sys, const VectorXd& y) {
    const VectorXd py = p_times_y(sys, y);
    VectorXd s(sys.r);
    for (Index e = 0; e < sys.r; ++e) {
        double tr = 0.0;
        MatrixXd ftdvf = MatrixXd::Zero(sys.omega.rows(), sys.omega.cols());
        double quad = 0.0;
        for (Index i = 0; i < sys.m(); ++i) {
            const auto& dv = sys.dV[static_cast<std::size_t>(i)][static_cast<std::size_t>(e)];
            tr += trace_of_product(sys.Vinv[static_cast<std::size_t>(i)], dv);
            const auto fi = sys.F_block(i);
            ftdvf.noalias() += fi.transpose() * dv * fi;
            const auto pyi = py.segment(sys.offset(i), sys.size(i));
            quad += pyi.dot(dv * pyi);
        }
        tr -= trace_of_product(sys.omega, ftdvf);
        s(e) = -0.5 * tr + 0.5 * quad;
    }
    return s;
}

inline VectorXd reml_score(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta) {
    return reml_score(evaluate_blocks(data, s, delta), data.y());
}

/// (V̄^{-1})_{ef} = tr(P dV_f P dV_e) / 2.
inline MatrixXd reml_fisher_info(const BlockSystem& sys) {
    std::vector<BlockLowRank> pdv;
    for (Index e = 0; e < sys.r; ++e) pdv.push_back(sys.P_dV(e));
    MatrixXd info(sys.r, sys.r);
    for (Index e = 0; e < sys.r; ++e)
        for (Index f = e; f < sys.r; ++f) {
            info(e, f) = 0.5 * (pdv[static_cast<std::size_t>(f)] * pdv[static_cast<std::size_t>(e)]).trace();
            info(f, e) = info(e, f);
        }
    return info;
}

inline MatrixXd reml_fisher_info(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta) {
    return reml_fisher_info(evaluate_blocks(data, s, delta));
}

/// d(V̄^{-1})_{ef}/d delta_g = -tr(dV_g P dV_e P dV_f P), for all g.
inline std::vector<MatrixXd> fisher_info_derivative(const BlockSystem& sys) {
    std::vector<BlockLowRank> pdv;
    for (Index e = 0; e < sys.r; ++e) pdv.push_back(sys.P_dV(e));
    std::vector<MatrixXd> out(static_cast<std::size_t>(sys.r), MatrixXd::Zero(sys.r, sys.r));
    for (Index g = 0; g < sys.r; ++g) {
        for (Index e = 0; e < sys.r; ++e) {
            const BlockLowRank ge = pdv[static_cast<std::size_t>(g)] * pdv[static_cast<std::size_t>(e)];
            for (Index f = e; f < sys.r; ++f) {
                const double v = -(ge * pdv[static_cast<std::size_t>(f)]).trace();
                out[static_cast<std::size_t>(g)](e, f) = v;
                out[static_cast<std::size_t>(g)](f, e) = v;
            }
        }
    }
    return out;
}

inline MatrixXd fisher_info_derivative(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta,
                                       Index g) {
    if (!s.linear_in_delta()) throw ArgumentError("fisher_info_derivative: structure must be linear in delta");
    if (g < 0 || g >= s.num_components()) throw ArgumentError("fisher_info_derivative: component out of range");
    return fisher_info_derivative(evaluate_blocks(data, s, delta))[static_cast<std::size_t>(g)];
}

namespace detail {

/// Inverse of a symmetric information matrix; pseudo-inverse when singular.
inline MatrixXd invert_information(const MatrixXd& info, bool& singular) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (info + info.transpose()));
    const VectorXd ev = es.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    singular = !(ev.minCoeff() > 1e-12 * top) || !(top > 0.0);
    VectorXd inv(ev.size());
    for (Index k = 0; k < ev.size(); ++k) inv(k) = ev(k) > 1e-12 * top ? 1.0 / ev(k) : 0.0;
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

struct RemlOptions {
    double tol = 1e-8;
    int max_iter = 100;
    int max_halvings = 30;
    double floor = 1e-10;
    std::optional<VectorXd> start;
};

inline VectorXd default_reml_start(const LmmDataset& data, const CovarianceStructure& s) {
    const MatrixXd x = data.X();
    const VectorXd y = data.y();
    const VectorXd res = y - x * x.colPivHouseholderQr().solve(y);
    const double dof = std::max<double>(1.0, static_cast<double>(data.n() - data.p()));
    const double s2 = std::max(res.squaredNorm() / dof, 1e-6);
    return VectorXd::Constant(s.num_components(), s2 / static_cast<double>(s.num_components()));
}

inline VarianceFit fit_reml(const LmmDataset& data, const CovarianceStructure& s, const RemlOptions& opt = {}) {
    const Index r = s.num_components();
    const VectorXd y = data.y();
    VectorXd delta = opt.start ? *opt.start : default_reml_start(data, s);
    if (delta.size() != r) throw ArgumentError("fit_reml: start has wrong length");
    delta = delta.cwiseMax(opt.floor);

    VarianceFit fit;
    fit.method = EstimationMethod::Reml;
    fit.converged = false;

    auto loglik_at = [&](const VectorXd& d) { return restricted_loglik(evaluate_blocks(data, s, d), y); };

    BlockSystem sys = evaluate_blocks(data, s, delta);
    double ll = restricted_loglik(sys, y);
    for (int it = 0; it < opt.max_iter; ++it) {
        fit.iterations = it;
        const VectorXd score = reml_score(sys, y);
        VectorXd projected = score;
        for (Index e = 0; e < r; ++e)
            if (delta(e) <= opt.floor && projected(e) < 0.0) projected(e) = 0.0;
        if (projected.cwiseAbs().maxCoeff() < opt.tol) {
            fit.converged = true;
            break;
        }
        // Components held at the floor with an outward score are frozen; scoring runs on the rest.
        std::vector<Index> free;
        for (Index e = 0; e < r; ++e)
            if (!(delta(e) <= opt.floor && score(e) < 0.0)) free.push_back(e);
        const MatrixXd info = reml_fisher_info(sys);
        MatrixXd info_free(free.size(), free.size());
        VectorXd score_free(free.size());
        for (std::size_t a = 0; a < free.size(); ++a) {
            score_free(static_cast<Index>(a)) = score(free[a]);
            for (std::size_t b = 0; b < free.size(); ++b)
                info_free(static_cast<Index>(a), static_cast<Index>(b)) = info(free[a], free[b]);
        }
        bool singular = false;
        const VectorXd step_free = detail::invert_information(info_free, singular) * score_free;
        VectorXd step = VectorXd::Zero(r);
        for (std::size_t a = 0; a < free.size(); ++a) step(free[a]) = step_free(static_cast<Index>(a));
        double t = 1.0;
        bool accepted = false;
        for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
            const VectorXd cand = (delta + t * step).cwiseMax(opt.floor);
            double llc;
            try {
                llc = loglik_at(cand);
            } catch (const Error&) {
                continue;
            }
            if (llc >= ll - 1e-12 * (1.0 + std::abs(ll))) {
                delta = cand;
                ll = llc;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            fit.warnings.push_back("step halving failed at iteration " + std::to_string(it));
            break;
        }
        sys = evaluate_blocks(data, s, delta);
        fit.iterations = it + 1;
    }
    if (!fit.converged) {
        const VectorXd score = reml_score(sys, y);
        VectorXd projected = score;
        for (Index e = 0; e < r; ++e)
            if (delta(e) <= opt.floor && projected(e) < 0.0) projected(e) = 0.0;
        fit.converged = projected.cwiseAbs().maxCoeff() < opt.tol;
        if (!fit.converged) fit.warnings.push_back("REML did not converge");
    }
    fit.delta_hat = delta;
    fit.beta_hat = gls_beta(sys, y);
    fit.vbar = detail::invert_information(reml_fisher_info(sys), fit.singular_information);
    if (fit.singular_information) fit.warnings.push_back("singular Fisher information; pseudo-inverse used");
    fit.boundary_flags.assign(static_cast<std::size_t>(r), false);
    for (Index e = 0; e < r; ++e) {
        if (delta(e) <= opt.floor) {
            fit.boundary_flags[static_cast<std::size_t>(e)] = true;
            fit.warnings.push_back(s.component_name(e) + " is on the boundary");
        }
    }
    return fit;
}

/// Variance components treated as known: zero V̄.
inline VarianceFit known_delta_fit(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta) {
    VarianceFit fit;
    fit.method = EstimationMethod::Known;
    fit.delta_hat = delta;
    fit.beta_hat = gls_beta(data, s, delta).beta;
    fit.vbar = MatrixXd::Zero(delta.size(), delta.size());
    fit.boundary_flags.assign(static_cast<std::size_t>(delta.size()), false);
    return fit;
}

/// Matrix-free quadratic forms of Henderson's method III for the NER model.
///
/// C_2 = Q / (n - p - m) with Q the residual projector of M = (X, Z);
/// C_1 = (I - H_X - (n - p) C_2) / t with t = tr{Z'(I - H_X)Z}.
class HendersonForms {
public:
    explicit HendersonForms(const LmmDataset& data) : offsets_(data.offsets()) {
        if (data.q() != 1) throw StructuralError("Henderson III forms require the nested error regression model");
        for (const auto& b : data.blocks())
            if (!(b.Z.array() == 1.0).all()) throw StructuralError("Henderson III forms require Z_i = 1");
        n_ = data.n();
        p_ = data.p();
        m_ = data.m();
        x_ = data.X();
        xtx_inv_ = (x_.transpose() * x_).ldlt().solve(MatrixXd::Identity(p_, p_));
        xc_ = center(x_);
        // rank(X, Z) = p + m exactly when the within-cluster centred X has full column rank.
        Eigen::ColPivHouseholderQR<MatrixXd> qr(xc_);
        qr.setThreshold(1e-10);
        if (n_ - p_ - m_ < 1 || qr.rank() < p_) {
            throw RankError(
                "Henderson III: rank(X, Z) < p + m (covariates are constant within clusters, e.g. an intercept). "
                "Remove the intercept or cluster-level covariates, or use REML");
        }
        xc_gram_inv_ = (xc_.transpose() * xc_).ldlt().solve(MatrixXd::Identity(p_, p_));
        MatrixXd ztx(m_, p_);
        for (Index i = 0; i < m_; ++i) ztx.row(i) = x_.middleRows(offsets_[static_cast<std::size_t>(i)], size(i)).colwise().sum();
        t_ = static_cast<double>(n_) - trace_of_product(xtx_inv_, ztx.transpose() * ztx);
    }

    Index n() const { return n_; }
    Index p() const { return p_; }
    Index m() const { return m_; }
    double t() const { return t_; }

    /// Residual projector of (X, Z).
    VectorXd apply_Q(const VectorXd& u) const {
        const VectorXd uc = center(u);
        return uc - xc_ * (xc_gram_inv_ * (xc_.transpose() * uc));
    }

    VectorXd apply_I_minus_HX(const VectorXd& u) const { return u - x_ * (xtx_inv_ * (x_.transpose() * u)); }

    VectorXd apply_C2(const VectorXd& u) const { return apply_Q(u) / static_cast<double>(n_ - p_ - m_); }

    VectorXd apply_C1(const VectorXd& u) const {
        return (apply_I_minus_HX(u) - static_cast<double>(n_ - p_) * apply_C2(u)) / t_;
    }

    VectorXd apply(Index e, const VectorXd& u) const { return e == 0 ? apply_C1(u) : apply_C2(u); }

    MatrixXd apply(Index e, const MatrixXd& u) const {
        MatrixXd out(u.rows(), u.cols());
        for (Index c = 0; c < u.cols(); ++c) out.col(c) = apply(e, VectorXd(u.col(c)));
        return out;
    }

    /// tr(C_e C_f) for e, f in {0 (sigma_v), 1 (sigma_e)}.
    double trace_product(Index e, Index f) const {
        const double a = static_cast<double>(n_ - p_), b = static_cast<double>(n_ - p_ - m_);
        const double k = a / b;
        if (e == 1 && f == 1) return 1.0 / b;
        if (e != f) return (1.0 - k) / t_;
        return (a + (k * k - 2.0 * k) * b) / (t_ * t_);
    }

private:
    Index size(Index i) const { return offsets_[static_cast<std::size_t>(i) + 1] - offsets_[static_cast<std::size_t>(i)]; }

    MatrixXd center(const MatrixXd& a) const {
        MatrixXd out = a;
        for (Index i = 0; i < m_; ++i) {
            auto blk = out.middleRows(offsets_[static_cast<std::size_t>(i)], size(i));
            const Eigen::RowVectorXd mean = blk.colwise().mean();
            blk.rowwise() -= mean;
        }
        return out;
    }

    std::vector<Index> offsets_;
    Index n_ = 0, p_ = 0, m_ = 0;
    MatrixXd x_, xtx_inv_, xc_, xc_gram_inv_;
    double t_ = 0.0;
};

inline HendersonForms extract_Ce(const LmmDataset& data) { return HendersonForms(data); }

inline VarianceFit fit_henderson3_ner(const LmmDataset& data) {
    const HendersonForms c(data);
    const VectorXd y = data.y();
    VarianceFit fit;
    fit.method = EstimationMethod::Henderson3;
    const double se2 = std::max(0.0, y.dot(c.apply_C2(y)));
    const double sv2_raw = y.dot(c.apply_C1(y));
    fit.delta_hat = VectorXd(2);
    fit.delta_hat << std::max(0.0, sv2_raw), se2;
    fit.boundary_flags = {sv2_raw <= 0.0, se2 <= 0.0};
    if (sv2_raw <= 0.0) fit.warnings.push_back("sigma_v2 estimate truncated at 0");

    const NerStructure ner;
    MatrixXd x = data.X();
    VectorXd mu;
    try {
        const BlockSystem sys = evaluate_blocks(data, ner, fit.delta_hat);
        fit.beta_hat = gls_beta(sys, y);
        // mu = X beta + Z v_hat with v_hat_i = sigma_v^2 1' V_i^{-1} (y_i - X_i beta).
        const VectorXd resid = y - x * fit.beta_hat;
        const VectorXd vr = sys.apply_vinv(resid);
        mu = x * fit.beta_hat;
        for (Index i = 0; i < data.m(); ++i)
            mu.segment(sys.offset(i), sys.size(i)).array() += fit.delta_hat(0) * vr.segment(sys.offset(i), sys.size(i)).sum();
    } catch (const Error&) {
        fit.ols_fallback = true;
        fit.warnings.push_back("V is degenerate at the estimate; beta from ordinary least squares");
        fit.beta_hat = x.colPivHouseholderQr().solve(y);
        mu = x * fit.beta_hat;
    }
    // Cov(y'C_e y, y'C_f y | v) = 2 tr(C_e R C_f R) + 4 mu' C_e R C_f mu with R = sigma_e^2 I.
    std::vector<VectorXd> cmu = {c.apply_C1(mu), c.apply_C2(mu)};
    fit.vbar.resize(2, 2);
    for (Index e = 0; e < 2; ++e)
        for (Index f = 0; f < 2; ++f)
            fit.vbar(e, f) = 2.0 * se2 * se2 * c.trace_product(e, f) +
                             4.0 * se2 * cmu[static_cast<std::size_t>(e)].dot(cmu[static_cast<std::size_t>(f)]);
    fit.converged = true;
    return fit;
}

}  // namespace mixinf
