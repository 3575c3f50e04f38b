#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mixinf/errors.hpp"
#include "mixinf/estimation.hpp"
#include "mixinf/lmm.hpp"
#include "mixinf/numerics.hpp"
#include "mixinf/prediction.hpp"

namespace mixinf {

enum class Law { Marginal, Conditional };

inline const char* law_name(Law l) { return l == Law::Marginal ? "marginal" : "conditional"; }

/// Everything that depends on the data design and delta but not on y.
struct ModelState {
    BlockSystem sys;
    BlupComponents blup;
    MatrixXd D;  // p x m, columns d_i
};

inline ModelState make_state(const LmmDataset& data, const CovarianceStructure& s, const MixedTargets& t,
                             const VectorXd& delta, bool second_derivatives = false) {
    if (second_derivatives && !s.linear_in_delta())
        throw ArgumentError("second derivatives require a structure linear in delta");
    ModelState st;
    st.sys = evaluate_blocks(data, s, delta);
    st.blup = blup_components(data, st.sys, t, second_derivatives);
    st.D = st.blup.D();
    return st;
}

struct CovEstimate {
    MatrixXd sigma;
    Law law = Law::Marginal;
    std::optional<double> lambda_hat;
    double lambda_raw = 0.0;  // untruncated estimate
    std::vector<std::pair<std::string, MatrixXd>> components;
    VectorXd delta_used;
    EstimationMethod method = EstimationMethod::Known;
    bool clamped = false;

    Index m() const { return sigma.rows(); }

    const MatrixXd* component(const std::string& name) const {
        for (const auto& c : components)
            if (c.first == name) return &c.second;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// Marginal terms.
// ---------------------------------------------------------------------------

/// h'(G - GZ'V^{-1}ZG)h, evaluated as h'(G^{-1} + Z'R^{-1}Z)^{-1}h when G is positive definite.
inline MatrixXd k1(const LmmDataset& data, const ModelState& st, const MixedTargets& t) {
    VectorXd diag(data.m());
    Eigen::LLT<MatrixXd> g_llt(st.sys.G);
    const bool g_pd = g_llt.info() == Eigen::Success && st.sys.G.diagonal().minCoeff() > 0.0;
    const MatrixXd g_inv = g_pd ? MatrixXd(g_llt.solve(MatrixXd::Identity(st.sys.G.rows(), st.sys.G.cols()))) : MatrixXd();
    for (Index i = 0; i < data.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto& z = data.block(i).Z;
        if (g_pd) {
            const MatrixXd prec = g_inv + z.transpose() * st.sys.Rinv[ui] * z;
            diag(i) = t.h[ui].dot(prec.llt().solve(t.h[ui]));
        } else {
            const VectorXd gh = st.sys.G * t.h[ui];
            diag(i) = t.h[ui].dot(gh) - st.blup.b[ui].dot(z * gh);
        }
    }
    return diag.asDiagonal();
}

inline MatrixXd k2(const ModelState& st) {
    MatrixXd out = st.D.transpose() * st.sys.omega * st.D;
    return 0.5 * (out + out.transpose());
}

namespace detail {
/// diag tr(db_i' M_i db_i vbar) for per-cluster M_i.
inline MatrixXd trace_form_diag(const BlupComponents& c, const std::vector<MatrixXd>& mats, const MatrixXd& vbar) {
    VectorXd diag(c.m());
    for (Index i = 0; i < c.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        diag(i) = trace_of_product(c.db[ui].transpose() * mats[ui] * c.db[ui], vbar);
    }
    return diag.asDiagonal();
}
}  // namespace detail

inline MatrixXd k3_hat(const ModelState& st, const MatrixXd& vbar) {
    return detail::trace_form_diag(st.blup, st.sys.V, vbar);
}

namespace detail {
inline CovEstimate finalize(MatrixXd total, Law law, std::vector<std::pair<std::string, MatrixXd>> comps,
                            const VectorXd& delta, EstimationMethod method) {
    CovEstimate out;
    out.law = law;
    out.components = std::move(comps);
    out.delta_used = delta;
    out.method = method;
    const MatrixXd sym = 0.5 * (total + total.transpose());
    const SymmetricRoot root(sym, 1e-10, 1e-12);
    out.clamped = root.clamped();
    out.sigma = out.clamped ? root.matrix() : sym;
    if (out.clamped) out.sigma = 0.5 * (out.sigma + out.sigma.transpose()).eval();
    return out;
}
}  // namespace detail

/// Marginal covariance estimate K1 + K2 + 2 K3 (K3 dropped for known delta).
inline CovEstimate sigma_marginal(const LmmDataset& data, const ModelState& st, const MixedTargets& t,
                                  const VarianceFit& fit) {
    std::vector<std::pair<std::string, MatrixXd>> comps;
    comps.emplace_back("K1", k1(data, st, t));
    comps.emplace_back("K2", k2(st));
    MatrixXd total = comps[0].second + comps[1].second;
    if (fit.method != EstimationMethod::Known) {
        comps.emplace_back("K3", k3_hat(st, fit.vbar));
        total += 2.0 * comps.back().second;
    }
    return detail::finalize(std::move(total), Law::Marginal, std::move(comps), st.sys.delta, fit.method);
}

inline CovEstimate sigma_marginal(const LmmDataset& data, const CovarianceStructure& s, const MixedTargets& t,
                                  const VarianceFit& fit) {
    return sigma_marginal(data, make_state(data, s, t, fit.delta_hat), t, fit);
}

// ---------------------------------------------------------------------------
// The w vectors: w_i' e = mu_tilde_i - E(mu_tilde_i | v), and their derivatives.
// ---------------------------------------------------------------------------

struct WVectors {
    MatrixXd W;                  // n x m, column i = w_i
    std::vector<MatrixXd> dW;    // [e]
    std::vector<MatrixXd> d2W;   // [e * r + f], empty unless requested
    Index r = 0;

    const MatrixXd& d2(Index e, Index f) const { return d2W[static_cast<std::size_t>(e * r + f)]; }
};

namespace detail {
inline MatrixXd embed(const BlockSystem& sys, const std::vector<VectorXd>& cols) {
    MatrixXd out = MatrixXd::Zero(sys.n(), sys.m());
    for (Index i = 0; i < sys.m(); ++i) out.col(i).segment(sys.offset(i), sys.size(i)) = cols[static_cast<std::size_t>(i)];
    return out;
}
}  // namespace detail

inline WVectors w_vectors(const LmmDataset& data, const ModelState& st, bool second = true) {
    const BlockSystem& sys = st.sys;
    const BlupComponents& c = st.blup;
    const Index r = sys.r, m = sys.m();
    if (second && c.d2b.empty()) throw ArgumentError("w_vectors: state lacks second derivatives of b");
    WVectors out;
    out.r = r;
    const MatrixXd& F = sys.F;
    const MatrixXd& om = sys.omega;
    const MatrixXd& D = st.D;

    out.W = detail::embed(sys, c.b) + F * (om * D);

    std::vector<MatrixXd> Fe, Oe, De, Se;
    for (Index e = 0; e < r; ++e) {
        const MatrixXd dvf = sys.apply_dv(e, F);
        Fe.push_back(-sys.apply_vinv(dvf));
        Se.push_back(F.transpose() * dvf);
        Oe.push_back(om * Se.back() * om);
        MatrixXd de(data.p(), m);
        std::vector<VectorXd> be(static_cast<std::size_t>(m));
        for (Index i = 0; i < m; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            be[ui] = c.db[ui].col(e);
            de.col(i) = -data.block(i).X.transpose() * be[ui];
        }
        De.push_back(de);
        out.dW.push_back(detail::embed(sys, be) + Fe.back() * (om * D) + F * (Oe.back() * D) + F * (om * de));
    }
    if (!second) return out;

    for (Index e = 0; e < r; ++e) {
        for (Index f = 0; f < r; ++f) {
            const auto ue = static_cast<std::size_t>(e), uf = static_cast<std::size_t>(f);
            const MatrixXd Fef = -sys.apply_vinv(sys.apply_dv(f, Fe[ue]) + sys.apply_dv(e, Fe[uf]));
            const MatrixXd dSe = Fe[uf].transpose() * sys.apply_dv(e, F) + F.transpose() * sys.apply_dv(e, Fe[uf]);
            const MatrixXd Oef = Oe[uf] * Se[ue] * om + om * dSe * om + om * Se[ue] * Oe[uf];
            MatrixXd Def(data.p(), m);
            std::vector<VectorXd> bef(static_cast<std::size_t>(m));
            for (Index i = 0; i < m; ++i) {
                const auto ui = static_cast<std::size_t>(i);
                bef[ui] = c.d2b[ui][static_cast<std::size_t>(e * r + f)];
                Def.col(i) = -data.block(i).X.transpose() * bef[ui];
            }
            MatrixXd low = Fef * (om * D) + Fe[ue] * (Oe[uf] * D) + Fe[ue] * (om * De[uf]) + Fe[uf] * (Oe[ue] * D) +
                           F * (Oef * D) + F * (Oe[ue] * De[uf]) + Fe[uf] * (om * De[ue]) + F * (Oe[uf] * De[ue]) +
                           F * (om * Def);
            out.d2W.push_back(detail::embed(sys, bef) + low);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conditional terms.
// ---------------------------------------------------------------------------

inline MatrixXd l1(const ModelState& st) {
    VectorXd diag(st.sys.m());
    for (Index i = 0; i < st.sys.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        diag(i) = st.blup.b[ui].dot(st.sys.R[ui] * st.blup.b[ui]);
    }
    return diag.asDiagonal();
}

/// (L2)_{ik} = b_k'K_k d_i + b_i'K_i d_k + sum_l d_i'K_l'R_l^{-1}K_l d_k, K_k = R_k V_k^{-1} X_k omega.
inline MatrixXd l2(const ModelState& st) {
    const BlockSystem& sys = st.sys;
    const Index p = sys.omega.rows(), m = sys.m();
    MatrixXd U(p, m);
    MatrixXd frf = MatrixXd::Zero(p, p);
    for (Index i = 0; i < m; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto fi = sys.F_block(i);
        U.col(i) = sys.omega * (fi.transpose() * (sys.R[ui] * st.blup.b[ui]));
        frf.noalias() += fi.transpose() * sys.R[ui] * fi;
    }
    const MatrixXd q = sys.omega * frf * sys.omega;
    const MatrixXd dtu = st.D.transpose() * U;
    MatrixXd out = dtu + dtu.transpose() + st.D.transpose() * q * st.D;
    return 0.5 * (out + out.transpose());
}

inline MatrixXd l4_hat(const ModelState& st, const MatrixXd& vbar) {
    return detail::trace_form_diag(st.blup, st.sys.R, vbar);
}

/// Hessian of b_i'R_i b_i in delta, for linear structures.
inline MatrixXd l1_hessian(const ModelState& st, Index i) {
    const auto ui = static_cast<std::size_t>(i);
    const Index r = st.sys.r;
    const auto& c = st.blup;
    if (c.d2b.empty()) throw ArgumentError("l1_hessian: state lacks second derivatives of b");
    const MatrixXd& R = st.sys.R[ui];
    const VectorXd& b = c.b[ui];
    MatrixXd h(r, r);
    for (Index e = 0; e < r; ++e) {
        for (Index f = 0; f < r; ++f) {
            const auto& dRe = st.sys.dR[ui][static_cast<std::size_t>(e)];
            const auto& dRf = st.sys.dR[ui][static_cast<std::size_t>(f)];
            const VectorXd be = c.db[ui].col(e), bf = c.db[ui].col(f);
            const VectorXd& bef = c.d2b[ui][static_cast<std::size_t>(e * r + f)];
            h(e, f) = 2.0 * bef.dot(R * b) + 2.0 * be.dot(R * bf) + 2.0 * be.dot(dRf * b) + 2.0 * bf.dot(dRe * b);
        }
    }
    return h;
}

inline MatrixXd l5_hat(const ModelState& st, const MatrixXd& vbar) {
    VectorXd diag(st.sys.m());
    for (Index i = 0; i < st.sys.m(); ++i) diag(i) = 0.5 * trace_of_product(l1_hessian(st, i), vbar);
    return diag.asDiagonal();
}

/// L3 for REML, following the four trace terms of the bias expansion.
inline MatrixXd l3_hat_reml(const ModelState& st, const WVectors& w, const MatrixXd& vbar) {
    const BlockSystem& sys = st.sys;
    const Index r = sys.r, m = sys.m();
    const MatrixXd info = reml_fisher_info(sys);                 // V̄^{-1}
    const std::vector<MatrixXd> dinfo = fisher_info_derivative(sys);
    const BlockLowRank P = sys.P();

    // U_e = sum_f V̄_{fe} dW_f: columns are (V̄)_e' dw_k'/d delta.
    std::vector<MatrixXd> U(static_cast<std::size_t>(r), MatrixXd::Zero(sys.n(), m));
    for (Index e = 0; e < r; ++e)
        for (Index f = 0; f < r; ++f) U[static_cast<std::size_t>(e)] += vbar(f, e) * w.dW[static_cast<std::size_t>(f)];

    MatrixXd N = MatrixXd::Zero(sys.n(), m);
    // 2 sum_e tr{P dV_e P R w_i (V̄)_e' dw_k' R}
    for (Index e = 0; e < r; ++e) {
        const MatrixXd x = P.apply(sys.apply_dv(e, P.apply(sys.apply_r(U[static_cast<std::size_t>(e)]))));
        N += 2.0 * sys.apply_r(x);
    }
    MatrixXd inner = MatrixXd::Zero(sys.n(), m);
    // 4 sum_{e,d} tr{sum_{f,g} V̄_ef V̄_fg w_i d2w_k'/(de dd) R} (V̄^{-1})_{ed}
    const VectorXd cvec = (vbar * vbar).rowwise().sum();
    for (Index e = 0; e < r; ++e)
        for (Index d = 0; d < r; ++d) inner += 4.0 * cvec(e) * info(e, d) * w.d2(e, d);
    // -2 sum_{e,d} tr{sum_f V̄_ef w_i (V̄)_d' dV̄^{-1}/de V̄ dw_k'/d delta R} (V̄^{-1})_{ed}
    const VectorXd rowsum = vbar.rowwise().sum();
    for (Index e = 0; e < r; ++e) {
        for (Index d = 0; d < r; ++d) {
            const VectorXd kappa = (vbar.col(d).transpose() * dinfo[static_cast<std::size_t>(e)] * vbar).transpose();
            MatrixXd z = MatrixXd::Zero(sys.n(), m);
            for (Index f = 0; f < r; ++f) z += kappa(f) * w.dW[static_cast<std::size_t>(f)];
            inner -= 2.0 * rowsum(e) * info(e, d) * z;
        }
    }
    // 2 sum_{e,d,g} tr{w_i (V̄)_e' dw_k'/d delta R} d(V̄^{-1})_{ed}/d delta_g V̄_{ed}
    for (Index e = 0; e < r; ++e) {
        double tau = 0.0;
        for (Index d = 0; d < r; ++d)
            for (Index g = 0; g < r; ++g) tau += dinfo[static_cast<std::size_t>(g)](e, d) * vbar(e, d);
        inner += 2.0 * tau * U[static_cast<std::size_t>(e)];
    }
    N += sys.apply_r(inner);
    return w.W.transpose() * N;
}

/// L3 for Henderson III: sum_e 2 tr{w_i dw_k'/de R C_e R} + sum_{e,g} tr{w_i d2w_k'/(de dg) R} V̄_eg.
inline MatrixXd l3_hat_h3(const ModelState& st, const WVectors& w, const MatrixXd& vbar, const HendersonForms& c) {
    const BlockSystem& sys = st.sys;
    const Index r = sys.r, m = sys.m();
    MatrixXd N = MatrixXd::Zero(sys.n(), m);
    for (Index e = 0; e < r; ++e)
        N += 2.0 * sys.apply_r(c.apply(e, sys.apply_r(w.dW[static_cast<std::size_t>(e)])));
    MatrixXd inner = MatrixXd::Zero(sys.n(), m);
    for (Index e = 0; e < r; ++e)
        for (Index g = 0; g < r; ++g) inner += vbar(e, g) * w.d2(e, g);
    N += sys.apply_r(inner);
    return w.W.transpose() * N;
}

// ---------------------------------------------------------------------------
// A matrix and the non-centrality estimate.
// ---------------------------------------------------------------------------

struct AMatrix {
    MatrixXd A;  // m x n, row i = a_i'
};

inline AMatrix a_matrix(const LmmDataset& data, const ModelState& st, const MixedTargets& t) {
    const BlockSystem& sys = st.sys;
    AMatrix out;
    out.A = (sys.F * (sys.omega * st.D)).transpose();
    for (Index i = 0; i < data.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto& blk = data.block(i);
        const MatrixXd ztz = blk.Z.transpose() * blk.Z;
        Eigen::FullPivLU<MatrixXd> lu(ztz);
        if (!lu.isInvertible()) throw RankError("a_matrix: Z_i'Z_i is singular for cluster '" + blk.id + "'");
        const VectorXd coef = lu.solve(blk.Z.transpose() * st.blup.b[ui] - t.h[ui]);
        out.A.row(i).segment(sys.offset(i), sys.size(i)) += (blk.Z * coef).transpose();
    }
    return out;
}

/// Pieces of the non-centrality estimate that do not depend on the covariance.
struct NoncentralityInputs {
    VectorXd Ay;
    VectorXd AXbeta;
    MatrixXd ARA;  // A R A'
};

inline NoncentralityInputs noncentrality_inputs(const AMatrix& a, const LmmDataset& data, const BlockSystem& sys,
                                                const VectorXd& y, const VectorXd& beta) {
    NoncentralityInputs in;
    in.Ay = a.A * y;
    in.AXbeta = a.A * (data.X() * beta);
    const Index m = a.A.rows();
    in.ARA = MatrixXd::Zero(m, m);
    for (Index i = 0; i < sys.m(); ++i) {
        const auto ai = a.A.middleCols(sys.offset(i), sys.size(i));
        in.ARA.noalias() += ai * sys.R[static_cast<std::size_t>(i)] * ai.transpose();
    }
    return in;
}

/// Untruncated estimate ||S^{-1/2}Ay||^2 - ||S^{-1/2}A R^{1/2}||_F^2 - ||S^{-1/2}AX beta||^2.
inline double lambda_tilde(const MatrixXd& sigma, const NoncentralityInputs& in) {
    const SymmetricRoot root(sigma);
    if (!root.positive_definite()) throw DegeneracyError("lambda_hat: covariance is not positive definite");
    return root.inv_quad(in.Ay) - trace_of_product(root.inverse(), in.ARA) - root.inv_quad(in.AXbeta);
}

inline double lambda_hat(const MatrixXd& sigma, const NoncentralityInputs& in) {
    return std::max(0.0, lambda_tilde(sigma, in));
}

/// Same estimate for L(mu_hat - mu): A -> L A, covariance -> L S L'.
inline NoncentralityInputs transform_inputs(const MatrixXd& L, const NoncentralityInputs& in) {
    return {L * in.Ay, L * in.AXbeta, L * in.ARA * L.transpose()};
}

inline double lambda_hat_linear(const MatrixXd& L, const MatrixXd& sigma, const NoncentralityInputs& in) {
    const MatrixXd ls = L * sigma * L.transpose();
    return lambda_hat(0.5 * (ls + ls.transpose()), transform_inputs(L, in));
}

/// Conditional covariance estimate L1 + L2 + L3 + L4 - L5, with the non-centrality estimate attached.
/// Known delta keeps L1 + L2 only.
inline CovEstimate sigma_conditional(const LmmDataset& data, [[maybe_unused]] const CovarianceStructure& s,
                                     const MixedTargets& t, const VarianceFit& fit, const ModelState& st, const WVectors* w_in = nullptr,
                                     const AMatrix* a_in = nullptr) {
    std::vector<std::pair<std::string, MatrixXd>> comps;
    comps.emplace_back("L1", l1(st));
    comps.emplace_back("L2", l2(st));
    MatrixXd total = comps[0].second + comps[1].second;
    if (fit.method != EstimationMethod::Known) {
        std::optional<WVectors> w_own;
        if (!w_in) w_own = w_vectors(data, st, true);
        const WVectors& w = w_in ? *w_in : *w_own;
        if (fit.method == EstimationMethod::Reml) {
            comps.emplace_back("L3", l3_hat_reml(st, w, fit.vbar));
        } else {
            comps.emplace_back("L3", l3_hat_h3(st, w, fit.vbar, HendersonForms(data)));
        }
        comps.emplace_back("L4", l4_hat(st, fit.vbar));
        comps.emplace_back("L5", l5_hat(st, fit.vbar));
        total += comps[2].second + comps[3].second - comps[4].second;
    }
    CovEstimate out = detail::finalize(std::move(total), Law::Conditional, std::move(comps), st.sys.delta, fit.method);
    std::optional<AMatrix> a_own;
    if (!a_in) a_own = a_matrix(data, st, t);
    const AMatrix& a = a_in ? *a_in : *a_own;
    const NoncentralityInputs in = noncentrality_inputs(a, data, st.sys, data.y(), fit.beta_hat);
    out.lambda_raw = lambda_tilde(out.sigma, in);
    out.lambda_hat = std::max(0.0, out.lambda_raw);
    return out;
}

inline CovEstimate sigma_conditional(const LmmDataset& data, const CovarianceStructure& s, const MixedTargets& t,
                                     const VarianceFit& fit) {
    const bool second = fit.method != EstimationMethod::Known;
    return sigma_conditional(data, s, t, fit, make_state(data, s, t, fit.delta_hat, second));
}

}  // namespace mixinf
