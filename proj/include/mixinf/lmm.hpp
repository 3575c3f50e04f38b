#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mixinf/errors.hpp"
#include "mixinf/numerics.hpp"

namespace mixinf {

/// Observations of one cluster: y_i = X_i beta + Z_i v_i + e_i.
struct ClusterBlock {
    std::string id;
    VectorXd y;
    MatrixXd X;
    MatrixXd Z;

    Index size() const { return y.size(); }
};

/// Ordered collection of m >= 2 independent clusters sharing p and q.
class LmmDataset {
public:
    LmmDataset() = default;

    LmmDataset(std::vector<ClusterBlock> blocks, std::vector<std::string> x_names = {})
        : blocks_(std::move(blocks)), x_names_(std::move(x_names)) {
        if (blocks_.size() < 2) throw ArgumentError("LmmDataset: at least 2 clusters are required");
        p_ = blocks_.front().X.cols();
        q_ = blocks_.front().Z.cols();
        if (p_ < 1) throw StructuralError("LmmDataset: X must have at least one column");
        if (x_names_.empty())
            for (Index j = 0; j < p_; ++j) x_names_.push_back("x" + std::to_string(j + 1));
        if (static_cast<Index>(x_names_.size()) != p_)
            throw StructuralError("LmmDataset: number of column names does not match X");
        offsets_.assign(blocks_.size() + 1, 0);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& b = blocks_[i];
            const Index ni = b.y.size();
            if (ni < 1) throw StructuralError("LmmDataset: cluster '" + b.id + "' has no observations");
            if (b.X.rows() != ni || b.Z.rows() != ni)
                throw StructuralError("LmmDataset: cluster '" + b.id + "' has inconsistent row counts");
            if (b.X.cols() != p_ || b.Z.cols() != q_)
                throw StructuralError("LmmDataset: cluster '" + b.id + "' has inconsistent column counts");
            if (!b.y.allFinite() || !b.X.allFinite() || !b.Z.allFinite())
                throw StructuralError("LmmDataset: cluster '" + b.id + "' contains non-finite values");
            offsets_[i + 1] = offsets_[i] + ni;
        }
        check_rank();
    }

    Index m() const { return static_cast<Index>(blocks_.size()); }
    Index n() const { return offsets_.back(); }
    Index p() const { return p_; }
    Index q() const { return q_; }
    const ClusterBlock& block(Index i) const { return blocks_[static_cast<std::size_t>(i)]; }
    const std::vector<ClusterBlock>& blocks() const { return blocks_; }
    const std::vector<std::string>& x_names() const { return x_names_; }
    Index offset(Index i) const { return offsets_[static_cast<std::size_t>(i)]; }
    const std::vector<Index>& offsets() const { return offsets_; }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& b : blocks_) out.push_back(b.id);
        return out;
    }

    VectorXd y() const {
        VectorXd out(n());
        for (Index i = 0; i < m(); ++i) out.segment(offset(i), block(i).size()) = block(i).y;
        return out;
    }

    MatrixXd X() const {
        MatrixXd out(n(), p_);
        for (Index i = 0; i < m(); ++i) out.middleRows(offset(i), block(i).size()) = block(i).X;
        return out;
    }

    /// Block diagonal Z, n x (m q).
    MatrixXd Z() const {
        MatrixXd out = MatrixXd::Zero(n(), m() * q_);
        for (Index i = 0; i < m(); ++i) out.block(offset(i), i * q_, block(i).size(), q_) = block(i).Z;
        return out;
    }

    /// Same design with a new response vector (stacked, length n).
    LmmDataset with_y(const VectorXd& y) const {
        if (y.size() != n()) throw ArgumentError("LmmDataset::with_y: length mismatch");
        LmmDataset out = *this;
        for (Index i = 0; i < m(); ++i) out.blocks_[static_cast<std::size_t>(i)].y = y.segment(offset(i), block(i).size());
        return out;
    }

    /// Same data with clusters reordered; perm[k] is the old index placed at k.
    LmmDataset permuted(const std::vector<Index>& perm) const {
        if (static_cast<Index>(perm.size()) != m()) throw ArgumentError("LmmDataset::permuted: size mismatch");
        std::vector<ClusterBlock> b;
        for (Index k : perm) b.push_back(block(k));
        return LmmDataset(std::move(b), x_names_);
    }

private:
    void check_rank() const {
        const MatrixXd x = X();
        Eigen::ColPivHouseholderQR<MatrixXd> qr(x);
        qr.setThreshold(1e-10);
        if (qr.rank() < p_) {
            // Columns beyond the numerical rank in pivot order are the collinear ones.
            std::string names;
            for (Index k = qr.rank(); k < p_; ++k) {
                if (!names.empty()) names += ", ";
                names += x_names_[static_cast<std::size_t>(qr.colsPermutation().indices()(k))];
            }
            throw RankError("LmmDataset: stacked X is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                            std::to_string(p_) + "); collinear column(s): " + names);
        }
    }

    std::vector<ClusterBlock> blocks_;
    std::vector<std::string> x_names_;
    std::vector<Index> offsets_;
    Index p_ = 0, q_ = 0;
};

/// Variance components delta, componentwise >= 0.
struct VarianceParams {
    VectorXd delta;

    VarianceParams() = default;
    explicit VarianceParams(VectorXd d) : delta(std::move(d)) { validate(); }
    VarianceParams(std::initializer_list<double> d) : delta(static_cast<Index>(d.size())) {
        Index k = 0;
        for (double x : d) delta(k++) = x;
        validate();
    }

    Index size() const { return delta.size(); }
    double operator()(Index e) const { return delta(e); }

    void validate() const {
        if (delta.size() < 1) throw ArgumentError("VarianceParams: at least one component is required");
        if (!delta.allFinite()) throw ArgumentError("VarianceParams: components must be finite");
        if ((delta.array() < 0.0).any()) throw ArgumentError("VarianceParams: components must be >= 0");
    }
};

/// G(delta), R_i(delta) and their first derivatives.
class CovarianceStructure {
public:
    virtual ~CovarianceStructure() = default;

    virtual Index num_components() const = 0;
    virtual Index q() const = 0;
    virtual std::string component_name(Index e) const = 0;
    virtual MatrixXd g(const VectorXd& delta) const = 0;
    virtual MatrixXd dg(const VectorXd& delta, Index e) const = 0;
    virtual MatrixXd r(const VectorXd& delta, Index cluster, Index ni) const = 0;
    virtual MatrixXd dr(const VectorXd& delta, Index cluster, Index ni, Index e) const = 0;
    /// True when the second derivatives of G and R_i vanish.
    virtual bool linear_in_delta() const = 0;

    virtual MatrixXd r_inverse(const VectorXd& delta, Index cluster, Index ni) const {
        const MatrixXd rr = r(delta, cluster, ni);
        Eigen::LLT<MatrixXd> llt(rr);
        if (llt.info() != Eigen::Success)
            throw DegeneracyError("R_i is not positive definite for cluster " + std::to_string(cluster));
        return llt.solve(MatrixXd::Identity(ni, ni));
    }

    /// Symmetric square root of R_i.
    virtual MatrixXd r_sqrt(const VectorXd& delta, Index cluster, Index ni) const {
        return SymmetricRoot(r(delta, cluster, ni)).sqrt();
    }

    void check_delta(const VectorXd& delta) const {
        if (delta.size() != num_components())
            throw ArgumentError("delta has " + std::to_string(delta.size()) + " components, structure expects " +
                                std::to_string(num_components()));
        (void)VarianceParams{delta};
    }
};

/// Nested error regression: q = 1, Z_i = 1, G = sigma_v^2, R_i = sigma_e^2 I.
/// delta = (sigma_v^2, sigma_e^2).
class NerStructure final : public CovarianceStructure {
public:
    Index num_components() const override { return 2; }
    Index q() const override { return 1; }
    std::string component_name(Index e) const override { return e == 0 ? "sigma_v2" : "sigma_e2"; }
    MatrixXd g(const VectorXd& d) const override { return MatrixXd::Constant(1, 1, d(0)); }
    MatrixXd dg(const VectorXd&, Index e) const override { return MatrixXd::Constant(1, 1, e == 0 ? 1.0 : 0.0); }
    MatrixXd r(const VectorXd& d, Index, Index ni) const override { return d(1) * MatrixXd::Identity(ni, ni); }
    MatrixXd dr(const VectorXd&, Index, Index ni, Index e) const override {
        return (e == 1 ? 1.0 : 0.0) * MatrixXd::Identity(ni, ni);
    }
    bool linear_in_delta() const override { return true; }
    MatrixXd r_inverse(const VectorXd& d, Index, Index ni) const override {
        if (!(d(1) > 0.0)) throw DegeneracyError("NER: sigma_e2 must be positive");
        return MatrixXd::Identity(ni, ni) / d(1);
    }
    MatrixXd r_sqrt(const VectorXd& d, Index, Index ni) const override {
        return std::sqrt(d(1)) * MatrixXd::Identity(ni, ni);
    }
};

/// mu_i = l_i' beta + h_i' v_i.
struct MixedTargets {
    std::vector<VectorXd> l;
    std::vector<VectorXd> h;

    Index m() const { return static_cast<Index>(l.size()); }

    void validate(Index m, Index p, Index q) const {
        if (static_cast<Index>(l.size()) != m || static_cast<Index>(h.size()) != m)
            throw StructuralError("MixedTargets: expected " + std::to_string(m) + " targets");
        for (Index i = 0; i < m; ++i) {
            const auto& li = l[static_cast<std::size_t>(i)];
            const auto& hi = h[static_cast<std::size_t>(i)];
            if (li.size() != p || hi.size() != q)
                throw StructuralError("MixedTargets: target " + std::to_string(i) + " has wrong dimension");
            if (!li.allFinite() || !hi.allFinite())
                throw StructuralError("MixedTargets: target " + std::to_string(i) + " is not finite");
        }
    }

    /// Target values for given beta and stacked random effects v (length m q).
    VectorXd evaluate(const VectorXd& beta, const VectorXd& v) const {
        VectorXd mu(m());
        const Index q = h.empty() ? 0 : h.front().size();
        for (Index i = 0; i < m(); ++i)
            mu(i) = l[static_cast<std::size_t>(i)].dot(beta) + h[static_cast<std::size_t>(i)].dot(v.segment(i * q, q));
        return mu;
    }
};

/// Cluster means of X and h = 1.
inline MixedTargets cluster_mean_targets(const LmmDataset& data) {
    MixedTargets t;
    for (const auto& b : data.blocks()) {
        t.l.push_back(b.X.colwise().mean().transpose());
        t.h.push_back(VectorXd::Ones(data.q()));
    }
    return t;
}

struct NerRow {
    std::string cluster;
    double y = 0.0;
    VectorXd x;
};

struct NerSpec {
    std::vector<NerRow> rows;
    /// Clusters that must appear; a declared cluster without rows is an error.
    std::vector<std::string> declared_clusters;
    std::vector<std::string> x_names;
};

struct NerModel {
    LmmDataset data;
    std::shared_ptr<const NerStructure> structure;
    MixedTargets targets;
};

inline NerModel build_ner(const NerSpec& spec) {
    if (spec.rows.empty()) throw StructuralError("build_ner: no rows");
    const Index p = spec.rows.front().x.size();
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t r = 0; r < spec.rows.size(); ++r) {
        const auto& row = spec.rows[r];
        if (row.cluster.empty()) throw StructuralError("build_ner: row " + std::to_string(r + 1) + " has no cluster id");
        if (row.x.size() != p)
            throw StructuralError("build_ner: row " + std::to_string(r + 1) + " has " + std::to_string(row.x.size()) +
                                  " covariates, expected " + std::to_string(p));
        auto it = members.find(row.cluster);
        if (it == members.end()) {
            order.push_back(row.cluster);
            members[row.cluster].push_back(r);
        } else {
            it->second.push_back(r);
        }
    }
    for (const auto& c : spec.declared_clusters)
        if (!members.count(c)) throw StructuralError("build_ner: cluster '" + c + "' has no rows");

    std::vector<ClusterBlock> blocks;
    for (const auto& id : order) {
        const auto& idx = members[id];
        ClusterBlock b;
        b.id = id;
        const Index ni = static_cast<Index>(idx.size());
        b.y.resize(ni);
        b.X.resize(ni, p);
        b.Z = MatrixXd::Ones(ni, 1);
        for (Index k = 0; k < ni; ++k) {
            b.y(k) = spec.rows[idx[static_cast<std::size_t>(k)]].y;
            b.X.row(k) = spec.rows[idx[static_cast<std::size_t>(k)]].x.transpose();
        }
        blocks.push_back(std::move(b));
    }
    NerModel out{LmmDataset(std::move(blocks), spec.x_names), std::make_shared<NerStructure>(), {}};
    out.targets = cluster_mean_targets(out.data);
    return out;
}

inline MatrixXd marginal_cov(const CovarianceStructure& s, const LmmDataset& data, Index i, const VectorXd& delta) {
    const auto& b = data.block(i);
    MatrixXd v = s.r(delta, i, b.size()) + b.Z * s.g(delta) * b.Z.transpose();
    Eigen::LLT<MatrixXd> llt(v);
    if (llt.info() != Eigen::Success)
        throw DegeneracyError("V_i is not positive definite for cluster '" + b.id + "'");
    return v;
}

inline MatrixXd marginal_cov_derivative(const CovarianceStructure& s, const LmmDataset& data, Index i,
                                        const VectorXd& delta, Index e) {
    const auto& b = data.block(i);
    return s.dr(delta, i, b.size(), e) + b.Z * s.dg(delta, e) * b.Z.transpose();
}

/// NER intraclass correlation sigma_v^2 / (sigma_v^2 + sigma_e^2 / n_i).
inline double icc(const VectorXd& delta, Index ni) {
    if (delta.size() != 2) throw ArgumentError("icc: expects NER components (sigma_v2, sigma_e2)");
    if (ni < 1) throw ArgumentError("icc: n_i must be >= 1");
    const double den = delta(0) + delta(1) / static_cast<double>(ni);
    if (!(den > 0.0)) throw DegeneracyError("icc: both variance components are zero");
    return delta(0) / den;
}

struct TukeyConditionReport {
    double max_h_deviation = 0.0;
    double max_l_deviation = 0.0;
    double max_precision_deviation = 0.0;  // |1'V_i^{-1}1 - 1'V_j^{-1}1|
    double tolerance = 0.0;
    bool passed = true;
};

inline TukeyConditionReport check_tukey_conditions(const LmmDataset& data, const CovarianceStructure& s,
                                                   const MixedTargets& t, const VectorXd& delta,
                                                   double tolerance = 1e-8) {
    s.check_delta(delta);
    t.validate(data.m(), data.p(), data.q());
    TukeyConditionReport rep;
    rep.tolerance = tolerance;
    std::vector<double> prec(static_cast<std::size_t>(data.m()));
    for (Index i = 0; i < data.m(); ++i) {
        const MatrixXd v = marginal_cov(s, data, i, delta);
        const VectorXd one = VectorXd::Ones(v.rows());
        prec[static_cast<std::size_t>(i)] = one.dot(v.llt().solve(one));
    }
    for (Index i = 0; i < data.m(); ++i) {
        for (Index j = i + 1; j < data.m(); ++j) {
            const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
            rep.max_h_deviation = std::max(rep.max_h_deviation, (t.h[ui] - t.h[uj]).norm());
            rep.max_l_deviation = std::max(rep.max_l_deviation, (t.l[ui] - t.l[uj]).norm());
            rep.max_precision_deviation = std::max(rep.max_precision_deviation, std::abs(prec[ui] - prec[uj]));
        }
    }
    rep.passed = rep.max_h_deviation <= tolerance && rep.max_l_deviation <= tolerance &&
                 rep.max_precision_deviation <= tolerance;
    return rep;
}

/// Per-cluster matrices at a fixed delta, plus the GLS information.
struct BlockSystem {
    VectorXd delta;
    Index r = 0;
    MatrixXd G;
    std::vector<MatrixXd> dG;                       // [e]
    std::vector<MatrixXd> R, Rinv, V, Vinv;         // [i]
    std::vector<std::vector<MatrixXd>> dR, dV;      // [i][e]
    MatrixXd F;                                     // V^{-1} X, stacked n x p
    MatrixXd info;                                  // X' V^{-1} X
    MatrixXd omega;                                 // (X' V^{-1} X)^{-1}
    std::vector<Index> offsets;
    bool woodbury_fallback = false;

    Index m() const { return static_cast<Index>(V.size()); }
    Index n() const { return offsets.back(); }
    Index size(Index i) const { return offsets[static_cast<std::size_t>(i) + 1] - offsets[static_cast<std::size_t>(i)]; }
    Index offset(Index i) const { return offsets[static_cast<std::size_t>(i)]; }
    auto F_block(Index i) const { return F.middleRows(offset(i), size(i)); }

    /// Block diagonal of the given per-cluster matrices applied to a tall matrix.
    static MatrixXd apply_blocks(const std::vector<MatrixXd>& blocks, const std::vector<Index>& off, const MatrixXd& x) {
        MatrixXd out(x.rows(), x.cols());
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const Index o = off[i], ni = off[i + 1] - off[i];
            out.middleRows(o, ni).noalias() = blocks[i] * x.middleRows(o, ni);
        }
        return out;
    }

    MatrixXd apply_vinv(const MatrixXd& x) const { return apply_blocks(Vinv, offsets, x); }
    MatrixXd apply_r(const MatrixXd& x) const { return apply_blocks(R, offsets, x); }
    MatrixXd apply_dv(Index e, const MatrixXd& x) const {
        MatrixXd out(x.rows(), x.cols());
        for (Index i = 0; i < m(); ++i)
            out.middleRows(offset(i), size(i)).noalias() = dV[static_cast<std::size_t>(i)][static_cast<std::size_t>(e)] * x.middleRows(offset(i), size(i));
        return out;
    }

    /// P = V^{-1} - F omega F'.
    BlockLowRank P() const { return BlockLowRank(Vinv, -F * omega, F); }

    /// P dV_e as a block plus low-rank operator.
    BlockLowRank P_dV(Index e) const {
        std::vector<MatrixXd> blocks(V.size());
        for (std::size_t i = 0; i < V.size(); ++i) blocks[i] = Vinv[i] * dV[i][static_cast<std::size_t>(e)];
        return BlockLowRank(std::move(blocks), -F * omega, apply_dv(e, F));
    }

    /// Block diagonal operator assembled from per-cluster matrices.
    BlockLowRank blocks_op(const std::vector<MatrixXd>& b) const { return BlockLowRank::block_diagonal(b); }
};

inline BlockSystem evaluate_blocks(const LmmDataset& data, const CovarianceStructure& s, const VectorXd& delta) {
    s.check_delta(delta);
    if (s.q() != data.q()) throw StructuralError("covariance structure q does not match the dataset");
    BlockSystem sys;
    sys.delta = delta;
    sys.r = s.num_components();
    sys.offsets = data.offsets();
    sys.G = s.g(delta);
    for (Index e = 0; e < sys.r; ++e) sys.dG.push_back(s.dg(delta, e));
    const Index m = data.m(), p = data.p();
    sys.F.resize(data.n(), p);
    sys.info = MatrixXd::Zero(p, p);
    for (Index i = 0; i < m; ++i) {
        const auto& b = data.block(i);
        const Index ni = b.size();
        MatrixXd ri = s.r(delta, i, ni);
        MatrixXd rinv;
        try {
            rinv = s.r_inverse(delta, i, ni);
        } catch (const DegeneracyError&) {
            throw DegeneracyError("R_i is not positive definite for cluster '" + b.id + "'");
        }
        MatrixXd vi = ri + b.Z * sys.G * b.Z.transpose();
        auto wb = woodbury_inverse(rinv, b.Z, sys.G);
        sys.woodbury_fallback = sys.woodbury_fallback || wb.used_fallback;
        std::vector<MatrixXd> dri, dvi;
        for (Index e = 0; e < sys.r; ++e) {
            dri.push_back(s.dr(delta, i, ni, e));
            dvi.push_back(dri.back() + b.Z * sys.dG[static_cast<std::size_t>(e)] * b.Z.transpose());
        }
        sys.F.middleRows(sys.offsets[static_cast<std::size_t>(i)], ni).noalias() = wb.inverse * b.X;
        sys.info.noalias() += b.X.transpose() * sys.F.middleRows(sys.offsets[static_cast<std::size_t>(i)], ni);
        sys.R.push_back(std::move(ri));
        sys.Rinv.push_back(std::move(rinv));
        sys.V.push_back(std::move(vi));
        sys.Vinv.push_back(std::move(wb.inverse));
        sys.dR.push_back(std::move(dri));
        sys.dV.push_back(std::move(dvi));
    }
    sys.info = 0.5 * (sys.info + sys.info.transpose()).eval();
    Eigen::LDLT<MatrixXd> ldlt(sys.info);
    const double scale = sys.info.diagonal().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 1e-12 * scale))
        throw RankError("X'V^{-1}X is singular; check the covariate columns for collinearity");
    sys.omega = ldlt.solve(MatrixXd::Identity(p, p));
    sys.omega = 0.5 * (sys.omega + sys.omega.transpose()).eval();
    return sys;
}

}  // namespace mixinf
