#pragma once

#include <Eigen/Dense>

#include <vector>

#include "mixinf/errors.hpp"
#include "mixinf/estimation.hpp"
#include "mixinf/lmm.hpp"

namespace mixinf {

/// BLUP weights b_i, fixed-effect loadings d_i = l_i - X_i' b_i and their delta-derivatives.
struct BlupComponents {
    std::vector<VectorXd> b;                      // [i] n_i
    std::vector<VectorXd> d;                      // [i] p
    std::vector<MatrixXd> db;                     // [i] n_i x r
    std::vector<std::vector<VectorXd>> d2b;       // [i][e * r + f] n_i, empty unless requested

    Index m() const { return static_cast<Index>(b.size()); }

    /// Columns d_i as a p x m matrix.
    MatrixXd D() const {
        MatrixXd out(d.front().size(), m());
        for (Index i = 0; i < m(); ++i) out.col(i) = d[static_cast<std::size_t>(i)];
        return out;
    }
};

inline BlupComponents blup_components(const LmmDataset& data, const BlockSystem& sys, const MixedTargets& t,
                                      bool second_derivatives = false) {
    t.validate(data.m(), data.p(), data.q());
    const Index r = sys.r;
    BlupComponents out;
    for (Index i = 0; i < data.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto& blk = data.block(i);
        const MatrixXd& vinv = sys.Vinv[ui];
        const VectorXd zgh = blk.Z * (sys.G * t.h[ui]);
        VectorXd b = vinv * zgh;
        MatrixXd db(blk.size(), r);
        for (Index e = 0; e < r; ++e) {
            const auto ue = static_cast<std::size_t>(e);
            db.col(e) = vinv * (blk.Z * (sys.dG[ue] * t.h[ui]) - sys.dV[ui][ue] * b);
        }
        if (second_derivatives) {
            std::vector<VectorXd> d2(static_cast<std::size_t>(r * r));
            for (Index e = 0; e < r; ++e)
                for (Index f = 0; f < r; ++f)
                    d2[static_cast<std::size_t>(e * r + f)] =
                        -vinv * (sys.dV[ui][static_cast<std::size_t>(f)] * db.col(e) +
                                 sys.dV[ui][static_cast<std::size_t>(e)] * db.col(f));
            out.d2b.push_back(std::move(d2));
        }
        out.d.push_back(t.l[ui] - blk.X.transpose() * b);
        out.b.push_back(std::move(b));
        out.db.push_back(std::move(db));
    }
    return out;
}

inline BlupComponents blup_components(const LmmDataset& data, const CovarianceStructure& s, const MixedTargets& t,
                                      const VectorXd& delta, bool second_derivatives = false) {
    if (second_derivatives && !s.linear_in_delta())
        throw ArgumentError("second derivatives of b require a structure linear in delta");
    return blup_components(data, evaluate_blocks(data, s, delta), t, second_derivatives);
}

enum class PredictionKind { Blup, Eblup };

struct Prediction {
    VectorXd mu;
    VectorXd delta_used;
    VectorXd beta_used;
    PredictionKind kind = PredictionKind::Blup;
    bool converged = true;
};

/// mu_i = l_i' beta + b_i'(y_i - X_i beta).
inline VectorXd blup_values(const LmmDataset& data, const BlupComponents& c, const MixedTargets& t,
                            const VectorXd& beta) {
    VectorXd mu(data.m());
    for (Index i = 0; i < data.m(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto& blk = data.block(i);
        mu(i) = t.l[ui].dot(beta) + c.b[ui].dot(blk.y - blk.X * beta);
    }
    return mu;
}

inline Prediction blup(const LmmDataset& data, const CovarianceStructure& s, const MixedTargets& t,
                       const VectorXd& delta, const VectorXd& beta) {
    if (beta.size() != data.p()) throw ArgumentError("blup: beta has wrong length");
    const BlupComponents c = blup_components(data, s, t, delta);
    return {blup_values(data, c, t, beta), delta, beta, PredictionKind::Blup, true};
}

inline Prediction eblup(const LmmDataset& data, const CovarianceStructure& s, const MixedTargets& t,
                        const VarianceFit& fit) {
    Prediction p = blup(data, s, t, fit.delta_hat, fit.beta_hat);
    p.kind = PredictionKind::Eblup;
    p.converged = fit.converged;
    return p;
}

}  // namespace mixinf
