#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mixinf/errors.hpp"

namespace mixinf {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline bool all_finite(const MatrixXd& m) { return m.allFinite(); }

inline double max_abs(const MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------------------
// Woodbury inversion of V = R + Z G Z'.
// ---------------------------------------------------------------------------

struct WoodburyResult {
    MatrixXd inverse;
    bool used_fallback = false;  // inner system singular, dense inverse of V used
};

/// Inverse of R + Z G Z' from R^{-1}.
///
/// Uses the push-through form R^{-1} - R^{-1} Z (I + G Z'R^{-1}Z)^{-1} G Z' R^{-1},
/// which equals the textbook (G^{-1} + Z'R^{-1}Z)^{-1} version whenever G is
/// invertible and reduces to R^{-1} when G = 0.
inline WoodburyResult woodbury_inverse(const MatrixXd& r_inv, const MatrixXd& z, const MatrixXd& g) {
    const Index q = g.rows();
    WoodburyResult out;
    if (q == 0 || g.isZero(0.0)) {
        out.inverse = r_inv;
        return out;
    }
    const MatrixXd rz = r_inv * z;                                // n x q
    const MatrixXd inner = MatrixXd::Identity(q, q) + g * (z.transpose() * rz);
    Eigen::FullPivLU<MatrixXd> lu(inner);
    if (!lu.isInvertible() || lu.rcond() < 1e-14) {
        // Dense fallback: invert V itself.
        const MatrixXd r = r_inv.inverse();
        const MatrixXd v = r + z * g * z.transpose();
        Eigen::FullPivLU<MatrixXd> vlu(v);
        if (!vlu.isInvertible()) throw DegeneracyError("woodbury_inverse: V is singular");
        out.inverse = vlu.inverse();
        out.inverse = 0.5 * (out.inverse + out.inverse.transpose()).eval();
        out.used_fallback = true;
        return out;
    }
    out.inverse = r_inv - rz * lu.solve(g * rz.transpose());
    out.inverse = 0.5 * (out.inverse + out.inverse.transpose()).eval();
    return out;
}

// ---------------------------------------------------------------------------
// Symmetric roots.
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric PSD matrix with the clamping policy used
/// throughout: eigenvalues below -tol * ||M|| are an error, the remaining
/// negatives are clamped to `floor_rel * ||M||` (zero for plain roots).
class SymmetricRoot {
public:
    SymmetricRoot() = default;

    explicit SymmetricRoot(const MatrixXd& m, double neg_tol = 1e-10, double floor_rel = 0.0) {
        if (m.rows() != m.cols()) throw ArgumentError("SymmetricRoot: matrix is not square");
        const MatrixXd sym = 0.5 * (m + m.transpose());
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
        if (es.info() != Eigen::Success) throw NumericError("SymmetricRoot: eigendecomposition failed");
        vectors_ = es.eigenvectors();
        values_ = es.eigenvalues();
        norm_ = values_.size() ? values_.cwiseAbs().maxCoeff() : 0.0;
        min_raw_ = values_.size() ? values_.minCoeff() : 0.0;
        for (Index k = 0; k < values_.size(); ++k) {
            if (values_(k) < -neg_tol * norm_) {
                throw NumericError("SymmetricRoot: matrix is not PSD (eigenvalue " +
                                   std::to_string(values_(k)) + ", norm " + std::to_string(norm_) + ")");
            }
            if (values_(k) <= 0.0) {
                values_(k) = floor_rel * norm_;
                clamped_ = true;
            }
        }
    }

    const VectorXd& eigenvalues() const { return values_; }
    const MatrixXd& eigenvectors() const { return vectors_; }
    bool clamped() const { return clamped_; }
    double min_raw_eigenvalue() const { return min_raw_; }
    double norm() const { return norm_; }
    bool positive_definite() const { return values_.size() > 0 && values_.minCoeff() > 0.0; }

    /// The clamped matrix itself.
    MatrixXd matrix() const { return vectors_ * values_.asDiagonal() * vectors_.transpose(); }

    MatrixXd sqrt() const { return vectors_ * values_.cwiseSqrt().asDiagonal() * vectors_.transpose(); }

    /// Inverse root on the range of M (zero eigenvalues map to zero).
    MatrixXd inv_sqrt() const {
        VectorXd s(values_.size());
        for (Index k = 0; k < s.size(); ++k) s(k) = values_(k) > 0.0 ? 1.0 / std::sqrt(values_(k)) : 0.0;
        return vectors_ * s.asDiagonal() * vectors_.transpose();
    }

    MatrixXd inverse() const {
        VectorXd s(values_.size());
        for (Index k = 0; k < s.size(); ++k) s(k) = values_(k) > 0.0 ? 1.0 / values_(k) : 0.0;
        return vectors_ * s.asDiagonal() * vectors_.transpose();
    }

    /// ||M^{-1/2} x||^2.
    double inv_quad(const VectorXd& x) const {
        const VectorXd t = vectors_.transpose() * x;
        double s = 0.0;
        for (Index k = 0; k < t.size(); ++k)
            if (values_(k) > 0.0) s += t(k) * t(k) / values_(k);
        return s;
    }

    double logdet() const {
        double s = 0.0;
        for (Index k = 0; k < values_.size(); ++k) s += std::log(values_(k));
        return s;
    }

private:
    MatrixXd vectors_;
    VectorXd values_;
    double norm_ = 0.0;
    double min_raw_ = 0.0;
    bool clamped_ = false;
};

/// Symmetric PSD square root and inverse root (on the range).
inline std::pair<MatrixXd, MatrixXd> sym_sqrt(const MatrixXd& m) {
    const SymmetricRoot root(m);
    return {root.sqrt(), root.inv_sqrt()};
}

/// log|M| for an SPD matrix; throws DegeneracyError otherwise.
inline double logdet_spd(const MatrixXd& m) {
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw DegeneracyError("logdet_spd: matrix is not positive definite");
    return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

// ---------------------------------------------------------------------------
// Block diagonal plus low rank: B + L R'.
// ---------------------------------------------------------------------------

/// n x n operator stored as a block diagonal part plus a low-rank correction.
/// Products of such operators stay in the class with additive rank, which keeps
/// the restricted-likelihood traces at O(sum n_i^3 + n k^2).
class BlockLowRank {
public:
    BlockLowRank() = default;

    BlockLowRank(std::vector<MatrixXd> blocks, MatrixXd left, MatrixXd right)
        : blocks_(std::move(blocks)), left_(std::move(left)), right_(std::move(right)) {
        offsets_.resize(blocks_.size() + 1, 0);
        for (std::size_t i = 0; i < blocks_.size(); ++i) offsets_[i + 1] = offsets_[i] + blocks_[i].rows();
        if (left_.size() == 0) left_.resize(dim(), 0);
        if (right_.size() == 0) right_.resize(dim(), 0);
        if (left_.rows() != dim() || right_.rows() != dim() || left_.cols() != right_.cols())
            throw ArgumentError("BlockLowRank: inconsistent factor shapes");
    }

    static BlockLowRank block_diagonal(std::vector<MatrixXd> blocks) {
        return BlockLowRank(std::move(blocks), MatrixXd(), MatrixXd());
    }

    Index dim() const { return offsets_.empty() ? 0 : offsets_.back(); }
    Index rank() const { return left_.cols(); }
    const std::vector<MatrixXd>& blocks() const { return blocks_; }
    const MatrixXd& left() const { return left_; }
    const MatrixXd& right() const { return right_; }

    /// Block diagonal times a tall matrix.
    MatrixXd apply_blocks(const MatrixXd& m) const {
        MatrixXd out(m.rows(), m.cols());
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const Index o = offsets_[i], ni = blocks_[i].rows();
            out.middleRows(o, ni).noalias() = blocks_[i] * m.middleRows(o, ni);
        }
        return out;
    }

    /// Block diagonal transposed times a tall matrix.
    MatrixXd apply_blocks_transposed(const MatrixXd& m) const {
        MatrixXd out(m.rows(), m.cols());
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const Index o = offsets_[i], ni = blocks_[i].rows();
            out.middleRows(o, ni).noalias() = blocks_[i].transpose() * m.middleRows(o, ni);
        }
        return out;
    }

    MatrixXd apply(const MatrixXd& m) const {
        if (m.rows() != dim()) throw ArgumentError("BlockLowRank::apply: dimension mismatch");
        MatrixXd out = apply_blocks(m);
        if (rank() > 0) out.noalias() += left_ * (right_.transpose() * m);
        return out;
    }

    double trace() const {
        double t = 0.0;
        for (const auto& b : blocks_) t += b.trace();
        if (rank() > 0) t += left_.cwiseProduct(right_).sum();
        return t;
    }

    BlockLowRank operator*(const BlockLowRank& o) const {
        if (o.dim() != dim() || o.blocks_.size() != blocks_.size())
            throw ArgumentError("BlockLowRank: incompatible block structure");
        std::vector<MatrixXd> prod(blocks_.size());
        for (std::size_t i = 0; i < blocks_.size(); ++i) prod[i] = blocks_[i] * o.blocks_[i];
        // (B1 + L1 R1')(B2 + L2 R2') = B1 B2 + [B1 L2, L1] [R2, B2' R1 + R2 (L2' R1)]'
        const Index k1 = rank(), k2 = o.rank();
        MatrixXd l(dim(), k1 + k2), r(dim(), k1 + k2);
        if (k2 > 0) {
            l.leftCols(k2) = apply_blocks(o.left_);
            r.leftCols(k2) = o.right_;
        }
        if (k1 > 0) {
            l.rightCols(k1) = left_;
            MatrixXd rr = o.apply_blocks_transposed(right_);
            if (k2 > 0) rr.noalias() += o.right_ * (o.left_.transpose() * right_);
            r.rightCols(k1) = rr;
        }
        return BlockLowRank(std::move(prod), std::move(l), std::move(r));
    }

    MatrixXd dense() const {
        MatrixXd d = MatrixXd::Zero(dim(), dim());
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            d.block(offsets_[i], offsets_[i], blocks_[i].rows(), blocks_[i].cols()) = blocks_[i];
        if (rank() > 0) d.noalias() += left_ * right_.transpose();
        return d;
    }

private:
    std::vector<MatrixXd> blocks_;
    std::vector<Index> offsets_;
    MatrixXd left_, right_;
};

/// tr(A B) for dense square matrices without forming the product.
inline double trace_of_product(const MatrixXd& a, const MatrixXd& b) {
    return a.cwiseProduct(b.transpose()).sum();
}

}  // namespace mixinf
