#include <gtest/gtest.h>

#include <random>

#include "mixinf/inference.hpp"
#include "test_util.hpp"

using namespace mixinf;
using testutil::max_abs_diff;

namespace {

VectorXd d2(double a, double b) {
    VectorXd d(2);
    d << a, b;
    return d;
}

const NerStructure kNer;

CovEstimate cov_of(const MatrixXd& sigma, Law law = Law::Marginal, std::optional<double> lambda = std::nullopt) {
    CovEstimate c;
    c.sigma = sigma;
    c.law = law;
    c.lambda_hat = lambda;
    return c;
}

/// Andalucía-style 16 x 15 contrasts: (I_15, 0) - 1 1'/16.
MatrixXd sixteen_contrasts() {
    MatrixXd L = MatrixXd::Zero(15, 16);
    L.leftCols(15) = MatrixXd::Identity(15, 15);
    L.array() -= 1.0 / 16.0;
    return L;
}

VectorXd stacked_zv(const std::vector<Index>& sizes, const VectorXd& v) {
    Index n = 0;
    for (Index s : sizes) n += s;
    VectorXd zv(n);
    Index k = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        zv.segment(k, sizes[i]).setConstant(v(static_cast<Index>(i)));
        k += sizes[i];
    }
    return zv;
}

}  // namespace

TEST(Ellipsoid, CenterNeverRejects) {
    const VectorXd mu = VectorXd::LinSpaced(4, -1, 2);
    const auto t = ellipsoid_contains(mu, cov_of(MatrixXd::Identity(4, 4)), mu, 0.05);
    EXPECT_EQ(t.statistic, 0.0);
    EXPECT_FALSE(t.reject);
    EXPECT_DOUBLE_EQ(t.p_value, 1.0);
}

TEST(Ellipsoid, OneDimensionalIsTwoSidedZTest) {
    for (double z : {0.3, 1.5, 1.95, 1.97, 2.5}) {
        const VectorXd mu_hat = VectorXd::Constant(1, 2.0 * z), mu0 = VectorXd::Zero(1);
        const auto t = ellipsoid_contains(mu_hat, cov_of(MatrixXd::Constant(1, 1, 4.0)), mu0, 0.05);
        EXPECT_NEAR(t.statistic, z * z, 1e-12);
        EXPECT_NEAR(t.threshold, 3.841458820694124, 1e-9);
        EXPECT_EQ(t.reject, z > 1.959963984540054);
        EXPECT_NEAR(t.p_value, 2.0 * (1.0 - normal_cdf(z)), 1e-10);
    }
}

TEST(Ellipsoid, ConditionalUsesNoncentralQuantile) {
    const auto t = ellipsoid_contains(VectorXd::Ones(3), cov_of(MatrixXd::Identity(3, 3), Law::Conditional, 2.5),
                                      VectorXd::Zero(3), 0.1);
    EXPECT_EQ(t.df, 3);
    EXPECT_EQ(t.noncentrality, 2.5);
    EXPECT_EQ(t.threshold, noncentral_chi2_quantile(3, 2.5, 0.9));
    EXPECT_NEAR(t.p_value, 1.0 - noncentral_chi2_cdf(3.0, 3, 2.5), 1e-14);
}

TEST(Ellipsoid, RejectsBadInput) {
    const VectorXd z = VectorXd::Zero(2);
    EXPECT_THROW(ellipsoid_contains(z, cov_of(MatrixXd::Identity(3, 3)), z, 0.05), ArgumentError);
    EXPECT_THROW(ellipsoid_contains(z, cov_of(MatrixXd::Identity(2, 2)), z, 0.0), ArgumentError);
    EXPECT_THROW(ellipsoid_contains(z, cov_of(MatrixXd::Identity(2, 2), Law::Conditional), z, 0.05), ArgumentError);
    EXPECT_THROW(ellipsoid_contains(z, cov_of(MatrixXd::Zero(2, 2)), z, 0.05), DegeneracyError);
}

TEST(Ellipsoid, ThresholdsDecreaseInAlpha) {
    std::mt19937_64 rng(81);
    const MatrixXd s = testutil::random_spd(rng, 5);
    const VectorXd mu_hat = testutil::normals(rng, 5, 2.0);
    bool rejected = false;
    double prev = 1e300;
    for (double alpha : {0.001, 0.01, 0.05, 0.1, 0.3, 0.6, 0.9}) {
        const auto t = ellipsoid_contains(mu_hat, cov_of(s), VectorXd::Zero(5), alpha);
        EXPECT_LT(t.threshold, prev);
        prev = t.threshold;
        if (rejected) {
            EXPECT_TRUE(t.reject) << alpha;
        }
        rejected = rejected || t.reject;
    }
}

TEST(LinearTest, EstimateAtHypothesisAndScalarReduction) {
    std::mt19937_64 rng(82);
    const MatrixXd s = testutil::random_spd(rng, 4);
    const VectorXd mu_hat = testutil::normals(rng, 4);
    const auto t0 = test_linear({MatrixXd::Identity(4, 4), mu_hat}, mu_hat, cov_of(s), 0.05);
    EXPECT_EQ(t0.statistic, 0.0);
    EXPECT_DOUBLE_EQ(t0.p_value, 1.0);
    const VectorXd a = testutil::normals(rng, 4);
    const MatrixXd e1 = MatrixXd::Identity(4, 4).topRows(1);
    const auto t1 = test_linear({e1, a}, mu_hat, cov_of(s), 0.05);
    EXPECT_NEAR(t1.statistic, std::pow(mu_hat(0) - a(0), 2) / s(0, 0), 1e-12);
    EXPECT_EQ(t1.df, 1);
}

TEST(LinearTest, IdentityMatchesEllipsoid) {
    std::mt19937_64 rng(83);
    const MatrixXd s = testutil::random_spd(rng, 6);
    const VectorXd mu_hat = testutil::normals(rng, 6), a = testutil::normals(rng, 6);
    const auto t = test_linear({MatrixXd::Identity(6, 6), a}, mu_hat, cov_of(s), 0.05);
    const auto e = ellipsoid_contains(mu_hat, cov_of(s), a, 0.05);
    EXPECT_NEAR(t.statistic, e.statistic, 1e-10);
    EXPECT_EQ(t.threshold, e.threshold);
}

TEST(LinearTest, RankDeficientLIsRankError) {
    MatrixXd L(2, 3);
    L << 1, -1, 0, 2, -2, 0;
    EXPECT_THROW(test_linear({L, VectorXd::Zero(3)}, VectorXd::Zero(3), cov_of(MatrixXd::Identity(3, 3)), 0.05),
                 RankError);
    EXPECT_THROW(test_linear({MatrixXd::Identity(2, 3), VectorXd::Zero(2)}, VectorXd::Zero(3),
                             cov_of(MatrixXd::Identity(3, 3)), 0.05),
                 ArgumentError);
}

TEST(LinearTest, ConditionalNeedsInputs) {
    EXPECT_THROW(test_linear({MatrixXd::Identity(2, 2), VectorXd::Zero(2)}, VectorXd::Zero(2),
                             cov_of(MatrixXd::Identity(2, 2), Law::Conditional, 0.0), 0.05),
                 ArgumentError);
}

TEST(LinearTest, InvariantToRowReparameterization) {
    std::mt19937_64 rng(84);
    const MatrixXd s = testutil::random_spd(rng, 7);
    const VectorXd mu_hat = testutil::normals(rng, 7), a = testutil::normals(rng, 7);
    const MatrixXd L = testutil::normals(rng, 21).reshaped(3, 7);
    const MatrixXd Q = testutil::random_spd(rng, 3) + testutil::normals(rng, 9).reshaped(3, 3);
    const auto t = test_linear({L, a}, mu_hat, cov_of(s), 0.05);
    const auto tq = test_linear({Q * L, a}, mu_hat, cov_of(s), 0.05);
    EXPECT_NEAR(t.statistic, tq.statistic, 1e-9 * std::max(1.0, t.statistic));
}

TEST(WithinSubsetContrasts, ShapeAndRowSums) {
    const MatrixXd L = within_subset_contrasts(6, {1, 3, 4, 5});
    ASSERT_EQ(L.rows(), 3);
    ASSERT_EQ(L.cols(), 6);
    for (Index r = 0; r < 3; ++r) EXPECT_NEAR(L.row(r).sum(), 0.0, 1e-15);
    EXPECT_EQ(L.col(0).cwiseAbs().sum(), 0.0);
    EXPECT_EQ(L.col(2).cwiseAbs().sum(), 0.0);
    EXPECT_DOUBLE_EQ(L(0, 1), 0.75);
    EXPECT_THROW(within_subset_contrasts(6, {2}), ArgumentError);
}

TEST(LinearTest, SixteenClusterContrastsFollowChiSquareUnderKnownDelta) {
    std::mt19937_64 rng(85);
    const std::vector<Index> sizes(16, 5);
    const VectorXd d = d2(4, 4);
    const NerModel shape = testutil::ner_model(sizes, VectorXd::Zero(80));
    const CovEstimate cov = sigma_marginal(shape.data, kNer, shape.targets, known_delta_fit(shape.data, kNer, d));
    const MatrixXd L = sixteen_contrasts();
    std::vector<double> stats, full_p;
    for (int r = 0; r < 2000; ++r) {
        const VectorXd v = testutil::normals(rng, 16, 2.0);
        const NerModel model = testutil::ner_model(sizes, testutil::ner_response(rng, sizes, 1.0, v, 4.0));
        const VectorXd mu_hat = eblup(model.data, kNer, model.targets, known_delta_fit(model.data, kNer, d)).mu;
        const VectorXd mu = (v.array() + 1.0).matrix();
        stats.push_back(test_linear({L, mu}, mu_hat, cov, 0.05).statistic);
        full_p.push_back(ellipsoid_contains(mu_hat, cov, mu, 0.05).p_value);
    }
    EXPECT_LT(testutil::ks_distance(stats, [](double x) { return chi2_cdf(x, 15); }), 0.05);
    EXPECT_LT(testutil::ks_distance(full_p, [](double p) { return std::clamp(p, 0.0, 1.0); }), 1.63 / std::sqrt(2000.0));
}

TEST(LinearTest, ConditionalPValuesUniformWithExactNoncentrality) {
    std::mt19937_64 rng(86);
    const Index m = 8;
    const MatrixXd s = testutil::random_spd(rng, m);
    const MatrixXd root = SymmetricRoot(s).sqrt();
    const VectorXd bias = testutil::normals(rng, m, 0.8);
    const MatrixXd L = within_subset_contrasts(m, {0, 1, 2, 3, 4});
    // Ay = bias, AX beta = 0, ARA = 0 makes the estimate equal the exact value.
    NoncentralityInputs in{bias, VectorXd::Zero(m), MatrixXd::Zero(m, m)};
    const CovEstimate cov = cov_of(s, Law::Conditional, 0.0);
    std::vector<double> ps;
    for (int r = 0; r < 3000; ++r) {
        const VectorXd mu_hat = bias + root * testutil::normals(rng, m);
        ps.push_back(test_linear({L, VectorXd::Zero(m)}, mu_hat, cov, 0.05, &in).p_value);
    }
    EXPECT_LT(testutil::ks_distance(ps, [](double p) { return p; }), 1.63 / std::sqrt(3000.0));
}

TEST(Tukey, EqualEstimatesNeverReject) {
    const auto r = tukey_all_pairs(VectorXd::Constant(5, 3.0), cov_of(MatrixXd::Identity(5, 5)), {0, 1, 2, 3, 4}, 0.05);
    EXPECT_EQ(r.contrasts.size(), 10u);
    for (const auto& c : r.contrasts) {
        EXPECT_EQ(c.statistic, 0.0);
        EXPECT_FALSE(c.reject);
    }
}

TEST(Tukey, MPrimeFloorAndThreshold) {
    const auto two = tukey_all_pairs(VectorXd::Zero(2), cov_of(MatrixXd::Identity(2, 2)), {0, 1}, 0.05);
    EXPECT_EQ(two.m_prime, 2);
    EXPECT_TRUE(two.m_prime_floored);
    EXPECT_FALSE(two.warnings.empty());
    const auto pair = tukey_all_pairs(VectorXd::Zero(10), cov_of(MatrixXd::Identity(10, 10)), {3, 7}, 0.05);
    EXPECT_EQ(pair.m_prime, 9);
    EXPECT_FALSE(pair.m_prime_floored);
    EXPECT_EQ(pair.threshold, range_quantile(9, 0.95));
    EXPECT_THROW(tukey_all_pairs(VectorXd::Zero(3), cov_of(MatrixXd::Identity(3, 3)), {1}, 0.05), ArgumentError);
}

TEST(Tukey, SymmetricStandardizerAndPositive) {
    std::mt19937_64 rng(87);
    for (int rep = 0; rep < 20; ++rep) {
        const MatrixXd s = testutil::random_spd(rng, 6);
        const MatrixXd root = SymmetricRoot(s).sqrt();
        const VectorXd mu_hat = testutil::normals(rng, 6);
        for (Index i = 0; i < 6; ++i)
            for (Index j = 0; j < 6; ++j) {
                if (i == j) continue;
                EXPECT_EQ(c_plus_pair(root, i, j), c_plus_pair(root, j, i));
                EXPECT_GT(c_plus_pair(root, i, j), 0.0);
            }
        const auto fwd = tukey_all_pairs(mu_hat, cov_of(s), {1, 4}, 0.05);
        const auto rev = tukey_all_pairs(mu_hat, cov_of(s), {4, 1}, 0.05);
        EXPECT_EQ(fwd.contrasts[0].statistic, rev.contrasts[0].statistic);
    }
}

TEST(Tukey, IdentityCovarianceStatistic) {
    VectorXd mu_hat(4);
    mu_hat << 0, 1, 5, 2;
    const auto r = tukey_all_pairs(mu_hat, cov_of(MatrixXd::Identity(4, 4)), {0, 2}, 0.05);
    EXPECT_NEAR(r.contrasts[0].statistic, 5.0, 1e-12);
    EXPECT_TRUE(r.contrasts[0].reject);
    EXPECT_NEAR(r.contrasts[0].p_value, 1.0 - range_cdf(5.0, 3), 1e-12);
}

TEST(TukeyInterval, IdentityHalfWidthAndCentering) {
    std::mt19937_64 rng(88);
    const VectorXd mu_hat = testutil::normals(rng, 5);
    VectorXd c = VectorXd::Zero(5);
    c(0) = 1;
    c(1) = -1;
    const auto iv = tukey_interval(c, mu_hat, cov_of(MatrixXd::Identity(5, 5)), 0.05, 5, 0.0);
    EXPECT_NEAR(iv.upper - iv.center, range_quantile(5, 0.95), 1e-12);
    EXPECT_NEAR(iv.c_plus, 1.0, 1e-12);
    const auto wide = tukey_interval(c, mu_hat, cov_of(testutil::random_spd(rng, 5)), 0.05, 3, 0.7);
    EXPECT_LE(wide.lower, c.dot(mu_hat));
    EXPECT_GE(wide.upper, c.dot(mu_hat));
    EXPECT_THROW(tukey_interval(c, mu_hat, cov_of(MatrixXd::Identity(5, 5)), 0.05, 5, -1.0), ArgumentError);
}

TEST(TukeyInterval, JointCoverageOfAllSimpleContrasts) {
    std::mt19937_64 rng(89);
    const Index m = 100;
    const std::vector<Index> sizes(static_cast<std::size_t>(m), 5);
    const VectorXd d = d2(8, 2);
    const NerModel shape = testutil::ner_model(sizes, VectorXd::Zero(500));
    const ModelState st = make_state(shape.data, kNer, shape.targets, d);
    const MatrixXd sigma = l1(st) + l2(st);
    const MatrixXd root = SymmetricRoot(sigma).sqrt();
    const AMatrix a = a_matrix(shape.data, st, shape.targets);
    const double q = range_quantile(static_cast<int>(m), 0.95);
    MatrixXd cp(m, m);
    for (Index i = 0; i < m; ++i)
        for (Index j = i + 1; j < m; ++j) cp(i, j) = c_plus_pair(root, i, j);
    const int reps = 400;
    int covered = 0;
    for (int r = 0; r < reps; ++r) {
        const VectorXd v = testutil::normals(rng, m, std::sqrt(8.0));
        const VectorXd bias = a.A * stacked_zv(sizes, v);
        const NerModel model = testutil::ner_model(sizes, testutil::ner_response(rng, sizes, 1.0, v, 2.0));
        const VectorXd err = eblup(model.data, kNer, model.targets, known_delta_fit(model.data, kNer, d)).mu -
                             (v.array() + 1.0).matrix();
        bool all = true;
        for (Index i = 0; i < m && all; ++i)
            for (Index j = i + 1; j < m; ++j) {
                const double eta = std::abs(bias(i) - bias(j)) / cp(i, j);
                if (std::abs(err(i) - err(j)) > cp(i, j) * (eta + q)) {
                    all = false;
                    break;
                }
            }
        covered += all;
    }
    EXPECT_GE(static_cast<double>(covered) / reps, 0.93);
}

TEST(Projection, IdentityWhenAccepted) {
    const VectorXd mu_hat = VectorXd::Constant(3, 0.1);
    const LinearHypothesis hyp{MatrixXd::Identity(3, 3).topRows(2), VectorXd::Zero(3)};
    const CovEstimate cov = cov_of(MatrixXd::Identity(3, 3));
    const auto test = test_linear(hyp, mu_hat, cov, 0.05);
    const auto p = project_onto_ellipsoid(hyp, mu_hat, cov, test, {0, 1});
    EXPECT_FALSE(p.adjusted);
    EXPECT_EQ(p.mu_star, mu_hat);
    EXPECT_EQ(p.coordinate_delta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Projection, ScalarShrinkMagnitude) {
    VectorXd mu_hat(3);
    mu_hat << 5, 0, 0;
    const LinearHypothesis hyp{MatrixXd::Identity(3, 3).topRows(1), VectorXd::Zero(3)};
    const CovEstimate cov = cov_of(MatrixXd::Identity(3, 3));
    const auto test = test_linear(hyp, mu_hat, cov, 0.05);
    const auto p = project_onto_ellipsoid(hyp, mu_hat, cov, test, {0});
    ASSERT_TRUE(p.adjusted);
    EXPECT_NEAR(p.contrast_adjustment(0), (1 - std::sqrt(test.threshold / test.statistic)) * 5.0, 1e-12);
    EXPECT_NEAR(p.mu_star(0), std::sqrt(test.threshold), 1e-12);
}

TEST(Projection, AdjustedHypothesisSitsOnBoundary) {
    std::mt19937_64 rng(90);
    const std::vector<Index> sizes(16, 6);
    VectorXd v = testutil::normals(rng, 16, 1.0);
    v.head(8).array() += 3.0;
    const NerModel model = testutil::ner_model(sizes, testutil::ner_response(rng, sizes, 1.0, v, 2.0));
    const VarianceFit fit = fit_reml(model.data, kNer);
    const CovEstimate cov = sigma_marginal(model.data, kNer, model.targets, fit);
    const VectorXd mu_hat = eblup(model.data, kNer, model.targets, fit).mu;
    const LinearHypothesis hyp{sixteen_contrasts(), VectorXd::Zero(16)};
    const auto test = test_linear(hyp, mu_hat, cov, 0.05);
    ASSERT_TRUE(test.reject);
    std::vector<Index> designated(15);
    for (Index r = 0; r < 15; ++r) designated[static_cast<std::size_t>(r)] = r;
    const auto p = project_onto_ellipsoid(hyp, mu_hat, cov, test, designated);
    ASSERT_FALSE(p.attribution_error.has_value());
    EXPECT_NEAR(p.statistic_after, test.threshold, 1e-9 * test.threshold);
    const auto again = test_linear({hyp.L, p.a_star}, mu_hat, cov, 0.05);
    EXPECT_NEAR(again.statistic, test.threshold, 1e-9 * test.threshold);
    EXPECT_LT(max_abs_diff(hyp.L * (p.mu_star - hyp.a), p.t_star), 1e-9);
}

TEST(Projection, MissingDesignationReportsError) {
    VectorXd mu_hat(2);
    mu_hat << 9, 0;
    const LinearHypothesis hyp{MatrixXd::Identity(2, 2), VectorXd::Zero(2)};
    const CovEstimate cov = cov_of(MatrixXd::Identity(2, 2));
    const auto p = project_onto_ellipsoid(hyp, mu_hat, cov, test_linear(hyp, mu_hat, cov, 0.05), {0});
    EXPECT_TRUE(p.adjusted);
    EXPECT_TRUE(p.attribution_error.has_value());
    EXPECT_EQ(p.t_star.size(), 2);
}

TEST(Clusterwise, NoDistortionGivesNominalCoverage) {
    EXPECT_NEAR(clusterwise_coverage_shift(0.0, 2.0, 2.0, 0.05).coverage, 0.95, 1e-12);
    EXPECT_THROW(clusterwise_coverage_shift(0.0, 0.0, 1.0, 0.05), DegeneracyError);
}

TEST(Clusterwise, MatchesMonteCarloForFixedEffects) {
    std::mt19937_64 rng(91);
    const std::vector<Index> sizes(10, 5);
    const VectorXd d = d2(8, 2);
    const VectorXd v = testutil::normals(rng, 10, std::sqrt(8.0));
    const NerModel shape = testutil::ner_model(sizes, VectorXd::Zero(50));
    const ModelState st = make_state(shape.data, kNer, shape.targets, d);
    const auto cw = clusterwise_coverage(shape.data, st, shape.targets, stacked_zv(sizes, v), 0.05);
    const double z = normal_quantile(0.975);
    const int reps = 20000;
    std::vector<int> hits(10, 0);
    for (int r = 0; r < reps; ++r) {
        const NerModel model = testutil::ner_model(sizes, testutil::ner_response(rng, sizes, 1.0, v, 2.0));
        const VectorXd mu_hat = eblup(model.data, kNer, model.targets, known_delta_fit(model.data, kNer, d)).mu;
        for (Index i = 0; i < 10; ++i) hits[static_cast<std::size_t>(i)] += std::abs(mu_hat(i) - 1.0 - v(i)) <= z * cw[static_cast<std::size_t>(i)].sd_marg;
    }
    for (Index i = 0; i < 10; ++i) {
        const double p = cw[static_cast<std::size_t>(i)].coverage;
        EXPECT_NEAR(hits[static_cast<std::size_t>(i)] / static_cast<double>(reps), p, 3.5 * std::sqrt(p * (1 - p) / reps) + 1e-4) << i;
    }
}

TEST(Clusterwise, AverageNominalAndUShape) {
    std::mt19937_64 rng(92);
    const std::vector<Index> sizes(100, 5);
    const VectorXd d = d2(8, 2);
    const VectorXd v = testutil::normals(rng, 100, std::sqrt(8.0));
    const NerModel shape = testutil::ner_model(sizes, VectorXd::Zero(500));
    const ModelState st = make_state(shape.data, kNer, shape.targets, d);
    const auto cw = clusterwise_coverage(shape.data, st, shape.targets, stacked_zv(sizes, v), 0.05);
    double mean = 0.0;
    Index big = 0, small = 0;
    for (Index i = 0; i < 100; ++i) {
        mean += cw[static_cast<std::size_t>(i)].coverage / 100.0;
        if (std::abs(v(i)) > std::abs(v(big))) big = i;
        if (std::abs(v(i)) < std::abs(v(small))) small = i;
    }
    EXPECT_NEAR(mean, 0.95, 0.01);
    EXPECT_LT(cw[static_cast<std::size_t>(big)].coverage, 0.95);
    EXPECT_GT(cw[static_cast<std::size_t>(small)].coverage, 0.95);
    EXPECT_EQ(clusterwise_coverage_shift(7, shape.data, st, shape.targets, stacked_zv(sizes, v), 0.05).coverage,
              cw[7].coverage);
}
