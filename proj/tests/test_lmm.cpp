#include <gtest/gtest.h>

#include <random>

#include "mixinf/lmm.hpp"
#include "test_util.hpp"

using namespace mixinf;
using testutil::max_abs_diff;

namespace {

NerSpec toy_spec() {
    NerSpec spec;
    spec.x_names = {"intercept"};
    for (const char* c : {"a", "a", "b", "b"}) {
        NerRow row;
        row.cluster = c;
        row.y = 1.0;
        row.x = VectorXd::Ones(1);
        spec.rows.push_back(row);
    }
    return spec;
}

VectorXd d2(double a, double b) {
    VectorXd d(2);
    d << a, b;
    return d;
}

}  // namespace

TEST(BuildNer, TwoByTwoShape) {
    const NerModel model = build_ner(toy_spec());
    EXPECT_EQ(model.data.m(), 2);
    EXPECT_EQ(model.data.n(), 4);
    EXPECT_EQ(model.data.p(), 1);
    EXPECT_EQ(model.data.q(), 1);
}

TEST(BuildNer, InterceptOnlyTargetsAreOnes) {
    std::vector<Index> sizes(100, 5);
    const NerModel model = testutil::ner_model(sizes, VectorXd::Zero(500));
    ASSERT_EQ(model.targets.m(), 100);
    for (Index i = 0; i < 100; ++i) {
        EXPECT_EQ(model.targets.l[static_cast<std::size_t>(i)](0), 1.0);
        EXPECT_EQ(model.targets.h[static_cast<std::size_t>(i)](0), 1.0);
    }
}

TEST(BuildNer, MissingClusterIdIsStructuralError) {
    NerSpec spec = toy_spec();
    spec.rows[2].cluster.clear();
    EXPECT_THROW(build_ner(spec), StructuralError);
}

TEST(BuildNer, DeclaredClusterWithoutRowsIsStructuralError) {
    NerSpec spec = toy_spec();
    spec.declared_clusters = {"a", "b", "c"};
    EXPECT_THROW(build_ner(spec), StructuralError);
}

TEST(BuildNer, ClusterOrderFollowsFirstAppearance) {
    NerSpec spec = toy_spec();
    spec.rows[0].cluster = "z";
    spec.rows[1].cluster = "b";
    spec.rows[2].cluster = "z";
    spec.rows[3].cluster = "Cádiz/school";
    const NerModel model = build_ner(spec);
    EXPECT_EQ(model.data.ids(), (std::vector<std::string>{"z", "b", "Cádiz/school"}));
    EXPECT_EQ(model.data.block(0).size(), 2);
}

TEST(LmmDataset, DuplicatedCovariateIsRankError) {
    std::vector<ClusterBlock> blocks;
    for (int i = 0; i < 3; ++i) {
        MatrixXd x(2, 2);
        x << 1, 1, 1, 1;
        blocks.push_back({"c" + std::to_string(i), VectorXd::Ones(2), x, MatrixXd::Ones(2, 1)});
    }
    EXPECT_THROW(LmmDataset{blocks}, RankError);
}

TEST(LmmDataset, NeedsTwoClustersAndConsistentShapes) {
    std::vector<ClusterBlock> one = {{"a", VectorXd::Ones(2), MatrixXd::Ones(2, 1), MatrixXd::Ones(2, 1)}};
    EXPECT_THROW(LmmDataset{one}, ArgumentError);
    std::vector<ClusterBlock> bad = one;
    bad.push_back({"b", VectorXd::Ones(3), MatrixXd::Ones(2, 1), MatrixXd::Ones(3, 1)});
    EXPECT_THROW(LmmDataset{bad}, StructuralError);
}

TEST(MarginalCov, Examples) {
    const NerModel model = build_ner(toy_spec());
    const NerStructure& s = *model.structure;
    EXPECT_EQ(marginal_cov(s, model.data, 0, d2(0, 1)), MatrixXd::Identity(2, 2));
    MatrixXd v(2, 2);
    v << 2, 1, 1, 2;
    EXPECT_EQ(marginal_cov(s, model.data, 0, d2(1, 1)), v);
}

TEST(MarginalCov, DenseAssemblyFiveRows) {
    const NerModel model = testutil::ner_model({5, 5}, VectorXd::Zero(10));
    const MatrixXd dense = 2.0 * MatrixXd::Identity(5, 5) + 8.0 * MatrixXd::Ones(5, 5);
    EXPECT_LT(max_abs_diff(marginal_cov(*model.structure, model.data, 1, d2(8, 2)), dense), 1e-14);
}

TEST(MarginalCov, AssemblyAndLinearityIdentities) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    const NerModel model = testutil::ner_model({1, 3, 7}, VectorXd::Zero(11));
    const NerStructure& s = *model.structure;
    for (int rep = 0; rep < 50; ++rep) {
        const VectorXd d = d2(u(rng), u(rng) + 0.01);
        for (Index i = 0; i < 3; ++i) {
            const auto& b = model.data.block(i);
            const MatrixXd v = marginal_cov(s, model.data, i, d);
            EXPECT_LT(max_abs_diff(v - s.r(d, i, b.size()), b.Z * s.g(d) * b.Z.transpose()), 1e-12);
            const MatrixXd lin = d(0) * marginal_cov_derivative(s, model.data, i, d, 0) +
                                 d(1) * marginal_cov_derivative(s, model.data, i, d, 1);
            EXPECT_LT(max_abs_diff(v, lin), 1e-12);
        }
    }
}

TEST(Icc, Examples) {
    EXPECT_DOUBLE_EQ(icc(d2(4, 4), 1), 0.5);
    EXPECT_EQ(icc(d2(0, 3), 7), 0.0);
    EXPECT_NEAR(icc(d2(8, 2), 5), 8.0 / 8.4, 1e-15);
    EXPECT_NEAR(icc(d2(8, 2), 5), 0.95238, 1e-5);
}

TEST(Icc, StrictlyIncreasingInVarianceAndSize) {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<double> u(0.01, 10.0);
    for (int rep = 0; rep < 200; ++rep) {
        const double sv = u(rng), se = u(rng), step = u(rng);
        const Index n = 1 + static_cast<Index>(rep % 30);
        EXPECT_LT(icc(d2(sv, se), n), icc(d2(sv + step, se), n));
        EXPECT_LT(icc(d2(sv, se), n), icc(d2(sv, se), n + 1));
        EXPECT_GE(icc(d2(sv, se), n), 0.0);
        EXPECT_LT(icc(d2(sv, se), n), 1.0);
    }
}

TEST(Icc, RejectsInvalidInput) {
    EXPECT_THROW(icc(d2(0, 0), 3), DegeneracyError);
    EXPECT_THROW(icc(d2(1, 1), 0), ArgumentError);
    EXPECT_THROW(VarianceParams({-1.0, 1.0}), ArgumentError);
}

TEST(TukeyConditions, BalancedInterceptOnlyIsExact) {
    const NerModel model = testutil::ner_model(std::vector<Index>(8, 5), VectorXd::Zero(40));
    const auto rep = check_tukey_conditions(model.data, *model.structure, model.targets, d2(8, 2));
    EXPECT_EQ(rep.max_h_deviation, 0.0);
    EXPECT_EQ(rep.max_l_deviation, 0.0);
    EXPECT_EQ(rep.max_precision_deviation, 0.0);
    EXPECT_TRUE(rep.passed);
}

TEST(TukeyConditions, UnbalancedReportsPrecisionGap) {
    const NerModel model = testutil::ner_model({5, 10, 5, 10}, VectorXd::Zero(30));
    const double sv = 4, se = 4;
    const auto rep = check_tukey_conditions(model.data, *model.structure, model.targets, d2(sv, se));
    // 1'V_i^{-1}1 = n_i / (se + n_i sv).
    const double expected = std::abs(5.0 / (se + 5.0 * sv) - 10.0 / (se + 10.0 * sv));
    EXPECT_NEAR(rep.max_precision_deviation, expected, 1e-12);
    EXPECT_FALSE(rep.passed);
}

TEST(TukeyConditions, HeterogeneousTargetsReportMaxNorm) {
    const NerModel model = testutil::ner_model({3, 3, 3}, VectorXd::Zero(9));
    MixedTargets t = model.targets;
    t.h[1](0) = 1.5;
    t.h[2](0) = -0.25;
    const auto rep = check_tukey_conditions(model.data, *model.structure, t, d2(1, 1));
    EXPECT_DOUBLE_EQ(rep.max_h_deviation, 1.75);
}
