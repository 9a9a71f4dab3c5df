#include "ridgeiv/model.hpp"

#include <gtest/gtest.h>

using namespace ridgeiv;

TEST(Model, ShapesAndFloorSplit) {
    const ModelSpec s = design_spec(1.0, 4, design_prior(1));
    const Dataset d = generate_dataset(s, 11);
    EXPECT_EQ(d.y().size(), 4);
    EXPECT_EQ(d.x().rows(), 4);
    EXPECT_EQ(d.x().cols(), 2);
    EXPECT_EQ(d.z().cols(), 3);
    EXPECT_EQ(d.split_at(), 2);
}

TEST(Model, SplitIndexFloors) {
    EXPECT_EQ(split_index(0.7, 10), 7);
    EXPECT_EQ(split_index(0.7, 25), 17);
    EXPECT_EQ(split_index(0.7, 500), 350);
    EXPECT_EQ(split_index(0.7, 10000), 7000);
}

TEST(Model, SplitViewsPartitionRows) {
    const ModelSpec s = design_spec(0.5, 10, design_prior(2));
    const Dataset d = generate_dataset(s, 3);
    const auto [train, test] = split(d);
    EXPECT_EQ(train.n(), 7);
    EXPECT_EQ(test.n(), 3);
    EXPECT_EQ(test.begin(), 7);
    Matrix joined(10, 3);
    joined << train.z(), test.z();
    EXPECT_EQ(joined, d.z());
    Vector y(10);
    y << train.y(), test.y();
    EXPECT_EQ(y, d.y());
}

TEST(Model, SameSeedIsBitIdentical) {
    const ModelSpec s = design_spec(0.25, 50, design_prior(1));
    const Dataset a = generate_dataset(s, 99), b = generate_dataset(s, 99), c = generate_dataset(s, 100);
    EXPECT_EQ(a.y(), b.y());
    EXPECT_EQ(a.x(), b.x());
    EXPECT_EQ(a.z(), b.z());
    EXPECT_NE(a.y(), c.y());
}

TEST(Model, NoiseFreeDesignIsExact) {
    ModelSpec s = design_spec(1.0, 20, design_prior(1));
    s.beta0 = Vector::Constant(2, 0.3);
    s.err_cov.setZero();
    s.validate();
    const Dataset d = generate_dataset(s, 5);
    const Vector expected = d.z() * s.gamma0 * s.beta0;
    EXPECT_LT((d.y() - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Model, ErrorCovarianceMatchesDesignAtOneMillionDraws) {
    const ModelSpec s = design_spec(1.0, 1'000'000, design_prior(1));
    const Dataset d = generate_dataset(s, 2024);
    Matrix err(d.n(), 3);
    err.col(0) = d.y() - d.x() * s.beta0;
    err.rightCols(2) = d.x() - d.z() * s.gamma0;
    const Matrix cov = err.transpose() * err / static_cast<double>(d.n());
    EXPECT_LT((cov - s.err_cov).cwiseAbs().maxCoeff(), 0.01);
    const Matrix zz = d.z().transpose() * d.z() / static_cast<double>(d.n());
    EXPECT_LT((zz - s.rz).cwiseAbs().maxCoeff(), 0.01);
    for (int j = 1; j <= 2; ++j) {
        const double corr = cov(0, j) / std::sqrt(cov(0, 0) * cov(j, j));
        EXPECT_NEAR(corr, 0.7, 0.02);
    }
}

TEST(Model, ValidateRejectsBadSpecs) {
    ModelSpec s = design_spec(1.0, 25, design_prior(1));
    ModelSpec bad = s;
    bad.tau = 1.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = s;
    bad.rz(0, 0) = -1.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = s;
    bad.gamma0.col(1) = bad.gamma0.col(0);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = s;
    bad.err_cov(0, 1) = 2.0;
    bad.err_cov(1, 0) = 2.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = s;
    bad.n = 3;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    EXPECT_TRUE(s.supports_projections());
    EXPECT_FALSE(design_spec(1.0, 4, design_prior(1)).supports_projections());
}
