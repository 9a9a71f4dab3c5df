#include "ridgeiv/estimators.hpp"
#include "ridgeiv/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

using namespace ridgeiv;

namespace {

Dataset six_rows() {
    Vector y(6);
    Matrix x(6, 2), z(6, 3);
    y << 1.2, -0.4, 0.9, 2.1, -1.3, 0.05;
    x << 0.5, 1.1, -0.2, 0.3, 1.4, -0.7, 0.9, 0.8, -1.1, 0.2, 0.3, -0.5;
    z << 1.0, 0.2, -0.3, -0.5, 0.7, 0.1, 1.3, -0.4, 0.6, 0.8, 1.1, -0.9, -1.2, 0.3, 0.4, 0.2, -0.6, -1.0;
    return Dataset(y, x, z, 4);
}

// Two-stage construction with rank-revealing least squares at each stage.
Vector tsls_oracle(const Matrix& x, const Matrix& z, const Vector& y) {
    const Matrix xhat = z * z.colPivHouseholderQr().solve(x);
    return xhat.colPivHouseholderQr().solve(y);
}

Matrix projector(const Matrix& z) {
    return z * (z.transpose() * z).inverse() * z.transpose();
}

double ridge_objective(const DatasetView& train, const Vector& beta, double alpha, const Vector& prior) {
    const Matrix z = train.z();
    const Vector r = train.y() - train.x() * beta;
    return r.dot(projector(z) * r) / (2.0 * static_cast<double>(train.n())) +
           0.5 * alpha * (beta - prior).squaredNorm();
}

// Plain Nelder-Mead, restarted until the simplex stops moving.
Vector nelder_mead(const std::function<double(const Vector&)>& f, Vector x0, double scale) {
    const Index k = x0.size();
    for (int restart = 0; restart < 20; ++restart) {
        std::vector<Vector> pts{x0};
        for (Index i = 0; i < k; ++i) {
            Vector p = x0;
            p[i] += scale;
            pts.push_back(p);
        }
        std::vector<double> fv;
        for (auto& p : pts) fv.push_back(f(p));
        for (int it = 0; it < 4000; ++it) {
            std::vector<std::size_t> idx(pts.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return fv[a] < fv[b]; });
            std::vector<Vector> sp;
            std::vector<double> sf;
            for (auto i : idx) {
                sp.push_back(pts[i]);
                sf.push_back(fv[i]);
            }
            pts = sp;
            fv = sf;
            Vector c = Vector::Zero(k);
            for (Index i = 0; i < k; ++i) c += pts[static_cast<std::size_t>(i)];
            c /= static_cast<double>(k);
            const Vector& worst = pts.back();
            const Vector xr = c + (c - worst);
            const double fr = f(xr);
            if (fr < fv.front()) {
                const Vector xe = c + 2.0 * (c - worst);
                const double fe = f(xe);
                if (fe < fr) pts.back() = xe, fv.back() = fe;
                else pts.back() = xr, fv.back() = fr;
            } else if (fr < fv[fv.size() - 2]) {
                pts.back() = xr, fv.back() = fr;
            } else {
                const Vector xc = c + 0.5 * (worst - c);
                const double fc = f(xc);
                if (fc < fv.back()) {
                    pts.back() = xc, fv.back() = fc;
                } else {
                    for (std::size_t i = 1; i < pts.size(); ++i) {
                        pts[i] = pts[0] + 0.5 * (pts[i] - pts[0]);
                        fv[i] = f(pts[i]);
                    }
                }
            }
        }
        const std::size_t best = static_cast<std::size_t>(std::min_element(fv.begin(), fv.end()) - fv.begin());
        if ((pts[best] - x0).norm() < 1e-13) return x0;
        x0 = pts[best];
        scale *= 0.1;
    }
    return x0;
}

ModelSpec random_spec(std::mt19937_64& rng, Index n_lo = 25, Index n_hi = 500) {
    std::uniform_real_distribution<double> ud(0.1, 1.0);
    std::uniform_int_distribution<Index> un(n_lo, n_hi);
    std::uniform_int_distribution<int> up(1, 3);
    return design_spec(ud(rng), un(rng), design_prior(up(rng)));
}

// Q along the path by direct residual evaluation, no eigenbasis.
class DirectPathQ {
public:
    DirectPathQ(const DatasetView& train, const DatasetView& test, const Vector& prior) : path_(train, prior) {
        const Matrix zz = test.z().transpose() * test.z();
        l_ = zz.llt().matrixL();
        zy_ = test.z().transpose() * test.y();
        zx_ = test.z().transpose() * test.x();
        nte_ = static_cast<double>(test.n());
    }
    double operator()(double alpha) const {
        const Matrix a = path_.gram() + alpha * Matrix::Identity(2, 2);
        const Vector b = a.llt().solve(path_.cross() + alpha * path_.prior());
        const Vector e = l_.triangularView<Eigen::Lower>().solve(zy_ - zx_ * b);
        return e.squaredNorm() / (2.0 * nte_);
    }

private:
    RidgePath path_;
    Matrix l_, zx_;
    Vector zy_;
    double nte_;
};

}  // namespace

TEST(Tsls, NoiseFreeRecoversTruth) {
    ModelSpec s = design_spec(0.5, 40, design_prior(1));
    s.beta0 << 0.8, -1.5;
    s.err_cov.setZero();
    const Dataset d = generate_dataset(s, 17);
    EXPECT_LT((tsls(d).beta - s.beta0).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Tsls, MatchesTwoStageOracleOnSixRows) {
    const Dataset d = six_rows();
    const TslsResult r = tsls(d);
    const Vector oracle = tsls_oracle(d.x(), d.z(), d.y());
    EXPECT_LT((r.beta - oracle).cwiseAbs().maxCoeff(), 1e-12);
    const Vector resid = d.y() - d.x() * r.beta;
    EXPECT_NEAR(r.sigma2, resid.squaredNorm() / 6.0, 1e-14);
    const Matrix xpx = d.x().transpose() * projector(d.z()) * d.x() / 6.0;
    EXPECT_LT((r.cov - r.sigma2 * xpx.inverse()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Tsls, SingularInstrumentsRaise) {
    Dataset d = six_rows();
    Matrix z = d.z();
    z.col(2) = z.col(0);
    const Dataset bad(d.y(), d.x(), z, 4);
    EXPECT_THROW(tsls(bad), SingularDesignError);
}

TEST(RidgeBeta, EndpointsOfThePath) {
    const ModelSpec s = design_spec(0.5, 60, design_prior(2));
    const Dataset d = generate_dataset(s, 4);
    const auto [train, test] = split(d);
    EXPECT_LT((ridge_beta(train, 0.0, s.prior) - tsls(train).beta).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((ridge_beta(train, 1e12, s.prior) - s.prior).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RidgeBeta, PriorAtTslsGivesConstantPath) {
    const ModelSpec s = design_spec(0.25, 50, design_prior(1));
    const Dataset d = generate_dataset(s, 8);
    const auto [train, test] = split(d);
    const Vector p = tsls(train).beta;
    for (double a : {0.0, 1.0, 1e3}) EXPECT_LT((ridge_beta(train, a, p) - p).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RidgeBeta, MatchesDerivativeFreeMinimizer) {
    const ModelSpec s = design_spec(0.3, 30, design_prior(1));
    const Dataset d = generate_dataset(s, 30);
    const auto [train, test] = split(d);
    const double alpha = 0.37;
    const Vector closed = ridge_beta(train, alpha, s.prior);
    const Vector numeric = nelder_mead(
        [&](const Vector& b) { return ridge_objective(train, b, alpha, s.prior); }, Vector::Zero(2), 1.0);
    EXPECT_LT((closed - numeric).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RidgeBeta, SingularDesignAtZeroRaises) {
    Dataset d = six_rows();
    Matrix x = d.x();
    x.col(1) = 2.0 * x.col(0);
    const Dataset bad(d.y(), x, d.z(), 4);
    const auto [train, test] = split(bad);
    EXPECT_THROW(ridge_beta(train, 0.0, Vector::Zero(2)), SingularDesignError);
    EXPECT_NO_THROW(ridge_beta(train, 0.5, Vector::Zero(2)));
}

TEST(BetaFoc, VanishesOnPathOverEightDecades) {
    std::mt19937_64 rng(1);
    for (int inst = 0; inst < 100; ++inst) {
        const ModelSpec s = random_spec(rng);
        const Dataset d = generate_dataset(s, 1000 + inst);
        const auto [train, test] = split(d);
        for (int e = -4; e <= 4; ++e) {
            const double a = std::pow(10.0, e);
            const Vector b = ridge_beta(train, a, s.prior);
            EXPECT_LE(beta_foc_residual(train, b, a, s.prior).norm(), 1e-8 * (1.0 + b.norm()));
        }
    }
}

TEST(BetaFoc, PenaltyVanishesAtPrior) {
    const ModelSpec s = design_spec(1.0, 50, design_prior(3));
    const Dataset d = generate_dataset(s, 2);
    const auto [train, test] = split(d);
    const Vector r = beta_foc_residual(train, s.prior, 2.5, s.prior);
    const Matrix p = projector(train.z());
    const Vector expect = -train.x().transpose() * p * (train.y() - train.x() * s.prior) / 35.0;
    EXPECT_LT((r - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BetaFoc, IsTheGradientOfTheRidgeObjective) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    const ModelSpec s = design_spec(0.5, 40, design_prior(1));
    const Dataset d = generate_dataset(s, 77);
    const auto [train, test] = split(d);
    for (int t = 0; t < 10; ++t) {
        Vector b(2);
        b << nd(rng), nd(rng);
        const double a = std::exp(nd(rng));
        const Vector g = beta_foc_residual(train, b, a, s.prior);
        const double h = 1e-5;
        for (int j = 0; j < 2; ++j) {
            Vector up = b, dn = b;
            up[j] += h;
            dn[j] -= h;
            const double fd = (ridge_objective(train, up, a, s.prior) - ridge_objective(train, dn, a, s.prior)) / (2 * h);
            EXPECT_NEAR(g[j], fd, 1e-7 * (1.0 + std::abs(fd)));
        }
    }
}

TEST(TestObjective, ZeroAtExactFitAndInvariantToInstrumentBasis) {
    const ModelSpec s = design_spec(1.0, 40, design_prior(1));
    const Dataset d = generate_dataset(s, 5);
    const auto [train, test] = split(d);
    Vector beta(2);
    beta << 0.3, -0.2;
    const Dataset exact(d.x() * beta, d.x(), d.z(), d.split_at());
    EXPECT_NEAR(test_objective(split(exact).second, beta), 0.0, 1e-15);

    Matrix a(3, 3);
    a << 2, 1, 0, 0, 1, 3, 1, 0, 1;
    const Dataset rotated(d.y(), d.x(), d.z() * a, d.split_at());
    EXPECT_NEAR(test_objective(test, beta), test_objective(split(rotated).second, beta), 1e-12);
}

TEST(TestObjective, MatchesExplicitQuadraticForm) {
    const Dataset d = six_rows();
    Matrix z = d.z().topRows(6);
    const Dataset big(d.y(), d.x(), d.z(), 2);
    const auto [train, test] = split(big);
    Vector beta(2);
    beta << 0.4, 0.1;
    const Matrix zt = test.z();
    const Vector r = test.y() - test.x() * beta;
    const double oracle = r.dot(projector(zt) * r) / (2.0 * 4.0);
    EXPECT_NEAR(test_objective(test, beta), oracle, 1e-13);
}

TEST(QDerivatives, ConstantPathHasZeroDerivatives) {
    const ModelSpec s = design_spec(0.5, 100, design_prior(1));
    const Dataset d = generate_dataset(s, 21);
    const auto [train, test] = split(d);
    const Vector p = tsls(train).beta;
    for (double a : {0.0, 0.5, 10.0}) {
        const QDerivatives q = q_derivatives(train, test, a, p);
        EXPECT_NEAR(q.dq, 0.0, 1e-12);
        EXPECT_NEAR(q.d2q, 0.0, 1e-12);
    }
}

TEST(QDerivatives, MatchFiniteDifferencesOnRandomInstances) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> la(-2.0, 1.0);
    const double h = 1e-5;
    for (int inst = 0; inst < 100; ++inst) {
        const ModelSpec s = random_spec(rng);
        const Dataset d = generate_dataset(s, 500 + inst);
        const auto [train, test] = split(d);
        const double a = std::pow(10.0, la(rng));
        auto q = [&](double x) { return test_objective(test, ridge_beta(train, x, s.prior)); };
        const QDerivatives der = q_derivatives(train, test, a, s.prior);
        const double fd1 = (q(a + h) - q(a - h)) / (2 * h);
        // second difference from first derivatives keeps rounding at O(eps/h)
        const double fd2 = (q_derivatives(train, test, a + h, s.prior).dq -
                            q_derivatives(train, test, a - h, s.prior).dq) / (2 * h);
        EXPECT_LE(std::abs(der.dq - fd1), 1e-4 * std::max(std::abs(fd1), 1e-8)) << "instance " << inst;
        EXPECT_LE(std::abs(der.d2q - fd2), 1e-4 * std::max(std::abs(fd2), 1e-8)) << "instance " << inst;

        const RidgePath path(train, s.prior);
        PathObjective po(path, test);
        const QDerivatives sp = po.derivatives(a);
        EXPECT_NEAR(sp.dq, der.dq, 1e-10 * (1.0 + std::abs(der.dq)));
        EXPECT_NEAR(sp.d2q, der.d2q, 1e-10 * (1.0 + std::abs(der.d2q)));
        EXPECT_NEAR(po.value(a), q(a), 1e-13 * (1.0 + q(a)));
    }
}

TEST(QDerivatives, CurvatureAtZeroApproachesLimit) {
    const ModelSpec s = design_spec(1.0, 100'000, design_prior(1));
    const Dataset d = generate_dataset(s, 12345);
    const auto [train, test] = split(d);
    const Vector b = s.prior - s.beta0;
    const Matrix q = s.gamma0.transpose() * s.rz * s.gamma0;
    const double limit = b.dot(q.inverse() * b);
    EXPECT_NEAR(limit, 0.75, 1e-12);
    EXPECT_NEAR(q_derivatives(train, test, 0.0, s.prior).d2q, limit, 0.05 * limit);
}

TEST(PathProperties, EigenCoordinatesShrinkMonotonically) {
    const ModelSpec s = design_spec(0.25, 80, design_prior(2));
    const Dataset d = generate_dataset(s, 6);
    const auto [train, test] = split(d);
    const RidgePath path(train, s.prior);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(path.gram());
    const Vector base = eig.eigenvectors().transpose() * (path.beta(0.0) - s.prior);
    Vector prev = base.cwiseAbs();
    for (int e = -4; e <= 6; ++e) {
        const double a = std::pow(10.0, e);
        const Vector c = (eig.eigenvectors().transpose() * (path.beta(a) - s.prior)).cwiseAbs();
        for (Index j = 0; j < 2; ++j) {
            const double lj = eig.eigenvalues()[j];
            EXPECT_NEAR(c[j], lj / (lj + a) * std::abs(base[j]), 1e-10 * (1.0 + std::abs(base[j])));
            EXPECT_LE(c[j], prev[j] + 1e-14);
        }
        prev = c;
        Eigen::SelfAdjointEigenSolver<Matrix> inv(Matrix((path.gram() + a * Matrix::Identity(2, 2)).inverse()));
        EXPECT_NEAR(inv.eigenvalues().maxCoeff(), 1.0 / (eig.eigenvalues().minCoeff() + a), 1e-10);
    }
}

TEST(SelectAlpha, ConstantObjectivePicksZero) {
    const ModelSpec s = design_spec(0.5, 100, design_prior(1));
    const Dataset d = generate_dataset(s, 9);
    const auto [train, test] = split(d);
    RidgeConfig c;
    c.prior = tsls(train).beta;
    const AlphaSelection sel = select_alpha(train, test, c);
    EXPECT_EQ(sel.alpha_hat, 0.0);
}

TEST(SelectAlpha, CoarseGridLayout) {
    RidgeConfig c;
    const auto g = c.coarse_grid();
    ASSERT_EQ(g.size(), 47u);
    EXPECT_EQ(g.front(), 0.0);
    EXPECT_DOUBLE_EQ(g[1], 1e-5);
    EXPECT_DOUBLE_EQ(g[45], 1e6);
    EXPECT_EQ(g.back(), 1e7);
    EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
    RidgeConfig bad;
    bad.alpha_infinity = 1e5;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(SelectAlpha, AgreesWithDenseGridOracle) {
    std::mt19937_64 rng(4);
    for (int inst = 0; inst < 50; ++inst) {
        const ModelSpec s = random_spec(rng);
        const Dataset d = generate_dataset(s, 9000 + inst);
        const auto [train, test] = split(d);
        RidgeConfig c;
        c.prior = s.prior;
        c.keep_trace = false;
        const AlphaSelection sel = select_alpha(train, test, c);

        const DirectPathQ q(train, test, s.prior);
        const int pts = 1'000'000;
        std::vector<double> grid{0.0};
        for (int i = 0; i < pts - 1; ++i) grid.push_back(std::pow(10.0, -9.0 + 16.0 * i / (pts - 2)));
        double best_q = q(0.0);
        std::size_t best = 0;
        for (std::size_t i = 1; i < grid.size(); ++i) {
            const double v = q(grid[i]);
            if (v < best_q) best_q = v, best = i;
        }
        // golden-section polish between the oracle's neighbours
        double lo = grid[best == 0 ? 0 : best - 1], hi = grid[std::min(best + 1, grid.size() - 1)];
        const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
        double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
        double f1 = q(x1), f2 = q(x2);
        for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + hi); ++it) {
            if (f1 < f2) hi = x2, x2 = x1, f2 = f1, x1 = hi - gr * (hi - lo), f1 = q(x1);
            else lo = x1, x1 = x2, f1 = f2, x2 = lo + gr * (hi - lo), f2 = q(x2);
        }
        double oracle_alpha = grid[best];
        if (std::min(f1, f2) < best_q) {
            best_q = std::min(f1, f2);
            oracle_alpha = f1 < f2 ? x1 : x2;
        }
        EXPECT_LE(std::abs(sel.q_hat - best_q), 1e-12) << "instance " << inst;
        EXPECT_LE(std::abs(sel.alpha_hat - oracle_alpha), sel.fine_step) << "instance " << inst;
        EXPECT_LE(sel.q_hat, q(0.0) * (1.0 + 1e-12));
        EXPECT_LE(sel.q_hat, q(c.alpha_infinity) * (1.0 + 1e-12));
    }
}

TEST(SelectAlpha, TraceHoldsBothStages) {
    const ModelSpec s = design_spec(0.5, 200, design_prior(1));
    const Dataset d = generate_dataset(s, 10);
    const auto [train, test] = split(d);
    RidgeConfig c;
    c.prior = s.prior;
    c.refine_interior = false;
    const AlphaSelection sel = select_alpha(train, test, c);
    EXPECT_EQ(sel.search_trace.size(), 47u + 10000u);
    for (const auto& p : sel.search_trace) EXPECT_GE(p.q, sel.q_hat);
}

TEST(RidgePathEstimate, NoiseFreeReturnsTruthForAnyPrior) {
    ModelSpec s = design_spec(0.5, 50, design_prior(3));
    s.err_cov.setZero();
    s.beta0 << 0.2, -0.1;
    const Dataset d = generate_dataset(s, 3);
    for (int p = 1; p <= 3; ++p) {
        RidgeConfig c;
        c.prior = design_prior(p);
        const RidgeFit f = ridge_path_estimate(d, c);
        EXPECT_EQ(f.alpha_hat, 0.0);
        EXPECT_EQ(f.regularization_class, RegularizationClass::none);
        EXPECT_LT((f.beta_hat - s.beta0).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(RidgePathEstimate, ClassesAndEndpoint) {
    std::mt19937_64 rng(5);
    int zeros = 0;
    for (int inst = 0; inst < 40; ++inst) {
        const ModelSpec s = random_spec(rng);
        const Dataset d = generate_dataset(s, 70 + inst);
        RidgeConfig c;
        c.prior = s.prior;
        const RidgeFit f = ridge_path_estimate(d, c);
        const auto [train, test] = split(d);
        EXPECT_LT((f.beta_hat - ridge_beta(train, f.alpha_hat, s.prior)).cwiseAbs().maxCoeff(), 1e-13);
        EXPECT_EQ(f.regularization_class == RegularizationClass::none, f.alpha_hat == 0.0);
        EXPECT_EQ(f.regularization_class == RegularizationClass::infinite, f.alpha_hat == c.alpha_infinity);
        if (f.alpha_hat == 0.0) {
            ++zeros;
            EXPECT_LT((f.beta_hat - tsls(train).beta).cwiseAbs().maxCoeff(), 1e-12);
        }
        EXPECT_LT((f.beta_2sls_full - tsls(d).beta).cwiseAbs().maxCoeff(), 1e-15);
    }
    EXPECT_GT(zeros, 0);
}

TEST(RidgePathEstimate, RejectsMismatchedSplit) {
    const ModelSpec s = design_spec(0.5, 50, design_prior(1));
    const Dataset d = generate_dataset(s, 3);
    RidgeConfig c;
    c.prior = s.prior;
    c.tau = 0.5;
    EXPECT_THROW(ridge_path_estimate(d, c), std::invalid_argument);
}
