#pragma once

#include "ridgeiv/linalg.hpp"
#include "ridgeiv/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ridgeiv {

/// Instrument cross products of a row range, with the projection pieces
/// X'P_Z X and X'P_Z Y.
struct ProjectedMoments {
    Index n = 0;
    Matrix zz;
    Matrix zx;
    Vector zy;
    SpdFactor zz_factor;
    Matrix xpx;
    Vector xpy;

    ProjectedMoments(const DatasetView& rows, const std::string& where)
        : n(rows.n()),
          zz(rows.z().transpose() * rows.z()),
          zx(rows.z().transpose() * rows.x()),
          zy(rows.z().transpose() * rows.y()),
          zz_factor(zz, where + ": Z'Z") {
        const Matrix w = zz_factor.solve(zx);
        xpx = zx.transpose() * w;
        xpx = 0.5 * (xpx + xpx.transpose());
        xpy = w.transpose() * zy;
    }
};

struct TslsResult {
    Vector beta;
    Matrix cov;
    double sigma2 = 0.0;
};

/// Two-stage least squares with the homoskedastic covariance
/// (e'e/n) (X'P_Z X / n)^{-1}.
inline TslsResult tsls(const DatasetView& rows) {
    const ProjectedMoments pm(rows, "tsls");
    const SpdFactor xpx_factor(pm.xpx, "tsls: X'P_Z X");
    TslsResult out;
    out.beta = xpx_factor.solve(pm.xpy);
    const Vector resid = rows.y() - rows.x() * out.beta;
    const double n = static_cast<double>(rows.n());
    out.sigma2 = resid.squaredNorm() / n;
    out.cov = out.sigma2 * n * xpx_factor.inverse();
    return out;
}

/// Training-sample quantities that define the ridge path
///   beta(alpha) = (G + alpha I)^{-1} (g + alpha prior),
/// with G = X'P_Z X / [tau n] and g = X'P_Z Y / [tau n].
class RidgePath {
public:
    RidgePath(const DatasetView& train, Vector prior) : prior_(std::move(prior)) {
        const ProjectedMoments pm(train, "ridge path (training sample)");
        if (prior_.size() != pm.xpx.rows())
            throw std::invalid_argument("ridge path: prior length differs from regressor count");
        const double nt = static_cast<double>(train.n());
        gram_ = pm.xpx / nt;
        cross_ = pm.xpy / nt;
    }

    /// Evaluated from the closed form at every alpha, including alpha = 0.
    Vector beta(double alpha) const { return factor(alpha).solve(cross_ + alpha * prior_); }

    /// d beta / d alpha = (G + alpha I)^{-1} (prior - beta(alpha)).
    Vector dbeta(double alpha) const {
        const SpdFactor f = factor(alpha);
        const Vector b = f.solve(cross_ + alpha * prior_);
        return f.solve(prior_ - b);
    }

    SpdFactor factor(double alpha) const {
        if (alpha < 0.0) throw std::invalid_argument("ridge path: alpha must be nonnegative");
        const Index k = gram_.rows();
        return SpdFactor(gram_ + alpha * Matrix::Identity(k, k), "ridge path: X'P_Z X/[tau n] + alpha I");
    }

    const Matrix& gram() const noexcept { return gram_; }
    const Vector& cross() const noexcept { return cross_; }
    const Vector& prior() const noexcept { return prior_; }

private:
    Vector prior_;
    Matrix gram_;
    Vector cross_;
};

inline Vector ridge_beta(const DatasetView& train, double alpha, const Vector& prior) {
    return RidgePath(train, prior).beta(alpha);
}

/// Training first-order condition -X'P_Z (Y - X beta)/[tau n] + alpha (beta - prior).
inline Vector beta_foc_residual(const DatasetView& train, const Vector& beta, double alpha,
                                const Vector& prior) {
    const RidgePath path(train, prior);
    return -(path.cross() - path.gram() * beta) + alpha * (beta - prior);
}

/// Test-sample IV objective (Y - X beta)' P_Z (Y - X beta) / (2 (n - [tau n])).
inline double test_objective(const DatasetView& test, const Vector& beta) {
    const SpdFactor zz(test.z().transpose() * test.z(), "test objective: Z'Z (test sample)");
    const Vector zr = test.z().transpose() * (test.y() - test.x() * beta);
    const double quad = zr.dot(zz.solve(zr));
    return std::max(quad, 0.0) / (2.0 * static_cast<double>(test.n()));
}

struct QDerivatives {
    double dq = 0.0;
    double d2q = 0.0;
};

/// First and second derivatives of the test objective along the ridge path,
/// by the chain rule through d beta/d alpha and d^2 beta/d alpha^2.
inline QDerivatives q_derivatives(const DatasetView& train, const DatasetView& test, double alpha,
                                  const Vector& prior) {
    const RidgePath path(train, prior);
    const SpdFactor a = path.factor(alpha);
    const Vector beta = a.solve(path.cross() + alpha * prior);
    const Vector d1 = a.solve(prior - beta);
    const Vector d2 = -2.0 * a.solve(d1);

    const ProjectedMoments pt(test, "q derivatives (test sample)");
    const Vector xpr = pt.xpy - pt.xpx * beta;  // X'P_Z r on the test rows
    const double nt = static_cast<double>(test.n());
    QDerivatives out;
    out.dq = -xpr.dot(d1) / nt;
    out.d2q = (-xpr.dot(d2) + d1.dot(pt.xpx * d1)) / nt;
    return out;
}

/// Test objective along the path in the eigenbasis of the training Gram
/// matrix G = C diag(lambda) C'. Each evaluation costs O(mk).
class PathObjective {
public:
    PathObjective(const RidgePath& path, const DatasetView& test)
        : n_test_(static_cast<double>(test.n())) {
        Eigen::SelfAdjointEigenSolver<Matrix> eig(path.gram());
        lambda_ = eig.eigenvalues();
        const Matrix& c = eig.eigenvectors();
        q_ = c.transpose() * path.cross();
        p_ = c.transpose() * path.prior();
        const double lo = lambda_.minCoeff(), hi = lambda_.maxCoeff();
        condition_ = (lo > 0.0) ? hi / lo : std::numeric_limits<double>::infinity();

        const Matrix zz = test.z().transpose() * test.z();
        const SpdFactor f(zz, "test objective: Z'Z (test sample)");
        const Matrix l = f.lower();
        const auto tri = l.triangularView<Eigen::Lower>();
        a_ = tri.solve(Vector(test.z().transpose() * test.y()));
        b_ = tri.solve(Matrix(test.z().transpose() * test.x() * c));
        v_.resize(lambda_.size());
        dv_.resize(lambda_.size());
        e_.resize(a_.size());
    }

    double value(double alpha) {
        coords(alpha);
        return e_.squaredNorm() / (2.0 * n_test_);
    }

    QDerivatives derivatives(double alpha) {
        coords(alpha);
        for (Index j = 0; j < v_.size(); ++j) dv_[j] = (p_[j] - v_[j]) / (lambda_[j] + alpha);
        double dq = 0.0, curv = 0.0, second = 0.0;
        for (Index r = 0; r < b_.rows(); ++r) {
            double bdv = 0.0, bd2v = 0.0;
            for (Index j = 0; j < v_.size(); ++j) {
                bdv += b_(r, j) * dv_[j];
                bd2v += b_(r, j) * (-2.0 * dv_[j] / (lambda_[j] + alpha));
            }
            dq -= e_[r] * bdv;
            curv += bdv * bdv;
            second -= e_[r] * bd2v;
        }
        return {dq / n_test_, (curv + second) / n_test_};
    }

    double condition() const noexcept { return condition_; }

private:
    void coords(double alpha) {
        if (alpha < 0.0) throw std::invalid_argument("ridge path: alpha must be nonnegative");
        if (alpha == 0.0 && !(condition_ <= kConditionLimit))
            throw SingularDesignError("ridge path at alpha = 0: X'P_Z X/[tau n]", condition_);
        for (Index j = 0; j < v_.size(); ++j) v_[j] = (q_[j] + alpha * p_[j]) / (lambda_[j] + alpha);
        for (Index r = 0; r < a_.size(); ++r) {
            double s = a_[r];
            for (Index j = 0; j < v_.size(); ++j) s -= b_(r, j) * v_[j];
            e_[r] = s;
        }
    }

    double n_test_;
    double condition_ = 1.0;
    Vector lambda_, q_, p_, a_;
    Matrix b_;
    Vector v_, dv_, e_;
};

struct RidgeConfig {
    double tau = 0.7;
    Vector prior;
    double log_grid_lo = -5.0;
    double log_grid_hi = 6.0;
    int log_grid_points = 45;
    int linear_grid_points = 10000;
    double alpha_infinity = 1e7;
    /// Polish an interior grid winner to the root of dQ/dalpha inside its
    /// linear-grid cell.
    bool refine_interior = true;
    bool keep_trace = true;

    void validate() const {
        if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("RidgeConfig: tau must lie in (0,1)");
        if (!(log_grid_lo < log_grid_hi)) throw std::invalid_argument("RidgeConfig: empty log grid");
        if (log_grid_points < 2) throw std::invalid_argument("RidgeConfig: log grid needs 2 points");
        if (linear_grid_points < 2) throw std::invalid_argument("RidgeConfig: linear grid needs 2 points");
        if (!(alpha_infinity > std::pow(10.0, log_grid_hi)))
            throw std::invalid_argument("RidgeConfig: alpha_infinity must exceed the log grid");
    }

    /// {0} followed by the log grid and the alpha_infinity sentinel, ascending.
    std::vector<double> coarse_grid() const {
        std::vector<double> g;
        g.reserve(static_cast<std::size_t>(log_grid_points) + 2);
        g.push_back(0.0);
        const double span = log_grid_hi - log_grid_lo;
        for (int i = 0; i < log_grid_points; ++i) {
            const double e = (i + 1 == log_grid_points) ? log_grid_hi
                                                        : log_grid_lo + span * i / (log_grid_points - 1);
            g.push_back(std::pow(10.0, e));
        }
        g.push_back(alpha_infinity);
        return g;
    }
};

/// Relative tolerance under which two objective values count as tied.
inline constexpr double kTieTolerance = 1e-12;

struct TracePoint {
    double alpha;
    double q;
};

struct AlphaSelection {
    double alpha_hat = 0.0;
    double q_hat = 0.0;
    /// Spacing of the second-stage linear grid.
    double fine_step = 0.0;
    double bracket_lo = 0.0;
    double bracket_hi = 0.0;
    bool refined = false;
    std::vector<TracePoint> search_trace;
};

namespace detail {

/// Smallest alpha whose objective is within the tie tolerance of the minimum.
inline TracePoint tie_broken_min(const std::vector<double>& alphas, const std::vector<double>& qs) {
    const double qmin = *std::min_element(qs.begin(), qs.end());
    const double bound = qmin + kTieTolerance * std::abs(qmin);
    TracePoint best{std::numeric_limits<double>::infinity(), qmin};
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        if (qs[i] <= bound && alphas[i] < best.alpha) best = {alphas[i], qs[i]};
    }
    return best;
}

/// Safeguarded Newton on dQ/dalpha inside [lo, hi], assuming dQ(lo) < 0 < dQ(hi).
inline double newton_root(PathObjective& obj, double lo, double hi, double start) {
    double x = start;
    for (int it = 0; it < 200; ++it) {
        const QDerivatives d = obj.derivatives(x);
        if (d.dq == 0.0) return x;
        if (d.dq < 0.0) lo = x; else hi = x;
        double next = (d.d2q > 0.0) ? x - d.dq / d.d2q : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - x) <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(x) ||
            hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(hi))
            return next;
        x = next;
    }
    return x;
}

}  // namespace detail

/// Two-stage search for the tuning parameter: the coarse grid of
/// RidgeConfig::coarse_grid(), then a linear grid spanning the coarse winner's
/// two neighbours. Ties go to the smallest alpha.
inline AlphaSelection select_alpha(const DatasetView& train, const DatasetView& test,
                                   const RidgeConfig& config) {
    config.validate();
    const RidgePath path(train, config.prior);
    PathObjective obj(path, test);

    AlphaSelection out;
    const std::vector<double> coarse = config.coarse_grid();
    std::vector<double> coarse_q(coarse.size());
    for (std::size_t i = 0; i < coarse.size(); ++i) coarse_q[i] = obj.value(coarse[i]);

    const TracePoint coarse_best = detail::tie_broken_min(coarse, coarse_q);
    const auto pos = static_cast<std::size_t>(
        std::find(coarse.begin(), coarse.end(), coarse_best.alpha) - coarse.begin());
    out.bracket_lo = coarse[pos == 0 ? 0 : pos - 1];
    out.bracket_hi = coarse[std::min(pos + 1, coarse.size() - 1)];

    const auto npts = static_cast<std::size_t>(config.linear_grid_points);
    std::vector<double> alphas(coarse);
    std::vector<double> qs(coarse_q);
    alphas.reserve(coarse.size() + npts);
    qs.reserve(coarse.size() + npts);
    const double width = out.bracket_hi - out.bracket_lo;
    out.fine_step = width / static_cast<double>(npts - 1);
    for (std::size_t i = 0; i < npts; ++i) {
        const double a = (i + 1 == npts) ? out.bracket_hi
                                         : out.bracket_lo + width * static_cast<double>(i) /
                                                                static_cast<double>(npts - 1);
        alphas.push_back(a);
        qs.push_back(obj.value(a));
    }

    const TracePoint best = detail::tie_broken_min(alphas, qs);
    out.alpha_hat = best.alpha;
    out.q_hat = best.q;

    if (config.keep_trace) {
        out.search_trace.reserve(alphas.size() + 1);
        for (std::size_t i = 0; i < alphas.size(); ++i) out.search_trace.push_back({alphas[i], qs[i]});
    }

    if (config.refine_interior && out.alpha_hat > 0.0 && out.alpha_hat < config.alpha_infinity) {
        const double lo = std::max(0.0, out.alpha_hat - out.fine_step);
        const double hi = out.alpha_hat + out.fine_step;
        const double dlo = obj.derivatives(lo).dq;
        const double dhi = obj.derivatives(hi).dq;
        if (dlo < 0.0 && dhi > 0.0) {
            const double root = detail::newton_root(obj, lo, hi, out.alpha_hat);
            const double qr = obj.value(root);
            if (root > 0.0 && qr <= out.q_hat + kTieTolerance * std::abs(out.q_hat)) {
                out.alpha_hat = root;
                out.q_hat = std::min(qr, out.q_hat);
                out.refined = true;
                if (config.keep_trace) out.search_trace.push_back({root, qr});
            }
        }
    }
    return out;
}

enum class RegularizationClass { none, some, infinite };

inline std::string_view to_string(RegularizationClass c) {
    switch (c) {
        case RegularizationClass::none: return "none";
        case RegularizationClass::some: return "some";
        case RegularizationClass::infinite: return "infinite";
    }
    return "unknown";
}

inline RegularizationClass classify_alpha(double alpha, double alpha_infinity) {
    if (alpha == 0.0) return RegularizationClass::none;
    if (alpha == alpha_infinity) return RegularizationClass::infinite;
    return RegularizationClass::some;
}

struct RidgeFit {
    Vector beta_hat;
    double alpha_hat = 0.0;
    double q_hat = 0.0;
    Vector beta_2sls_full;
    Matrix cov_2sls;
    std::vector<TracePoint> search_trace;
    RegularizationClass regularization_class = RegularizationClass::none;
    Index split_at = 0;
    bool refined = false;
};

/// Split, select alpha on the test rows, evaluate the training path at the
/// selected alpha, and attach full-sample 2SLS for comparison.
inline RidgeFit ridge_path_estimate(const Dataset& data, const RidgeConfig& config) {
    if (split_index(config.tau, data.n()) != data.split_at())
        throw std::invalid_argument("ridge_path_estimate: dataset split does not match config tau");
    const auto [train, test] = split(data);
    AlphaSelection sel = select_alpha(train, test, config);

    RidgeFit fit;
    fit.alpha_hat = sel.alpha_hat;
    fit.q_hat = sel.q_hat;
    fit.refined = sel.refined;
    fit.beta_hat = ridge_beta(train, sel.alpha_hat, config.prior);
    const TslsResult full = tsls(data);
    fit.beta_2sls_full = full.beta;
    fit.cov_2sls = full.cov;
    fit.search_trace = std::move(sel.search_trace);
    fit.regularization_class = classify_alpha(sel.alpha_hat, config.alpha_infinity);
    fit.split_at = data.split_at();
    return fit;
}

}  // namespace ridgeiv
