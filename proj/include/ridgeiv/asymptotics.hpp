#pragma once

#include "ridgeiv/gmm.hpp"
#include "ridgeiv/linalg.hpp"
#include "ridgeiv/model.hpp"
#include "ridgeiv/random.hpp"

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace ridgeiv {

enum class VMode { analytic_gaussian, monte_carlo };

inline std::string_view to_string(VMode m) {
    return m == VMode::analytic_gaussian ? "analytic-gaussian" : "monte-carlo";
}

inline VMode parse_v_mode(std::string_view s) {
    if (s == "analytic-gaussian" || s == "analytic") return VMode::analytic_gaussian;
    if (s == "monte-carlo" || s == "mc") return VMode::monte_carlo;
    throw std::invalid_argument("unknown v mode: " + std::string(s));
}

/// Limit objects for sqrt(n)(theta_hat - theta0): the expected Jacobian M0,
/// the covariance V of sqrt(n) H_n(theta0), and the pieces of the (beta, alpha) block.
struct AsymptoticLaw {
    ThetaLayout layout;
    double tau = 0.7;
    Matrix m0;
    Matrix v;
    Matrix s0;
    /// (k+1) x (k+1) block [[S0' Rz^{-1} S0, beta0 - prior], [(beta0 - prior)', 0]].
    Matrix d;
    double delta_tilde = 0.0;
    /// Prior equals beta0, so D and M0 are singular.
    bool degenerate_prior = false;
    VMode v_mode = VMode::monte_carlo;
};

inline Matrix d_block(const Matrix& s0, const Matrix& rz, const Vector& beta0, const Vector& prior) {
    const Index k = s0.cols();
    const SpdFactor rf(rz, "D block: Rz");
    Matrix q = s0.transpose() * rf.solve(s0);
    q = 0.5 * (q + q.transpose());
    const Vector b = beta0 - prior;
    Matrix d = Matrix::Zero(k + 1, k + 1);
    d.topLeftCorner(k, k) = q;
    d.topRightCorner(k, 1) = b;
    d.bottomLeftCorner(1, k) = b.transpose();
    return d;
}

/// D^{-1} = (1/dt) [[dt Q^{-1} - Q^{-1} b b' Q^{-1}, Q^{-1} b], [b' Q^{-1}, -1]]
/// with dt = b' Q^{-1} b. Undefined when dt = 0.
inline Matrix d_inverse_closed_form(const Matrix& d) {
    const Index k = d.rows() - 1;
    const Matrix q = d.topLeftCorner(k, k);
    const Vector b = d.topRightCorner(k, 1);
    const SpdFactor qf(q, "D inverse: S0' Rz^{-1} S0");
    const Vector qb = qf.solve(b);
    const double dt = b.dot(qb);
    if (!(dt > 0.0)) throw std::domain_error("D inverse: prior equals beta0 (delta_tilde = 0)");
    Matrix out(k + 1, k + 1);
    out.topLeftCorner(k, k) = dt * qf.inverse() - qb * qb.transpose();
    out.topRightCorner(k, 1) = qb;
    out.bottomLeftCorner(1, k) = qb.transpose();
    out(k, k) = -1.0;
    return out / dt;
}

namespace detail {

/// Gaussian fourth-moment covariances of vech(zz') and vec(zx') with
/// x = Gamma' z + u, z ~ N(0, R), u independent of z.
struct SecondMomentCov {
    Matrix rr;  // Cov(vech zz')
    Matrix rs;  // Cov(vech zz', vec zx')
    Matrix ss;  // Cov(vec zx')
};

inline SecondMomentCov second_moment_cov(const Matrix& r, const Matrix& gamma, const Matrix& sigma_u) {
    const Index m = r.rows(), k = gamma.cols();
    const Matrix rg = r * gamma;
    const Matrix grg = gamma.transpose() * rg;
    const Index nv = vech_size(m), ns = m * k;
    std::vector<std::pair<Index, Index>> pairs;
    for (Index j = 0; j < m; ++j)
        for (Index i = j; i < m; ++i) pairs.emplace_back(i, j);

    SecondMomentCov out{Matrix(nv, nv), Matrix(nv, ns), Matrix(ns, ns)};
    for (Index p = 0; p < nv; ++p) {
        const auto [a, b] = pairs[static_cast<std::size_t>(p)];
        for (Index q = 0; q < nv; ++q) {
            const auto [c, d] = pairs[static_cast<std::size_t>(q)];
            out.rr(p, q) = r(a, c) * r(b, d) + r(a, d) * r(b, c);
        }
        for (Index c = 0; c < k; ++c)
            for (Index row = 0; row < m; ++row)
                out.rs(p, c * m + row) = r(a, row) * rg(b, c) + rg(a, c) * r(b, row);
    }
    for (Index c = 0; c < k; ++c)
        for (Index row = 0; row < m; ++row)
            for (Index c2 = 0; c2 < k; ++c2)
                for (Index row2 = 0; row2 < m; ++row2)
                    out.ss(c * m + row, c2 * m + row2) = r(row, row2) * (grg(c, c2) + sigma_u(c, c2)) +
                                                         rg(row, c2) * rg(row2, c);
    return out;
}

inline Matrix analytic_v(const ModelSpec& spec, const ThetaLayout& layout) {
    const Index m = spec.m, k = spec.k;
    const Matrix& r = spec.rz;
    const Matrix rg = r * spec.gamma0;
    const Matrix grg = spec.gamma0.transpose() * rg;
    const double s2 = spec.sigma_eps2();
    const Vector sue = spec.sigma_u_eps();
    const SecondMomentCov sm = second_moment_cov(r, spec.gamma0, spec.sigma_u());
    const Index nv = vech_size(m), ns = m * k;

    // Training half: [vech(R - zz'), vec(S - zx'), -Gamma' z eps].
    const Index p1 = layout.train_rows();
    Matrix train = Matrix::Zero(p1, p1);
    train.block(0, 0, nv, nv) = sm.rr;
    train.block(0, nv, nv, ns) = sm.rs;
    train.block(nv, 0, ns, nv) = sm.rs.transpose();
    train.block(nv, nv, ns, ns) = sm.ss;
    Matrix psi(ns, k);
    for (Index c = 0; c < k; ++c)
        for (Index row = 0; row < m; ++row)
            for (Index j = 0; j < k; ++j) psi(c * m + row, j) = sue[c] * rg(row, j);
    train.block(nv, nv + ns, ns, k) = psi;
    train.block(nv + ns, nv, k, ns) = psi.transpose();
    train.block(nv + ns, nv + ns, k, k) = s2 * grg;

    // Test half: [eps z'g, vech(R - zz'), vec(S - zx')] with g = Gamma (Gamma'R Gamma)^{-1} (prior - beta0).
    const SpdFactor gf(grg, "analytic V: Gamma' Rz Gamma");
    const Vector g = spec.gamma0 * gf.solve(Vector(spec.prior - spec.beta0));
    const Vector rgv = r * g;
    const Index p2 = layout.test_rows();
    Matrix test = Matrix::Zero(p2, p2);
    test(0, 0) = s2 * g.dot(rgv);
    Vector pi(ns);
    for (Index c = 0; c < k; ++c)
        for (Index row = 0; row < m; ++row) pi[c * m + row] = -sue[c] * rgv[row];
    test.block(0, 1 + nv, 1, ns) = pi.transpose();
    test.block(1 + nv, 0, ns, 1) = pi;
    test.block(1, 1, nv, nv) = sm.rr;
    test.block(1, 1 + nv, nv, ns) = sm.rs;
    test.block(1 + nv, 1, ns, nv) = sm.rs.transpose();
    test.block(1 + nv, 1 + nv, ns, ns) = sm.ss;

    Matrix v = Matrix::Zero(layout.size(), layout.size());
    v.topLeftCorner(p1, p1) = spec.tau * train;
    v.bottomRightCorner(p2, p2) = (1.0 - spec.tau) * test;
    return v;
}

inline Matrix monte_carlo_v(const ModelSpec& spec, const ThetaLayout& layout, Index reps, std::uint64_t seed) {
    if (reps < 2) throw std::invalid_argument("monte-carlo V: need at least 2 observations");
    const MomentSystem moments(theta0(spec), spec.prior);
    ObservationSampler sampler(spec);
    const Index p1 = layout.train_rows(), p2 = layout.test_rows();
    constexpr Index batch = 2048;
    Matrix h1(p1, batch), h2(p2, batch);
    Matrix acc1 = Matrix::Zero(p1, p1), acc2 = Matrix::Zero(p2, p2);
    Vector z(spec.m), x(spec.k);
    double y = 0.0;
    for (Index start = 0; start < reps; start += batch) {
        const Index cnt = std::min(batch, reps - start);
        for (Index j = 0; j < cnt; ++j) {
            sampler.draw(seed, static_cast<std::uint64_t>(start + j), z, x, y);
            moments.training_moment(z, x, y, h1.col(j));
            moments.test_moment(z, x, y, h2.col(j));
        }
        acc1.selfadjointView<Eigen::Lower>().rankUpdate(h1.leftCols(cnt));
        acc2.selfadjointView<Eigen::Lower>().rankUpdate(h2.leftCols(cnt));
    }
    const Matrix c1 = Matrix(acc1.selfadjointView<Eigen::Lower>()) / static_cast<double>(reps);
    const Matrix c2 = Matrix(acc2.selfadjointView<Eigen::Lower>()) / static_cast<double>(reps);
    Matrix v = Matrix::Zero(layout.size(), layout.size());
    v.topLeftCorner(p1, p1) = spec.tau * c1;
    v.bottomRightCorner(p2, p2) = (1.0 - spec.tau) * c2;
    return 0.5 * (v + v.transpose());
}

}  // namespace detail

inline constexpr Index kDefaultVReps = 10'000'000;
inline constexpr std::uint64_t kDefaultVSeed = 0x5eedf00dULL;

inline AsymptoticLaw build_law(const ModelSpec& spec, VMode v_mode = VMode::monte_carlo,
                               Index v_reps = kDefaultVReps, std::uint64_t v_seed = kDefaultVSeed) {
    spec.validate();
    AsymptoticLaw law;
    law.layout = ThetaLayout(spec.m, spec.k);
    law.tau = spec.tau;
    law.v_mode = v_mode;
    law.s0 = spec.s0();
    law.d = d_block(law.s0, spec.rz, spec.beta0, spec.prior);

    const Index k = spec.k;
    const Matrix q = law.d.topLeftCorner(k, k);
    const Vector b = law.d.topRightCorner(k, 1);
    law.delta_tilde = b.dot(SpdFactor(q, "build_law: S0' Rz^{-1} S0").solve(b));
    law.degenerate_prior = !(law.delta_tilde > 0.0);

    const ThetaLayout& lay = law.layout;
    const Index p = lay.size();
    Matrix inner = Matrix::Identity(p, p);
    inner.block(lay.beta(), lay.beta(), k + 1, k + 1) = law.d;
    Vector scale(p);
    scale.head(lay.train_rows()).setConstant(spec.tau);
    scale.tail(lay.test_rows()).setConstant(1.0 - spec.tau);
    law.m0 = scale.asDiagonal() * inner;

    law.v = (v_mode == VMode::analytic_gaussian) ? detail::analytic_v(spec, lay)
                                                 : detail::monte_carlo_v(spec, lay, v_reps, v_seed);
    return law;
}

/// Exact minimizer of (z - l)' A (z - l) over l with l[alpha_index] >= 0,
/// for a fixed A. The boundary case pins the alpha coordinate at zero and
/// shifts the rest by A_rr^{-1} A_ra z_alpha.
class ConeProjector {
public:
    ConeProjector(const Matrix& a, Index alpha_index) : alpha_index_(alpha_index) {
        const Index p = a.rows();
        if (a.cols() != p || alpha_index < 0 || alpha_index >= p)
            throw std::invalid_argument("cone projection: bad metric or alpha index");
        Eigen::LLT<Matrix> llt(0.5 * (a + a.transpose()));
        if (llt.info() != Eigen::Success) throw std::invalid_argument("cone projection: metric is not positive definite");

        std::vector<Index> rest;
        for (Index i = 0; i < p; ++i)
            if (i != alpha_index) rest.push_back(i);
        Matrix arr(p - 1, p - 1);
        Vector ara(p - 1);
        for (Index i = 0; i < p - 1; ++i) {
            ara[i] = a(rest[static_cast<std::size_t>(i)], alpha_index);
            for (Index j = 0; j < p - 1; ++j) arr(i, j) = a(rest[static_cast<std::size_t>(i)], rest[static_cast<std::size_t>(j)]);
        }
        const Vector shift = arr.llt().solve(ara);
        shift_ = Vector::Zero(p);
        for (Index i = 0; i < p - 1; ++i) shift_[rest[static_cast<std::size_t>(i)]] = shift[i];
    }

    Vector project(const Vector& z) const {
        const double za = z[alpha_index_];
        if (za >= 0.0) return z;
        Vector out = z + shift_ * za;
        out[alpha_index_] = 0.0;
        return out;
    }

    Index alpha_index() const noexcept { return alpha_index_; }

private:
    Index alpha_index_;
    Vector shift_;
};

inline Vector project_onto_cone(const Vector& z, const Matrix& a, Index alpha_index) {
    return ConeProjector(a, alpha_index).project(z);
}

struct ConeSample {
    Vector z;
    Vector lambda_hat;
    bool at_boundary = false;
};

struct LimitLawDraws {
    std::vector<ConeSample> samples;
    double mass_at_zero = 0.0;
};

inline unsigned default_thread_count() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
}

/// Draws Z = (-M0)^{-1} G with G ~ N(0, V) and projects onto the half-space
/// alpha >= 0 in the metric M0'M0. Draw i uses stream (seed, i).
inline LimitLawDraws simulate_limit_law(const AsymptoticLaw& law, Index draws, std::uint64_t seed,
                                       unsigned threads = default_thread_count()) {
    if (draws < 1) throw std::invalid_argument("simulate_limit_law: draws must be positive");
    if (law.degenerate_prior)
        throw std::domain_error("simulate_limit_law: prior equals beta0, so M0 is singular");
    const Index p = law.layout.size();
    const Matrix root = psd_sqrt(law.v, "simulate_limit_law: V");
    Eigen::PartialPivLU<Matrix> lu(law.m0);
    const Matrix transform = -lu.solve(root);
    const ConeProjector projector(Matrix(law.m0.transpose() * law.m0), law.layout.alpha_index());

    LimitLawDraws out;
    out.samples.resize(static_cast<std::size_t>(draws));
    auto work = [&](Index begin, Index end) {
        Vector g(p);
        for (Index i = begin; i < end; ++i) {
            standard_normals(seed, static_cast<std::uint64_t>(i), g);
            ConeSample& s = out.samples[static_cast<std::size_t>(i)];
            s.z = transform * g;
            s.lambda_hat = projector.project(s.z);
            s.at_boundary = s.lambda_hat[projector.alpha_index()] == 0.0;
        }
    };
    const Index nthreads = std::clamp<Index>(threads, 1, draws);
    if (nthreads == 1) {
        work(0, draws);
    } else {
        std::vector<std::thread> pool;
        const Index chunk = (draws + nthreads - 1) / nthreads;
        for (Index t = 0; t < nthreads; ++t) {
            const Index b = t * chunk, e = std::min(draws, b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }
    Index zeros = 0;
    for (const auto& s : out.samples) zeros += s.at_boundary ? 1 : 0;
    out.mass_at_zero = static_cast<double>(zeros) / static_cast<double>(draws);
    return out;
}

}  // namespace ridgeiv
