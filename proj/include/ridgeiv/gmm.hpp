#pragma once

#include "ridgeiv/linalg.hpp"
#include "ridgeiv/model.hpp"

#include <stdexcept>
#include <string>

namespace ridgeiv {

/// Positions of the blocks of the stacked parameter
///   theta = [vech(R_tau), vec(S_tau), beta, alpha, vech(R_test), vec(S_test)].
/// All offsets are zero-based.
struct ThetaLayout {
    Index m = 0;
    Index k = 0;

    ThetaLayout() = default;
    ThetaLayout(Index m_, Index k_) : m(m_), k(k_) {
        if (k < 1 || m < k) throw std::invalid_argument("ThetaLayout: need 1 <= k <= m");
    }

    Index vech_len() const { return vech_size(m); }
    Index vec_len() const { return m * k; }

    Index r_train() const { return 0; }
    Index s_train() const { return vech_len(); }
    Index beta() const { return vech_len() + vec_len(); }
    Index alpha_index() const { return beta() + k; }
    /// One-based position of alpha, m(m+1)/2 + km + k + 1.
    Index alpha_coordinate() const { return alpha_index() + 1; }
    Index r_test() const { return alpha_index() + 1; }
    Index s_test() const { return r_test() + vech_len(); }
    Index size() const { return 2 * vech_len() + 2 * vec_len() + k + 1; }

    /// Rows of the training half (blocks 1-3) of the moment vector.
    Index train_rows() const { return alpha_index(); }
    /// Rows of the test half (blocks 4-6).
    Index test_rows() const { return size() - alpha_index(); }

    friend bool operator==(const ThetaLayout&, const ThetaLayout&) = default;
};

class ThetaVector {
public:
    ThetaVector() = default;
    ThetaVector(ThetaLayout layout, Vector values) : layout_(layout), values_(std::move(values)) {
        if (values_.size() != layout_.size()) throw std::invalid_argument("ThetaVector: length mismatch");
    }

    const ThetaLayout& layout() const noexcept { return layout_; }
    const Vector& values() const noexcept { return values_; }

    Matrix r_train() const { return unvech(values_.segment(layout_.r_train(), layout_.vech_len()), layout_.m); }
    Matrix s_train() const {
        return unvec(values_.segment(layout_.s_train(), layout_.vec_len()), layout_.m, layout_.k);
    }
    Vector beta() const { return values_.segment(layout_.beta(), layout_.k); }
    double alpha() const { return values_[layout_.alpha_index()]; }
    Matrix r_test() const { return unvech(values_.segment(layout_.r_test(), layout_.vech_len()), layout_.m); }
    Matrix s_test() const {
        return unvec(values_.segment(layout_.s_test(), layout_.vec_len()), layout_.m, layout_.k);
    }

private:
    ThetaLayout layout_;
    Vector values_;
};

inline ThetaVector pack_theta(const Matrix& r_train, const Matrix& s_train, const Vector& beta, double alpha,
                              const Matrix& r_test, const Matrix& s_test, const ThetaLayout& layout) {
    const Index m = layout.m, k = layout.k;
    auto shape = [](const Matrix& a, Index r, Index c, const char* what) {
        if (a.rows() != r || a.cols() != c) throw std::invalid_argument(std::string("pack_theta: bad shape for ") + what);
    };
    shape(r_train, m, m, "R_tau");
    shape(r_test, m, m, "R_(1-tau)");
    shape(s_train, m, k, "S_tau");
    shape(s_test, m, k, "S_(1-tau)");
    if (beta.size() != k) throw std::invalid_argument("pack_theta: bad shape for beta");
    if (!is_symmetric(r_train) || !is_symmetric(r_test))
        throw std::invalid_argument("pack_theta: R blocks must be symmetric");

    Vector v(layout.size());
    v.segment(layout.r_train(), layout.vech_len()) = vech(r_train);
    v.segment(layout.s_train(), layout.vec_len()) = vec(s_train);
    v.segment(layout.beta(), k) = beta;
    v[layout.alpha_index()] = alpha;
    v.segment(layout.r_test(), layout.vech_len()) = vech(r_test);
    v.segment(layout.s_test(), layout.vec_len()) = vec(s_test);
    return ThetaVector(layout, std::move(v));
}

struct UnpackedTheta {
    Matrix r_train, s_train;
    Vector beta;
    double alpha;
    Matrix r_test, s_test;
};

inline UnpackedTheta unpack_theta(const ThetaVector& t) {
    return {t.r_train(), t.s_train(), t.beta(), t.alpha(), t.r_test(), t.s_test()};
}

/// Population value theta0: both R blocks equal Rz, both S blocks equal Rz Gamma0,
/// beta = beta0 and alpha = 0.
inline ThetaVector theta0(const ModelSpec& spec) {
    const Matrix s0 = spec.s0();
    return pack_theta(spec.rz, s0, spec.beta0, 0.0, spec.rz, s0, ThetaLayout(spec.m, spec.k));
}

/// Z'Z/rows, symmetrized.
inline Matrix instrument_moment(const DatasetView& rows) {
    const Matrix zz = rows.z().transpose() * rows.z() / static_cast<double>(rows.n());
    return 0.5 * (zz + zz.transpose());
}

/// Z'X/rows.
inline Matrix cross_moment(const DatasetView& rows) {
    return rows.z().transpose() * rows.x() / static_cast<double>(rows.n());
}

/// Just-identified moment system. Training rows contribute
///   vech(R_tau - z z'),  vec(S_tau - z x'),
///   -S_tau' R_tau^{-1} z (y - x'beta) + alpha (beta - prior),
/// and test rows contribute
///   (y - x'beta) z' R_test^{-1} S_test (S_tau' R_tau^{-1} S_tau + alpha I)^{-1} (prior - beta),
///   vech(R_test - z z'),  vec(S_test - z x').
/// The third block is the training first-order condition, so it vanishes on
/// the ridge path.
class MomentSystem {
public:
    MomentSystem(const ThetaVector& theta, Vector prior)
        : layout_(theta.layout()), prior_(std::move(prior)) {
        const Index k = layout_.k;
        if (prior_.size() != k) throw std::invalid_argument("MomentSystem: prior length mismatch");
        r_train_ = theta.r_train();
        s_train_ = theta.s_train();
        beta_ = theta.beta();
        alpha_ = theta.alpha();
        r_test_ = theta.r_test();
        s_test_ = theta.s_test();

        const SpdFactor rt(r_train_, "moment block 3: R_tau");
        weight3_ = rt.solve(s_train_).transpose();  // S_tau' R_tau^{-1}
        const SpdFactor rs(r_test_, "moment block 4: R_(1-tau)");
        Matrix inner = s_train_.transpose() * rt.solve(s_train_);
        inner = 0.5 * (inner + inner.transpose()) + alpha_ * Matrix::Identity(k, k);
        const SpdFactor inner_f(inner, "moment block 4: S_tau' R_tau^{-1} S_tau + alpha I");
        weight4_ = rs.solve(Matrix(s_test_ * inner_f.solve(prior_ - beta_)));
        penalty_ = alpha_ * (beta_ - prior_);
    }

    const ThetaLayout& layout() const noexcept { return layout_; }

    /// Blocks 1-3 for one training observation.
    void training_moment(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& x, double y,
                         Eigen::Ref<Vector> out) const {
        const Index m = layout_.m, k = layout_.k;
        Index pos = 0;
        for (Index j = 0; j < m; ++j)
            for (Index i = j; i < m; ++i) out[pos++] = r_train_(i, j) - z[i] * z[j];
        for (Index c = 0; c < k; ++c)
            for (Index r = 0; r < m; ++r) out[pos++] = s_train_(r, c) - z[r] * x[c];
        const double resid = y - x.dot(beta_);
        out.segment(pos, k) = -(weight3_ * z) * resid + penalty_;
    }

    /// Blocks 4-6 for one test observation.
    void test_moment(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& x, double y,
                     Eigen::Ref<Vector> out) const {
        const Index m = layout_.m, k = layout_.k;
        out[0] = (y - x.dot(beta_)) * z.dot(weight4_);
        Index pos = 1;
        for (Index j = 0; j < m; ++j)
            for (Index i = j; i < m; ++i) out[pos++] = r_test_(i, j) - z[i] * z[j];
        for (Index c = 0; c < k; ++c)
            for (Index r = 0; r < m; ++r) out[pos++] = s_test_(r, c) - z[r] * x[c];
    }

    /// h_i(theta) with the training indicator applied.
    Vector observation(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& x, double y,
                       bool training) const {
        Vector h = Vector::Zero(layout_.size());
        if (training) training_moment(z, x, y, h.head(layout_.train_rows()));
        else test_moment(z, x, y, h.tail(layout_.test_rows()));
        return h;
    }

    /// H_n(theta) = (1/n) sum_i h_i(theta), accumulated through cross products.
    Vector average(const Dataset& data) const {
        const Index k = layout_.k;
        const auto [train, test] = split(data);
        const double n = static_cast<double>(data.n());
        const double wtr = static_cast<double>(train.n()) / n;
        const double wte = static_cast<double>(test.n()) / n;

        Vector h(layout_.size());
        const Vector r_tr = train.y() - train.x() * beta_;
        h.segment(layout_.r_train(), layout_.vech_len()) = wtr * vech(r_train_ - instrument_moment(train));
        h.segment(layout_.s_train(), layout_.vec_len()) = wtr * vec(s_train_ - cross_moment(train));
        h.segment(layout_.beta(), k) = -(weight3_ * (train.z().transpose() * r_tr)) / n + wtr * penalty_;

        const Vector r_te = test.y() - test.x() * beta_;
        h[layout_.alpha_index()] = (test.z() * weight4_).dot(r_te) / n;
        h.segment(layout_.r_test(), layout_.vech_len()) = wte * vech(r_test_ - instrument_moment(test));
        h.segment(layout_.s_test(), layout_.vec_len()) = wte * vec(s_test_ - cross_moment(test));
        return h;
    }

private:
    ThetaLayout layout_;
    Vector prior_;
    Matrix r_train_, s_train_, r_test_, s_test_;
    Vector beta_;
    double alpha_ = 0.0;
    Matrix weight3_;
    Vector weight4_;
    Vector penalty_;
};

inline Vector moment_conditions(const Dataset& data, const ThetaVector& theta, const Vector& prior) {
    if (theta.layout() != ThetaLayout(data.m(), data.k()))
        throw std::invalid_argument("moment_conditions: layout does not match dataset dimensions");
    return MomentSystem(theta, prior).average(data);
}

/// Central-difference Jacobian of H_n with respect to theta.
inline Matrix numerical_jacobian(const Dataset& data, const ThetaVector& theta, const Vector& prior,
                                 double step = 1e-6) {
    const ThetaLayout& layout = theta.layout();
    const Index p = layout.size();
    Matrix jac(p, p);
    for (Index j = 0; j < p; ++j) {
        Vector up = theta.values(), dn = theta.values();
        up[j] += step;
        dn[j] -= step;
        jac.col(j) = (moment_conditions(data, ThetaVector(layout, up), prior) -
                      moment_conditions(data, ThetaVector(layout, dn), prior)) /
                     (2.0 * step);
    }
    return jac;
}

/// theta at a ridge path fit: subsample moment matrices plus (beta_hat, alpha_hat).
inline ThetaVector fitted_theta(const Dataset& data, const Vector& beta_hat, double alpha_hat) {
    const auto [train, test] = split(data);
    return pack_theta(instrument_moment(train), cross_moment(train), beta_hat, alpha_hat, instrument_moment(test),
                      cross_moment(test), ThetaLayout(data.m(), data.k()));
}

}  // namespace ridgeiv
