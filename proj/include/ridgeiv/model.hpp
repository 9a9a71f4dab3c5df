#pragma once

#include "ridgeiv/linalg.hpp"
#include "ridgeiv/random.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace ridgeiv {

/// Number of training rows for a split fraction: the integer part of tau * n.
/// The small offset absorbs representation error in decimal fractions such as
/// 0.7, so that 0.7 * 10 gives 7 rather than 6.
inline Index split_index(double tau, Index n) {
    return static_cast<Index>(std::floor(tau * static_cast<double>(n) + 1e-9));
}

/// Population description of the linear IV model
///   y = x' beta0 + eps,  x = Gamma0' z + u,  z ~ N(0, Rz),  (eps, u) ~ N(0, err_cov),
/// together with the prior and split fraction used by the ridge path estimator.
struct ModelSpec {
    Index n = 0;
    Index k = 0;
    Index m = 0;
    Vector beta0;
    Matrix gamma0;   // m x k
    Vector prior;
    double tau = 0.7;
    Matrix err_cov;  // (1+k) x (1+k), ordered (eps, u')
    Matrix rz;       // m x m

    Index split_at() const { return split_index(tau, n); }

    /// Both subsamples hold enough rows for their instrument projections.
    bool supports_projections() const {
        const Index s = split_at();
        return s >= m && s <= n - m - 1;
    }

    /// Throws std::invalid_argument when a structural invariant fails.
    /// err_cov may be semi-definite so that noise-free designs can be expressed.
    void validate() const {
        if (n < 4) throw std::invalid_argument("ModelSpec: n must be at least 4");
        if (k < 1 || m < k) throw std::invalid_argument("ModelSpec: need 1 <= k <= m");
        if (beta0.size() != k || prior.size() != k)
            throw std::invalid_argument("ModelSpec: beta0 and prior must have length k");
        if (gamma0.rows() != m || gamma0.cols() != k)
            throw std::invalid_argument("ModelSpec: gamma0 must be m x k");
        if (err_cov.rows() != k + 1 || err_cov.cols() != k + 1)
            throw std::invalid_argument("ModelSpec: err_cov must be (1+k) x (1+k)");
        if (rz.rows() != m || rz.cols() != m)
            throw std::invalid_argument("ModelSpec: rz must be m x m");
        if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("ModelSpec: tau must lie in (0,1)");
        const Index s = split_at();
        if (s < 1 || s > n - 1)
            throw std::invalid_argument("ModelSpec: split leaves an empty training or test sample");
        if (!is_symmetric(rz) || !(spd_condition(rz) <= kConditionLimit))
            throw std::invalid_argument("ModelSpec: rz must be symmetric positive definite");
        if (!is_symmetric(err_cov))
            throw std::invalid_argument("ModelSpec: err_cov must be symmetric");
        psd_sqrt(err_cov, "ModelSpec: err_cov");
        Eigen::ColPivHouseholderQR<Matrix> qr(gamma0);
        if (qr.rank() < k) throw std::invalid_argument("ModelSpec: gamma0 must have full column rank");
    }

    double sigma_eps2() const { return err_cov(0, 0); }
    /// Cov(u, eps), a k-vector.
    Vector sigma_u_eps() const { return err_cov.col(0).tail(k); }
    Matrix sigma_u() const { return err_cov.bottomRightCorner(k, k); }
    /// S0 = E[z x'] = Rz Gamma0.
    Matrix s0() const { return rz * gamma0; }
};

/// Simulation design with k = 2, m = 3, z ~ N(0, I), beta0 = 0, unit error
/// variances, Cov(eps, u_j) = 0.7 and Gamma0 = [[1,0],[0,delta],[1,0]].
inline ModelSpec design_spec(double delta, Index n, Vector prior, double tau = 0.7) {
    ModelSpec s;
    s.n = n;
    s.k = 2;
    s.m = 3;
    s.beta0 = Vector::Zero(2);
    s.gamma0.resize(3, 2);
    s.gamma0 << 1.0, 0.0, 0.0, delta, 1.0, 0.0;
    s.prior = std::move(prior);
    s.tau = tau;
    s.err_cov.resize(3, 3);
    s.err_cov << 1.0, 0.7, 0.7, 0.7, 1.0, 0.0, 0.7, 0.0, 1.0;
    s.rz = Matrix::Identity(3, 3);
    s.validate();
    return s;
}

/// The three priors at one, two and three standard deviations from beta0 = 0.
inline Vector design_prior(int sd_multiple) {
    const double v = sd_multiple / std::sqrt(2.0);
    return Vector::Constant(2, v);
}

/// One realized sample. Immutable after construction.
class Dataset {
public:
    Dataset() = default;

    Dataset(Vector y, Matrix x, Matrix z, Index split_at)
        : y_(std::move(y)), x_(std::move(x)), z_(std::move(z)), split_at_(split_at) {
        if (x_.rows() != y_.size() || z_.rows() != y_.size())
            throw std::invalid_argument("Dataset: row counts differ");
        if (split_at_ < 0 || split_at_ > y_.size())
            throw std::invalid_argument("Dataset: split index out of range");
    }

    const Vector& y() const noexcept { return y_; }
    const Matrix& x() const noexcept { return x_; }
    const Matrix& z() const noexcept { return z_; }
    Index split_at() const noexcept { return split_at_; }
    Index n() const noexcept { return y_.size(); }
    Index k() const noexcept { return x_.cols(); }
    Index m() const noexcept { return z_.cols(); }

private:
    Vector y_;
    Matrix x_;
    Matrix z_;
    Index split_at_ = 0;
};

/// Contiguous row range of a Dataset. The dataset must outlive the view.
class DatasetView {
public:
    DatasetView(const Dataset& data)  // NOLINT: implicit full view
        : data_(&data), begin_(0), count_(data.n()) {}

    DatasetView(const Dataset& data, Index begin, Index count)
        : data_(&data), begin_(begin), count_(count) {
        if (begin < 0 || count < 0 || begin + count > data.n())
            throw std::out_of_range("DatasetView: row range outside dataset");
    }

    auto y() const { return data_->y().segment(begin_, count_); }
    auto x() const { return data_->x().middleRows(begin_, count_); }
    auto z() const { return data_->z().middleRows(begin_, count_); }
    Index n() const noexcept { return count_; }
    Index begin() const noexcept { return begin_; }
    Index k() const noexcept { return data_->k(); }
    Index m() const noexcept { return data_->m(); }

private:
    const Dataset* data_;
    Index begin_;
    Index count_;
};

/// Training rows [0, split_at) and test rows [split_at, n).
inline std::pair<DatasetView, DatasetView> split(const Dataset& data) {
    return {DatasetView(data, 0, data.split_at()),
            DatasetView(data, data.split_at(), data.n() - data.split_at())};
}

/// Draws single observations (z, x, y). Observation i uses its own random
/// stream keyed by (seed, i), so results do not depend on scheduling.
class ObservationSampler {
public:
    explicit ObservationSampler(const ModelSpec& spec)
        : spec_(&spec),
          lz_(covariance_factor(spec.rz, "sampler: rz")),
          le_(covariance_factor(spec.err_cov, "sampler: err_cov")),
          draws_(spec.m + 1 + spec.k),
          err_(spec.k + 1) {}

    void draw(std::uint64_t seed, std::uint64_t index, Eigen::Ref<Vector> z, Eigen::Ref<Vector> x, double& y) {
        const Index k = spec_->k, m = spec_->m;
        standard_normals(seed, index, draws_);
        z.noalias() = lz_ * draws_.head(m);
        err_.noalias() = le_ * draws_.tail(k + 1);
        x.noalias() = spec_->gamma0.transpose() * z;
        x += err_.tail(k);
        y = x.dot(spec_->beta0) + err_[0];
    }

private:
    const ModelSpec* spec_;
    Matrix lz_, le_;
    Vector draws_, err_;
};

/// Draws a dataset; row i comes from stream (seed, i).
inline Dataset generate_dataset(const ModelSpec& spec, std::uint64_t seed) {
    const Index n = spec.n, k = spec.k, m = spec.m;
    ObservationSampler sampler(spec);
    Vector y(n), zi(m), xi(k);
    Matrix x(n, k), z(n, m);
    for (Index i = 0; i < n; ++i) {
        sampler.draw(seed, static_cast<std::uint64_t>(i), zi, xi, y[i]);
        z.row(i) = zi.transpose();
        x.row(i) = xi.transpose();
    }
    return Dataset(std::move(y), std::move(x), std::move(z), spec.split_at());
}

}  // namespace ridgeiv
