#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>

namespace ridgeiv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Largest condition number accepted before a symmetric positive-definite
/// system is treated as singular.
inline constexpr double kConditionLimit = 1e12;

/// Raised when a Gram matrix that must be inverted is singular or too badly
/// conditioned to trust. Carries the offending condition number.
class SingularDesignError : public std::runtime_error {
public:
    SingularDesignError(std::string where, double condition)
        : std::runtime_error(where + ": singular design (condition number "
                             + std::to_string(condition) + ")"),
          where_(std::move(where)),
          condition_(condition) {}

    const std::string& where() const noexcept { return where_; }
    double condition() const noexcept { return condition_; }

private:
    std::string where_;
    double condition_;
};

/// Condition number of a symmetric matrix from its eigenvalues. Returns +inf
/// when the smallest eigenvalue is not positive.
inline double spd_condition(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || !std::isfinite(hi)) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

/// Cholesky factorization with the condition-number guard.
class SpdFactor {
public:
    SpdFactor() = default;

    SpdFactor(const Matrix& a, const std::string& where) {
        const double cond = spd_condition(a);
        if (!(cond <= kConditionLimit)) throw SingularDesignError(where, cond);
        llt_.compute(a);
        if (llt_.info() != Eigen::Success) throw SingularDesignError(where, cond);
        condition_ = cond;
    }

    template <class Rhs>
    auto solve(const Rhs& b) const {
        return llt_.solve(b);
    }

    Matrix inverse() const {
        return llt_.solve(Matrix::Identity(llt_.rows(), llt_.cols()));
    }

    /// Lower-triangular factor L with A = L L'.
    Matrix lower() const { return llt_.matrixL(); }

    double condition() const noexcept { return condition_; }

private:
    Eigen::LLT<Matrix> llt_;
    double condition_ = 1.0;
};

/// Symmetric square root of a positive semi-definite matrix. Eigenvalues in
/// (-tol * max(1, |lambda_max|), 0) are clipped to zero; anything more negative
/// is rejected.
inline Matrix psd_sqrt(const Matrix& a, const std::string& where, double tol = 1e-10) {
    const Matrix sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
    Vector ev = eig.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -tol * scale) {
            throw std::invalid_argument(where + ": matrix is not positive semi-definite");
        }
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return eig.eigenvectors() * ev.asDiagonal();
}

/// Factor F with F F' = a. Uses Cholesky when a is positive definite so that
/// sampling matches the usual construction, and falls back to the clipped
/// eigen square root for semi-definite input.
inline Matrix covariance_factor(const Matrix& a, const std::string& where) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success && spd_condition(a) < kConditionLimit) {
        return llt.matrixL();
    }
    return psd_sqrt(a, where);
}

inline bool is_symmetric(const Matrix& a, double tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

// vech stacks the lower triangle column by column; vec stacks columns.

inline Index vech_size(Index m) { return m * (m + 1) / 2; }

inline Vector vech(const Matrix& a) {
    const Index m = a.rows();
    Vector out(vech_size(m));
    Index pos = 0;
    for (Index j = 0; j < m; ++j)
        for (Index i = j; i < m; ++i) out[pos++] = a(i, j);
    return out;
}

template <class Derived>
Matrix unvech(const Eigen::MatrixBase<Derived>& v, Index m) {
    if (v.size() != vech_size(m)) throw std::invalid_argument("unvech: length mismatch");
    Matrix out(m, m);
    Index pos = 0;
    for (Index j = 0; j < m; ++j)
        for (Index i = j; i < m; ++i) {
            out(i, j) = v[pos];
            out(j, i) = v[pos];
            ++pos;
        }
    return out;
}

inline Vector vec(const Matrix& a) {
    return Eigen::Map<const Vector>(a.data(), a.size());
}

template <class Derived>
Matrix unvec(const Eigen::MatrixBase<Derived>& v, Index rows, Index cols) {
    if (v.size() != rows * cols) throw std::invalid_argument("unvec: length mismatch");
    Matrix out(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) out(i, j) = v[j * rows + i];
    return out;
}

}  // namespace ridgeiv
