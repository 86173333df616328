#pragma once

#include <functional>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "qualdyn/errors.hpp"
#include "qualdyn/parallel.hpp"
#include "qualdyn/types.hpp"

namespace qualdyn {

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
///
/// On failure the diagonal is loaded with jitter starting at 1e-12 * trace/L and
/// growing tenfold up to 1e-6 * trace/L; after that a CovarianceError is thrown.
/// The zero matrix factors to zero.
template <typename Derived>
MatrixX<typename Derived::Scalar> cholesky_psd(const Eigen::MatrixBase<Derived>& m) {
    using Scalar = typename Derived::Scalar;
    using Mat = MatrixX<Scalar>;
    if (m.rows() != m.cols()) throw PreconditionError("cholesky_psd: matrix must be square");
    const Index n = m.rows();
    Mat sym = m.template selfadjointView<Eigen::Lower>();
    if (!sym.allFinite()) throw CovarianceError("cholesky_psd: matrix has non-finite entries");
    if (sym.isZero(0)) return Mat::Zero(n, n);

    Eigen::LLT<Mat> llt(sym);
    if (llt.info() == Eigen::Success) return llt.matrixL();

    const Scalar scale = sym.trace() / static_cast<Scalar>(n);
    if (scale > Scalar(0)) {
        for (Scalar jitter = Scalar(1e-12) * scale; jitter <= Scalar(1.000001e-6) * scale; jitter *= Scalar(10)) {
            llt.compute(sym + jitter * Mat::Identity(n, n));
            if (llt.info() == Eigen::Success) return llt.matrixL();
        }
    }
    throw CovarianceError("cholesky_psd: matrix is not positive semi-definite (jitter exhausted)");
}

/// Scaled unscented-transform parameters.
struct UTParams {
    double alpha = 0.1;
    double beta = 2.0;
    double kappa = 0.0;

    /// lambda = alpha^2 (L + kappa) - L
    double lambda(Index dim) const { return alpha * alpha * (static_cast<double>(dim) + kappa) - static_cast<double>(dim); }
    void validate(Index dim) const;
};

/// 2L+1 sigma points stored as the columns of `points`.
struct SigmaPointSet {
    Matrix points;
    Vector w_mean;
    Vector w_cov;

    Index dim() const { return points.rows(); }
    Index count() const { return points.cols(); }
};

SigmaPointSet sigma_points(const Vector& mean, const Matrix& cov, const UTParams& ut);

/// Posterior parameter estimate plus the noise configuration of the filter.
/// Process noise is added to the covariance at predict; measurement noise is
/// added to the predicted-observation covariance at update. Both are diagonal.
struct FilterState {
    Vector mean;
    Matrix cov;
    Vector process_noise;
    Vector measurement_noise;
    long iteration = 0;

    void validate() const;
};

struct Prior {
    Vector mean;
    Matrix cov;
};

/// Random-walk prediction: mean unchanged, covariance plus process noise.
Prior predict(const FilterState& state);

using ObservationFn = std::function<Vector(const Vector&)>;

/// Evaluates obs_fn at every sigma point; column i of the result is Y_i.
/// Any failure is reported as ObservationError.
Matrix propagate(const SigmaPointSet& sigma, const ObservationFn& obs_fn, const WorkerPool* pool = nullptr);

struct UpdateResult {
    FilterState state;
    Vector predicted_observation;  ///< y_hat
    Matrix innovation_cov;         ///< P_yy including measurement noise
    Matrix gain;                   ///< K
};

/// Measurement update from precomputed sigma-point observations.
UpdateResult update(const FilterState& previous, const Prior& prior, const SigmaPointSet& sigma,
                    const Matrix& observations, const Vector& target);

UpdateResult update(const FilterState& previous, const Prior& prior, const SigmaPointSet& sigma,
                    const ObservationFn& obs_fn, const Vector& target, const WorkerPool* pool = nullptr);

/// One full predict / sigma-point / update cycle.
UpdateResult iterate(const FilterState& state, const UTParams& ut, const ObservationFn& obs_fn,
                     const Vector& target, const WorkerPool* pool = nullptr);

}  // namespace qualdyn
