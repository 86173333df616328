#include "qualdyn/ukf.hpp"

#include <string>

namespace qualdyn {

void UTParams::validate(Index dim) const {
    if (dim < 1) throw PreconditionError("unscented transform: dimension must be at least 1");
    if (!(alpha > 0.0)) throw PreconditionError("unscented transform: alpha must be positive");
    if (!(static_cast<double>(dim) + lambda(dim) > 0.0))
        throw PreconditionError("unscented transform: L + lambda must be positive");
}

SigmaPointSet sigma_points(const Vector& mean, const Matrix& cov, const UTParams& ut) {
    const Index dim = mean.size();
    ut.validate(dim);
    if (cov.rows() != dim || cov.cols() != dim) throw PreconditionError("sigma_points: covariance shape mismatch");

    const double lambda = ut.lambda(dim);
    const double spread = static_cast<double>(dim) + lambda;
    const Matrix root = cholesky_psd(spread * cov);

    SigmaPointSet set;
    set.points.resize(dim, 2 * dim + 1);
    set.points.col(0) = mean;
    for (Index i = 0; i < dim; ++i) {
        set.points.col(1 + i) = mean + root.col(i);
        set.points.col(1 + dim + i) = mean - root.col(i);
    }
    set.w_mean = Vector::Constant(2 * dim + 1, 1.0 / (2.0 * spread));
    set.w_cov = set.w_mean;
    set.w_mean[0] = lambda / spread;
    set.w_cov[0] = lambda / spread + (1.0 - ut.alpha * ut.alpha + ut.beta);
    return set;
}

void FilterState::validate() const {
    const Index dim = mean.size();
    if (cov.rows() != dim || cov.cols() != dim) throw PreconditionError("filter state: covariance shape mismatch");
    if (process_noise.size() != dim) throw PreconditionError("filter state: process noise length mismatch");
    if ((process_noise.array() < 0.0).any() || (measurement_noise.array() < 0.0).any())
        throw PreconditionError("filter state: noise variances must be non-negative");
}

Prior predict(const FilterState& state) {
    state.validate();
    Prior prior{state.mean, state.cov};
    prior.cov.diagonal() += state.process_noise;
    return prior;
}

Matrix propagate(const SigmaPointSet& sigma, const ObservationFn& obs_fn, const WorkerPool* pool) {
    const auto count = static_cast<std::size_t>(sigma.count());
    std::vector<Vector> ys(count);
    auto eval = [&](std::size_t i) { ys[i] = obs_fn(sigma.points.col(static_cast<Index>(i))); };
    try {
        if (pool) {
            pool->parallel_for(count, eval);
        } else {
            for (std::size_t i = 0; i < count; ++i) eval(i);
        }
    } catch (const std::exception& e) {
        throw ObservationError(std::string("observation function failed: ") + e.what());
    }
    const Index m = ys.front().size();
    Matrix out(m, sigma.count());
    for (std::size_t i = 0; i < count; ++i) {
        if (ys[i].size() != m) throw ObservationError("observation function returned inconsistent lengths");
        out.col(static_cast<Index>(i)) = ys[i];
    }
    if (!out.allFinite()) throw ObservationError("observation function returned non-finite values");
    return out;
}

UpdateResult update(const FilterState& previous, const Prior& prior, const SigmaPointSet& sigma,
                    const Matrix& observations, const Vector& target) {
    const Index m = observations.rows();
    if (observations.cols() != sigma.count()) throw PreconditionError("update: one observation per sigma point");
    if (target.size() != m) throw PreconditionError("update: target length differs from observation length");
    if (previous.measurement_noise.size() != m)
        throw PreconditionError("update: measurement noise length differs from observation length");

    const Vector y_hat = observations * sigma.w_mean;
    const Matrix dy = observations.colwise() - y_hat;
    const Matrix dtheta = sigma.points.colwise() - prior.mean;

    Matrix p_yy = dy * sigma.w_cov.asDiagonal() * dy.transpose();
    p_yy.diagonal() += previous.measurement_noise;
    const Matrix p_ty = dtheta * sigma.w_cov.asDiagonal() * dy.transpose();

    Eigen::LLT<Matrix> llt(p_yy);
    if (llt.info() != Eigen::Success)
        throw CovarianceError("update: predicted-observation covariance is not positive definite");
    // K = P_ty P_yy^-1, solved as P_yy K^T = P_ty^T.
    const Matrix gain = llt.solve(p_ty.transpose()).transpose();

    UpdateResult out;
    out.state = previous;
    out.state.mean = prior.mean + gain * (target - y_hat);
    out.state.cov = prior.cov - gain * p_yy * gain.transpose();
    out.state.cov = 0.5 * (out.state.cov + out.state.cov.transpose()).eval();
    out.state.iteration = previous.iteration + 1;
    out.predicted_observation = y_hat;
    out.innovation_cov = std::move(p_yy);
    out.gain = gain;
    return out;
}

UpdateResult update(const FilterState& previous, const Prior& prior, const SigmaPointSet& sigma,
                    const ObservationFn& obs_fn, const Vector& target, const WorkerPool* pool) {
    return update(previous, prior, sigma, propagate(sigma, obs_fn, pool), target);
}

UpdateResult iterate(const FilterState& state, const UTParams& ut, const ObservationFn& obs_fn,
                     const Vector& target, const WorkerPool* pool) {
    const Prior prior = predict(state);
    const SigmaPointSet sigma = sigma_points(prior.mean, prior.cov, ut);
    return update(state, prior, sigma, obs_fn, target, pool);
}

}  // namespace qualdyn
