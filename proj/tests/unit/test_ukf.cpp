#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/LU>
#include <Eigen/QR>

#include "qualdyn/errors.hpp"
#include "qualdyn/rng.hpp"
#include "qualdyn/ukf.hpp"
#include "generators.hpp"

using namespace qualdyn;
using namespace qualdyn::testing;

namespace {

FilterState make_state(const Vector& mean, const Matrix& cov, double q, double r, Index obs_dim) {
    FilterState s;
    s.mean = mean;
    s.cov = cov;
    s.process_noise = Vector::Constant(mean.size(), q);
    s.measurement_noise = Vector::Constant(obs_dim, r);
    return s;
}

}  // namespace

TEST_CASE("cholesky examples") {
    CHECK(cholesky_psd(Matrix::Identity(3, 3)) == Matrix::Identity(3, 3));
    Matrix m(2, 2);
    m << 4, 2, 2, 3;
    Matrix l(2, 2);
    l << 2, 0, 1, std::sqrt(2.0);
    CHECK((cholesky_psd(m) - l).norm() < 1e-15);
    auto rng = make_rng(1);
    const Matrix a = random_matrix(5, 5, rng);
    const Matrix p = a * a.transpose();
    const Matrix f = cholesky_psd(p);
    CHECK((f * f.transpose() - p).norm() < 1e-12);
    CHECK(cholesky_psd(Matrix::Zero(3, 3)).isZero(0));
}

TEST_CASE("cholesky jitter and failure") {
    Matrix singular(2, 2);
    singular << 1, 1, 1, 1;
    const Matrix f = cholesky_psd(singular);
    CHECK((f * f.transpose() - singular).norm() < 1e-6);
    Matrix indefinite(2, 2);
    indefinite << 1, 0, 0, -1;
    CHECK_THROWS_AS(cholesky_psd(indefinite), CovarianceError);
    CHECK_THROWS_AS(cholesky_psd(Matrix::Ones(2, 3)), PreconditionError);
}

TEST_CASE("one-dimensional sigma points by hand") {
    UTParams ut;
    ut.alpha = 1.0;
    const auto s = sigma_points(Vector::Zero(1), Matrix::Identity(1, 1), ut);
    CHECK(s.points.isApprox((Matrix(1, 3) << 0.0, 1.0, -1.0).finished()));
    CHECK(s.w_mean.isApprox((Vector(3) << 0.0, 0.5, 0.5).finished()));
    CHECK(s.w_cov.isApprox((Vector(3) << 2.0, 0.5, 0.5).finished()));
}

TEST_CASE("degenerate covariance collapses the sigma points") {
    const Vector mean = (Vector(2) << 1.0, -2.0).finished();
    const auto s = sigma_points(mean, Matrix::Zero(2, 2), UTParams{});
    for (Index i = 0; i < s.count(); ++i) CHECK(s.points.col(i) == mean);
}

TEST_CASE("invalid unscented parameters") {
    UTParams ut;
    ut.alpha = 0.0;
    CHECK_THROWS_AS(ut.validate(2), PreconditionError);
    ut = UTParams{};
    ut.kappa = -3.0;
    CHECK_THROWS_AS(ut.validate(3), PreconditionError);
}

TEST_CASE("sigma point weight identities") {
    auto rng = make_rng(2);
    for (Index l = 1; l <= 10; ++l) {
        for (double alpha : {1e-2, 1e-1, 1.0}) {
            for (double kappa : {0.0, 3.0 - static_cast<double>(l)}) {
                UTParams ut;
                ut.alpha = alpha;
                ut.kappa = kappa;
                const double lam = ut.lambda(l);
                if (static_cast<double>(l) + lam <= 0.0) continue;
                const Vector mean = random_matrix(l, 1, rng);
                const Matrix p = random_spd(l, rng);
                const auto s = sigma_points(mean, p, ut);
                CHECK(s.count() == 2 * l + 1);
                CHECK(s.w_mean.sum() == doctest::Approx(1.0));
                CHECK(s.w_mean.tail(2 * l).sum() ==
                      doctest::Approx(1.0 - lam / (static_cast<double>(l) + lam)));
                const Vector m = s.points * s.w_mean;
                CHECK((m - mean).norm() <= 1e-12 * std::max(1.0, mean.norm()) / std::min(1.0, alpha * alpha));
                const Matrix d = s.points.colwise() - mean;
                const Matrix cov = d * s.w_mean.asDiagonal() * d.transpose();
                CHECK((cov - p).norm() < 1e-10 * p.norm());
            }
        }
    }
}

TEST_CASE("predict adds process noise") {
    auto s = make_state(Vector::Ones(2), Matrix::Identity(2, 2), 0.0, 0.01, 1);
    auto prior = predict(s);
    CHECK(prior.mean == s.mean);
    CHECK(prior.cov == s.cov);
    s.process_noise = Vector::Constant(2, 0.01);
    prior = predict(s);
    CHECK(prior.cov.isApprox(1.01 * Matrix::Identity(2, 2)));
}

TEST_CASE("linear observation reproduces the classical Kalman update") {
    auto rng = make_rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Index l = 1 + trial % 4, m = 1 + trial % 3;
        const Matrix h = random_matrix(m, l, rng);
        const auto state = make_state(random_matrix(l, 1, rng), random_spd(l, rng), 0.05, 0.2, m);
        const Vector y = random_matrix(m, 1, rng);
        const auto r = iterate(state, UTParams{}, [&](const Vector& t) -> Vector { return h * t; }, y);

        const Matrix pp = state.cov + Matrix(state.process_noise.asDiagonal());
        const Matrix s = h * pp * h.transpose() + Matrix(state.measurement_noise.asDiagonal());
        const Matrix k = pp * h.transpose() * s.inverse();
        const Vector mean = state.mean + k * (y - h * state.mean);
        const Matrix cov = pp - k * s * k.transpose();
        CHECK((r.state.mean - mean).norm() < 1e-8);
        CHECK((r.state.cov - cov).norm() < 1e-8);
        CHECK((r.state.cov - r.state.cov.transpose()).norm() < 1e-12);
        CHECK(r.state.iteration == state.iteration + 1);
    }
}

TEST_CASE("an uninformative observation leaves the prior unchanged") {
    const auto state = make_state((Vector(2) << 1.0, 2.0).finished(), Matrix::Identity(2, 2), 0.01, 0.01, 1);
    const auto r = iterate(state, UTParams{}, [](const Vector&) -> Vector { return Vector::Constant(1, 3.0); },
                           Vector::Constant(1, 5.0));
    CHECK(r.gain.isZero(1e-12));
    CHECK(r.state.mean.isApprox(state.mean));
    CHECK(r.state.cov.isApprox(predict(state).cov));
}

TEST_CASE("linear filter converges to least squares") {
    auto rng = make_rng(4);
    const Matrix h = random_matrix(3, 3, rng);
    const Vector y = random_matrix(3, 1, rng);
    auto state = make_state(Vector::Zero(3), Matrix::Identity(3, 3), 1e-2, 1e-2, 3);
    for (int i = 0; i < 200; ++i)
        state = iterate(state, UTParams{}, [&](const Vector& t) -> Vector { return h * t; }, y).state;
    const Vector ls = h.colPivHouseholderQr().solve(y);
    CHECK((state.mean - ls).norm() < 1e-6);
}

TEST_CASE("update is invariant under sigma point permutation") {
    auto rng = make_rng(5);
    const auto state = make_state(random_matrix(3, 1, rng), random_spd(3, rng), 0.01, 0.01, 2);
    const auto obs = [](const Vector& t) -> Vector {
        return (Vector(2) << std::sin(t[0]) + t[1] * t[2], t[0] * t[0] - t[2]).finished();
    };
    const Vector y = (Vector(2) << 0.3, -0.2).finished();
    const Prior prior = predict(state);
    const auto sigma = sigma_points(prior.mean, prior.cov, UTParams{});
    const Matrix ys = propagate(sigma, obs);
    const auto a = update(state, prior, sigma, ys, y);

    std::vector<Index> order(static_cast<std::size_t>(sigma.count() - 1));
    std::iota(order.begin(), order.end(), 1);
    std::shuffle(order.begin(), order.end(), rng);
    SigmaPointSet shuffled = sigma;
    Matrix ys2 = ys;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const Index dst = static_cast<Index>(i) + 1;
        shuffled.points.col(dst) = sigma.points.col(order[i]);
        shuffled.w_mean[dst] = sigma.w_mean[order[i]];
        shuffled.w_cov[dst] = sigma.w_cov[order[i]];
        ys2.col(dst) = ys.col(order[i]);
    }
    const auto b = update(state, prior, shuffled, ys2, y);
    CHECK((a.state.mean - b.state.mean).norm() < 1e-12);
    CHECK((a.state.cov - b.state.cov).norm() < 1e-12);
}

TEST_CASE("observation failures") {
    const auto state = make_state(Vector::Zero(2), Matrix::Identity(2, 2), 0.01, 0.01, 1);
    const auto nan_obs = [](const Vector&) -> Vector { return Vector::Constant(1, std::nan("")); };
    CHECK_THROWS_AS(iterate(state, UTParams{}, nan_obs, Vector::Zero(1)), ObservationError);
    const auto throwing = [](const Vector&) -> Vector { throw std::runtime_error("boom"); };
    CHECK_THROWS_AS(iterate(state, UTParams{}, throwing, Vector::Zero(1)), ObservationError);
    const auto wrong = [](const Vector&) -> Vector { return Vector::Zero(2); };
    CHECK_THROWS_AS(iterate(state, UTParams{}, wrong, Vector::Zero(1)), Error);
}

TEST_CASE("parallel propagation matches serial") {
    auto rng = make_rng(6);
    const auto sigma = sigma_points(random_matrix(4, 1, rng), random_spd(4, rng), UTParams{});
    const auto obs = [](const Vector& t) -> Vector { return t.array().sin().matrix(); };
    const WorkerPool pool(3);
    CHECK(propagate(sigma, obs) == propagate(sigma, obs, &pool));
}

TEST_CASE("filter state validation") {
    auto s = make_state(Vector::Zero(2), Matrix::Identity(2, 2), 0.01, 0.01, 1);
    CHECK_NOTHROW(s.validate());
    s.process_noise[0] = -1.0;
    CHECK_THROWS_AS(s.validate(), PreconditionError);
    s = make_state(Vector::Zero(2), Matrix::Identity(3, 3), 0.01, 0.01, 1);
    CHECK_THROWS_AS(s.validate(), PreconditionError);
}
