#pragma once

#include <optional>
#include <string>

#include <Eigen/Core>

#include "qualdyn/errors.hpp"
#include "qualdyn/models.hpp"
#include "qualdyn/odeint.hpp"

namespace qualdyn {

template <typename Scalar>
struct GramSchmidtResult {
    MatrixX<Scalar> frame;  ///< orthonormal columns e_hat_1..e_hat_k
    VectorX<Scalar> norms;  ///< length of each column after removing its projections onto earlier ones
};

/// Re-orthonormalizes the columns of `vectors` in order, keeping span(e_1..e_j) for every j.
///
/// Uses the modified variant (projections subtracted one at a time), which is
/// algebraically identical to the classical formula and loses less orthogonality
/// on ill-conditioned frames. Throws DegenerateFrameError if a residual norm
/// drops below 1e-300 or below 64 machine epsilons of the input column's norm.
template <typename Derived>
GramSchmidtResult<typename Derived::Scalar> gram_schmidt(const Eigen::MatrixBase<Derived>& vectors) {
    using Scalar = typename Derived::Scalar;
    const Scalar rel = Scalar(64) * Eigen::NumTraits<Scalar>::epsilon();
    GramSchmidtResult<Scalar> out{vectors, VectorX<Scalar>(vectors.cols())};
    for (Index i = 0; i < out.frame.cols(); ++i) {
        const Scalar input_norm = out.frame.col(i).norm();
        for (Index j = 0; j < i; ++j) out.frame.col(i) -= out.frame.col(j).dot(out.frame.col(i)) * out.frame.col(j);
        const Scalar norm = out.frame.col(i).norm();
        if (!(norm >= Scalar(1e-300)) || !(norm > rel * input_norm))
            throw DegenerateFrameError("gram_schmidt: column " + std::to_string(i) + " is linearly dependent");
        out.frame.col(i) /= norm;
        out.norms[i] = norm;
    }
    return out;
}

/// Settings for the tangent-frame spectrum estimator. Defaults follow the usual
/// 1000-step burn-in and 10000 averaging steps.
struct LEConfig {
    long burn_in_steps = 1000;
    long estimation_steps = 10000;
    long renorm_interval = 1;  ///< steps between re-orthonormalizations
    double dt = 0.01;
    Index k_exponents = 0;     ///< 0 means all n exponents

    Index exponents_for(const ModelSystem& model) const { return k_exponents == 0 ? model.dim() : k_exponents; }
    void validate(const ModelSystem& model) const;
};

struct LyapunovSpectrum {
    Vector exponents;  ///< sorted descending, 1/time units; +inf entries when diverged
    double dt = 0.0;
    long steps = 0;
    bool diverged = false;
};

enum class AttractorClass { FixedPoint, LimitCycleOrTorus, Chaos, Hyperchaos, Divergent };

struct Classification {
    AttractorClass attractor = AttractorClass::FixedPoint;
    /// Set when the leading exponent lies in (osc_tol, delta_tol]: positive, but
    /// within the estimator's error band.
    bool low_confidence = false;
};

inline constexpr double kDefaultDeltaTol = 0.05;
inline constexpr double kDefaultOscTol = 6e-3;

/// Benettin-style estimate: burn in (y, frame) from y0 without averaging, then
/// evolve both with the augmented RK4 stepper, re-orthonormalizing every `renorm_interval` steps and
/// averaging log growth factors. Divergence yields a spectrum flagged `diverged`.
LyapunovSpectrum estimate_spectrum(const ModelSystem& model, const Vector& params, const Vector& y0,
                                   const LEConfig& config, const std::optional<Matrix>& initial_frame = std::nullopt);

Classification classify(const LyapunovSpectrum& spectrum, double delta_tol = kDefaultDeltaTol,
                        double osc_tol = kDefaultOscTol);

/// D = k + sum_{i<=k} lambda_i / |lambda_{k+1}|, k the largest index with a
/// non-negative partial sum; 0 when lambda_1 < 0.
///
/// Partial sums down to -zero_tol count as non-negative, so an estimated zero
/// exponent that comes out slightly negative is still treated as zero. The
/// default of 0 is the plain formula. Throws UnboundedDimensionError when no
/// partial sum turns negative.
double kaplan_yorke_dimension(const Vector& exponents, double zero_tol = 0.0);

std::string to_string(AttractorClass attractor);

}  // namespace qualdyn
