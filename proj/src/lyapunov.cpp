#include "qualdyn/lyapunov.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace qualdyn {

void LEConfig::validate(const ModelSystem& model) const {
    if (burn_in_steps < 0) throw PreconditionError("lyapunov: burn_in_steps must be non-negative");
    if (estimation_steps < 1) throw PreconditionError("lyapunov: estimation_steps must be positive");
    if (renorm_interval < 1) throw PreconditionError("lyapunov: renorm_interval must be positive");
    if (!(dt > 0.0)) throw PreconditionError("lyapunov: dt must be positive");
    if (k_exponents < 0 || k_exponents > model.dim())
        throw PreconditionError("lyapunov: k_exponents must lie in [1, n]");
}

LyapunovSpectrum estimate_spectrum(const ModelSystem& model, const Vector& params, const Vector& y0,
                                   const LEConfig& config, const std::optional<Matrix>& initial_frame) {
    config.validate(model);
    const Index n = model.dim();
    const Index k = config.exponents_for(model);
    if (y0.size() != n || params.size() != model.param_count())
        throw PreconditionError(model.name + ": state or parameter length mismatch");

    LyapunovSpectrum out;
    out.dt = config.dt;
    out.steps = config.estimation_steps;

    TangentFrame frame = initial_frame ? *initial_frame : Matrix::Identity(n, k);
    if (frame.rows() != n || frame.cols() != k)
        throw PreconditionError("lyapunov: initial frame must be n x k_exponents");

    AugmentedRk4 stepper(model, k);
    Vector y = y0;
    Vector log_growth = Vector::Zero(k);
    double t = 0.0;
    try {
        if (!y.allFinite()) throw DivergenceError(model.name + ": non-finite initial state", y, t);
        // The tangent frame is carried through burn-in as well, so that averaging
        // starts from vectors already aligned with the dominant directions.
        frame = gram_schmidt(frame).frame;
        for (long i = 1; i <= config.burn_in_steps; ++i) {
            stepper.step(y, frame, params, t, config.dt);
            t += config.dt;
            if (i % config.renorm_interval == 0) frame = gram_schmidt(frame).frame;
        }
        frame = gram_schmidt(frame).frame;
        for (long i = 1; i <= config.estimation_steps; ++i) {
            stepper.step(y, frame, params, t, config.dt);
            t += config.dt;
            if (i % config.renorm_interval == 0 || i == config.estimation_steps) {
                auto gs = gram_schmidt(frame);
                log_growth.array() += gs.norms.array().log();
                frame = std::move(gs.frame);
            }
        }
    } catch (const DivergenceError&) {
        out.diverged = true;
    } catch (const DegenerateFrameError&) {
        out.diverged = true;
    }

    if (out.diverged || !log_growth.allFinite()) {
        out.diverged = true;
        out.exponents = Vector::Constant(k, std::numeric_limits<double>::infinity());
        return out;
    }
    out.exponents = log_growth / (static_cast<double>(config.estimation_steps) * config.dt);
    std::sort(out.exponents.begin(), out.exponents.end(), std::greater<>());
    return out;
}

Classification classify(const LyapunovSpectrum& spectrum, double delta_tol, double osc_tol) {
    if (spectrum.exponents.size() == 0) throw PreconditionError("classify: empty spectrum");
    if (spectrum.diverged) return {AttractorClass::Divergent, false};
    const double l1 = spectrum.exponents[0];
    if (l1 > delta_tol) {
        if (spectrum.exponents.size() > 1 && spectrum.exponents[1] > delta_tol)
            return {AttractorClass::Hyperchaos, false};
        return {AttractorClass::Chaos, false};
    }
    if (l1 > osc_tol) return {AttractorClass::Chaos, true};
    if (l1 >= -osc_tol) return {AttractorClass::LimitCycleOrTorus, false};
    return {AttractorClass::FixedPoint, false};
}

double kaplan_yorke_dimension(const Vector& exponents, double zero_tol) {
    if (exponents.size() == 0) throw PreconditionError("kaplan_yorke_dimension: empty spectrum");
    double partial = 0.0;
    Index k = 0;
    for (Index i = 0; i < exponents.size(); ++i) {
        if (partial + exponents[i] < -zero_tol) break;
        partial += exponents[i];
        k = i + 1;
    }
    if (k == 0) return 0.0;
    if (k == exponents.size())
        throw UnboundedDimensionError("kaplan_yorke_dimension: every partial sum is non-negative");
    return static_cast<double>(k) + partial / std::abs(exponents[k]);
}

std::string to_string(AttractorClass attractor) {
    switch (attractor) {
        case AttractorClass::FixedPoint: return "FixedPoint";
        case AttractorClass::LimitCycleOrTorus: return "LimitCycleOrTorus";
        case AttractorClass::Chaos: return "Chaos";
        case AttractorClass::Hyperchaos: return "Hyperchaos";
        case AttractorClass::Divergent: return "Divergent";
    }
    return "Unknown";
}

}  // namespace qualdyn
