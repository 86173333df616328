#include "qualdyn/odeint.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "qualdyn/errors.hpp"
#include "qualdyn/format.hpp"

namespace qualdyn {

namespace {

constexpr double kMinStep = 1e-12;

Vector rhs_checked(const ModelSystem& model, const Vector& y, const Vector& params, double t) {
    Vector dydt(y.size());
    model.rhs(y, params, t, dydt);
    if (!dydt.allFinite()) throw DivergenceError(model.name + ": non-finite derivative", y, t);
    return dydt;
}

StepResult rk4_step(const ModelSystem& model, const Vector& y, const Vector& params, double t, double dt) {
    const Vector k1 = rhs_checked(model, y, params, t);
    const Vector k2 = rhs_checked(model, y + 0.5 * dt * k1, params, t + 0.5 * dt);
    const Vector k3 = rhs_checked(model, y + 0.5 * dt * k2, params, t + 0.5 * dt);
    const Vector k4 = rhs_checked(model, y + dt * k3, params, t + dt);
    Vector next = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) throw DivergenceError(model.name + ": state diverged", y, t);
    return {std::move(next), t + dt, dt, dt};
}

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = b1 - 5179.0 / 57600, e3 = b3 - 7571.0 / 16695, e4 = b4 - 393.0 / 640,
                 e5 = b5 + 92097.0 / 339200, e6 = b6 - 187.0 / 2100, e7 = -1.0 / 40;

StepResult dopri_step(const ModelSystem& model, const Vector& y, const Vector& params, double t,
                      const IntegratorConfig& cfg) {
    double h = cfg.dt;
    const Vector k1 = rhs_checked(model, y, params, t);
    while (true) {
        if (h < kMinStep)
            throw StiffnessError(model.name + ": adaptive step fell below 1e-12 at t=" + format_double(t) +
                                     "; the problem is stiff here, reduce dt or loosen tolerances",
                                 t);
        const Vector k2 = rhs_checked(model, y + h * a21 * k1, params, t + c2 * h);
        const Vector k3 = rhs_checked(model, y + h * (a31 * k1 + a32 * k2), params, t + c3 * h);
        const Vector k4 = rhs_checked(model, y + h * (a41 * k1 + a42 * k2 + a43 * k3), params, t + c4 * h);
        const Vector k5 =
            rhs_checked(model, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), params, t + c5 * h);
        const Vector k6 =
            rhs_checked(model, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), params, t + h);
        Vector next = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        const Vector k7 = rhs_checked(model, next, params, t + h);
        const Vector err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

        const Vector scale =
            (cfg.abs_tol + cfg.rel_tol * y.cwiseAbs().cwiseMax(next.cwiseAbs()).array()).matrix();
        const double norm = std::sqrt((err.array() / scale.array()).square().mean());
        if (!std::isfinite(norm)) {
            h *= 0.1;
            continue;
        }
        if (norm <= 1.0) {
            const double factor =
                norm == 0.0 ? cfg.max_step_growth : std::min(cfg.max_step_growth, 0.9 * std::pow(norm, -0.2));
            return {std::move(next), t + h, h, h * std::max(1.0, factor)};
        }
        h *= std::max(0.1, 0.9 * std::pow(norm, -0.25));
    }
}

}  // namespace

void IntegratorConfig::validate() const {
    if (!(dt > 0.0)) throw PreconditionError("integrator: dt must be positive");
    if (method == Method::DormandPrince) {
        if (!(abs_tol > 0.0) || !(rel_tol > 0.0))
            throw PreconditionError("integrator: tolerances must be positive");
        if (!(max_step_growth > 1.0)) throw PreconditionError("integrator: max_step_growth must exceed 1");
    }
}

StepResult step(const ModelSystem& model, const Vector& y, const Vector& params, double t,
                const IntegratorConfig& config) {
    config.validate();
    if (!y.allFinite()) throw DivergenceError(model.name + ": non-finite state", y, t);
    if (y.size() != model.dim() || params.size() != model.param_count())
        throw PreconditionError(model.name + ": state or parameter length mismatch");
    return config.method == Method::Rk4 ? rk4_step(model, y, params, t, config.dt)
                                        : dopri_step(model, y, params, t, config);
}

Trajectory integrate(const ModelSystem& model, const Vector& y0, const Vector& params, double t0, double t1,
                     const IntegratorConfig& config, int sample_every) {
    config.validate();
    if (t1 < t0) throw PreconditionError("integrate: t1 must not precede t0");
    if (sample_every < 1) throw PreconditionError("integrate: sample_every must be at least 1");

    Trajectory out;
    out.push_back({t0, y0});
    if (t1 == t0) return out;

    Vector y = y0;
    double t = t0;
    long steps = 0;
    IntegratorConfig cfg = config;

    if (config.method == Method::Rk4) {
        const double span = t1 - t0;
        const long n = std::max(1L, static_cast<long>(std::ceil(span / config.dt - 1e-9)));
        for (long i = 0; i < n; ++i) {
            const double h = (i + 1 == n) ? t1 - t : config.dt;
            StepResult r = step(model, y, params, t, {Method::Rk4, h});
            y = std::move(r.y);
            t = (i + 1 == n) ? t1 : t0 + static_cast<double>(i + 1) * config.dt;
            ++steps;
            if (steps % sample_every == 0 || i + 1 == n) out.push_back({t, y});
        }
        return out;
    }

    double trial = config.dt;
    while (t < t1) {
        const bool last = trial >= t1 - t;
        cfg.dt = last ? t1 - t : trial;
        StepResult r = step(model, y, params, t, cfg);
        y = std::move(r.y);
        const bool finished = last && r.dt_used == cfg.dt;
        t = finished ? t1 : r.t;
        trial = r.dt_next;
        ++steps;
        if (steps % sample_every == 0 || finished) out.push_back({t, y});
        if (finished) break;
    }
    return out;
}

void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory,
                          const std::vector<std::string>& state_names) {
    out << 't';
    for (const auto& name : state_names) out << ',' << name;
    out << '\n';
    for (const auto& sample : trajectory) {
        out << format_double(sample.t);
        for (Index i = 0; i < sample.y.size(); ++i) out << ',' << format_double(sample.y[i]);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------

AugmentedRk4::AugmentedRk4(const ModelSystem& model, Index frame_columns) : model_(&model) {
    const Index n = model.dim();
    if (frame_columns < 1 || frame_columns > n)
        throw PreconditionError("tangent frame must have between 1 and n columns");
    jac_.resize(n, n);
    for (Vector* v : {&ys_, &k1_, &k2_, &k3_, &k4_}) v->resize(n);
    for (TangentFrame* f : {&fs_, &e1_, &e2_, &e3_, &e4_}) f->resize(n, frame_columns);
}

void AugmentedRk4::derivative(const Vector& y, const TangentFrame& frame, const Vector& params, double t,
                              Vector& dy, TangentFrame& dframe) {
    model_->rhs(y, params, t, dy);
    model_->jacobian(y, params, t, jac_);
    dframe.noalias() = jac_ * frame;
}

void AugmentedRk4::step(Vector& y, TangentFrame& frame, const Vector& params, double t, double dt) {
    if (frame.rows() != y.size() || frame.cols() != fs_.cols())
        throw PreconditionError("tangent frame shape does not match the stepper");
    const double half = 0.5 * dt;
    derivative(y, frame, params, t, k1_, e1_);
    ys_ = y + half * k1_;
    fs_ = frame + half * e1_;
    derivative(ys_, fs_, params, t + half, k2_, e2_);
    ys_ = y + half * k2_;
    fs_ = frame + half * e2_;
    derivative(ys_, fs_, params, t + half, k3_, e3_);
    ys_ = y + dt * k3_;
    fs_ = frame + dt * e3_;
    derivative(ys_, fs_, params, t + dt, k4_, e4_);
    y += (dt / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
    frame += (dt / 6.0) * (e1_ + 2.0 * e2_ + 2.0 * e3_ + e4_);
    if (!y.allFinite() || !frame.allFinite())
        throw DivergenceError(model_->name + ": augmented state diverged", y, t + dt);
}

void AugmentedRk4::step_state(Vector& y, const Vector& params, double t, double dt) {
    const double half = 0.5 * dt;
    model_->rhs(y, params, t, k1_);
    ys_ = y + half * k1_;
    model_->rhs(ys_, params, t + half, k2_);
    ys_ = y + half * k2_;
    model_->rhs(ys_, params, t + half, k3_);
    ys_ = y + dt * k3_;
    model_->rhs(ys_, params, t + dt, k4_);
    y += (dt / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
    if (!y.allFinite()) throw DivergenceError(model_->name + ": state diverged", y, t + dt);
}

std::pair<Vector, TangentFrame> step_augmented(const ModelSystem& model, const Vector& y, const TangentFrame& frame,
                                               const Vector& params, double t, double dt) {
    if (!(dt > 0.0)) throw PreconditionError("step_augmented: dt must be positive");
    if (frame.rows() != model.dim()) throw PreconditionError("step_augmented: frame has wrong row count");
    AugmentedRk4 stepper(model, frame.cols());
    Vector y_next = y;
    TangentFrame frame_next = frame;
    stepper.step(y_next, frame_next, params, t, dt);
    return {std::move(y_next), std::move(frame_next)};
}

std::string to_string(Method method) { return method == Method::Rk4 ? "rk4" : "dormand_prince"; }

Method method_from_string(const std::string& name) {
    if (name == "rk4") return Method::Rk4;
    if (name == "dormand_prince" || name == "dopri5") return Method::DormandPrince;
    throw LookupError("unknown integration method '" + name + "'; available: rk4, dormand_prince");
}

}  // namespace qualdyn
