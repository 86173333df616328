#include "qualdyn/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qualdyn/errors.hpp"

namespace qualdyn {

namespace {

constexpr double kNoDefault = std::numeric_limits<double>::quiet_NaN();

std::optional<Index> find_name(const std::vector<std::string>& names, const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) return std::nullopt;
    return static_cast<Index>(it - names.begin());
}

void check_shapes(const ModelSystem& model, const Vector& y, const Vector& params) {
    if (y.size() != model.dim())
        throw PreconditionError(model.name + ": state has length " + std::to_string(y.size()) + ", expected " +
                                std::to_string(model.dim()));
    if (params.size() != model.param_count())
        throw PreconditionError(model.name + ": parameter vector has length " + std::to_string(params.size()) +
                                ", expected " + std::to_string(model.param_count()));
}

}  // namespace

std::optional<Index> ModelSystem::param_index(const std::string& param) const {
    return find_name(param_names, param);
}

std::optional<Index> ModelSystem::state_index(const std::string& state) const {
    return find_name(state_names, state);
}

std::vector<std::string> ModelSystem::unassigned_params() const {
    std::vector<std::string> missing;
    for (Index i = 0; i < param_count(); ++i)
        if (!std::isfinite(default_params[i])) missing.push_back(param_names[static_cast<std::size_t>(i)]);
    return missing;
}

Vector eval_rhs(const ModelSystem& model, const Vector& y, const Vector& params, double t) {
    check_shapes(model, y, params);
    Vector dydt(model.dim());
    model.rhs(y, params, t, dydt);
    if (!dydt.allFinite()) throw DivergenceError(model.name + ": non-finite derivative", y, t);
    return dydt;
}

Matrix eval_jacobian(const ModelSystem& model, const Vector& y, const Vector& params, double t) {
    check_shapes(model, y, params);
    Matrix jac(model.dim(), model.dim());
    model.jacobian(y, params, t, jac);
    if (!jac.allFinite()) throw DivergenceError(model.name + ": non-finite Jacobian", y, t);
    return jac;
}

Matrix finite_diff_jacobian(const ModelSystem& model, const Vector& y, const Vector& params, double h, double t) {
    if (!(h > 0.0)) throw PreconditionError("finite_diff_jacobian: step must be positive");
    const Index n = model.dim();
    Matrix jac(n, n);
    Vector probe = y;
    for (Index j = 0; j < n; ++j) {
        const double step = h * std::max(1.0, std::abs(y[j]));
        probe[j] = y[j] + step;
        const Vector forward = eval_rhs(model, probe, params, t);
        probe[j] = y[j] - step;
        const Vector backward = eval_rhs(model, probe, params, t);
        probe[j] = y[j];
        jac.col(j) = (forward - backward) / (2.0 * step);
    }
    return jac;
}

// ---------------------------------------------------------------------------

double ParamConstraint::apply(double value) const {
    switch (kind) {
        case Kind::Identity:
            return value;
        case Kind::AbsoluteValue:
            return std::abs(value);
        case Kind::Box:
            if (mode == BoxMode::Clamp) return std::clamp(value, lo, hi);
            {
                // Triangle-wave fold: identity inside [lo, hi], mirrored at each wall.
                const double width = hi - lo;
                if (width <= 0.0) return lo;
                double u = std::fmod(value - lo, 2.0 * width);
                if (u < 0.0) u += 2.0 * width;
                if (u > width) u = 2.0 * width - u;
                return lo + u;
            }
    }
    return value;
}

bool ParamConstraint::feasible(double value) const {
    switch (kind) {
        case Kind::Identity:
            return true;
        case Kind::AbsoluteValue:
            return value >= 0.0;
        case Kind::Box:
            return value >= lo && value <= hi;
    }
    return false;
}

ConstraintMap ConstraintMap::absolute_value(Index n) {
    std::vector<ParamConstraint> per(static_cast<std::size_t>(n));
    for (auto& c : per) c.kind = ParamConstraint::Kind::AbsoluteValue;
    return ConstraintMap(std::move(per));
}

ConstraintMap ConstraintMap::box(const Vector& lo, const Vector& hi, BoxMode mode) {
    if (lo.size() != hi.size()) throw PreconditionError("box constraint: lo and hi differ in length");
    std::vector<ParamConstraint> per(static_cast<std::size_t>(lo.size()));
    for (Index i = 0; i < lo.size(); ++i) {
        if (!(lo[i] <= hi[i])) throw PreconditionError("box constraint: lo > hi at index " + std::to_string(i));
        per[static_cast<std::size_t>(i)] = {ParamConstraint::Kind::Box, lo[i], hi[i], mode};
    }
    return ConstraintMap(std::move(per));
}

Vector ConstraintMap::apply(const Vector& raw) const {
    if (per_param_.empty()) return raw;
    if (static_cast<std::size_t>(raw.size()) != per_param_.size())
        throw PreconditionError("constraint map covers " + std::to_string(per_param_.size()) +
                                " parameters, got " + std::to_string(raw.size()));
    Vector out(raw.size());
    for (Index i = 0; i < raw.size(); ++i) out[i] = per_param_[static_cast<std::size_t>(i)].apply(raw[i]);
    return out;
}

bool ConstraintMap::feasible(const Vector& params) const {
    if (per_param_.empty()) return true;
    if (static_cast<std::size_t>(params.size()) != per_param_.size()) return false;
    for (Index i = 0; i < params.size(); ++i)
        if (!per_param_[static_cast<std::size_t>(i)].feasible(params[i])) return false;
    return true;
}

bool ConstraintMap::is_identity() const {
    return std::all_of(per_param_.begin(), per_param_.end(),
                       [](const ParamConstraint& c) { return c.kind == ParamConstraint::Kind::Identity; });
}

ConstraintMap ConstraintMap::padded_to(Index n) const {
    if (per_param_.empty()) return *this;
    auto per = per_param_;
    per.resize(std::max(per.size(), static_cast<std::size_t>(n)));
    return ConstraintMap(std::move(per));
}

// ---------------------------------------------------------------------------
// Zoo

ModelSystem lorenz() {
    ModelSystem m;
    m.name = "lorenz";
    m.state_names = {"x", "y", "z"};
    m.param_names = {"sigma", "rho", "beta"};
    m.rhs = [](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double,
               Eigen::Ref<Vector> dydt) {
        dydt[0] = p[0] * (y[1] - y[0]);
        dydt[1] = y[0] * (p[1] - y[2]) - y[1];
        dydt[2] = y[0] * y[1] - p[2] * y[2];
    };
    m.jacobian = [](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double, Eigen::Ref<Matrix> j) {
        j << -p[0], p[0], 0.0,
             p[1] - y[2], -1.0, -y[0],
             y[1], y[0], -p[2];
    };
    m.default_initial_state = Vector::Ones(3);
    m.default_params = (Vector(3) << 10.0, 28.0, 8.0 / 3.0).finished();
    return m;
}

ModelSystem circuit() {
    ModelSystem m;
    m.name = "circuit";
    m.state_names = {"x", "y", "z"};
    m.param_names = {"a", "epsilon", "b", "c"};
    m.rhs = [](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double,
               Eigen::Ref<Vector> dydt) {
        dydt[0] = y[1];
        dydt[1] = p[0] * y[1] - y[0] - y[2];
        dydt[2] = (p[2] + y[1] - p[3] * (std::exp(y[2]) - 1.0)) / p[1];
    };
    m.jacobian = [](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double, Eigen::Ref<Matrix> j) {
        j << 0.0, 1.0, 0.0,
             -1.0, p[0], -1.0,
             0.0, 1.0 / p[1], -p[3] * std::exp(y[2]) / p[1];
    };
    m.default_initial_state = Vector::Constant(3, 0.1);
    m.default_params = Vector::Constant(4, kNoDefault);
    return m;
}

ModelSystem hes1() {
    ModelSystem m;
    m.name = "hes1";
    m.state_names = {"M", "P1", "P2"};
    m.param_names = {"P0", "nu", "k1", "h", "k_deg"};
    m.rhs = [](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double,
               Eigen::Ref<Vector> dydt) {
        const double p0 = p[0], nu = p[1], k1 = p[2], h = p[3], kdeg = p[4];
        dydt[0] = -kdeg * y[0] + 1.0 / (1.0 + std::pow(y[2] / p0, h));
        dydt[1] = -kdeg * y[1] + nu * y[0] - k1 * y[1];
        dydt[2] = -kdeg * y[2] + k1 * y[1];
    };
    m.jacobian = [](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double, Eigen::Ref<Matrix> j) {
        const double p0 = p[0], nu = p[1], k1 = p[2], h = p[3], kdeg = p[4];
        const double u = y[2] / p0;
        const double hill = 1.0 / (1.0 + std::pow(u, h));
        const double dhill = -h * std::pow(u, h - 1.0) / p0 * hill * hill;
        j << -kdeg, 0.0, dhill,
             nu, -kdeg - k1, 0.0,
             0.0, k1, -kdeg;
    };
    m.default_initial_state = Vector::Constant(3, 2.0);
    m.default_dt = 0.5;
    m.default_params = (Vector(5) << kNoDefault, kNoDefault, kNoDefault, kNoDefault, 0.03).finished();
    return m;
}

ModelSystem hyperchaos4d() {
    ModelSystem m;
    m.name = "hyperchaos4d";
    m.state_names = {"x1", "x2", "x3", "x4"};
    m.param_names = {"a", "b", "c", "d", "e", "f"};
    m.rhs = [](const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& p, double,
               Eigen::Ref<Vector> dxdt) {
        dxdt[0] = p[0] * (x[1] - x[0]) + x[1] * x[2];
        dxdt[1] = p[1] * (x[0] + x[1]) - x[0] * x[2];
        dxdt[2] = -p[2] * x[2] - p[4] * x[3] + x[0] * x[1];
        dxdt[3] = -p[3] * x[3] + p[5] * x[2] + x[0] * x[1];
    };
    m.jacobian = [](const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& p, double, Eigen::Ref<Matrix> j) {
        j << -p[0], p[0] + x[2], x[1], 0.0,
             p[1] - x[2], p[1], -x[0], 0.0,
             x[1], x[0], -p[2], -p[4],
             x[1], x[0], p[5], -p[3];
    };
    m.default_initial_state = Vector::Ones(4);
    // RK4 at 0.01 is unstable on this system's fast contracting direction.
    m.default_dt = 0.001;
    m.default_params = (Vector(6) << 50.0, 24.0, 13.0, 8.0, 33.0, 30.0).finished();
    return m;
}

std::vector<std::string> builtin_names() { return {"lorenz", "circuit", "hes1", "hyperchaos4d"}; }

ModelSystem builtin(const std::string& name) {
    if (name == "lorenz") return lorenz();
    if (name == "circuit") return circuit();
    if (name == "hes1") return hes1();
    if (name == "hyperchaos4d") return hyperchaos4d();
    std::string available;
    for (const auto& n : builtin_names()) available += (available.empty() ? "" : ", ") + n;
    throw LookupError("unknown model '" + name + "'; available: " + available);
}

}  // namespace qualdyn
