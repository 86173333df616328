#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qualdyn/types.hpp"

namespace qualdyn {

/// Right-hand side f(y; theta, t), written into `dydt`.
using RhsFn = std::function<void(const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& params,
                                 double t, Eigen::Ref<Vector> dydt)>;

/// Jacobian Df(y; theta, t) with entry (i, j) = d f_i / d y_j, written into `jac`.
using JacobianFn = std::function<void(const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& params,
                                      double t, Eigen::Ref<Matrix> jac)>;

/// An n-dimensional vector field with named parameters.
///
/// Values are immutable after construction; the callables must be pure so that a
/// model can be evaluated concurrently from several workers. A NaN entry in
/// `default_params` means the parameter has no default and must be assigned by
/// the caller.
struct ModelSystem {
    std::string name;
    std::vector<std::string> state_names;
    std::vector<std::string> param_names;
    RhsFn rhs;
    JacobianFn jacobian;
    Vector default_initial_state;
    Vector default_params;
    double default_dt = 0.01;  ///< integration step suited to the model's time scale

    Index dim() const { return static_cast<Index>(state_names.size()); }
    Index param_count() const { return static_cast<Index>(param_names.size()); }

    std::optional<Index> param_index(const std::string& param) const;
    std::optional<Index> state_index(const std::string& state) const;

    /// Names of parameters whose default is missing (NaN).
    std::vector<std::string> unassigned_params() const;
};

/// f(y; theta, t). Throws DivergenceError on non-finite output, PreconditionError on shape mismatch.
Vector eval_rhs(const ModelSystem& model, const Vector& y, const Vector& params, double t = 0.0);

/// Df(y; theta). Throws DivergenceError on non-finite entries.
Matrix eval_jacobian(const ModelSystem& model, const Vector& y, const Vector& params, double t = 0.0);

/// Central-difference Jacobian with per-coordinate step h * max(1, |y_j|).
Matrix finite_diff_jacobian(const ModelSystem& model, const Vector& y, const Vector& params, double h = 1e-6,
                            double t = 0.0);

// ---------------------------------------------------------------------------
// Constraint maps: theta_feasible = p(theta_raw)

enum class BoxMode { Clamp, Reflect };

struct ParamConstraint {
    enum class Kind { Identity, AbsoluteValue, Box };

    Kind kind = Kind::Identity;
    double lo = 0.0;
    double hi = 0.0;
    BoxMode mode = BoxMode::Clamp;

    double apply(double value) const;
    bool feasible(double value) const;
};

/// Per-parameter map onto the feasible region. An empty map is the identity
/// for vectors of any length.
class ConstraintMap {
public:
    ConstraintMap() = default;
    explicit ConstraintMap(std::vector<ParamConstraint> per_param) : per_param_(std::move(per_param)) {}

    static ConstraintMap identity() { return {}; }
    static ConstraintMap absolute_value(Index n);
    static ConstraintMap box(const Vector& lo, const Vector& hi, BoxMode mode = BoxMode::Clamp);

    Vector apply(const Vector& raw) const;
    bool feasible(const Vector& params) const;

    bool is_identity() const;
    const std::vector<ParamConstraint>& per_param() const { return per_param_; }

    /// Extends the map with identity entries up to `n` parameters.
    ConstraintMap padded_to(Index n) const;

private:
    std::vector<ParamConstraint> per_param_;
};

inline Vector apply_constraint(const ConstraintMap& map, const Vector& raw) { return map.apply(raw); }

// ---------------------------------------------------------------------------
// Built-in models

ModelSystem lorenz();

/// Chaotic electronic circuit. Parameters (a, epsilon, b, c); none has a default.
ModelSystem circuit();

/// Three-component Hes1 regulatory loop. Parameters (P0, nu, k1, h, k_deg), only
/// k_deg carries a default (0.03 per minute).
ModelSystem hes1();

/// Four-dimensional hyperchaotic system with parameters (a, b, c, d, e, f).
ModelSystem hyperchaos4d();

std::vector<std::string> builtin_names();

/// Throws LookupError listing the available names when `name` is unknown.
ModelSystem builtin(const std::string& name);

}  // namespace qualdyn
