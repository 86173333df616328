#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "qualdyn/models.hpp"

namespace qualdyn {

enum class Method { Rk4, DormandPrince };

struct IntegratorConfig {
    Method method = Method::Rk4;
    double dt = 0.01;  ///< fixed step for rk4, initial trial step for dormand_prince
    double abs_tol = 1e-9;
    double rel_tol = 1e-9;
    double max_step_growth = 5.0;

    /// Throws PreconditionError unless dt and tolerances are positive.
    void validate() const;
};

struct StepResult {
    Vector y;
    double t = 0.0;
    double dt_used = 0.0;
    double dt_next = 0.0;  ///< suggested next step (equals dt_used for rk4)
};

/// One explicit step from (y, t). Throws DivergenceError or StiffnessError.
StepResult step(const ModelSystem& model, const Vector& y, const Vector& params, double t,
                const IntegratorConfig& config);

struct TrajectorySample {
    double t;
    Vector y;
};

using Trajectory = std::vector<TrajectorySample>;

/// Integrates from t0 to t1, recording every `sample_every`-th step and both endpoints.
Trajectory integrate(const ModelSystem& model, const Vector& y0, const Vector& params, double t0, double t1,
                     const IntegratorConfig& config, int sample_every = 1);

/// Header `t,<state names...>`, one row per sample, shortest round-trip number formatting.
void write_trajectory_csv(std::ostream& out, const Trajectory& trajectory,
                          const std::vector<std::string>& state_names);

/// Columns are tangent vectors eps_1..eps_k (k <= n).
using TangentFrame = Matrix;

/// Classical RK4 on the augmented system (y, E) with dy/dt = f(y), dE/dt = Df(y) E.
///
/// Holds scratch storage so repeated steps do not allocate. Not thread-safe;
/// use one instance per worker.
class AugmentedRk4 {
public:
    AugmentedRk4(const ModelSystem& model, Index frame_columns);

    /// Advances y and frame in place. Throws DivergenceError if either becomes non-finite.
    void step(Vector& y, TangentFrame& frame, const Vector& params, double t, double dt);

    /// State-only RK4 step with the same scratch storage.
    void step_state(Vector& y, const Vector& params, double t, double dt);

private:
    void derivative(const Vector& y, const TangentFrame& frame, const Vector& params, double t, Vector& dy,
                    TangentFrame& dframe);

    const ModelSystem* model_;
    Matrix jac_;
    Vector ys_, k1_, k2_, k3_, k4_;
    TangentFrame fs_, e1_, e2_, e3_, e4_;
};

/// Convenience wrapper returning the advanced (y', frame').
std::pair<Vector, TangentFrame> step_augmented(const ModelSystem& model, const Vector& y, const TangentFrame& frame,
                                               const Vector& params, double t, double dt);

std::string to_string(Method method);
Method method_from_string(const std::string& name);

}  // namespace qualdyn
