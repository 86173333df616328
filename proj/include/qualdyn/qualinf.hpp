#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "qualdyn/lyapunov.hpp"
#include "qualdyn/models.hpp"
#include "qualdyn/parallel.hpp"
#include "qualdyn/ukf.hpp"

namespace qualdyn {

// ---------------------------------------------------------------------------
// Targets

struct LeadingExponents {
    Vector values;  ///< lambda_1..lambda_k
};
struct FullSpectrum {
    Vector values;  ///< all n exponents, descending
};
struct KYDimension {
    double value = 0.0;
};
struct Hyperchaos {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
};

/// Desired dynamics, encoded as a constant observation the filter keeps comparing against.
struct TargetSpec {
    std::variant<LeadingExponents, FullSpectrum, KYDimension, Hyperchaos> kind;
    double delta_tol = kDefaultDeltaTol;

    static TargetSpec oscillation() { return {LeadingExponents{Vector::Zero(1)}}; }
    /// Throws PreconditionError unless d > delta_tol.
    static TargetSpec chaos(double d, double delta_tol = kDefaultDeltaTol);
    static TargetSpec leading(Vector values) { return {LeadingExponents{std::move(values)}}; }
    static TargetSpec full_spectrum(Vector values) { return {FullSpectrum{std::move(values)}}; }
    static TargetSpec ky_dimension(double value) { return {KYDimension{value}}; }
    static TargetSpec hyperchaos(double lambda1, double lambda2) { return {Hyperchaos{lambda1, lambda2}}; }

    void validate(const ModelSystem& model) const;
    /// Number of exponents the estimator must produce for this target.
    Index exponents_needed(const ModelSystem& model) const;
    std::string describe() const;
};

Vector target_vector(const TargetSpec& target);

inline constexpr double kDivergencePenalty = 1e3;

/// g* = g o p: constrain theta_raw, estimate the spectrum, and reduce it to the
/// target's observation. Divergent orbits map to kDivergencePenalty per component.
Vector observation_fn(const TargetSpec& target, const ModelSystem& model, const Vector& theta_raw, const Vector& y0,
                      const LEConfig& le_config, const ConstraintMap& constraint = {},
                      double osc_tol = kDefaultOscTol);

/// Observation together with the spectrum it came from.
struct Observation {
    Vector value;
    LyapunovSpectrum spectrum;
    bool penalized = false;
};

Observation observe(const TargetSpec& target, const ModelSystem& model, const Vector& params, const Vector& y0,
                    const LEConfig& le_config, double osc_tol = kDefaultOscTol);

struct PredictionError {
    double weighted = 0.0;  ///< (g - target)^T R^-1 (g - target)
    double raw = 0.0;       ///< |g - target|^2
};

PredictionError prediction_error(const Vector& observed, const Vector& target, const Vector& measurement_noise);

// ---------------------------------------------------------------------------
// Parameter layout: which model quantities the filter moves

/// Maps the filter's vector onto (model parameters, initial state). The filter
/// vector holds the free parameters in `free` order, then, when
/// `infer_initial_state` is set, the n initial-state components.
struct ParameterLayout {
    Vector base_params;
    std::vector<Index> free;
    Vector base_initial_state;
    bool infer_initial_state = false;

    static ParameterLayout all_free(const ModelSystem& model);

    Index filter_dim() const;
    std::pair<Vector, Vector> expand(const Vector& filter_vector) const;
    Vector filter_vector(const Vector& params, const Vector& y0) const;
    void validate(const ModelSystem& model) const;
};

// ---------------------------------------------------------------------------
// Inference loop

struct InferenceConfig {
    long max_iterations = 200;
    double sse_stop = 1e-4;
    LEConfig le_config;
    ConstraintMap constraint;  ///< acts on the filter vector
    /// Process-noise variance per component = process_scale * max(|theta0_i|, 1e-3).
    double process_scale = 1e-2;
    double measurement_noise = 1e-2;  ///< a in R = a I
    UTParams ut;
    double osc_tol = kDefaultOscTol;
    long max_penalty_streak = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

struct IterationRecord {
    long iteration = 0;
    Vector mean;                 ///< posterior filter vector (unconstrained)
    Vector cov_diag;
    Vector params;               ///< constrained model parameters at the mean
    Vector initial_state;
    Vector predicted;            ///< y_hat of the update
    Vector observed;             ///< observation at the posterior mean
    LyapunovSpectrum spectrum;   ///< spectrum at the posterior mean
    Classification attractor;
    double sse = 0.0;            ///< raw squared error at the posterior mean
    double cumulative_error = 0.0;  ///< running sum of the R-weighted error
    bool all_penalized = false;
};

struct InferenceTrace {
    std::vector<IterationRecord> records;
};

enum class InferenceStatus { Converged, MaxIterations, RegimeLost, CovarianceFailure };

struct InferenceResult {
    FilterState state;
    InferenceTrace trace;
    InferenceStatus status = InferenceStatus::MaxIterations;
    std::string message;

    bool converged() const { return status == InferenceStatus::Converged; }
    /// Smallest SSE seen in the trace, +inf when empty.
    double best_sse() const;
    double final_sse() const;
    /// Throws RegimeLostError or CovarianceError for aborted runs.
    void rethrow() const;
};

/// Drives the filter toward the target until SSE <= sse_stop or max_iterations.
/// Aborts (status, not exception) on covariance failure or after
/// max_penalty_streak iterations in which every sigma point diverged.
InferenceResult run_inference(const ModelSystem& model, const TargetSpec& target, const ParameterLayout& layout,
                              const Vector& theta0, const Matrix& p0, const InferenceConfig& config,
                              const WorkerPool* pool = nullptr);

/// Process-noise diagonal on the order of the initial values.
Vector default_process_noise(const Vector& theta0, double scale);

/// Initial draw range for one filter component.
struct ParameterRange {
    double lo = 0.0;
    double hi = 1.0;
    bool log_uniform = false;

    double draw(std::mt19937_64& rng) const;
};

/// Log-uniform ranges for (P0, nu, k1, h) of the Hes1 model.
std::vector<ParameterRange> hes1_initial_ranges();

struct MultistartResult {
    std::vector<InferenceResult> runs;
    std::vector<Vector> starts;
    std::size_t best = 0;

    const InferenceResult& best_run() const { return runs.at(best); }
};

/// Runs `restarts` independent inferences from draws of `ranges`, stream i of the
/// config seed seeding restart i. Initial covariance is diag(p0_scale * |theta0|^2).
MultistartResult run_multistart(const ModelSystem& model, const TargetSpec& target, const ParameterLayout& layout,
                                const std::vector<ParameterRange>& ranges, std::size_t restarts,
                                double p0_scale, const InferenceConfig& config, const WorkerPool* pool = nullptr);

Matrix default_initial_covariance(const Vector& theta0, double scale);

void write_trace_jsonl(std::ostream& out, const InferenceTrace& trace);
/// iteration, filter-vector columns, cov_diag columns, observed columns, sse, cumulative_error, class.
void write_trace_csv(std::ostream& out, const InferenceTrace& trace, const std::vector<std::string>& filter_names);

std::string to_string(InferenceStatus status);

// ---------------------------------------------------------------------------
// Parameter-space sweeps

enum class Sampler { Grid, Uniform, Sobol, LatinHypercube };

Sampler sampler_from_string(const std::string& name);
std::string to_string(Sampler sampler);

/// Returns points as columns in the box [lo, hi]. Grid uses floor(n^(1/d))
/// points per axis including both ends (the box centre when that is 1).
Matrix sample_box(Sampler sampler, const Vector& lo, const Vector& hi, std::size_t n_samples, std::uint64_t seed);

struct RegimePoint {
    Vector params;
    LyapunovSpectrum spectrum;
    Classification attractor;
    double ky_dimension = 0.0;  ///< NaN when undefined (divergent or unbounded)
};

struct SweepConfig {
    Sampler sampler = Sampler::Sobol;
    std::size_t n_samples = 64;
    LEConfig le_config;
    std::uint64_t seed = 0;
    double delta_tol = kDefaultDeltaTol;
    double osc_tol = kDefaultOscTol;
};

/// Classifies every sampled point; the box covers `layout.free` (initial-state
/// inference is not used here).
std::vector<RegimePoint> sweep(const ModelSystem& model, const ParameterLayout& layout, const Vector& lo,
                               const Vector& hi, const SweepConfig& config, const WorkerPool* pool = nullptr);

void write_regime_csv(std::ostream& out, const std::vector<RegimePoint>& points, const ModelSystem& model);

}  // namespace qualdyn
