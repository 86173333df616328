#include "qualdyn/qualinf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <boost/random/sobol.hpp>
#include <nlohmann/json.hpp>

#include "qualdyn/format.hpp"
#include "qualdyn/rng.hpp"

namespace qualdyn {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector penalty(Index m) { return Vector::Constant(m, kDivergencePenalty); }

}  // namespace

// ---------------------------------------------------------------------------
// Targets

TargetSpec TargetSpec::chaos(double d, double delta_tol) {
    if (!(d > delta_tol)) throw PreconditionError("chaos target must exceed delta_tol");
    return {LeadingExponents{Vector::Constant(1, d)}, delta_tol};
}

void TargetSpec::validate(const ModelSystem& model) const {
    std::visit(overloaded{
                   [&](const LeadingExponents& t) {
                       if (t.values.size() < 1 || t.values.size() > model.dim())
                           throw PreconditionError("leading-exponent target must have between 1 and n values");
                   },
                   [&](const FullSpectrum& t) {
                       if (t.values.size() != model.dim())
                           throw PreconditionError("full-spectrum target must have n = " +
                                                   std::to_string(model.dim()) + " values");
                       for (Index i = 1; i < t.values.size(); ++i)
                           if (t.values[i] > t.values[i - 1])
                               throw PreconditionError("full-spectrum target must be sorted descending");
                   },
                   [&](const KYDimension& t) {
                       if (!(t.value >= 0.0) || t.value > static_cast<double>(model.dim()))
                           throw PreconditionError("Kaplan-Yorke target must lie in [0, n]");
                   },
                   [&](const Hyperchaos& t) {
                       if (model.dim() < 2) throw PreconditionError("hyperchaos target needs n >= 2");
                       if (!(t.lambda1 > delta_tol) || !(t.lambda2 > delta_tol))
                           throw PreconditionError("hyperchaos targets must both exceed delta_tol");
                   },
               },
               kind);
}

Index TargetSpec::exponents_needed(const ModelSystem& model) const {
    return std::visit(overloaded{
                          [](const LeadingExponents& t) { return t.values.size(); },
                          [&](const FullSpectrum&) { return model.dim(); },
                          [&](const KYDimension&) { return model.dim(); },
                          [](const Hyperchaos&) { return Index{2}; },
                      },
                      kind);
}

std::string TargetSpec::describe() const {
    return std::visit(overloaded{
                          [](const LeadingExponents&) { return std::string("leading_exponents"); },
                          [](const FullSpectrum&) { return std::string("full_spectrum"); },
                          [](const KYDimension&) { return std::string("ky_dimension"); },
                          [](const Hyperchaos&) { return std::string("hyperchaos"); },
                      },
                      kind);
}

Vector target_vector(const TargetSpec& target) {
    return std::visit(overloaded{
                          [](const LeadingExponents& t) -> Vector { return t.values; },
                          [](const FullSpectrum& t) -> Vector { return t.values; },
                          [](const KYDimension& t) -> Vector { return Vector::Constant(1, t.value); },
                          [](const Hyperchaos& t) -> Vector { return (Vector(2) << t.lambda1, t.lambda2).finished(); },
                      },
                      target.kind);
}

Observation observe(const TargetSpec& target, const ModelSystem& model, const Vector& params, const Vector& y0,
                    const LEConfig& le_config, double osc_tol) {
    LEConfig le = le_config;
    le.k_exponents = target.exponents_needed(model);
    const Index m = target_vector(target).size();

    Observation out;
    try {
        out.spectrum = estimate_spectrum(model, params, y0, le);
    } catch (const DivergenceError&) {
        out.spectrum.exponents = Vector::Constant(le.k_exponents, std::numeric_limits<double>::infinity());
        out.spectrum.dt = le.dt;
        out.spectrum.steps = le.estimation_steps;
        out.spectrum.diverged = true;
    }
    if (out.spectrum.diverged) {
        out.value = penalty(m);
        out.penalized = true;
        return out;
    }
    const Vector& ex = out.spectrum.exponents;
    std::visit(overloaded{
                   [&](const LeadingExponents& t) { out.value = ex.head(t.values.size()); },
                   [&](const FullSpectrum&) { out.value = ex; },
                   [&](const Hyperchaos&) { out.value = ex.head(2); },
                   [&](const KYDimension&) {
                       try {
                           out.value = Vector::Constant(1, kaplan_yorke_dimension(ex, osc_tol));
                       } catch (const UnboundedDimensionError&) {
                           out.value = penalty(1);
                           out.penalized = true;
                       }
                   },
               },
               target.kind);
    return out;
}

Vector observation_fn(const TargetSpec& target, const ModelSystem& model, const Vector& theta_raw, const Vector& y0,
                      const LEConfig& le_config, const ConstraintMap& constraint, double osc_tol) {
    return observe(target, model, constraint.apply(theta_raw), y0, le_config, osc_tol).value;
}

PredictionError prediction_error(const Vector& observed, const Vector& target, const Vector& measurement_noise) {
    if (observed.size() != target.size() || measurement_noise.size() != target.size())
        throw PreconditionError("prediction_error: dimension mismatch");
    const Vector diff = observed - target;
    return {(diff.array().square() / measurement_noise.array()).sum(), diff.squaredNorm()};
}

// ---------------------------------------------------------------------------
// Layout

ParameterLayout ParameterLayout::all_free(const ModelSystem& model) {
    ParameterLayout layout;
    layout.base_params = model.default_params;
    layout.free.resize(static_cast<std::size_t>(model.param_count()));
    std::iota(layout.free.begin(), layout.free.end(), Index{0});
    layout.base_initial_state = model.default_initial_state;
    return layout;
}

Index ParameterLayout::filter_dim() const {
    return static_cast<Index>(free.size()) + (infer_initial_state ? base_initial_state.size() : 0);
}

std::pair<Vector, Vector> ParameterLayout::expand(const Vector& filter_vector) const {
    if (filter_vector.size() != filter_dim()) throw PreconditionError("filter vector length mismatch");
    Vector params = base_params;
    for (std::size_t i = 0; i < free.size(); ++i) params[free[i]] = filter_vector[static_cast<Index>(i)];
    Vector y0 = infer_initial_state ? Vector(filter_vector.tail(base_initial_state.size())) : base_initial_state;
    return {std::move(params), std::move(y0)};
}

Vector ParameterLayout::filter_vector(const Vector& params, const Vector& y0) const {
    Vector out(filter_dim());
    for (std::size_t i = 0; i < free.size(); ++i) out[static_cast<Index>(i)] = params[free[i]];
    if (infer_initial_state) out.tail(y0.size()) = y0;
    return out;
}

void ParameterLayout::validate(const ModelSystem& model) const {
    if (base_params.size() != model.param_count()) throw PreconditionError("layout: parameter length mismatch");
    if (base_initial_state.size() != model.dim()) throw PreconditionError("layout: initial state length mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(model.param_count()), false);
    for (Index i : free) {
        if (i < 0 || i >= model.param_count()) throw PreconditionError("layout: free index out of range");
        if (seen[static_cast<std::size_t>(i)]) throw PreconditionError("layout: duplicate free parameter");
        seen[static_cast<std::size_t>(i)] = true;
    }
    if (filter_dim() < 1) throw PreconditionError("layout: nothing to infer");
    for (Index i = 0; i < model.param_count(); ++i)
        if (!seen[static_cast<std::size_t>(i)] && !std::isfinite(base_params[i]))
            throw PreconditionError("layout: fixed parameter '" + model.param_names[static_cast<std::size_t>(i)] +
                                    "' has no value");
}

// ---------------------------------------------------------------------------
// Inference

void InferenceConfig::validate() const {
    if (max_iterations < 1) throw PreconditionError("inference: max_iterations must be at least 1");
    if (!(sse_stop > 0.0)) throw PreconditionError("inference: sse_stop must be positive");
    if (!(process_scale >= 0.0)) throw PreconditionError("inference: process_scale must be non-negative");
    if (!(measurement_noise > 0.0)) throw PreconditionError("inference: measurement noise must be positive");
    if (max_penalty_streak < 1) throw PreconditionError("inference: max_penalty_streak must be positive");
}

Vector default_process_noise(const Vector& theta0, double scale) {
    return scale * theta0.cwiseAbs().cwiseMax(1e-3);
}

Matrix default_initial_covariance(const Vector& theta0, double scale) {
    return (scale * theta0.cwiseAbs().cwiseMax(1e-3).array().square()).matrix().asDiagonal();
}

double InferenceResult::best_sse() const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : trace.records) best = std::min(best, r.sse);
    return best;
}

double InferenceResult::final_sse() const {
    return trace.records.empty() ? std::numeric_limits<double>::infinity() : trace.records.back().sse;
}

void InferenceResult::rethrow() const {
    if (status == InferenceStatus::RegimeLost) throw RegimeLostError(message);
    if (status == InferenceStatus::CovarianceFailure) throw CovarianceError(message);
}

InferenceResult run_inference(const ModelSystem& model, const TargetSpec& target, const ParameterLayout& layout,
                              const Vector& theta0, const Matrix& p0, const InferenceConfig& config,
                              const WorkerPool* pool) {
    config.validate();
    target.validate(model);
    layout.validate(model);
    config.le_config.validate(model);
    const Index dim = layout.filter_dim();
    if (theta0.size() != dim || !theta0.allFinite())
        throw PreconditionError("inference: theta0 must be finite with one entry per inferred quantity");
    if (p0.rows() != dim || p0.cols() != dim) throw PreconditionError("inference: P0 shape mismatch");
    if (Eigen::LLT<Matrix>(p0).info() != Eigen::Success)
        throw PreconditionError("inference: P0 must be positive definite");

    const ConstraintMap constraint = config.constraint.padded_to(dim);
    const Vector y_target = target_vector(target);
    const Index m = y_target.size();

    InferenceResult result;
    result.state = {theta0, p0, default_process_noise(theta0, config.process_scale),
                    Vector::Constant(m, config.measurement_noise), 0};

    auto evaluate = [&](const Vector& filter_vector) {
        const auto [params, y0] = layout.expand(constraint.apply(filter_vector));
        return observe(target, model, params, y0, config.le_config, config.osc_tol);
    };

    long streak = 0;
    double cumulative = 0.0;
    for (long k = 1; k <= config.max_iterations; ++k) {
        UpdateResult upd;
        bool all_penalized = true;
        try {
            const Prior prior = predict(result.state);
            const SigmaPointSet sigma = sigma_points(prior.mean, prior.cov, config.ut);
            std::vector<Observation> obs(static_cast<std::size_t>(sigma.count()));
            auto run_point = [&](std::size_t i) { obs[i] = evaluate(sigma.points.col(static_cast<Index>(i))); };
            if (pool) {
                pool->parallel_for(obs.size(), run_point);
            } else {
                for (std::size_t i = 0; i < obs.size(); ++i) run_point(i);
            }
            Matrix ys(m, sigma.count());
            for (std::size_t i = 0; i < obs.size(); ++i) {
                ys.col(static_cast<Index>(i)) = obs[i].value;
                all_penalized = all_penalized && obs[i].penalized;
            }
            upd = update(result.state, prior, sigma, ys, y_target);
            if (!upd.state.mean.allFinite() || !upd.state.cov.allFinite())
                throw CovarianceError("posterior became non-finite");
        } catch (const CovarianceError& e) {
            result.status = InferenceStatus::CovarianceFailure;
            result.message = "iteration " + std::to_string(k) + ": " + e.what();
            return result;
        }
        result.state = upd.state;
        streak = all_penalized ? streak + 1 : 0;

        IterationRecord rec;
        rec.iteration = k;
        rec.mean = result.state.mean;
        rec.cov_diag = result.state.cov.diagonal();
        std::tie(rec.params, rec.initial_state) = layout.expand(constraint.apply(result.state.mean));
        rec.predicted = upd.predicted_observation;
        const Observation at_mean = observe(target, model, rec.params, rec.initial_state, config.le_config,
                                            config.osc_tol);
        rec.observed = at_mean.value;
        rec.spectrum = at_mean.spectrum;
        rec.attractor = classify(at_mean.spectrum, target.delta_tol, config.osc_tol);
        const PredictionError err = prediction_error(at_mean.value, y_target, result.state.measurement_noise);
        cumulative += err.weighted;
        rec.sse = err.raw;
        rec.cumulative_error = cumulative;
        rec.all_penalized = all_penalized;
        result.trace.records.push_back(std::move(rec));

        if (err.raw <= config.sse_stop) {
            result.status = InferenceStatus::Converged;
            result.message = "converged at iteration " + std::to_string(k);
            return result;
        }
        if (streak >= config.max_penalty_streak) {
            result.status = InferenceStatus::RegimeLost;
            result.message = std::to_string(streak) + " consecutive iterations with every sigma point divergent";
            return result;
        }
    }
    result.status = InferenceStatus::MaxIterations;
    result.message = "max_iterations reached without SSE <= sse_stop";
    return result;
}

double ParameterRange::draw(std::mt19937_64& rng) const {
    if (log_uniform) {
        std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
        return std::exp(u(rng));
    }
    std::uniform_real_distribution<double> u(lo, hi);
    return u(rng);
}

std::vector<ParameterRange> hes1_initial_ranges() {
    return {{0.1, 100.0, true}, {0.01, 10.0, true}, {1e-4, 1.0, true}, {1.0, 10.0, true}};
}

MultistartResult run_multistart(const ModelSystem& model, const TargetSpec& target, const ParameterLayout& layout,
                                const std::vector<ParameterRange>& ranges, std::size_t restarts, double p0_scale,
                                const InferenceConfig& config, const WorkerPool* pool) {
    if (static_cast<Index>(ranges.size()) != layout.filter_dim())
        throw PreconditionError("multistart: one range per inferred quantity required");
    if (restarts < 1) throw PreconditionError("multistart: restarts must be at least 1");
    MultistartResult out;
    for (std::size_t r = 0; r < restarts; ++r) {
        auto rng = make_rng(config.seed, r);
        Vector theta0(layout.filter_dim());
        for (Index i = 0; i < theta0.size(); ++i) theta0[i] = ranges[static_cast<std::size_t>(i)].draw(rng);
        out.starts.push_back(theta0);
        out.runs.push_back(run_inference(model, target, layout, theta0,
                                         default_initial_covariance(theta0, p0_scale), config, pool));
        if (out.runs.back().final_sse() < out.runs[out.best].final_sse()) out.best = r;
    }
    return out;
}

std::string to_string(InferenceStatus status) {
    switch (status) {
        case InferenceStatus::Converged: return "converged";
        case InferenceStatus::MaxIterations: return "max_iterations";
        case InferenceStatus::RegimeLost: return "regime_lost";
        case InferenceStatus::CovarianceFailure: return "covariance_failure";
    }
    return "unknown";
}

void write_trace_jsonl(std::ostream& out, const InferenceTrace& trace) {
    for (const auto& r : trace.records) {
        nlohmann::ordered_json row;
        row["iteration"] = r.iteration;
        row["mean"] = to_std(r.mean);
        row["cov_diag"] = to_std(r.cov_diag);
        row["params"] = to_std(r.params);
        row["initial_state"] = to_std(r.initial_state);
        row["predicted"] = to_std(r.predicted);
        row["observed"] = to_std(r.observed);
        row["exponents"] = to_std(r.spectrum.exponents);
        row["diverged"] = r.spectrum.diverged;
        row["sse"] = r.sse;
        row["cumulative_error"] = r.cumulative_error;
        row["class"] = to_string(r.attractor.attractor);
        row["low_confidence"] = r.attractor.low_confidence;
        out << row.dump() << '\n';
    }
}

void write_trace_csv(std::ostream& out, const InferenceTrace& trace, const std::vector<std::string>& filter_names) {
    out << "iteration";
    for (const auto& n : filter_names) out << ',' << n;
    for (const auto& n : filter_names) out << ",var_" << n;
    const Index m = trace.records.empty() ? 0 : trace.records.front().observed.size();
    for (Index i = 0; i < m; ++i) out << ",observed_" << (i + 1);
    out << ",sse,cumulative_error,class\n";
    for (const auto& r : trace.records) {
        out << r.iteration;
        for (Index i = 0; i < r.mean.size(); ++i) out << ',' << format_double(r.mean[i]);
        for (Index i = 0; i < r.cov_diag.size(); ++i) out << ',' << format_double(r.cov_diag[i]);
        for (Index i = 0; i < r.observed.size(); ++i) out << ',' << format_double(r.observed[i]);
        out << ',' << format_double(r.sse) << ',' << format_double(r.cumulative_error) << ','
            << to_string(r.attractor.attractor) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Sweeps

Sampler sampler_from_string(const std::string& name) {
    if (name == "grid") return Sampler::Grid;
    if (name == "uniform") return Sampler::Uniform;
    if (name == "sobol") return Sampler::Sobol;
    if (name == "latin_hypercube" || name == "lhs") return Sampler::LatinHypercube;
    throw LookupError("unknown sampler '" + name + "'; available: grid, uniform, sobol, latin_hypercube");
}

std::string to_string(Sampler sampler) {
    switch (sampler) {
        case Sampler::Grid: return "grid";
        case Sampler::Uniform: return "uniform";
        case Sampler::Sobol: return "sobol";
        case Sampler::LatinHypercube: return "latin_hypercube";
    }
    return "unknown";
}

Matrix sample_box(Sampler sampler, const Vector& lo, const Vector& hi, std::size_t n_samples, std::uint64_t seed) {
    const Index d = lo.size();
    if (d < 1 || hi.size() != d) throw PreconditionError("sweep: region bounds must have matching length >= 1");
    if (((hi - lo).array() <= 0.0).any()) throw PreconditionError("sweep: region must be non-degenerate");
    if (n_samples < 1) throw PreconditionError("sweep: n_samples must be at least 1");
    const auto n = static_cast<Index>(n_samples);
    const Vector width = hi - lo;

    Matrix unit;
    switch (sampler) {
        case Sampler::Grid: {
            auto per_axis = static_cast<Index>(std::floor(std::pow(static_cast<double>(n), 1.0 / d) + 1e-9));
            per_axis = std::max<Index>(1, per_axis);
            Index total = 1;
            for (Index j = 0; j < d; ++j) total *= per_axis;
            unit.resize(d, total);
            for (Index c = 0; c < total; ++c) {
                Index rem = c;
                for (Index j = d - 1; j >= 0; --j) {
                    const Index idx = rem % per_axis;
                    rem /= per_axis;
                    unit(j, c) = per_axis == 1 ? 0.5 : static_cast<double>(idx) / static_cast<double>(per_axis - 1);
                }
            }
            break;
        }
        case Sampler::Uniform: {
            auto rng = make_rng(seed, 0);
            std::uniform_real_distribution<double> u(0.0, 1.0);
            unit.resize(d, n);
            for (Index c = 0; c < n; ++c)
                for (Index j = 0; j < d; ++j) unit(j, c) = u(rng);
            break;
        }
        case Sampler::Sobol: {
            boost::random::sobol gen(static_cast<std::size_t>(d));
            unit.resize(d, n);
            for (Index c = 0; c < n; ++c)
                for (Index j = 0; j < d; ++j) unit(j, c) = std::ldexp(static_cast<double>(gen()), -64);
            break;
        }
        case Sampler::LatinHypercube: {
            auto rng = make_rng(seed, 0);
            std::uniform_real_distribution<double> u(0.0, 1.0);
            unit.resize(d, n);
            std::vector<Index> strata(static_cast<std::size_t>(n));
            for (Index j = 0; j < d; ++j) {
                std::iota(strata.begin(), strata.end(), Index{0});
                std::shuffle(strata.begin(), strata.end(), rng);
                for (Index c = 0; c < n; ++c)
                    unit(j, c) = (static_cast<double>(strata[static_cast<std::size_t>(c)]) + u(rng)) /
                                 static_cast<double>(n);
            }
            break;
        }
    }
    return (width.asDiagonal() * unit).colwise() + lo;
}

std::vector<RegimePoint> sweep(const ModelSystem& model, const ParameterLayout& layout, const Vector& lo,
                               const Vector& hi, const SweepConfig& config, const WorkerPool* pool) {
    layout.validate(model);
    if (layout.infer_initial_state) throw PreconditionError("sweep: initial-state inference is not supported");
    if (lo.size() != layout.filter_dim()) throw PreconditionError("sweep: region must cover the free parameters");
    config.le_config.validate(model);
    const Matrix pts = sample_box(config.sampler, lo, hi, config.n_samples, config.seed);

    std::vector<RegimePoint> out(static_cast<std::size_t>(pts.cols()));
    auto run = [&](std::size_t i) {
        RegimePoint& p = out[i];
        p.params = layout.expand(pts.col(static_cast<Index>(i))).first;
        p.spectrum = estimate_spectrum(model, p.params, layout.base_initial_state, config.le_config);
        p.attractor = classify(p.spectrum, config.delta_tol, config.osc_tol);
        p.ky_dimension = std::numeric_limits<double>::quiet_NaN();
        if (!p.spectrum.diverged) {
            try {
                p.ky_dimension = kaplan_yorke_dimension(p.spectrum.exponents, config.osc_tol);
            } catch (const UnboundedDimensionError&) {
            }
        }
    };
    if (pool) {
        pool->parallel_for(out.size(), run);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) run(i);
    }
    return out;
}

void write_regime_csv(std::ostream& out, const std::vector<RegimePoint>& points, const ModelSystem& model) {
    const Index k = points.empty() ? 0 : points.front().spectrum.exponents.size();
    bool first = true;
    for (const auto& n : model.param_names) {
        out << (first ? "" : ",") << n;
        first = false;
    }
    for (Index i = 0; i < k; ++i) out << ",lambda_" << (i + 1);
    out << ",class,ky_dimension\n";
    for (const auto& p : points) {
        for (Index i = 0; i < p.params.size(); ++i) out << (i ? "," : "") << format_double(p.params[i]);
        for (Index i = 0; i < p.spectrum.exponents.size(); ++i) out << ',' << format_double(p.spectrum.exponents[i]);
        out << ',' << to_string(p.attractor.attractor) << ',' << format_double(p.ky_dimension) << '\n';
    }
}

}  // namespace qualdyn
