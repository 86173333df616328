#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "qualdyn/errors.hpp"
#include "qualdyn/qualinf.hpp"
#include "qualdyn/rng.hpp"
#include "test_support.hpp"

using namespace qualdyn;
using namespace qualdyn::testing;

namespace {

Vector v(std::initializer_list<double> xs) {
    Vector out(static_cast<Index>(xs.size()));
    Index i = 0;
    for (double x : xs) out[i++] = x;
    return out;
}

ParameterLayout rho_only() {
    const auto m = lorenz();
    ParameterLayout layout = ParameterLayout::all_free(m);
    layout.free = {1};
    return layout;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("target vectors") {
    CHECK(target_vector(TargetSpec::chaos(0.9)) == v({0.9}));
    CHECK(target_vector(TargetSpec::oscillation()) == v({0.0}));
    CHECK(target_vector(TargetSpec::ky_dimension(1.0)) == v({1.0}));
    CHECK(target_vector(TargetSpec::full_spectrum(v({0.906, 0.0, -14.57}))) == v({0.906, 0.0, -14.57}));
    CHECK(target_vector(TargetSpec::hyperchaos(30.0, 15.0)) == v({30.0, 15.0}));
    CHECK_THROWS_AS(TargetSpec::chaos(0.01), PreconditionError);
}

TEST_CASE("target validation") {
    const auto m = lorenz();
    CHECK_THROWS_AS(TargetSpec::full_spectrum(v({0.0, 0.9, -14.0})).validate(m), PreconditionError);
    CHECK_THROWS_AS(TargetSpec::full_spectrum(v({0.9, -14.0})).validate(m), PreconditionError);
    CHECK_THROWS_AS(TargetSpec::ky_dimension(3.5).validate(m), PreconditionError);
    CHECK_THROWS_AS(TargetSpec::hyperchaos(1.0, 0.01).validate(m), PreconditionError);
    CHECK_NOTHROW(TargetSpec::ky_dimension(2.0).validate(m));
    CHECK(TargetSpec::hyperchaos(5.0, 1.0).exponents_needed(hyperchaos4d()) == 2);
    CHECK(TargetSpec::ky_dimension(1.0).exponents_needed(m) == 3);
    CHECK(TargetSpec::oscillation().exponents_needed(m) == 1);
}

TEST_CASE("prediction error") {
    CHECK(prediction_error(v({1.0, 2.0}), v({1.0, 2.0}), v({0.01, 0.01})).raw == 0.0);
    const auto e = prediction_error(v({0.1}), v({0.0}), v({0.01}));
    CHECK(e.weighted == doctest::Approx(1.0));
    CHECK(e.raw == doctest::Approx(0.01));
}

TEST_CASE("observations") {
    const auto m = lorenz();
    const LEConfig le;
    const Vector full = observation_fn(TargetSpec::full_spectrum(v({0.906, 0.0, -14.57})), m, m.default_params,
                                       m.default_initial_state, le);
    CHECK(std::abs(full[0] - 0.886) < 0.05);
    CHECK(std::abs(full[1] + 0.004) < 0.05);
    CHECK(full.sum() == doctest::Approx(-(10.0 + 1.0 + 8.0 / 3.0)).epsilon(0.02));

    const Vector ky = observation_fn(TargetSpec::ky_dimension(1.0), m, v({10.0, 10.0, 8.0 / 3.0}),
                                     m.default_initial_state, le);
    CHECK(ky == v({0.0}));

    const Vector lead = observation_fn(TargetSpec::chaos(0.9), m, m.default_params, m.default_initial_state, le);
    CHECK(lead.size() == 1);
    CHECK(lead[0] == doctest::Approx(full[0]));

    const Vector pen = observation_fn(TargetSpec::full_spectrum(v({0.0})), quadratic_blowup(), v({1.0}), v({1.0}), le);
    CHECK(pen == v({kDivergencePenalty}));
    const auto hc = hyperchaos4d();
    LEConfig coarse;
    coarse.dt = 0.05;
    const Vector pen2 = observation_fn(TargetSpec::hyperchaos(10.0, 1.0), hc, hc.default_params,
                                       hc.default_initial_state, coarse);
    CHECK(pen2 == v({kDivergencePenalty, kDivergencePenalty}));
}

TEST_CASE("observation is invariant under the sign folded by the constraint") {
    const auto m = lorenz();
    const auto target = TargetSpec::chaos(0.9);
    const auto abs = ConstraintMap::absolute_value(3);
    const Vector theta = v({10.0, 28.0, 8.0 / 3.0});
    const Vector a = observation_fn(target, m, theta, m.default_initial_state, LEConfig{}, abs);
    const Vector b = observation_fn(target, m, -theta, m.default_initial_state, LEConfig{}, abs);
    const Vector c = observation_fn(target, m, v({-10.0, 28.0, -8.0 / 3.0}), m.default_initial_state, LEConfig{}, abs);
    CHECK(a == b);
    CHECK(a == c);
}

TEST_CASE("parameter layout") {
    const auto m = hes1();
    ParameterLayout layout = ParameterLayout::all_free(m);
    CHECK(layout.filter_dim() == 5);
    layout.free = {0, 1, 2, 3};
    CHECK_NOTHROW(layout.validate(m));
    layout.infer_initial_state = true;
    CHECK(layout.filter_dim() == 7);
    const Vector fv = v({1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0});
    const auto [p, y0] = layout.expand(fv);
    CHECK(p == v({1.0, 2.0, 3.0, 4.0, 0.03}));
    CHECK(y0 == v({5.0, 6.0, 7.0}));
    CHECK(layout.filter_vector(p, y0) == fv);

    layout.free = {0, 1, 2};
    CHECK_THROWS_AS(layout.validate(m), PreconditionError);  // h has no value
    layout.free = {};
    layout.infer_initial_state = false;
    layout.base_params = v({1.0, 1.0, 1.0, 1.0, 0.03});
    CHECK_THROWS_AS(layout.validate(m), PreconditionError);
}

TEST_CASE("inference with nothing free is rejected") {
    const auto m = lorenz();
    ParameterLayout layout = ParameterLayout::all_free(m);
    layout.free.clear();
    CHECK_THROWS_AS(run_inference(m, TargetSpec::chaos(0.9), layout, Vector(0), Matrix(0, 0), InferenceConfig{}),
                    PreconditionError);
}

TEST_CASE("regime lost on an everywhere divergent model") {
    const auto m = quadratic_blowup();
    ParameterLayout layout = ParameterLayout::all_free(m);
    InferenceConfig cfg;
    cfg.constraint = ConstraintMap::box(v({0.5}), v({5.0}));
    const auto r = run_inference(m, TargetSpec::chaos(0.9), layout, v({1.0}), Matrix::Identity(1, 1) * 0.01, cfg);
    CHECK(r.status == InferenceStatus::RegimeLost);
    CHECK(r.trace.records.size() == 10);
    CHECK(r.trace.records.back().all_penalized);
    CHECK_THROWS_AS(r.rethrow(), RegimeLostError);
}

TEST_CASE("single parameter drive to chaos") {
    const auto m = lorenz();
    InferenceConfig cfg;
    cfg.max_iterations = 50;
    cfg.sse_stop = 1e-4;
    cfg.ut.alpha = 0.5;
    cfg.process_scale = 0.1;
    const auto r = run_inference(m, TargetSpec::chaos(0.9), rho_only(), v({20.0}),
                                 default_initial_covariance(v({20.0}), 0.1), cfg);
    CHECK(r.converged());
    CHECK(r.trace.records.back().attractor.attractor == AttractorClass::Chaos);
    CHECK(r.trace.records.back().sse <= cfg.sse_stop);
}

TEST_CASE("samplers") {
    const Vector lo = v({0.0, -1.0}), hi = v({30.0, 1.0});
    for (Sampler s : {Sampler::Grid, Sampler::Uniform, Sampler::Sobol, Sampler::LatinHypercube}) {
        const Matrix a = sample_box(s, lo, hi, 16, 5);
        CHECK(a == sample_box(s, lo, hi, 16, 5));
        CHECK(a.rows() == 2);
        for (Index j = 0; j < a.cols(); ++j) {
            CHECK((a.col(j).array() >= lo.array()).all());
            CHECK((a.col(j).array() <= hi.array()).all());
        }
        CHECK(sampler_from_string(to_string(s)) == s);
    }
    CHECK(sampler_from_string("lhs") == Sampler::LatinHypercube);
    CHECK_THROWS_AS(sampler_from_string("halton"), LookupError);
    CHECK(sample_box(Sampler::Uniform, lo, hi, 8, 1) != sample_box(Sampler::Uniform, lo, hi, 8, 2));

    const Matrix grid = sample_box(Sampler::Grid, lo, hi, 16, 0);
    CHECK(grid.cols() == 16);
    CHECK(grid.col(0) == lo);
    CHECK(grid.col(15) == hi);
    CHECK(sample_box(Sampler::Grid, lo, hi, 1, 0).col(0) == (lo + hi) / 2.0);

    const Matrix lhs = sample_box(Sampler::LatinHypercube, lo, hi, 10, 3);
    for (Index d = 0; d < 2; ++d) {
        std::set<int> strata;
        for (Index j = 0; j < 10; ++j)
            strata.insert(static_cast<int>(std::floor((lhs(d, j) - lo[d]) / (hi[d] - lo[d]) * 10.0)));
        CHECK(strata.size() == 10);
    }
    CHECK_THROWS_AS(sample_box(Sampler::Sobol, lo, lo, 4, 0), PreconditionError);
    CHECK_THROWS_AS(sample_box(Sampler::Sobol, lo, hi, 0, 0), PreconditionError);
}

TEST_CASE("rho slice sweep") {
    const auto m = lorenz();
    SweepConfig cfg;
    cfg.sampler = Sampler::Grid;
    cfg.n_samples = 15;
    const WorkerPool pool(2);
    const auto points = sweep(m, rho_only(), v({0.0}), v({28.0}), cfg, &pool);
    REQUIRE(points.size() == 15);
    CHECK(points.front().params[1] == 0.0);
    CHECK(points.front().attractor.attractor == AttractorClass::FixedPoint);
    CHECK(points.front().ky_dimension == 0.0);
    CHECK(points.back().params[1] == 28.0);
    CHECK(points.back().attractor.attractor == AttractorClass::Chaos);

    std::ostringstream csv;
    write_regime_csv(csv, points, m);
    CHECK(count_lines(csv.str()) == 16);
    CHECK(csv.str().rfind("sigma,rho,beta,lambda_1,lambda_2,lambda_3,class,ky_dimension\n", 0) == 0);

    const auto serial = sweep(m, rho_only(), v({0.0}), v({28.0}), cfg);
    for (std::size_t i = 0; i < points.size(); ++i) CHECK(serial[i].spectrum.exponents == points[i].spectrum.exponents);
}

TEST_CASE("single sample sweep at the classic parameters") {
    const auto m = lorenz();
    SweepConfig cfg;
    cfg.sampler = Sampler::Grid;
    cfg.n_samples = 1;
    const Vector c = m.default_params;
    const auto points = sweep(m, ParameterLayout::all_free(m), c.array() - 1.0, c.array() + 1.0, cfg);
    REQUIRE(points.size() == 1);
    CHECK(points[0].params.isApprox(c));
    CHECK(points[0].attractor.attractor == AttractorClass::Chaos);
}

TEST_CASE("sweep classification is stable under a 10% step change") {
    const auto m = lorenz();
    for (double dt : {0.009, 0.011}) {
        LEConfig le;
        le.dt = dt;
        const auto s = estimate_spectrum(m, m.default_params, m.default_initial_state, le);
        CHECK(classify(s).attractor == AttractorClass::Chaos);
    }
}

TEST_CASE("trace writers") {
    const auto m = lorenz();
    InferenceConfig cfg;
    cfg.max_iterations = 2;
    cfg.le_config.estimation_steps = 500;
    cfg.le_config.burn_in_steps = 100;
    const auto r = run_inference(m, TargetSpec::chaos(0.9), rho_only(), v({20.0}),
                                 default_initial_covariance(v({20.0}), 0.1), cfg);
    REQUIRE(r.trace.records.size() == 2);
    CHECK(r.status == InferenceStatus::MaxIterations);
    std::ostringstream jsonl, csv;
    write_trace_jsonl(jsonl, r.trace);
    write_trace_csv(csv, r.trace, {"rho"});
    CHECK(count_lines(jsonl.str()) == 2);
    CHECK(count_lines(csv.str()) == 3);
    const std::string header = csv.str().substr(0, csv.str().find('\n'));
    const auto columns = std::count(header.begin(), header.end(), ',');
    std::istringstream rows(csv.str());
    std::string line;
    while (std::getline(rows, line)) CHECK(std::count(line.begin(), line.end(), ',') == columns);
}

TEST_CASE("multistart keeps the best run") {
    const auto m = lorenz();
    InferenceConfig cfg;
    cfg.max_iterations = 3;
    cfg.le_config.estimation_steps = 500;
    cfg.le_config.burn_in_steps = 100;
    const std::vector<ParameterRange> ranges{{15.0, 30.0, false}};
    const auto a = run_multistart(m, TargetSpec::chaos(0.9), rho_only(), ranges, 3, 0.1, cfg);
    const auto b = run_multistart(m, TargetSpec::chaos(0.9), rho_only(), ranges, 3, 0.1, cfg);
    REQUIRE(a.runs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.starts[i] == b.starts[i]);
        CHECK(a.best_run().final_sse() <= a.runs[i].final_sse());
    }
    CHECK(a.starts[0] != a.starts[1]);
}

TEST_CASE("hes1 initial ranges are log uniform") {
    const auto ranges = hes1_initial_ranges();
    REQUIRE(ranges.size() == 4);
    auto rng = make_rng(1);
    for (const auto& r : ranges) {
        CHECK(r.log_uniform);
        for (int i = 0; i < 100; ++i) {
            const double x = r.draw(rng);
            CHECK(x >= r.lo);
            CHECK(x <= r.hi);
        }
    }
    CHECK(ranges[2].lo == 1e-4);
    CHECK(ranges[2].hi == 1.0);
}

TEST_CASE("full spectrum error decreases monotonically after iteration 10" * doctest::may_fail()) {
    const ModelSystem m = lorenz();
    InferenceConfig cfg;
    cfg.ut.alpha = 0.5;
    cfg.process_scale = 0.1;
    cfg.max_iterations = 200;
    cfg.constraint = ConstraintMap::box(Vector::Zero(3), Vector::Constant(3, 30.0), BoxMode::Reflect);
    const auto target = TargetSpec::full_spectrum((Vector(3) << 0.906, 0.0, -14.57).finished());
    int monotone = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto rng = make_rng(seed);
        std::uniform_real_distribution<double> u(0.0, 30.0);
        const Vector theta0 = (Vector(3) << u(rng), u(rng), u(rng)).finished();
        const auto res = run_inference(m, target, ParameterLayout::all_free(m), theta0,
                                       default_initial_covariance(theta0, 0.1), cfg);
        bool down = true;
        const auto& r = res.trace.records;
        for (std::size_t i = 1; i < r.size(); ++i)
            if (r[i].iteration > 10 && r[i].sse > r[i - 1].sse) down = false;
        monotone += down ? 1 : 0;
    }
    MESSAGE("monotone runs: " << monotone << "/20");
    CHECK(monotone >= 16);
}
