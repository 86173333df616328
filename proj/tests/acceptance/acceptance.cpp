#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include "generators.hpp"
#include "qualdyn/cli.hpp"
#include "qualdyn/dsl.hpp"
#include "qualdyn/errors.hpp"
#include "qualdyn/lyapunov.hpp"
#include "qualdyn/rng.hpp"
#include "qualdyn/ukf.hpp"

using namespace qualdyn;
using namespace qualdyn::testing;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x) {
    std::ostringstream ss;
    ss.precision(6);
    ss << x;
    return ss.str();
}

std::string fmt(const Vector& v) {
    std::string out = "(";
    for (Index i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt(v[i]);
    return out + ")";
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("qualdyn_acceptance_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string config_file(const std::string& name) { return std::string(QUALDYN_SOURCE_DIR) + "/configs/" + name; }

int cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0 && code != 3) std::cerr << err.str();
    return code;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

// ---------------------------------------------------------------------------

Outcome a1() {
    const auto t0 = Clock::now();
    const ModelSystem m = lorenz();
    LEConfig cfg;
    cfg.dt = 0.01;
    cfg.burn_in_steps = 1000;
    cfg.estimation_steps = 10000;
    const auto s = estimate_spectrum(m, m.default_params, m.default_initial_state, cfg);
    const double t = seconds_since(t0);
    const Vector& l = s.exponents;
    const bool ok = !s.diverged && l[0] >= 0.85 && l[0] <= 0.95 && std::abs(l[1]) <= 0.02 && l[2] >= -15.8 &&
                    l[2] <= -14.0 && t < 5.0;
    return {ok, "lambda = " + fmt(l) + ", " + fmt(t) + " s"};
}

Outcome a2() {
    const auto t0 = Clock::now();
    const auto dir = scratch("a2");
    const int code = cli({"infer", "--config", config_file("lorenz_full_spectrum.json"), "--out", dir.string()});
    const double t = seconds_since(t0);
    if (code != 0 && code != 3) return {false, "infer exited with " + std::to_string(code)};
    const json report = load_json(dir / "report.json");
    int reached = 0;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : report["restarts"]) {
        const double sse = r["best_sse"].get<double>();
        if (sse < 1e-3 && r["iterations"].get<int>() <= 200) ++reached;
        best = std::min(best, sse);
    }
    const bool ok = report["restarts"].size() == 10 && reached >= 8 && best < 1e-4 && t < 600.0;
    return {ok, std::to_string(reached) + "/10 runs below 1e-3, best SSE " + fmt(best) + ", " + fmt(t) + " s"};
}

Outcome a3() {
    const ModelSystem m = lorenz();
    auto rng = make_rng(13);
    std::uniform_real_distribution<double> u(1.0, 30.0);
    double worst = 0.0;
    int used = 0, skipped = 0;
    while (used < 20) {
        const Vector p = (Vector(3) << u(rng), u(rng), u(rng)).finished();
        const auto s = estimate_spectrum(m, p, m.default_initial_state, LEConfig{});
        if (s.diverged) {
            ++skipped;
            continue;
        }
        const double trace = p[0] + 1.0 + p[2];
        worst = std::max(worst, std::abs(s.exponents.sum() + trace) / trace);
        ++used;
    }
    return {worst < 0.02, "worst relative error " + fmt(worst) + " over 20 orbits (" + std::to_string(skipped) +
                              " divergent skipped)"};
}

Outcome a4() {
    const auto t0 = Clock::now();
    const auto dir = scratch("a4");
    const int code = cli({"infer", "--config", config_file("hes1_oscillation.json"), "--out", dir.string()});
    const double t = seconds_since(t0);
    if (code != 0 && code != 3) return {false, "infer exited with " + std::to_string(code)};
    const json report = load_json(dir / "report.json");
    int hits = 0;
    std::string detail;
    for (const auto& r : report["restarts"]) {
        const double l1 = r["final_exponents"][0].get<double>();
        const double k1 = r["final_params"]["k1"].get<double>();
        if (std::abs(l1) < 6e-3 && k1 < 0.01) {
            ++hits;
            if (detail.empty()) detail = "lambda_1 = " + fmt(l1) + ", k1 = " + fmt(k1);
        }
    }
    const bool ok = report["restarts"].size() == 5 && hits >= 1 && t < 600.0;
    return {ok, std::to_string(hits) + "/5 runs oscillate with k1 < 0.01" + (detail.empty() ? "" : " (" + detail + ")") +
                    ", " + fmt(t) + " s"};
}

Outcome a5() {
    const double d = kaplan_yorke_dimension((Vector(3) << 0.906, 0.0, -14.57).finished());
    const auto dir = scratch("a5");
    const int code = cli({"infer", "--config", config_file("lorenz_ky.json"), "--out", dir.string()});
    if (code != 0 && code != 3) return {false, "infer exited with " + std::to_string(code)};
    std::ifstream trace(dir / "trace.jsonl");
    double best = std::numeric_limits<double>::infinity();
    long at = -1;
    for (std::string line; std::getline(trace, line);) {
        const json r = json::parse(line);
        if (r["iteration"].get<long>() > 100) break;
        const double gap = std::abs(r["observed"][0].get<double>() - 1.0);
        if (gap < best) {
            best = gap;
            at = r["iteration"].get<long>();
        }
    }
    const bool ok = std::abs(d - 2.0622) <= 1e-4 && best < 0.05;
    return {ok, "D(0.906, 0, -14.57) = " + fmt(d) + ", |D - 1| = " + fmt(best) + " at iteration " + std::to_string(at)};
}

Outcome a6() {
    const auto t0 = Clock::now();
    const auto dir = scratch("a6");
    const int code = cli({"infer", "--config", config_file("hyperchaos_drive.json"), "--out", dir.string()});
    const double t = seconds_since(t0);
    if (code != 0 && code != 3) return {false, "infer exited with " + std::to_string(code)};
    const json report = load_json(dir / "report.json");
    const auto ex = report["final"]["exponents"];
    const double l1 = ex[0].get<double>(), l2 = ex[1].get<double>();
    const bool ok = report["iterations"].get<int>() <= 150 && l1 >= 15.0 && l2 >= 1.0;
    return {ok, "final (lambda_1, lambda_2) = (" + fmt(l1) + ", " + fmt(l2) + ") after " +
                    std::to_string(report["iterations"].get<int>()) + " iterations, " + fmt(t) + " s"};
}

Outcome a7() {
    auto rng = make_rng(17);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix h = random_matrix(3, 3, rng);
        const Vector y = random_matrix(3, 1, rng);
        FilterState state;
        state.mean = Vector::Zero(3);
        state.cov = Matrix::Identity(3, 3);
        state.process_noise = Vector::Constant(3, 1e-2);
        state.measurement_noise = Vector::Constant(3, 1e-2);
        for (int i = 0; i < 300; ++i)
            state = iterate(state, UTParams{}, [&](const Vector& t) -> Vector { return h * t; }, y).state;
        const Vector ls = h.colPivHouseholderQr().solve(y);
        worst = std::max(worst, (state.mean - ls).norm());
    }
    return {worst < 1e-6, "max distance to least squares " + fmt(worst) + " over 5 random H"};
}

Outcome a8() {
    auto rng = make_rng(19);
    std::uniform_int_distribution<Index> dim(1, 8);
    std::uniform_real_distribution<double> log_alpha(std::log(1e-2), 0.0), beta(0.0, 3.0), kappa(0.0, 3.0);
    double worst_mean = 0.0, worst_cov = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Index l = dim(rng);
        UTParams ut;
        ut.alpha = std::exp(log_alpha(rng));
        ut.beta = beta(rng);
        ut.kappa = kappa(rng);
        const Vector mean = random_matrix(l, 1, rng);
        const Matrix p = random_spd(l, rng);
        const auto s = sigma_points(mean, p, ut);
        const Vector m = s.points * s.w_mean;
        // Rounding bound of the weighted sum itself.
        const double scale = (s.points.cwiseAbs() * s.w_mean.cwiseAbs()).maxCoeff();
        worst_mean = std::max(worst_mean, (m - mean).cwiseAbs().maxCoeff() /
                                              (static_cast<double>(s.count()) * 2.0 * Eigen::NumTraits<double>::epsilon() * scale));
        const Matrix d = s.points.colwise() - mean;
        const Matrix cov = d * s.w_mean.asDiagonal() * d.transpose();
        worst_cov = std::max(worst_cov, (cov - p).norm() / p.norm());
    }
    const bool ok = worst_mean <= 1.0 && worst_cov < 1e-10;
    return {ok, "mean error " + fmt(worst_mean) + " of the rounding bound, covariance error " + fmt(worst_cov)};
}

Outcome a9() {
    auto rng = make_rng(23);
    double ortho = 0.0, span = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 2 + trial % 7;
        const Matrix f = random_matrix(n, n, rng);
        const auto r = gram_schmidt(f);
        ortho = std::max(ortho, (r.frame.transpose() * r.frame - Matrix::Identity(n, n)).norm());
        for (Index j = 1; j <= n; ++j) {
            const Matrix q = r.frame.leftCols(j);
            const Matrix residual = f.leftCols(j) - q * (q.transpose() * f.leftCols(j));
            span = std::max(span, residual.norm() / f.leftCols(j).norm());
        }
    }
    return {ortho < 1e-12 && span < 1e-10, "orthonormality " + fmt(ortho) + ", span " + fmt(span)};
}

Outcome a10() {
    auto rng = make_rng(29);
    std::normal_distribution<double> g(0.0, 3.0);
    std::uniform_real_distribution<double> pos(0.1, 5.0), scale(0.5, 1.5);
    double worst_zoo = 0.0;
    for (const std::string name : {"lorenz", "hes1", "hyperchaos4d"}) {
        const auto parsed = dsl::to_model(dsl::parse_model(slurp(std::string(QUALDYN_MODELS_DIR) + "/" + name + ".ode")), name);
        const ModelSystem ref = builtin(name);
        const Vector base = name == "hes1" ? (Vector(5) << 1.0, 0.1, 0.01, 4.0, 0.03).finished() : ref.default_params;
        for (int i = 0; i < 100; ++i) {
            Vector y(ref.dim());
            for (Index k = 0; k < y.size(); ++k) y[k] = name == "hes1" ? pos(rng) : g(rng);
            Vector p = base;
            for (Index k = 0; k < p.size(); ++k) p[k] *= scale(rng);
            worst_zoo = std::max(worst_zoo, (eval_rhs(parsed, y, p) - eval_rhs(ref, y, p)).cwiseAbs().maxCoeff());
            worst_zoo = std::max(worst_zoo, (eval_jacobian(parsed, y, p) - eval_jacobian(ref, y, p)).cwiseAbs().maxCoeff());
        }
    }
    std::normal_distribution<double> unit(0.0, 1.0);
    double worst_dual = 0.0;
    int tested = 0;
    while (tested < 20) {
        ExprGenerator gen(2 + tested % 3, rng);
        const auto model = dsl::to_model(dsl::parse_model(gen.model(6)), "random");
        Vector y(model.dim());
        for (Index i = 0; i < y.size(); ++i) y[i] = unit(rng);
        try {
            const Matrix a = eval_jacobian(model, y, model.default_params);
            const Matrix fd = finite_diff_jacobian(model, y, model.default_params);
            if (a.norm() > 1e6) continue;
            worst_dual = std::max(worst_dual, (a - fd).norm() / std::max(1.0, a.norm()));
            ++tested;
        } catch (const DivergenceError&) {
        }
    }
    return {worst_zoo <= 1e-12 && worst_dual < 1e-6,
            "zoo max difference " + fmt(worst_zoo) + ", dual vs finite differences " + fmt(worst_dual)};
}

Outcome a11() {
    const std::vector<std::vector<std::string>> commands = {
        {"simulate", "--model", "lorenz", "--set", "integrator.steps=2000"},
        {"simulate", "--model", "lorenz", "--set", "integrator.method=\"dopri5\"", "--set", "integrator.t_end=5"},
        {"classify", "--model", "hyperchaos4d"},
        {"sweep", "--model", "lorenz", "--sampler", "sobol", "--samples", "16", "--set", "sweep.region.rho=[1,40]",
         "--set", "sweep.region.beta=[0.5,4]", "--seed", "5"},
        {"sweep", "--model", "lorenz", "--sampler", "uniform", "--samples", "8", "--set", "sweep.region.rho=[1,40]",
         "--seed", "9"},
        {"infer", "--config", config_file("lorenz_rho_chaos.json")},
        {"infer", "--config", config_file("hes1_oscillation.json"), "--set", "inference.restarts=2", "--set",
         "inference.max_iterations=10"},
    };
    int identical = 0, files = 0;
    std::string failure;
    for (std::size_t i = 0; i < commands.size(); ++i) {
        const auto a = scratch("a11_" + std::to_string(i) + "a"), b = scratch("a11_" + std::to_string(i) + "b");
        auto first = commands[i];
        first.insert(first.end(), {"--out", a.string()});
        const int code_a = cli(first);
        const int code_b = cli({commands[i][0], "--config", (a / "manifest.json").string(), "--out", b.string()});
        bool same = code_a == code_b;
        for (const auto& entry : fs::directory_iterator(a)) {
            if (entry.path().filename() == "manifest.json") continue;
            ++files;
            same = same && fs::exists(b / entry.path().filename()) &&
                   slurp(entry.path()) == slurp(b / entry.path().filename());
        }
        if (same) {
            ++identical;
        } else if (failure.empty()) {
            failure = ", first mismatch: " + commands[i][0] + " #" + std::to_string(i);
        }
    }
    const bool ok = identical == static_cast<int>(commands.size());
    return {ok, std::to_string(identical) + "/" + std::to_string(commands.size()) + " reruns identical across " +
                    std::to_string(files) + " files" + failure};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4},   {"A5", a5},  {"A6", a6},
        {"A7", a7}, {"A8", a8}, {"A9", a9}, {"A10", a10}, {"A11", a11},
    };
    int failures = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
