#include "qualdyn/cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "qualdyn/dsl.hpp"
#include "qualdyn/format.hpp"
#include "qualdyn/lyapunov.hpp"
#include "qualdyn/models.hpp"
#include "qualdyn/odeint.hpp"
#include "qualdyn/parallel.hpp"
#include "qualdyn/qualinf.hpp"

namespace qualdyn::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Small helpers

std::string read_file(const fs::path& path, const std::string& field) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(field, "cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

json named(const std::vector<std::string>& names, const Vector& values) {
    json out = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) out[names[i]] = values[static_cast<Index>(i)];
    return out;
}

std::string join(const std::vector<std::string>& items, const std::string& sep = ", ") {
    std::string out;
    for (const auto& s : items) out += (out.empty() ? "" : sep) + s;
    return out;
}

// Typed lookups with field paths in every error.

const json* find(const json& node, const std::string& key) {
    if (!node.is_object()) return nullptr;
    auto it = node.find(key);
    return it == node.end() || it->is_null() ? nullptr : &*it;
}

json section(const json& config, const std::string& key) {
    const json* s = find(config, key);
    if (!s) return json::object();
    if (!s->is_object()) throw ConfigError(key, "expected a section");
    return *s;
}

double get_double(const json& node, const std::string& key, const std::string& path, double fallback) {
    const json* v = find(node, key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError(path + "." + key, "expected a number");
    return v->get<double>();
}

long get_long(const json& node, const std::string& key, const std::string& path, long fallback) {
    const json* v = find(node, key);
    if (!v) return fallback;
    if (!v->is_number_integer()) throw ConfigError(path + "." + key, "expected an integer");
    return v->get<long>();
}

bool get_bool(const json& node, const std::string& key, const std::string& path, bool fallback) {
    const json* v = find(node, key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ConfigError(path + "." + key, "expected true or false");
    return v->get<bool>();
}

std::string get_string(const json& node, const std::string& key, const std::string& path,
                       const std::string& fallback) {
    const json* v = find(node, key);
    if (!v) return fallback;
    if (!v->is_string()) throw ConfigError(path + "." + key, "expected a string");
    return v->get<std::string>();
}

Vector get_vector(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
    Vector out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw ConfigError(path + "[" + std::to_string(i) + "]", "expected a number");
        out[static_cast<Index>(i)] = v[i].get<double>();
    }
    return out;
}

void check_keys(const json& node, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!node.is_object()) return;
    for (const auto& [key, value] : node.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError(path.empty() ? key : path + "." + key, "unknown key");
    }
}

// ---------------------------------------------------------------------------
// Experiment resolution

struct Input {
    std::string path;
    std::string digest;
};

struct Experiment {
    json config;
    ModelSystem model;
    Vector params;                  ///< every parameter; free ones hold their start values
    std::vector<Index> free;
    std::vector<bool> free_has_start;
    Vector y0;
    fs::path out_dir;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::vector<Input> inputs;
};

ModelSystem load_model(json& config, std::vector<Input>& inputs) {
    const json* m = find(config, "model");
    if (!m) throw ConfigError("model", "required (zoo name or model file)");
    if (m->is_string()) config["model"] = json{{"name", m->get<std::string>()}};
    const json spec = config["model"];
    if (!spec.is_object()) throw ConfigError("model", "expected {\"name\": ...} or {\"file\": ...}");
    check_keys(spec, "model", {"name", "file"});
    const json* name = find(spec, "name");
    const json* file = find(spec, "file");
    if ((name != nullptr) == (file != nullptr)) throw ConfigError("model", "give exactly one of name or file");
    if (name) {
        if (!name->is_string()) throw ConfigError("model.name", "expected a string");
        try {
            return builtin(name->get<std::string>());
        } catch (const LookupError& e) {
            throw ConfigError("model.name", e.what());
        }
    }
    if (!file->is_string()) throw ConfigError("model.file", "expected a path");
    const fs::path path = file->get<std::string>();
    const std::string text = read_file(path, "model.file");
    inputs.push_back({path.string(), file_digest(path.string())});
    try {
        return dsl::to_model(dsl::parse_model(text), path.stem().string());
    } catch (const ParseError& e) {
        throw ConfigError("model.file", path.string() + ": " + e.what());
    }
}

/// Parameters named in `section` keyed by index.
std::map<Index, const json*> named_entries(const ModelSystem& model, const json& node, const std::string& path) {
    std::map<Index, const json*> out;
    if (!node.is_object()) throw ConfigError(path, "expected an object keyed by parameter name");
    for (const auto& [key, value] : node.items()) {
        const auto idx = model.param_index(key);
        if (!idx) throw ConfigError(path + "." + key, "unknown parameter; " + model.name + " has " + join(model.param_names));
        out[*idx] = &value;
    }
    return out;
}

Experiment resolve(json config, const std::string& command, std::vector<Input> inputs) {
    Experiment ex;
    check_keys(config, "", {"model", "params", "free", "initial_state", "integrator", "lyapunov", "classify", "target",
                            "inference", "sweep", "seed", "out", "workers"});
    ex.model = load_model(config, inputs);
    const ModelSystem& model = ex.model;

    // Swept parameters play the role of free ones.
    if (const json* f = find(config, "free"); f && f->is_array()) {
        json names = json::object();
        for (const auto& name : *f) {
            if (!name.is_string()) throw ConfigError("free", "expected parameter names");
            names[name.get<std::string>()] = nullptr;
        }
        config["free"] = names;
    }
    json free_node = command == "sweep" ? json::object() : section(config, "free");
    if (command == "sweep") {
        const json sw = section(config, "sweep");
        const json* region = find(sw, "region");
        if (!region || !region->is_object() || region->empty())
            throw ConfigError("sweep.region", "required: {parameter: [lo, hi], ...}");
        for (const auto& [key, value] : region->items()) free_node[key] = nullptr;
    }

    const json params_node = section(config, "params");
    const auto fixed = named_entries(model, params_node, "params");
    const auto free = named_entries(model, free_node, command == "sweep" ? "sweep.region" : "free");

    ex.params = model.default_params;
    std::vector<std::string> missing;
    for (Index i = 0; i < model.param_count(); ++i) {
        const std::string& name = model.param_names[static_cast<std::size_t>(i)];
        const bool is_fixed = fixed.count(i) > 0, is_free = free.count(i) > 0;
        if (is_fixed && is_free)
            throw ConfigError(command == "sweep" ? "sweep.region." + name : "free." + name,
                              "also assigned in params");
        if (is_fixed) {
            if (!fixed.at(i)->is_number()) throw ConfigError("params." + name, "expected a number");
            ex.params[i] = fixed.at(i)->get<double>();
        }
        if (is_free) {
            ex.free.push_back(i);
            const json* start = free.at(i);
            if (!start->is_null() && !start->is_number()) throw ConfigError("free." + name, "expected a number or null");
            if (start->is_number()) ex.params[i] = start->get<double>();
            ex.free_has_start.push_back(std::isfinite(ex.params[i]));
        } else if (!std::isfinite(ex.params[i])) {
            missing.push_back("params." + name);
        }
    }
    if (!missing.empty()) throw ConfigError("params", "missing value for " + join(missing));
    json resolved = json::object();
    for (Index i = 0; i < model.param_count(); ++i)
        if (!free.count(i)) resolved[model.param_names[static_cast<std::size_t>(i)]] = ex.params[i];
    config["params"] = resolved;

    ex.y0 = model.default_initial_state;
    if (const json* s = find(config, "initial_state")) {
        if (s->is_array()) {
            ex.y0 = get_vector(*s, "initial_state");
            if (ex.y0.size() != model.dim())
                throw ConfigError("initial_state", "expected " + std::to_string(model.dim()) + " values");
        } else if (s->is_object()) {
            for (const auto& [key, value] : s->items()) {
                const auto idx = model.state_index(key);
                if (!idx) throw ConfigError("initial_state." + key, "unknown state; " + model.name + " has " + join(model.state_names));
                if (!value.is_number()) throw ConfigError("initial_state." + key, "expected a number");
                ex.y0[*idx] = value.get<double>();
            }
        } else {
            throw ConfigError("initial_state", "expected an array or an object keyed by state name");
        }
    }
    config["initial_state"] = named(model.state_names, ex.y0);

    const json* seed = find(config, "seed");
    if (seed && !seed->is_number_unsigned()) throw ConfigError("seed", "expected a non-negative integer");
    ex.seed = seed ? seed->get<std::uint64_t>() : 0;
    config["seed"] = ex.seed;

    const json* out = find(config, "out");
    if (out && !out->is_string()) throw ConfigError("out", "expected a directory path");
    ex.out_dir = out ? out->get<std::string>() : std::string("qualdyn-out");
    config["out"] = ex.out_dir.string();

    const json* workers = find(config, "workers");
    if (workers && !workers->is_number_unsigned()) throw ConfigError("workers", "expected a positive integer");
    ex.workers = workers && workers->get<std::size_t>() > 0 ? workers->get<std::size_t>() : WorkerPool::default_workers();

    ex.config = std::move(config);
    ex.inputs = std::move(inputs);
    return ex;
}

LEConfig le_config(Experiment& ex) {
    json node = section(ex.config, "lyapunov");
    check_keys(node, "lyapunov", {"burn_in_steps", "estimation_steps", "renorm_interval", "dt", "k_exponents"});
    LEConfig le;
    le.burn_in_steps = get_long(node, "burn_in_steps", "lyapunov", le.burn_in_steps);
    le.estimation_steps = get_long(node, "estimation_steps", "lyapunov", le.estimation_steps);
    le.renorm_interval = get_long(node, "renorm_interval", "lyapunov", le.renorm_interval);
    le.dt = get_double(node, "dt", "lyapunov", ex.model.default_dt);
    le.k_exponents = get_long(node, "k_exponents", "lyapunov", 0);
    try {
        le.validate(ex.model);
    } catch (const PreconditionError& e) {
        throw ConfigError("lyapunov", e.what());
    }
    node["burn_in_steps"] = le.burn_in_steps;
    node["estimation_steps"] = le.estimation_steps;
    node["renorm_interval"] = le.renorm_interval;
    node["dt"] = le.dt;
    node["k_exponents"] = le.k_exponents;
    ex.config["lyapunov"] = node;
    return le;
}

std::pair<double, double> classify_tols(Experiment& ex) {
    json node = section(ex.config, "classify");
    check_keys(node, "classify", {"delta_tol", "osc_tol"});
    const double delta = get_double(node, "delta_tol", "classify", kDefaultDeltaTol);
    const double osc = get_double(node, "osc_tol", "classify", kDefaultOscTol);
    if (!(osc >= 0.0) || !(delta > osc)) throw ConfigError("classify", "need 0 <= osc_tol < delta_tol");
    node["delta_tol"] = delta;
    node["osc_tol"] = osc;
    ex.config["classify"] = node;
    return {delta, osc};
}

TargetSpec target_spec(Experiment& ex, double delta_tol) {
    const json* t = find(ex.config, "target");
    if (!t) throw ConfigError("target", "required for infer");
    if (!t->is_object()) throw ConfigError("target", "expected a section");
    json node = *t;
    const std::string kind = get_string(node, "kind", "target", "");
    TargetSpec spec;
    auto values = [&]() {
        const json* v = find(node, "values");
        if (!v) throw ConfigError("target.values", "required for " + kind + " targets");
        return get_vector(*v, "target.values");
    };
    if (kind == "oscillation") {
        check_keys(node, "target", {"kind"});
        spec = TargetSpec::oscillation();
    } else if (kind == "chaos") {
        check_keys(node, "target", {"kind", "value"});
        const json* v = find(node, "value");
        double d = 0.0;
        if (v) {
            d = get_double(node, "value", "target", 0.0);
        } else if (ex.model.name == "lorenz") {
            d = 0.9;
        } else {
            throw ConfigError("target.value", "required for chaos targets on " + ex.model.name);
        }
        if (!(d > delta_tol)) throw ConfigError("target.value", "chaos target must exceed delta_tol");
        spec = TargetSpec::chaos(d, delta_tol);
        node["value"] = d;
    } else if (kind == "leading") {
        check_keys(node, "target", {"kind", "values"});
        spec = TargetSpec::leading(values());
    } else if (kind == "full_spectrum") {
        check_keys(node, "target", {"kind", "values"});
        spec = TargetSpec::full_spectrum(values());
    } else if (kind == "ky_dimension") {
        check_keys(node, "target", {"kind", "value"});
        if (!find(node, "value")) throw ConfigError("target.value", "required for ky_dimension targets");
        spec = TargetSpec::ky_dimension(get_double(node, "value", "target", 0.0));
    } else if (kind == "hyperchaos") {
        check_keys(node, "target", {"kind", "lambda1", "lambda2"});
        if (!find(node, "lambda1") || !find(node, "lambda2"))
            throw ConfigError("target", "hyperchaos targets need lambda1 and lambda2");
        spec = TargetSpec::hyperchaos(get_double(node, "lambda1", "target", 0.0),
                                      get_double(node, "lambda2", "target", 0.0));
    } else {
        throw ConfigError("target.kind", "expected one of oscillation, chaos, leading, full_spectrum, ky_dimension, hyperchaos");
    }
    spec.delta_tol = delta_tol;
    try {
        spec.validate(ex.model);
    } catch (const PreconditionError& e) {
        throw ConfigError("target", e.what());
    }
    ex.config["target"] = node;
    return spec;
}

// ---------------------------------------------------------------------------
// Output bookkeeping

class RunRecorder {
public:
    RunRecorder(Experiment& ex, std::string command) : ex_(ex), command_(std::move(command)) {
        std::error_code ec;
        fs::create_directories(ex_.out_dir, ec);
        if (ec) throw ConfigError("out", "cannot create '" + ex_.out_dir.string() + "': " + ec.message());
        manifest_["tool"] = "qualdyn";
        manifest_["version"] = kVersion;
        manifest_["command"] = command_;
        manifest_["config"] = ex_.config;
        json inputs = json::array();
        for (const auto& in : ex_.inputs) inputs.push_back({{"path", in.path}, {"sha256", in.digest}});
        manifest_["inputs"] = inputs;
        manifest_["started_at"] = utc_now();
        manifest_["finished_at"] = nullptr;
        manifest_["status"] = "running";
        manifest_["exit_code"] = nullptr;
        manifest_["outputs"] = json::array();
        write_manifest();
    }

    std::ofstream open(const std::string& name) {
        outputs_.push_back(name);
        std::ofstream f(ex_.out_dir / name, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + (ex_.out_dir / name).string());
        return f;
    }

    void write_json(const std::string& name, const json& value) {
        auto f = open(name);
        f << value.dump(2) << '\n';
    }

    void finish(int exit_code, const std::string& status) {
        manifest_["config"] = ex_.config;
        manifest_["finished_at"] = utc_now();
        manifest_["status"] = status;
        manifest_["exit_code"] = exit_code;
        json outs = json::array();
        for (const auto& name : outputs_)
            outs.push_back({{"path", name}, {"sha256", file_digest((ex_.out_dir / name).string())}});
        manifest_["outputs"] = outs;
        write_manifest();
    }

private:
    void write_manifest() {
        std::ofstream f(ex_.out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
        f << manifest_.dump(2) << '\n';
    }

    Experiment& ex_;
    std::string command_;
    json manifest_;
    std::vector<std::string> outputs_;
};

json spectrum_json(const LyapunovSpectrum& s, const Classification& c, double ky) {
    json out;
    out["exponents"] = to_std(s.exponents);
    out["dt"] = s.dt;
    out["steps"] = s.steps;
    out["diverged"] = s.diverged;
    out["class"] = to_string(c.attractor);
    out["low_confidence"] = c.low_confidence;
    out["ky_dimension"] = std::isfinite(ky) ? json(ky) : json(nullptr);
    return out;
}

double safe_ky(const LyapunovSpectrum& s, double osc_tol) {
    if (s.diverged) return std::numeric_limits<double>::quiet_NaN();
    try {
        return kaplan_yorke_dimension(s.exponents, osc_tol);
    } catch (const UnboundedDimensionError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

// ---------------------------------------------------------------------------
// Commands

void require_all_assigned(const Experiment& ex, const std::string& command) {
    if (ex.free.empty()) return;
    std::vector<std::string> names;
    for (Index i : ex.free) names.push_back("free." + ex.model.param_names[static_cast<std::size_t>(i)]);
    throw ConfigError("free", command + " needs fixed values; remove " + join(names));
}

int cmd_simulate(Experiment& ex, std::ostream& out) {
    require_all_assigned(ex, "simulate");
    json node = section(ex.config, "integrator");
    check_keys(node, "integrator", {"method", "dt", "steps", "t_end", "sample_every", "abs_tol", "rel_tol"});
    IntegratorConfig cfg;
    try {
        cfg.method = method_from_string(get_string(node, "method", "integrator", "rk4"));
    } catch (const Error& e) {
        throw ConfigError("integrator.method", e.what());
    }
    cfg.dt = get_double(node, "dt", "integrator", ex.model.default_dt);
    cfg.abs_tol = get_double(node, "abs_tol", "integrator", cfg.abs_tol);
    cfg.rel_tol = get_double(node, "rel_tol", "integrator", cfg.rel_tol);
    const long steps = get_long(node, "steps", "integrator", 10000);
    const double t_end = get_double(node, "t_end", "integrator", static_cast<double>(steps) * cfg.dt);
    const long sample_every = get_long(node, "sample_every", "integrator", 1);
    try {
        cfg.validate();
    } catch (const PreconditionError& e) {
        throw ConfigError("integrator", e.what());
    }
    if (steps < 1) throw ConfigError("integrator.steps", "must be at least 1");
    if (!(t_end >= 0.0)) throw ConfigError("integrator.t_end", "must be non-negative");
    if (sample_every < 1) throw ConfigError("integrator.sample_every", "must be at least 1");
    node["method"] = to_string(cfg.method);
    node["dt"] = cfg.dt;
    node["steps"] = steps;
    node["t_end"] = t_end;
    node["sample_every"] = sample_every;
    node["abs_tol"] = cfg.abs_tol;
    node["rel_tol"] = cfg.rel_tol;
    ex.config["integrator"] = node;

    RunRecorder rec(ex, "simulate");
    Trajectory traj;
    try {
        traj = integrate(ex.model, ex.y0, ex.params, 0.0, t_end, cfg, static_cast<int>(sample_every));
    } catch (const DivergenceError& e) {
        rec.finish(kNumerical, "diverged");
        throw;
    } catch (const StiffnessError& e) {
        rec.finish(kNumerical, "stiff");
        throw;
    }
    {
        auto f = rec.open("trajectory.csv");
        write_trajectory_csv(f, traj, ex.model.state_names);
    }
    Vector lo = traj.front().y, hi = traj.front().y;
    for (const auto& s : traj) {
        lo = lo.cwiseMin(s.y);
        hi = hi.cwiseMax(s.y);
    }
    json summary;
    summary["model"] = ex.model.name;
    summary["params"] = named(ex.model.param_names, ex.params);
    summary["initial_state"] = named(ex.model.state_names, ex.y0);
    summary["method"] = to_string(cfg.method);
    summary["samples"] = traj.size();
    summary["t_start"] = traj.front().t;
    summary["t_end"] = traj.back().t;
    summary["bounds"] = {{"min", named(ex.model.state_names, lo)}, {"max", named(ex.model.state_names, hi)}};
    summary["final_state"] = named(ex.model.state_names, traj.back().y);
    rec.write_json("summary.json", summary);
    rec.finish(kSuccess, "ok");
    out << "wrote " << traj.size() << " samples to " << (ex.out_dir / "trajectory.csv").string() << '\n';
    return kSuccess;
}

int cmd_classify(Experiment& ex, std::ostream& out) {
    require_all_assigned(ex, "classify");
    const LEConfig le = le_config(ex);
    const auto [delta, osc] = classify_tols(ex);
    RunRecorder rec(ex, "classify");
    const LyapunovSpectrum s = estimate_spectrum(ex.model, ex.params, ex.y0, le);
    const Classification c = classify(s, delta, osc);
    const double ky = safe_ky(s, osc);
    json report;
    report["model"] = ex.model.name;
    report["params"] = named(ex.model.param_names, ex.params);
    report.update(spectrum_json(s, c, ky));
    rec.write_json("spectrum.json", report);
    const int code = s.diverged ? kNumerical : kSuccess;
    rec.finish(code, s.diverged ? "diverged" : "ok");
    out << "class: " << to_string(c.attractor) << (c.low_confidence ? " (low confidence)" : "") << '\n';
    out << "exponents:";
    for (Index i = 0; i < s.exponents.size(); ++i) out << ' ' << format_double(s.exponents[i]);
    out << "\nky_dimension: " << (std::isfinite(ky) ? format_double(ky) : std::string("undefined")) << '\n';
    return code;
}

int cmd_infer(Experiment& ex, std::ostream& out) {
    if (ex.free.empty()) throw ConfigError("free", "infer needs at least one free parameter");
    const auto [delta, osc] = classify_tols(ex);
    const TargetSpec target = target_spec(ex, delta);

    json node = section(ex.config, "inference");
    check_keys(node, "inference", {"max_iterations", "sse_stop", "process_scale", "measurement_noise", "p0_scale",
                                   "ut", "constraint", "restarts", "init_ranges", "infer_initial_state",
                                   "max_penalty_streak"});
    InferenceConfig cfg;
    cfg.le_config = le_config(ex);
    cfg.seed = ex.seed;
    cfg.osc_tol = osc;
    const bool scalar_oscillation =
        std::holds_alternative<LeadingExponents>(target.kind) && target_vector(target).size() == 1 &&
        target_vector(target)[0] == 0.0;
    cfg.max_iterations = get_long(node, "max_iterations", "inference", cfg.max_iterations);
    cfg.sse_stop = get_double(node, "sse_stop", "inference", scalar_oscillation ? 1e-5 : 1e-4);
    cfg.process_scale = get_double(node, "process_scale", "inference", cfg.process_scale);
    cfg.measurement_noise = get_double(node, "measurement_noise", "inference", cfg.measurement_noise);
    cfg.max_penalty_streak = get_long(node, "max_penalty_streak", "inference", cfg.max_penalty_streak);
    const double p0_scale = get_double(node, "p0_scale", "inference", 0.1);
    const long restarts = get_long(node, "restarts", "inference", 1);
    if (!(p0_scale > 0.0)) throw ConfigError("inference.p0_scale", "must be positive");
    if (restarts < 1) throw ConfigError("inference.restarts", "must be at least 1");

    json ut = find(node, "ut") ? node["ut"] : json::object();
    check_keys(ut, "inference.ut", {"alpha", "beta", "kappa"});
    cfg.ut.alpha = get_double(ut, "alpha", "inference.ut", cfg.ut.alpha);
    cfg.ut.beta = get_double(ut, "beta", "inference.ut", cfg.ut.beta);
    cfg.ut.kappa = get_double(ut, "kappa", "inference.ut", cfg.ut.kappa);
    node["ut"] = {{"alpha", cfg.ut.alpha}, {"beta", cfg.ut.beta}, {"kappa", cfg.ut.kappa}};

    ParameterLayout layout;
    layout.base_params = ex.params;
    layout.free = ex.free;
    layout.base_initial_state = ex.y0;
    layout.infer_initial_state = get_bool(node, "infer_initial_state", "inference", false);
    std::vector<std::string> filter_names;
    for (Index i : ex.free) filter_names.push_back(ex.model.param_names[static_cast<std::size_t>(i)]);
    if (layout.infer_initial_state)
        for (const auto& s : ex.model.state_names) filter_names.push_back(s);
    const Index dim = layout.filter_dim();
    auto filter_index = [&](const std::string& name, const std::string& path) {
        for (std::size_t i = 0; i < filter_names.size(); ++i)
            if (filter_names[i] == name) return static_cast<Index>(i);
        throw ConfigError(path, "not an inferred quantity; inferring " + join(filter_names));
    };

    json cnode = find(node, "constraint") ? node["constraint"] : json{{"kind", "identity"}};
    check_keys(cnode, "inference.constraint", {"kind", "lo", "hi", "mode"});
    const std::string ckind = get_string(cnode, "kind", "inference.constraint", "identity");
    if (ckind == "identity") {
        cfg.constraint = ConstraintMap::identity();
    } else if (ckind == "absolute_value") {
        cfg.constraint = ConstraintMap::absolute_value(static_cast<Index>(ex.free.size()));
    } else if (ckind == "box") {
        Vector lo = Vector::Constant(dim, -std::numeric_limits<double>::infinity());
        Vector hi = Vector::Constant(dim, std::numeric_limits<double>::infinity());
        for (const char* side : {"lo", "hi"}) {
            const std::string path = std::string("inference.constraint.") + side;
            const json* b = find(cnode, side);
            if (!b || !b->is_object()) throw ConfigError(path, "expected {name: bound, ...}");
            for (const auto& [key, value] : b->items()) {
                if (!value.is_number()) throw ConfigError(path + "." + key, "expected a number");
                (side[0] == 'l' ? lo : hi)[filter_index(key, path + "." + key)] = value.get<double>();
            }
        }
        const std::string mode = get_string(cnode, "mode", "inference.constraint", "clamp");
        if (mode != "clamp" && mode != "reflect")
            throw ConfigError("inference.constraint.mode", "expected clamp or reflect");
        try {
            cfg.constraint = ConstraintMap::box(lo, hi, mode == "reflect" ? BoxMode::Reflect : BoxMode::Clamp);
        } catch (const PreconditionError& e) {
            throw ConfigError("inference.constraint", e.what());
        }
        cnode["mode"] = mode;
    } else {
        throw ConfigError("inference.constraint.kind", "expected identity, absolute_value or box");
    }
    cnode["kind"] = ckind;
    node["constraint"] = cnode;

    std::vector<ParameterRange> ranges;
    if (const json* r = find(node, "init_ranges")) {
        if (!r->is_object()) throw ConfigError("inference.init_ranges", "expected {name: {lo, hi, log}, ...}");
        ranges.assign(static_cast<std::size_t>(dim), ParameterRange{});
        std::vector<bool> seen(static_cast<std::size_t>(dim), false);
        for (const auto& [key, value] : r->items()) {
            const std::string path = "inference.init_ranges." + key;
            const Index i = filter_index(key, path);
            check_keys(value, path, {"lo", "hi", "log"});
            ParameterRange pr;
            pr.lo = get_double(value, "lo", path, NAN);
            pr.hi = get_double(value, "hi", path, NAN);
            pr.log_uniform = get_bool(value, "log", path, false);
            if (!(pr.hi > pr.lo) || (pr.log_uniform && !(pr.lo > 0.0)))
                throw ConfigError(path, "need lo < hi (and lo > 0 for log ranges)");
            ranges[static_cast<std::size_t>(i)] = pr;
            seen[static_cast<std::size_t>(i)] = true;
        }
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (!seen[i]) throw ConfigError("inference.init_ranges." + filter_names[i], "missing range");
    } else {
        for (std::size_t k = 0; k < ex.free.size(); ++k)
            if (!ex.free_has_start[k])
                throw ConfigError("free." + filter_names[k], "no start value (give one or inference.init_ranges)");
        if (restarts > 1) throw ConfigError("inference.restarts", "restarts need inference.init_ranges");
    }
    node["max_iterations"] = cfg.max_iterations;
    node["sse_stop"] = cfg.sse_stop;
    node["process_scale"] = cfg.process_scale;
    node["measurement_noise"] = cfg.measurement_noise;
    node["p0_scale"] = p0_scale;
    node["restarts"] = restarts;
    node["infer_initial_state"] = layout.infer_initial_state;
    node["max_penalty_streak"] = cfg.max_penalty_streak;
    ex.config["inference"] = node;
    try {
        cfg.validate();
        cfg.ut.validate(dim);
        layout.validate(ex.model);
    } catch (const PreconditionError& e) {
        throw ConfigError("inference", e.what());
    }

    RunRecorder rec(ex, "infer");
    const WorkerPool pool(ex.workers);
    MultistartResult ms;
    if (ranges.empty()) {
        const Vector theta0 = layout.filter_vector(ex.params, ex.y0);
        ms.starts.push_back(theta0);
        ms.runs.push_back(run_inference(ex.model, target, layout, theta0,
                                        default_initial_covariance(theta0, p0_scale), cfg, &pool));
    } else {
        ms = run_multistart(ex.model, target, layout, ranges, static_cast<std::size_t>(restarts), p0_scale, cfg,
                            &pool);
    }
    const InferenceResult& best = ms.best_run();
    {
        auto f = rec.open("trace.jsonl");
        write_trace_jsonl(f, best.trace);
    }
    {
        auto f = rec.open("trace.csv");
        write_trace_csv(f, best.trace, filter_names);
    }
    json report;
    report["model"] = ex.model.name;
    report["target"] = target.describe();
    report["target_vector"] = to_std(target_vector(target));
    report["status"] = to_string(best.status);
    report["message"] = best.message;
    report["converged"] = best.converged();
    report["iterations"] = best.trace.records.size();
    report["best_sse"] = best.best_sse();
    report["final_sse"] = best.final_sse();
    if (!best.trace.records.empty()) {
        const IterationRecord& last = best.trace.records.back();
        json fin;
        fin["mean"] = named(filter_names, last.mean);
        fin["params"] = named(ex.model.param_names, last.params);
        fin["initial_state"] = named(ex.model.state_names, last.initial_state);
        fin["cov_diag"] = named(filter_names, last.cov_diag);
        fin["observed"] = to_std(last.observed);
        fin["sse"] = last.sse;
        fin["cumulative_error"] = last.cumulative_error;
        fin.update(spectrum_json(last.spectrum, last.attractor, safe_ky(last.spectrum, osc)));
        report["final"] = fin;
    }
    json runs = json::array();
    for (std::size_t i = 0; i < ms.runs.size(); ++i) {
        const auto& r = ms.runs[i];
        json entry = {{"start", named(filter_names, ms.starts[i])},
                      {"status", to_string(r.status)},
                      {"iterations", r.trace.records.size()},
                      {"best_sse", r.best_sse()},
                      {"final_sse", r.final_sse()}};
        if (!r.trace.records.empty()) {
            const IterationRecord& last = r.trace.records.back();
            entry["final_params"] = named(ex.model.param_names, last.params);
            entry["final_exponents"] = to_std(last.spectrum.exponents);
        }
        runs.push_back(entry);
    }
    report["restarts"] = runs;
    report["best_restart"] = ms.best;
    rec.write_json("report.json", report);

    int code = kNotConverged;
    if (best.converged()) code = kSuccess;
    if (best.status == InferenceStatus::RegimeLost || best.status == InferenceStatus::CovarianceFailure)
        code = kNumerical;
    rec.finish(code, to_string(best.status));
    out << "status: " << to_string(best.status) << " (" << best.message << ")\n";
    out << "iterations: " << best.trace.records.size() << "\nfinal_sse: " << format_double(best.final_sse()) << '\n';
    if (!best.trace.records.empty())
        out << "class: " << to_string(best.trace.records.back().attractor.attractor) << '\n';
    return code;
}

int cmd_sweep(Experiment& ex, std::ostream& out) {
    json node = section(ex.config, "sweep");
    check_keys(node, "sweep", {"sampler", "samples", "region"});
    SweepConfig cfg;
    cfg.le_config = le_config(ex);
    std::tie(cfg.delta_tol, cfg.osc_tol) = classify_tols(ex);
    cfg.seed = ex.seed;
    try {
        cfg.sampler = sampler_from_string(get_string(node, "sampler", "sweep", "sobol"));
    } catch (const LookupError& e) {
        throw ConfigError("sweep.sampler", e.what());
    }
    const long samples = get_long(node, "samples", "sweep", 64);
    if (samples < 1) throw ConfigError("sweep.samples", "must be at least 1");
    cfg.n_samples = static_cast<std::size_t>(samples);
    Vector lo(static_cast<Index>(ex.free.size())), hi(static_cast<Index>(ex.free.size()));
    for (std::size_t k = 0; k < ex.free.size(); ++k) {
        const std::string& name = ex.model.param_names[static_cast<std::size_t>(ex.free[k])];
        const Vector b = get_vector(node["region"][name], "sweep.region." + name);
        if (b.size() != 2 || !(b[1] > b[0])) throw ConfigError("sweep.region." + name, "expected [lo, hi] with lo < hi");
        lo[static_cast<Index>(k)] = b[0];
        hi[static_cast<Index>(k)] = b[1];
    }
    node["sampler"] = to_string(cfg.sampler);
    node["samples"] = samples;
    ex.config["sweep"] = node;

    ParameterLayout layout;
    layout.base_params = ex.params;
    layout.free = ex.free;
    layout.base_initial_state = ex.y0;
    RunRecorder rec(ex, "sweep");
    const WorkerPool pool(ex.workers);
    const auto points = sweep(ex.model, layout, lo, hi, cfg, &pool);
    {
        auto f = rec.open("regime_map.csv");
        write_regime_csv(f, points, ex.model);
    }
    rec.finish(kSuccess, "ok");
    std::map<std::string, std::size_t> histogram;
    for (const auto& p : points) histogram[to_string(p.attractor.attractor)]++;
    out << "samples: " << points.size() << '\n';
    for (const auto& [name, count] : histogram) out << name << ": " << count << '\n';
    return kSuccess;
}

int cmd_models_list(std::ostream& out) {
    for (const auto& name : builtin_names()) {
        const ModelSystem m = builtin(name);
        out << name << "  dim=" << m.dim() << "  states=" << join(m.state_names, ",") << "  params=";
        for (Index i = 0; i < m.param_count(); ++i) {
            out << (i ? "," : "") << m.param_names[static_cast<std::size_t>(i)];
            if (std::isfinite(m.default_params[i])) out << '=' << format_double(m.default_params[i]);
        }
        out << "  dt=" << format_double(m.default_dt) << '\n';
    }
    return kSuccess;
}

}  // namespace

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set", "expected key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("--set", "empty key segment in '" + key + "'");
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return hex.str();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Lyapunov spectra and qualitative inference for ODE models", "qualdyn"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", kVersion);

    std::string model_name, model_file, config_path, out_dir, sampler;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers, samples;
    app.add_option("--model", model_name, "zoo model name");
    app.add_option("--model-file", model_file, "model definition file");
    app.add_option("--config", config_path, "JSON config file (or a manifest.json from an earlier run)");
    app.add_option("--set", sets, "override a config key: dotted.key=value")->take_all();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--workers", workers, "worker threads (default: QUALDYN_WORKERS or all cores)");

    auto* simulate = app.add_subcommand("simulate", "integrate a trajectory");
    auto* classify_cmd = app.add_subcommand("classify", "estimate the spectrum and classify the attractor");
    auto* infer = app.add_subcommand("infer", "drive free parameters toward a target spectrum");
    auto* sweep_cmd = app.add_subcommand("sweep", "classify sampled points of a parameter box");
    sweep_cmd->add_option("--sampler", sampler, "grid, uniform, sobol or latin_hypercube");
    sweep_cmd->add_option("--samples", samples, "number of samples");
    auto* models = app.add_subcommand("models", "model zoo");
    auto* models_list = models->add_subcommand("list", "list built-in models");
    models->require_subcommand(1);

    std::vector<std::string> argv{"qualdyn"};
    argv.insert(argv.end(), args.begin(), args.end());
    std::vector<const char*> cargv;
    for (const auto& a : argv) cargv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kSuccess : kValidation;
    }

    try {
        if (models_list->parsed()) return cmd_models_list(out);

        json config = json::object();
        std::vector<Input> inputs;
        if (!config_path.empty()) {
            const std::string text = read_file(config_path, "--config");
            config = json::parse(text, nullptr, false);
            if (config.is_discarded() || !config.is_object())
                throw ConfigError("--config", config_path + " is not a JSON object");
            if (config.contains("tool") && config["tool"] == "qualdyn" && config.contains("config"))
                config = json(config["config"]);
            inputs.push_back({config_path, file_digest(config_path)});
        }
        for (const auto& s : sets) apply_override(config, s);
        if (!model_name.empty() && !model_file.empty())
            throw ConfigError("--model", "give either --model or --model-file");
        if (!model_name.empty()) config["model"] = json{{"name", model_name}};
        if (!model_file.empty()) config["model"] = json{{"file", model_file}};
        if (seed) config["seed"] = *seed;
        if (!out_dir.empty()) config["out"] = out_dir;
        if (workers) config["workers"] = *workers;
        if (!sampler.empty()) config["sweep"]["sampler"] = sampler;
        if (samples) config["sweep"]["samples"] = *samples;

        std::string command;
        for (auto* sc : {simulate, classify_cmd, infer, sweep_cmd})
            if (sc->parsed()) command = sc->get_name();
        Experiment ex = resolve(std::move(config), command, std::move(inputs));
        if (command == "simulate") return cmd_simulate(ex, out);
        if (command == "classify") return cmd_classify(ex, out);
        if (command == "infer") return cmd_infer(ex, out);
        return cmd_sweep(ex, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const PreconditionError& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << " (t = " << format_double(e.time()) << ")\n";
        return kNumerical;
    } catch (const StiffnessError& e) {
        err << "error: " << e.what() << " (t = " << format_double(e.time()) << ")\n";
        return kNumerical;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kNumerical;
    }
}

}  // namespace qualdyn::cli
