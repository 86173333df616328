#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "qualdyn/errors.hpp"
#include "qualdyn/models.hpp"

namespace qualdyn::dsl {

struct SourceSpan {
    int line = 0;
    int column = 0;
};

enum class Func { Exp, Log, Sin, Cos, Tanh, Sqrt, Abs };

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Constant {
    double value;
};
struct StateRef {
    Index index;
};
struct ParamRef {
    Index index;
};
struct TimeRef {};
struct Negate {
    ExprPtr operand;
};
struct Binary {
    char op;  ///< one of + - * / ^
    ExprPtr lhs;
    ExprPtr rhs;
};
struct Call {
    Func func;
    ExprPtr arg;
};

struct Expr {
    std::variant<Constant, StateRef, ParamRef, TimeRef, Negate, Binary, Call> node;
    SourceSpan span;
};

/// A parsed model: declared names (with optional initial values) and one
/// derivative expression per state, in declaration order.
struct ModelDef {
    std::vector<std::string> state_names;
    std::vector<std::string> param_names;
    std::vector<std::optional<double>> state_defaults;
    std::vector<std::optional<double>> param_defaults;
    std::vector<ExprPtr> derivatives;
};

/// Grammar, one statement per line, `#` starts a comment:
///
///     states: x, y = 1.5, z          # optional initial values
///     params: sigma = 10, rho, beta
///     dx/dt = sigma*(y - x)
///
/// Precedence: `^` (right-associative) > unary minus > `*` `/` > `+` `-`.
/// Functions: exp log sin cos tanh sqrt abs. `t` is the time symbol.
/// Throws ParseError with the 1-based line/column of the offending token.
ModelDef parse_model(std::string_view text);

/// Single-direction forward-mode dual number.
struct Dual {
    double value = 0.0;
    double derivative = 0.0;

    Dual() = default;
    Dual(double v, double d = 0.0) : value(v), derivative(d) {}
};

inline Dual operator+(Dual a, Dual b) { return {a.value + b.value, a.derivative + b.derivative}; }
inline Dual operator-(Dual a, Dual b) { return {a.value - b.value, a.derivative - b.derivative}; }
inline Dual operator-(Dual a) { return {-a.value, -a.derivative}; }
inline Dual operator*(Dual a, Dual b) {
    return {a.value * b.value, a.derivative * b.value + a.value * b.derivative};
}
inline Dual operator/(Dual a, Dual b) {
    return {a.value / b.value, (a.derivative * b.value - a.value * b.derivative) / (b.value * b.value)};
}

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.value; }

/// Pure functions on doubles and duals with the language's domain rules:
/// log/sqrt of negative values and non-integer powers of negative bases raise
/// DivergenceError.
namespace math {

inline void domain_error(const char* what) { throw DivergenceError(std::string("domain error: ") + what, Vector()); }

inline double pow(double a, double b) {
    if (a < 0.0 && b != std::floor(b)) domain_error("non-integer power of a negative base");
    return std::pow(a, b);
}
inline Dual pow(Dual a, Dual b) {
    const double v = pow(a.value, b.value);
    double d = 0.0;
    if (a.derivative != 0.0) d += b.value * std::pow(a.value, b.value - 1.0) * a.derivative;
    if (b.derivative != 0.0 && v != 0.0) {
        if (a.value <= 0.0) domain_error("power with a varying exponent needs a positive base");
        d += v * std::log(a.value) * b.derivative;
    }
    return {v, d};
}
inline double exp(double a) { return std::exp(a); }
inline Dual exp(Dual a) {
    const double v = std::exp(a.value);
    return {v, v * a.derivative};
}
inline double log(double a) {
    if (!(a > 0.0)) domain_error("log of a non-positive value");
    return std::log(a);
}
inline Dual log(Dual a) { return {log(a.value), a.derivative / a.value}; }
inline double sin(double a) { return std::sin(a); }
inline Dual sin(Dual a) { return {std::sin(a.value), std::cos(a.value) * a.derivative}; }
inline double cos(double a) { return std::cos(a); }
inline Dual cos(Dual a) { return {std::cos(a.value), -std::sin(a.value) * a.derivative}; }
inline double tanh(double a) { return std::tanh(a); }
inline Dual tanh(Dual a) {
    const double v = std::tanh(a.value);
    return {v, (1.0 - v * v) * a.derivative};
}
inline double sqrt(double a) {
    if (a < 0.0) domain_error("sqrt of a negative value");
    return std::sqrt(a);
}
inline Dual sqrt(Dual a) {
    const double v = sqrt(a.value);
    return {v, a.derivative / (2.0 * v)};
}
inline double abs(double a) { return std::abs(a); }
inline Dual abs(Dual a) { return {std::abs(a.value), a.value < 0.0 ? -a.derivative : (a.value > 0.0 ? a.derivative : 0.0)}; }

}  // namespace math

/// Evaluates an expression. Division by exactly zero and the domain rules of
/// `math` raise DivergenceError.
template <typename Scalar>
Scalar eval_expr(const Expr& expr, std::span<const Scalar> states, std::span<const Scalar> params, Scalar t) {
    struct Visitor {
        std::span<const Scalar> states;
        std::span<const Scalar> params;
        Scalar t;

        Scalar operator()(const Constant& c) const { return Scalar(c.value); }
        Scalar operator()(const StateRef& r) const { return states[static_cast<std::size_t>(r.index)]; }
        Scalar operator()(const ParamRef& r) const { return params[static_cast<std::size_t>(r.index)]; }
        Scalar operator()(const TimeRef&) const { return t; }
        Scalar operator()(const Negate& n) const { return -eval(*n.operand); }
        Scalar operator()(const Call& c) const {
            const Scalar a = eval(*c.arg);
            switch (c.func) {
                case Func::Exp: return math::exp(a);
                case Func::Log: return math::log(a);
                case Func::Sin: return math::sin(a);
                case Func::Cos: return math::cos(a);
                case Func::Tanh: return math::tanh(a);
                case Func::Sqrt: return math::sqrt(a);
                case Func::Abs: return math::abs(a);
            }
            return a;
        }
        Scalar operator()(const Binary& b) const {
            const Scalar l = eval(*b.lhs);
            const Scalar r = eval(*b.rhs);
            switch (b.op) {
                case '+': return l + r;
                case '-': return l - r;
                case '*': return l * r;
                case '/':
                    if (value_of(r) == 0.0) math::domain_error("division by zero");
                    return l / r;
                case '^': return math::pow(l, r);
            }
            return l;
        }
        Scalar eval(const Expr& e) const { return std::visit(*this, e.node); }
    };
    return Visitor{states, params, t}.eval(expr);
}

/// f(y; theta, t) for a parsed model.
Vector eval_rhs(const ModelDef& def, const Vector& y, const Vector& params, double t = 0.0);

/// Exact Jacobian: column j from one dual pass seeded at state j.
Matrix jacobian_dual(const ModelDef& def, const Vector& y, const Vector& params, double t = 0.0);

/// Wraps a parsed definition as a ModelSystem. Parameters without an initializer
/// have no default; states without one start at 1.
ModelSystem to_model(ModelDef def, std::string name);

/// Canonical text form; parsing it back yields a structurally identical definition.
std::string to_text(const ModelDef& def);
std::string to_text(const Expr& expr, const ModelDef& def);

/// Structural equality ignoring source spans.
bool structurally_equal(const Expr& a, const Expr& b);
bool structurally_equal(const ModelDef& a, const ModelDef& b);

std::string function_name(Func func);

}  // namespace qualdyn::dsl
