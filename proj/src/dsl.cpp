#include "qualdyn/dsl.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "qualdyn/format.hpp"

namespace qualdyn::dsl {

namespace {

enum class TokenKind { Ident, Number, Symbol, End };

struct Token {
    TokenKind kind;
    std::string text;
    double number = 0.0;
    int line = 0;
    int column = 0;
};

[[noreturn]] void fail(const std::string& message, int line, int column) { throw ParseError(message, line, column); }
[[noreturn]] void fail(const std::string& message, const Token& at) { fail(message, at.line, at.column); }

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

std::vector<Token> tokenize_line(std::string_view line, int line_no) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        const char c = line[i];
        const int col = static_cast<int>(i) + 1;
        if (c == '#') break;
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (is_ident_start(c)) {
            std::size_t j = i;
            while (j < line.size() && is_ident_char(line[j])) ++j;
            out.push_back({TokenKind::Ident, std::string(line.substr(i, j - i)), 0.0, line_no, col});
            i = j;
            continue;
        }
        if (is_digit(c) || (c == '.' && i + 1 < line.size() && is_digit(line[i + 1]))) {
            std::size_t j = i;
            while (j < line.size() && is_digit(line[j])) ++j;
            if (j < line.size() && line[j] == '.') {
                ++j;
                while (j < line.size() && is_digit(line[j])) ++j;
            }
            if (j < line.size() && (line[j] == 'e' || line[j] == 'E')) {
                std::size_t k = j + 1;
                if (k < line.size() && (line[k] == '+' || line[k] == '-')) ++k;
                if (k >= line.size() || !is_digit(line[k])) fail("malformed number exponent", line_no, col);
                while (k < line.size() && is_digit(line[k])) ++k;
                j = k;
            }
            const std::string text(line.substr(i, j - i));
            double value = 0.0;
            const std::string parse_text = text.front() == '.' ? "0" + text : text;
            auto [ptr, ec] = std::from_chars(parse_text.data(), parse_text.data() + parse_text.size(), value);
            if (ec != std::errc{} || ptr != parse_text.data() + parse_text.size())
                fail("number '" + text + "' is out of range", line_no, col);
            if (j < line.size() && is_ident_char(line[j]))
                fail("unexpected character '" + std::string(1, line[j]) + "' after number", line_no,
                     static_cast<int>(j) + 1);
            out.push_back({TokenKind::Number, text, value, line_no, col});
            i = j;
            continue;
        }
        if (std::string_view("+-*/^(),:=").find(c) != std::string_view::npos) {
            out.push_back({TokenKind::Symbol, std::string(1, c), 0.0, line_no, col});
            ++i;
            continue;
        }
        fail("invalid character '" + std::string(1, c) + "'", line_no, col);
    }
    const int end_col = static_cast<int>(line.find('#') == std::string_view::npos ? line.size() : line.find('#')) + 1;
    out.push_back({TokenKind::End, "", 0.0, line_no, end_col});
    return out;
}

bool is_symbol(const Token& t, char c) { return t.kind == TokenKind::Symbol && t.text[0] == c; }

std::optional<Func> lookup_function(const std::string& name) {
    if (name == "exp") return Func::Exp;
    if (name == "log") return Func::Log;
    if (name == "sin") return Func::Sin;
    if (name == "cos") return Func::Cos;
    if (name == "tanh") return Func::Tanh;
    if (name == "sqrt") return Func::Sqrt;
    if (name == "abs") return Func::Abs;
    return std::nullopt;
}

ExprPtr make(Expr e) { return std::make_shared<const Expr>(std::move(e)); }

class ExprParser {
public:
    /// With `resolve` unset, identifiers are not looked up (syntax check only).
    ExprParser(const std::vector<Token>& tokens, std::size_t pos, const ModelDef& def, bool resolve = true)
        : tokens_(tokens), pos_(pos), def_(def), resolve_(resolve) {}

    ExprPtr parse_full() {
        ExprPtr e = parse_sum();
        if (peek().kind != TokenKind::End) {
            if (is_symbol(peek(), ')')) fail("unmatched closing parenthesis", peek());
            fail("unexpected token '" + peek().text + "'", peek());
        }
        return e;
    }

private:
    const Token& peek() const { return tokens_[pos_]; }
    const Token& take() { return tokens_[pos_++]; }

    ExprPtr parse_sum() {
        ExprPtr lhs = parse_product();
        while (is_symbol(peek(), '+') || is_symbol(peek(), '-')) {
            const Token& op = take();
            ExprPtr rhs = parse_product();
            lhs = make({Binary{op.text[0], lhs, rhs}, {op.line, op.column}});
        }
        return lhs;
    }

    ExprPtr parse_product() {
        ExprPtr lhs = parse_unary();
        while (is_symbol(peek(), '*') || is_symbol(peek(), '/')) {
            const Token& op = take();
            ExprPtr rhs = parse_unary();
            lhs = make({Binary{op.text[0], lhs, rhs}, {op.line, op.column}});
        }
        return lhs;
    }

    ExprPtr parse_unary() {
        if (is_symbol(peek(), '-')) {
            const Token& op = take();
            return make({Negate{parse_unary()}, {op.line, op.column}});
        }
        return parse_power();
    }

    ExprPtr parse_power() {
        ExprPtr base = parse_primary();
        if (is_symbol(peek(), '^')) {
            const Token& op = take();
            // Right-associative; the exponent may carry its own unary minus.
            ExprPtr exponent = parse_unary();
            return make({Binary{'^', base, exponent}, {op.line, op.column}});
        }
        return base;
    }

    ExprPtr parse_primary() {
        const Token& tok = peek();
        if (tok.kind == TokenKind::Number) {
            take();
            return make({Constant{tok.number}, {tok.line, tok.column}});
        }
        if (is_symbol(tok, '(')) {
            take();
            ExprPtr inner = parse_sum();
            if (!is_symbol(peek(), ')')) fail("unclosed parenthesis", tok);
            take();
            return inner;
        }
        if (tok.kind == TokenKind::Ident) {
            take();
            if (is_symbol(peek(), '(')) {
                const Token& open = take();
                auto func = lookup_function(tok.text);
                if (!func) fail("unknown function '" + tok.text + "'", tok);
                ExprPtr arg = parse_sum();
                if (!is_symbol(peek(), ')')) fail("unclosed parenthesis", open);
                take();
                return make({Call{*func, arg}, {tok.line, tok.column}});
            }
            return resolve(tok);
        }
        if (tok.kind == TokenKind::End) fail("expected an expression before end of line", tok);
        fail("expected an expression, found '" + tok.text + "'", tok);
    }

    ExprPtr resolve(const Token& tok) const {
        if (!resolve_) return make({Constant{0.0}, {tok.line, tok.column}});
        const auto& s = def_.state_names;
        const auto& p = def_.param_names;
        if (auto it = std::find(s.begin(), s.end(), tok.text); it != s.end())
            return make({StateRef{it - s.begin()}, {tok.line, tok.column}});
        if (auto it = std::find(p.begin(), p.end(), tok.text); it != p.end())
            return make({ParamRef{it - p.begin()}, {tok.line, tok.column}});
        if (tok.text == "t") return make({TimeRef{}, {tok.line, tok.column}});
        fail("unknown identifier '" + tok.text + "'", tok);
    }

    const std::vector<Token>& tokens_;
    std::size_t pos_;
    const ModelDef& def_;
    bool resolve_;
};

bool is_header(const std::vector<Token>& tokens) {
    return tokens.front().kind == TokenKind::Ident && is_symbol(tokens[1], ':');
}

void check_derivative_shape(const std::vector<Token>& tokens) {
    const Token& head = tokens.front();
    if (head.kind != TokenKind::Ident || head.text.size() < 2 || head.text[0] != 'd' || tokens.size() < 5 ||
        !is_symbol(tokens[1], '/') || tokens[2].kind != TokenKind::Ident || tokens[2].text != "dt" ||
        !is_symbol(tokens[3], '='))
        fail("expected 'd<state>/dt = <expression>'", head);
}

struct Declaration {
    std::vector<std::string> names;
    std::vector<std::optional<double>> defaults;
    std::vector<Token> name_tokens;
};

Declaration parse_declaration(const std::vector<Token>& tokens) {
    Declaration decl;
    std::size_t i = 2;
    while (true) {
        const Token& name = tokens[i];
        if (name.kind != TokenKind::Ident) fail("expected an identifier", name);
        ++i;
        std::optional<double> value;
        if (is_symbol(tokens[i], '=')) {
            ++i;
            double sign = 1.0;
            if (is_symbol(tokens[i], '-')) {
                sign = -1.0;
                ++i;
            }
            if (tokens[i].kind != TokenKind::Number) fail("expected a number after '='", tokens[i]);
            value = sign * tokens[i].number;
            ++i;
        }
        decl.names.push_back(name.text);
        decl.defaults.push_back(value);
        decl.name_tokens.push_back(name);
        if (tokens[i].kind == TokenKind::End) break;
        if (!is_symbol(tokens[i], ',')) fail("expected ',' between names", tokens[i]);
        ++i;
    }
    return decl;
}

}  // namespace

ModelDef parse_model(std::string_view text) {
    std::vector<std::vector<Token>> lines;
    {
        int line_no = 1;
        std::size_t start = 0;
        while (start <= text.size()) {
            std::size_t end = text.find('\n', start);
            if (end == std::string_view::npos) end = text.size();
            std::string_view line = text.substr(start, end - start);
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            lines.push_back(tokenize_line(line, line_no));
            ++line_no;
            start = end + 1;
        }
    }

    // Syntax first, so malformed lines are reported before missing declarations.
    {
        const ModelDef empty;
        for (const auto& tokens : lines) {
            if (tokens.front().kind == TokenKind::End) continue;
            if (is_header(tokens)) {
                parse_declaration(tokens);
                continue;
            }
            check_derivative_shape(tokens);
            ExprParser(tokens, 4, empty, false).parse_full();
        }
    }

    ModelDef def;
    std::vector<Token> state_tokens;
    std::optional<Token> states_line, params_line;
    std::vector<Token> all_names;

    for (const auto& tokens : lines) {
        const Token& head = tokens.front();
        if (!is_header(tokens)) continue;
        if (head.text != "states" && head.text != "params") fail("unknown declaration '" + head.text + "'", head);
        auto& seen = head.text == "states" ? states_line : params_line;
        if (seen) fail("duplicate '" + head.text + ":' declaration (first at line " + std::to_string(seen->line) + ")",
                       head);
        seen = head;
        Declaration decl = parse_declaration(tokens);
        for (const Token& name : decl.name_tokens) {
            if (name.text == "t") fail("'t' is reserved for time", name);
            if (lookup_function(name.text)) fail("'" + name.text + "' is a function name", name);
            for (const Token& other : all_names)
                if (other.text == name.text)
                    fail("duplicate definition of '" + name.text + "' (first at line " + std::to_string(other.line) +
                             ")",
                         name);
            all_names.push_back(name);
        }
        if (head.text == "states") {
            def.state_names = decl.names;
            def.state_defaults = decl.defaults;
            state_tokens = decl.name_tokens;
        } else {
            def.param_names = decl.names;
            def.param_defaults = decl.defaults;
        }
    }
    if (!states_line) fail("missing 'states:' declaration", 1, 1);

    def.derivatives.assign(def.state_names.size(), nullptr);
    std::vector<int> defined_at(def.state_names.size(), 0);
    for (const auto& tokens : lines) {
        const Token& head = tokens.front();
        if (head.kind == TokenKind::End) continue;
        if (is_header(tokens)) continue;
        const std::string state = head.text.substr(1);
        auto it = std::find(def.state_names.begin(), def.state_names.end(), state);
        if (it == def.state_names.end()) fail("unknown identifier '" + state + "' (not a declared state)", head);
        const auto idx = static_cast<std::size_t>(it - def.state_names.begin());
        if (def.derivatives[idx])
            fail("duplicate definition of d" + state + "/dt (first at line " + std::to_string(defined_at[idx]) + ")",
                 head);
        def.derivatives[idx] = ExprParser(tokens, 4, def).parse_full();
        defined_at[idx] = head.line;
    }
    for (std::size_t i = 0; i < def.state_names.size(); ++i)
        if (!def.derivatives[i]) fail("missing derivative for state '" + def.state_names[i] + "'", state_tokens[i]);
    return def;
}

Vector eval_rhs(const ModelDef& def, const Vector& y, const Vector& params, double t) {
    if (static_cast<std::size_t>(y.size()) != def.state_names.size() ||
        static_cast<std::size_t>(params.size()) != def.param_names.size())
        throw PreconditionError("dsl: state or parameter length mismatch");
    Vector out(y.size());
    std::span<const double> ys(y.data(), static_cast<std::size_t>(y.size()));
    std::span<const double> ps(params.data(), static_cast<std::size_t>(params.size()));
    for (Index i = 0; i < y.size(); ++i) out[i] = eval_expr<double>(*def.derivatives[static_cast<std::size_t>(i)], ys, ps, t);
    return out;
}

Matrix jacobian_dual(const ModelDef& def, const Vector& y, const Vector& params, double t) {
    const auto n = static_cast<std::size_t>(y.size());
    if (n != def.state_names.size() || static_cast<std::size_t>(params.size()) != def.param_names.size())
        throw PreconditionError("dsl: state or parameter length mismatch");
    std::vector<Dual> ys(y.data(), y.data() + y.size());
    std::vector<Dual> ps(params.data(), params.data() + params.size());
    Matrix jac(y.size(), y.size());
    for (std::size_t j = 0; j < n; ++j) {
        ys[j].derivative = 1.0;
        for (std::size_t i = 0; i < n; ++i)
            jac(static_cast<Index>(i), static_cast<Index>(j)) =
                eval_expr<Dual>(*def.derivatives[i], ys, ps, Dual(t)).derivative;
        ys[j].derivative = 0.0;
    }
    return jac;
}

ModelSystem to_model(ModelDef def, std::string name) {
    auto shared = std::make_shared<const ModelDef>(std::move(def));
    ModelSystem m;
    m.name = std::move(name);
    m.state_names = shared->state_names;
    m.param_names = shared->param_names;
    m.rhs = [shared](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double t,
                     Eigen::Ref<Vector> dydt) {
        std::span<const double> ys(y.data(), static_cast<std::size_t>(y.size()));
        std::span<const double> ps(p.data(), static_cast<std::size_t>(p.size()));
        for (Index i = 0; i < y.size(); ++i)
            dydt[i] = eval_expr<double>(*shared->derivatives[static_cast<std::size_t>(i)], ys, ps, t);
    };
    m.jacobian = [shared](const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& p, double t,
                          Eigen::Ref<Matrix> j) { j = jacobian_dual(*shared, y, p, t); };
    m.default_initial_state.resize(static_cast<Index>(shared->state_names.size()));
    for (std::size_t i = 0; i < shared->state_defaults.size(); ++i)
        m.default_initial_state[static_cast<Index>(i)] = shared->state_defaults[i].value_or(1.0);
    m.default_params.resize(static_cast<Index>(shared->param_names.size()));
    for (std::size_t i = 0; i < shared->param_defaults.size(); ++i)
        m.default_params[static_cast<Index>(i)] =
            shared->param_defaults[i].value_or(std::numeric_limits<double>::quiet_NaN());
    return m;
}

std::string function_name(Func func) {
    switch (func) {
        case Func::Exp: return "exp";
        case Func::Log: return "log";
        case Func::Sin: return "sin";
        case Func::Cos: return "cos";
        case Func::Tanh: return "tanh";
        case Func::Sqrt: return "sqrt";
        case Func::Abs: return "abs";
    }
    return "?";
}

std::string to_text(const Expr& expr, const ModelDef& def) {
    struct Printer {
        const ModelDef& def;
        std::string operator()(const Constant& c) const { return format_double(c.value); }
        std::string operator()(const StateRef& r) const { return def.state_names[static_cast<std::size_t>(r.index)]; }
        std::string operator()(const ParamRef& r) const { return def.param_names[static_cast<std::size_t>(r.index)]; }
        std::string operator()(const TimeRef&) const { return "t"; }
        std::string operator()(const Negate& n) const { return "(-" + print(*n.operand) + ")"; }
        std::string operator()(const Binary& b) const {
            return "(" + print(*b.lhs) + " " + b.op + " " + print(*b.rhs) + ")";
        }
        std::string operator()(const Call& c) const { return function_name(c.func) + "(" + print(*c.arg) + ")"; }
        std::string print(const Expr& e) const { return std::visit(*this, e.node); }
    };
    return Printer{def}.print(expr);
}

std::string to_text(const ModelDef& def) {
    std::ostringstream out;
    auto declare = [&](const char* head, const std::vector<std::string>& names,
                       const std::vector<std::optional<double>>& defaults) {
        out << head << ':';
        for (std::size_t i = 0; i < names.size(); ++i) {
            out << (i ? ", " : " ") << names[i];
            if (defaults[i]) out << " = " << format_double(*defaults[i]);
        }
        out << '\n';
    };
    declare("states", def.state_names, def.state_defaults);
    if (!def.param_names.empty()) declare("params", def.param_names, def.param_defaults);
    for (std::size_t i = 0; i < def.state_names.size(); ++i)
        out << 'd' << def.state_names[i] << "/dt = " << to_text(*def.derivatives[i], def) << '\n';
    return out.str();
}

bool structurally_equal(const Expr& a, const Expr& b) {
    if (a.node.index() != b.node.index()) return false;
    return std::visit(
        [&](const auto& lhs) -> bool {
            using T = std::decay_t<decltype(lhs)>;
            const auto& rhs = std::get<T>(b.node);
            if constexpr (std::is_same_v<T, Constant>) {
                return lhs.value == rhs.value;
            } else if constexpr (std::is_same_v<T, StateRef> || std::is_same_v<T, ParamRef>) {
                return lhs.index == rhs.index;
            } else if constexpr (std::is_same_v<T, TimeRef>) {
                return true;
            } else if constexpr (std::is_same_v<T, Negate>) {
                return structurally_equal(*lhs.operand, *rhs.operand);
            } else if constexpr (std::is_same_v<T, Binary>) {
                return lhs.op == rhs.op && structurally_equal(*lhs.lhs, *rhs.lhs) &&
                       structurally_equal(*lhs.rhs, *rhs.rhs);
            } else {
                return lhs.func == rhs.func && structurally_equal(*lhs.arg, *rhs.arg);
            }
        },
        a.node);
}

bool structurally_equal(const ModelDef& a, const ModelDef& b) {
    if (a.state_names != b.state_names || a.param_names != b.param_names || a.state_defaults != b.state_defaults ||
        a.param_defaults != b.param_defaults || a.derivatives.size() != b.derivatives.size())
        return false;
    for (std::size_t i = 0; i < a.derivatives.size(); ++i)
        if (!structurally_equal(*a.derivatives[i], *b.derivatives[i])) return false;
    return true;
}

}  // namespace qualdyn::dsl
