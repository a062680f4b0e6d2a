#include "cloze/eqspan.hpp"

#include <algorithm>
#include <cctype>

#include "cloze/common.hpp"

namespace cloze {

std::string to_string(CorpusStyle s) {
    switch (s) {
        case CorpusStyle::gsm8k_annotated: return "gsm8k_annotated";
        case CorpusStyle::math_latex: return "math_latex";
        case CorpusStyle::synthetic: return "synthetic";
    }
    return "?";
}

CorpusStyle corpus_style_from_string(const std::string& s) {
    if (s == "gsm8k_annotated") return CorpusStyle::gsm8k_annotated;
    if (s == "math_latex") return CorpusStyle::math_latex;
    if (s == "synthetic") return CorpusStyle::synthetic;
    throw UsageError("unknown corpus style: " + s);
}

std::string to_string(SpanKind k) {
    switch (k) {
        case SpanKind::annotated: return "annotated";
        case SpanKind::inline_eq: return "inline";
        case SpanKind::latex: return "latex";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// expression parser
// ---------------------------------------------------------------------------

namespace {

class Parser {
public:
    Parser(std::string_view src, const Env* env) : src_(src), env_(env) {}

    Rational parse() {
        Rational v = expr();
        skip_ws();
        if (pos_ != src_.size()) fail_syntax("trailing input");
        return v;
    }

    bool closed() {
        closed_check_ = true;
        all_bound_ = true;
        expr();
        skip_ws();
        if (pos_ != src_.size()) fail_syntax("trailing input");
        return all_bound_;
    }

private:
    Rational expr() {
        Rational v = term();
        for (;;) {
            skip_ws();
            if (peek() == '+') {
                ++pos_;
                v = v + term();
            } else if (peek() == '-') {
                ++pos_;
                v = v - term();
            } else {
                return v;
            }
        }
    }

    Rational term() {
        Rational v = factor();
        for (;;) {
            skip_ws();
            if (peek() == '*') {
                ++pos_;
                v = v * factor();
            } else if (peek() == '/') {
                size_t at = pos_;
                ++pos_;
                Rational d = factor();
                if (d.is_zero()) {
                    if (closed_check_) continue;  // only binding matters here
                    throw ExprException({ExprError::Kind::arithmetic, "division by zero", at});
                }
                v = v / d;
            } else {
                return v;
            }
        }
    }

    Rational factor() {
        skip_ws();
        char c = peek();
        if (c == '(') {
            ++pos_;
            Rational v = expr();
            skip_ws();
            if (peek() != ')') fail_syntax("expected ')'");
            ++pos_;
            return v;
        }
        if (c == '-') {
            ++pos_;
            return -factor();
        }
        if (c == '+') {
            ++pos_;
            return factor();
        }
        if (std::isdigit(static_cast<unsigned char>(c))) return number();
        if (std::isalpha(static_cast<unsigned char>(c))) return identifier();
        fail_syntax("expected number, identifier or '('");
        return Rational();  // unreachable
    }

    Rational number() {
        size_t start = pos_;
        bool seen_dot = false;
        while (pos_ < src_.size()) {
            char c = src_[pos_];
            if (std::isdigit(static_cast<unsigned char>(c))) {
                ++pos_;
            } else if (c == ',' && pos_ + 1 < src_.size() &&
                       std::isdigit(static_cast<unsigned char>(src_[pos_ + 1]))) {
                ++pos_;  // thousands separator
            } else if (c == '.' && !seen_dot && pos_ + 1 < src_.size() &&
                       std::isdigit(static_cast<unsigned char>(src_[pos_ + 1]))) {
                seen_dot = true;
                ++pos_;
            } else {
                break;
            }
        }
        Rational r;
        if (!Rational::try_parse(src_.substr(start, pos_ - start), r)) fail_syntax("bad numeral");
        return r;
    }

    Rational identifier() {
        size_t start = pos_;
        ++pos_;  // leading letter
        if (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
        std::string name(src_.substr(start, pos_ - start));
        if (env_) {
            auto it = env_->find(name);
            if (it != env_->end()) return it->second;
        }
        if (closed_check_) {
            all_bound_ = false;
            return Rational(1);  // placeholder, value unused
        }
        throw ExprException({ExprError::Kind::name, "unbound identifier '" + name + "'", start});
    }

    char peek() const { return pos_ < src_.size() ? src_[pos_] : '\0'; }

    void skip_ws() {
        while (pos_ < src_.size() && (src_[pos_] == ' ' || src_[pos_] == '\t')) ++pos_;
    }

    [[noreturn]] void fail_syntax(const std::string& what) {
        throw ExprException({ExprError::Kind::syntax, what + " at byte " + std::to_string(pos_), pos_});
    }

    std::string_view src_;
    const Env* env_;
    size_t pos_ = 0;
    bool closed_check_ = false;
    bool all_bound_ = true;
};

}  // namespace

Rational eval_expression(std::string_view expr, const Env* env) {
    return Parser(expr, env).parse();
}

bool expression_is_closed(std::string_view expr, const Env* env) {
    return Parser(expr, env).closed();
}

// ---------------------------------------------------------------------------
// span detection
// ---------------------------------------------------------------------------

namespace {

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)); }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Scans a number at `i`: digits with optional comma separators and decimal
// point. Returns end offset, or `i` if no number starts here.
size_t scan_number(std::string_view s, size_t i) {
    size_t p = i;
    bool dot = false;
    bool any = false;
    while (p < s.size()) {
        char c = s[p];
        if (is_digit(c)) {
            any = true;
            ++p;
        } else if (c == ',' && any && p + 1 < s.size() && is_digit(s[p + 1])) {
            ++p;
        } else if (c == '.' && !dot && any && p + 1 < s.size() && is_digit(s[p + 1])) {
            dot = true;
            ++p;
        } else {
            break;
        }
    }
    return any ? p : i;
}

// identifier: single letter, or letter+digit; must not continue as a word
size_t scan_ident(std::string_view s, size_t i) {
    if (i >= s.size() || !is_ident_start(s[i])) return i;
    size_t p = i + 1;
    if (p < s.size() && is_digit(s[p])) ++p;
    // reject when embedded in a longer word ("apples" must not yield "a")
    if (p < s.size() && (std::isalnum(static_cast<unsigned char>(s[p])))) return i;
    if (i > 0 && std::isalnum(static_cast<unsigned char>(s[i - 1]))) return i;
    return p;
}

size_t scan_operand(std::string_view s, size_t i) {
    size_t p = scan_number(s, i);
    if (p > i) return p;
    return scan_ident(s, i);
}

bool is_op(char c) { return c == '+' || c == '-' || c == '*' || c == '/'; }

// at most one space on each side of an operator / equals sign
size_t skip_pad(std::string_view s, size_t i) {
    return (i < s.size() && s[i] == ' ') ? i + 1 : i;
}

// Tries to match `<operand> (op <operand>)* = <number>` starting exactly at
// `i`. Returns the end offset of the longest match, or 0 if none.
size_t match_inline(std::string_view s, size_t i) {
    size_t p = scan_operand(s, i);
    if (p == i) return 0;
    for (;;) {
        size_t q = skip_pad(s, p);
        if (q < s.size() && is_op(s[q])) {
            size_t r = skip_pad(s, q + 1);
            size_t e = scan_operand(s, r);
            if (e == r) break;
            p = e;
            continue;
        }
        break;
    }
    // require '= <number>' tail
    size_t q = skip_pad(s, p);
    if (q >= s.size() || s[q] != '=') return 0;
    size_t r = skip_pad(s, q + 1);
    size_t e = scan_number(s, r);
    if (e == r) return 0;
    return e;
}

EquationSpan make_inline_span(std::string_view s, size_t start, size_t end) {
    std::string_view body = s.substr(start, end - start);
    size_t eq = body.rfind('=');
    EquationSpan sp;
    sp.start = start;
    sp.end = end;
    sp.kind = SpanKind::inline_eq;
    sp.lhs = trim(body.substr(0, eq));
    sp.rhs = trim(body.substr(eq + 1));
    return sp;
}

}  // namespace

std::vector<EquationSpan> detect_spans(std::string_view solution, CorpusStyle style) {
    std::vector<EquationSpan> spans;

    // 1) annotated `<<..=..>>`, unconditional
    size_t i = 0;
    while (i + 1 < solution.size()) {
        if (solution[i] == '<' && solution[i + 1] == '<') {
            size_t close = solution.find(">>", i + 2);
            if (close == std::string_view::npos) break;
            std::string_view body = solution.substr(i + 2, close - (i + 2));
            size_t eq = body.find('=');
            if (eq != std::string_view::npos && body.find("<<") == std::string_view::npos) {
                EquationSpan sp;
                sp.start = i;
                sp.end = close + 2;
                sp.kind = SpanKind::annotated;
                sp.lhs = trim(body.substr(0, eq));
                sp.rhs = trim(body.substr(eq + 1));
                spans.push_back(sp);
                i = close + 2;
                continue;
            }
        }
        ++i;
    }

    auto overlaps_existing = [&spans](size_t s, size_t e) {
        for (const auto& sp : spans) {
            if (s < sp.end && sp.start < e) return true;
        }
        return false;
    };

    // 2) style-dependent secondary candidates
    if (style == CorpusStyle::gsm8k_annotated || style == CorpusStyle::synthetic) {
        size_t p = 0;
        while (p < solution.size()) {
            size_t end = match_inline(solution, p);
            if (end > 0 && !overlaps_existing(p, end)) {
                spans.push_back(make_inline_span(solution, p, end));
                p = end;  // leftmost-longest, then continue after
            } else {
                ++p;
            }
        }
    } else if (style == CorpusStyle::math_latex) {
        size_t p = 0;
        while (p < solution.size()) {
            if (solution[p] == '$') {
                size_t close = solution.find('$', p + 1);
                if (close == std::string_view::npos) break;
                std::string_view body = solution.substr(p + 1, close - (p + 1));
                size_t eq = body.find('=');
                if (eq != std::string_view::npos && !overlaps_existing(p, close + 1)) {
                    EquationSpan sp;
                    sp.start = p;
                    sp.end = close + 1;
                    sp.kind = SpanKind::latex;
                    sp.lhs = trim(body.substr(0, eq));
                    sp.rhs = trim(body.substr(eq + 1));
                    spans.push_back(sp);
                }
                p = close + 1;
            } else {
                ++p;
            }
        }
    }

    std::sort(spans.begin(), spans.end(),
              [](const EquationSpan& a, const EquationSpan& b) { return a.start < b.start; });
    return spans;
}

std::vector<SpanVerdict> verify_spans(std::string_view /*solution*/, const std::vector<EquationSpan>& spans,
                                      const Env* env) {
    std::vector<SpanVerdict> out;
    out.reserve(spans.size());
    for (const auto& sp : spans) {
        SpanVerdict v;
        bool closed = false;
        try {
            closed = expression_is_closed(sp.lhs, env);
        } catch (const ExprException& e) {
            v.state = SpanVerdict::State::unverifiable;
            v.detail = e.error.message;
            out.push_back(v);
            continue;
        }
        if (!closed) {
            v.state = SpanVerdict::State::unverifiable;
            v.detail = "unbound identifier";
            out.push_back(v);
            continue;
        }
        Rational rhs;
        if (!Rational::try_parse(trim(sp.rhs), rhs)) {
            v.state = SpanVerdict::State::unverifiable;
            v.detail = "rhs is not a numeral";
            out.push_back(v);
            continue;
        }
        try {
            Rational lhs = eval_expression(sp.lhs, env);
            if (lhs == rhs) {
                v.state = SpanVerdict::State::verified_true;
                v.detail = lhs.to_string();
            } else {
                v.state = SpanVerdict::State::verified_false;
                v.detail = lhs.to_string() + " != " + rhs.to_string();
            }
        } catch (const ExprException& e) {
            v.state = SpanVerdict::State::unverifiable;
            v.detail = e.error.message;
        }
        out.push_back(v);
    }
    return out;
}

std::string span_dump_line(const EquationSpan& s) {
    return std::to_string(s.start) + "\t" + std::to_string(s.end) + "\t" + to_string(s.kind) + "\t" +
           s.lhs + "\t" + s.rhs;
}

}  // namespace cloze
