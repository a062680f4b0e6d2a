#pragma once

// Equation-span detection inside solution text (the mask targets of the
// infilling objective) and exact evaluation of the arithmetic expressions
// they contain.

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cloze/rational.hpp"

namespace cloze {

enum class CorpusStyle { gsm8k_annotated, math_latex, synthetic };

std::string to_string(CorpusStyle s);
CorpusStyle corpus_style_from_string(const std::string& s);

enum class SpanKind { annotated, inline_eq, latex };

std::string to_string(SpanKind k);

struct EquationSpan {
    size_t start = 0;  // byte offset, inclusive; annotated spans include "<<"
    size_t end = 0;    // byte offset, exclusive; annotated spans include ">>"
    std::string lhs;
    std::string rhs;
    SpanKind kind = SpanKind::annotated;
};

// Expression evaluation errors, kept distinguishable for callers.
struct ExprError {
    enum class Kind { syntax, name, arithmetic } kind;
    std::string message;
    size_t position = 0;  // byte offset for syntax errors
};

class ExprException : public std::runtime_error {
public:
    explicit ExprException(ExprError e) : std::runtime_error(e.message), error(std::move(e)) {}
    ExprError error;
};

using Env = std::map<std::string, Rational>;

// Grammar: expr := term (('+'|'-') term)* ; term := factor (('*'|'/') factor)* ;
// factor := number | ident | '(' expr ')' | '-' factor.
// Numbers may contain thousands-separator commas and a decimal point.
// Identifiers are a single letter or a letter followed by one digit.
Rational eval_expression(std::string_view expr, const Env* env = nullptr);

// True if every identifier in expr is bound (or there are none); used to
// decide verifiability without evaluating.
bool expression_is_closed(std::string_view expr, const Env* env = nullptr);

// Detection precedence: annotated `<<..=..>>` first, then style-dependent
// inline / latex candidates that do not overlap a higher-precedence span;
// ties resolved leftmost-longest. Output is disjoint and sorted by start.
std::vector<EquationSpan> detect_spans(std::string_view solution, CorpusStyle style);

struct SpanVerdict {
    enum class State { verified_true, verified_false, unverifiable } state;
    std::string detail;  // evaluated value or reason
};

std::vector<SpanVerdict> verify_spans(std::string_view solution, const std::vector<EquationSpan>& spans,
                                      const Env* env = nullptr);

// Tab-separated dump line per span: start, end, kind, lhs, rhs.
std::string span_dump_line(const EquationSpan& s);

}  // namespace cloze
