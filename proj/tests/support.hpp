#pragma once

// Test-only oracles, deliberately independent of the library code paths they
// check: a shunting-yard/postfix expression evaluator over reduced __int128
// fractions (vs. the library's recursive descent over BigInt rationals), a
// random expression generator, and the sentinel splice oracle for infilling
// views.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cloze/common.hpp"
#include "cloze/tokenizer.hpp"
#include "cloze/views.hpp"

namespace oracle {

struct Frac {
    __int128 num = 0;
    __int128 den = 1;
};

inline __int128 gcd128(__int128 a, __int128 b) {
    if (a < 0) a = -a;
    if (b < 0) b = -b;
    while (b) {
        __int128 t = a % b;
        a = b;
        b = t;
    }
    return a;
}

inline Frac reduce(Frac f) {
    if (f.den == 0) throw std::domain_error("oracle: zero denominator");
    if (f.den < 0) {
        f.num = -f.num;
        f.den = -f.den;
    }
    __int128 g = gcd128(f.num, f.den);
    if (g > 1) {
        f.num /= g;
        f.den /= g;
    }
    if (f.num == 0) f.den = 1;
    return f;
}

inline Frac fadd(Frac a, Frac b) { return reduce({a.num * b.den + b.num * a.den, a.den * b.den}); }
inline Frac fsub(Frac a, Frac b) { return reduce({a.num * b.den - b.num * a.den, a.den * b.den}); }
inline Frac fmul(Frac a, Frac b) { return reduce({a.num * b.num, a.den * b.den}); }
inline Frac fdiv(Frac a, Frac b) {
    if (b.num == 0) throw std::domain_error("oracle: division by zero");
    return reduce({a.num * b.den, a.den * b.num});
}

inline std::string i128_to_string(__int128 v) {
    if (v == 0) return "0";
    bool neg = v < 0;
    unsigned __int128 m = neg ? static_cast<unsigned __int128>(-v) : static_cast<unsigned __int128>(v);
    std::string s;
    while (m) {
        s.push_back(static_cast<char>('0' + static_cast<int>(m % 10)));
        m /= 10;
    }
    if (neg) s.push_back('-');
    return std::string(s.rbegin(), s.rend());
}

inline std::string frac_to_string(Frac f) {
    f = reduce(f);
    if (f.den == 1) return i128_to_string(f.num);
    return i128_to_string(f.num) + "/" + i128_to_string(f.den);
}

// Shunting-yard to postfix, then stack evaluation.
inline Frac eval_postfix(const std::string& expr) {
    struct Tok {
        char op = 0;  // 0 for number
        Frac val;
    };
    std::vector<Tok> output;
    std::vector<char> ops;
    auto prec = [](char c) { return (c == '*' || c == '/') ? 2 : 1; };
    size_t i = 0;
    while (i < expr.size()) {
        char c = expr[i];
        if (c == ' ') {
            ++i;
        } else if ((c >= '0' && c <= '9')) {
            __int128 ipart = 0, fpart = 0, scale = 1;
            while (i < expr.size() && ((expr[i] >= '0' && expr[i] <= '9') || expr[i] == ',')) {
                if (expr[i] != ',') ipart = ipart * 10 + (expr[i] - '0');
                ++i;
            }
            if (i < expr.size() && expr[i] == '.') {
                ++i;
                while (i < expr.size() && expr[i] >= '0' && expr[i] <= '9') {
                    fpart = fpart * 10 + (expr[i] - '0');
                    scale *= 10;
                    ++i;
                }
            }
            output.push_back({0, reduce({ipart * scale + fpart, scale})});
        } else if (c == '(') {
            ops.push_back(c);
            ++i;
        } else if (c == ')') {
            while (!ops.empty() && ops.back() != '(') {
                output.push_back({ops.back(), {}});
                ops.pop_back();
            }
            if (ops.empty()) throw std::runtime_error("oracle: unbalanced parens");
            ops.pop_back();
            ++i;
        } else if (c == '+' || c == '-' || c == '*' || c == '/') {
            while (!ops.empty() && ops.back() != '(' && prec(ops.back()) >= prec(c)) {
                output.push_back({ops.back(), {}});
                ops.pop_back();
            }
            ops.push_back(c);
            ++i;
        } else {
            throw std::runtime_error(std::string("oracle: unexpected char '") + c + "'");
        }
    }
    while (!ops.empty()) {
        if (ops.back() == '(') throw std::runtime_error("oracle: unbalanced parens");
        output.push_back({ops.back(), {}});
        ops.pop_back();
    }
    std::vector<Frac> stack;
    for (const auto& t : output) {
        if (t.op == 0) {
            stack.push_back(t.val);
            continue;
        }
        if (stack.size() < 2) throw std::runtime_error("oracle: stack underflow");
        Frac b = stack.back();
        stack.pop_back();
        Frac a = stack.back();
        stack.pop_back();
        switch (t.op) {
            case '+': stack.push_back(fadd(a, b)); break;
            case '-': stack.push_back(fsub(a, b)); break;
            case '*': stack.push_back(fmul(a, b)); break;
            case '/': stack.push_back(fdiv(a, b)); break;
        }
    }
    if (stack.size() != 1) throw std::runtime_error("oracle: bad expression");
    return stack.back();
}

// Random expression of the given depth; children always parenthesized so the
// rendering is unambiguous regardless of precedence.
inline std::string random_expr(cloze::Rng& rng, int depth) {
    if (depth == 0 || rng.bernoulli(0.25)) {
        long long v = rng.uniform_int(0, 200);
        if (rng.bernoulli(0.2)) {
            return std::to_string(v) + "." + std::to_string(rng.uniform_int(0, 99));
        }
        return std::to_string(v);
    }
    const char* ops = "+-*/";
    char op = ops[rng.below(4)];
    std::string pad = rng.bernoulli(0.5) ? " " : "";
    std::string lhs = random_expr(rng, depth - 1);
    std::string rhs = random_expr(rng, depth - 1);
    auto wrap = [&rng](const std::string& s) {
        bool atom = s.find_first_of("+-*/ ") == std::string::npos;
        return (!atom || rng.bernoulli(0.2)) ? "(" + s + ")" : s;
    };
    return wrap(lhs) + pad + op + pad + wrap(rhs);
}

// ---------------------------------------------------------------------------
// splice oracle for infilling views
// ---------------------------------------------------------------------------

struct SpliceResult {
    bool ok = false;
    std::string error;
    std::string reconstructed;
};

// Reconstructs the original solution from an infilling view by replacing
// sentinel_i in the masked segment with target group i, then compares with
// the record. Also enforces the sentinel discipline (each sentinel exactly
// once on each side, in matching left-to-right order).
inline SpliceResult splice_roundtrip(const cloze::TrainingView& view, const cloze::Vocab& vocab,
                                     const cloze::ProblemRecord& record) {
    using cloze::TokenId;
    SpliceResult r;
    const auto& rsv = vocab.reserved();
    const auto& ids = view.input_ids;
    auto fail = [&r](const std::string& msg) {
        r.error = msg;
        return r;
    };

    if (ids.empty() || ids.front() != rsv.bos_id) return fail("missing BOS");
    if (ids.back() != rsv.eos_id) return fail("missing trailing EOS");
    size_t sep = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == rsv.sep_id) {
            sep = i;
            break;
        }
    }
    if (sep == 0) return fail("missing SEP");

    const std::vector<TokenId> q = vocab.encode(record.question);
    if (sep < 1 + q.size()) return fail("prefix shorter than question");
    for (size_t i = 0; i < q.size(); ++i) {
        if (ids[1 + i] != q[i]) return fail("question tokens differ at " + std::to_string(i));
    }

    auto sentinel_index = [&rsv](TokenId id) -> int {
        for (size_t k = 0; k < rsv.sentinel_ids.size(); ++k) {
            if (rsv.sentinel_ids[k] == id) return static_cast<int>(k);
        }
        return -1;
    };

    // target groups after SEP
    std::vector<std::vector<TokenId>> groups;
    for (size_t i = sep + 1; i + 1 < ids.size();) {
        int s = sentinel_index(ids[i]);
        if (s != static_cast<int>(groups.size())) return fail("target sentinels out of order");
        std::vector<TokenId> group;
        ++i;
        while (i + 1 < ids.size() && sentinel_index(ids[i]) < 0) {
            group.push_back(ids[i]);
            ++i;
        }
        groups.push_back(std::move(group));
    }

    // splice into the masked solution segment
    std::vector<TokenId> spliced;
    int next_expected = 0;
    for (size_t i = 1 + q.size(); i < sep; ++i) {
        int s = sentinel_index(ids[i]);
        if (s >= 0) {
            if (s != next_expected) return fail("masked-segment sentinels out of order");
            if (s >= static_cast<int>(groups.size())) return fail("sentinel without target group");
            spliced.insert(spliced.end(), groups[static_cast<size_t>(s)].begin(),
                           groups[static_cast<size_t>(s)].end());
            ++next_expected;
        } else {
            spliced.push_back(ids[i]);
        }
    }
    if (next_expected != static_cast<int>(groups.size())) return fail("unused target groups");

    r.reconstructed = vocab.decode(spliced);
    if (r.reconstructed != record.solution) {
        r.error = "reconstruction differs from the original solution";
        return r;
    }
    r.ok = true;
    return r;
}

}  // namespace oracle
