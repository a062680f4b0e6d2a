#pragma once

// Exact arbitrary-precision rational arithmetic. This is the backbone for
// equation verification, synthetic answer computation, and exact-match
// scoring: no floating point anywhere on an answer path.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cloze {

// Sign-magnitude big integer, base 2^32 limbs (little-endian, normalized:
// no trailing zero limbs, zero has empty limbs and sign +1).
class BigInt {
public:
    BigInt() = default;
    BigInt(long long v) {  // NOLINT: implicit by design, mirrors int literals
        if (v < 0) {
            sign_ = -1;
            // careful with LLONG_MIN
            unsigned long long m = ~static_cast<unsigned long long>(v) + 1ull;
            set_u64(m);
        } else {
            set_u64(static_cast<unsigned long long>(v));
        }
    }

    static BigInt from_decimal(std::string_view s) {
        BigInt r;
        size_t i = 0;
        int sign = 1;
        if (i < s.size() && (s[i] == '+' || s[i] == '-')) {
            if (s[i] == '-') sign = -1;
            ++i;
        }
        if (i >= s.size()) throw std::invalid_argument("BigInt: empty numeral");
        for (; i < s.size(); ++i) {
            if (s[i] < '0' || s[i] > '9') throw std::invalid_argument("BigInt: bad digit in numeral");
            r.mul_small(10);
            r.add_small(static_cast<uint32_t>(s[i] - '0'));
        }
        r.sign_ = r.is_zero() ? 1 : sign;
        return r;
    }

    bool is_zero() const { return limbs_.empty(); }
    int sign() const { return is_zero() ? 0 : sign_; }

    BigInt operator-() const {
        BigInt r = *this;
        if (!r.is_zero()) r.sign_ = -r.sign_;
        return r;
    }

    BigInt abs() const {
        BigInt r = *this;
        r.sign_ = 1;
        return r;
    }

    friend BigInt operator+(const BigInt& a, const BigInt& b) {
        if (a.sign_ == b.sign_) {
            BigInt r;
            r.limbs_ = add_mag(a.limbs_, b.limbs_);
            r.sign_ = r.is_zero() ? 1 : a.sign_;
            return r;
        }
        int c = cmp_mag(a.limbs_, b.limbs_);
        if (c == 0) return BigInt();
        BigInt r;
        if (c > 0) {
            r.limbs_ = sub_mag(a.limbs_, b.limbs_);
            r.sign_ = a.sign_;
        } else {
            r.limbs_ = sub_mag(b.limbs_, a.limbs_);
            r.sign_ = b.sign_;
        }
        if (r.is_zero()) r.sign_ = 1;
        return r;
    }

    friend BigInt operator-(const BigInt& a, const BigInt& b) { return a + (-b); }

    friend BigInt operator*(const BigInt& a, const BigInt& b) {
        if (a.is_zero() || b.is_zero()) return BigInt();
        BigInt r;
        r.limbs_.assign(a.limbs_.size() + b.limbs_.size(), 0);
        for (size_t i = 0; i < a.limbs_.size(); ++i) {
            uint64_t carry = 0;
            for (size_t j = 0; j < b.limbs_.size(); ++j) {
                uint64_t cur = static_cast<uint64_t>(a.limbs_[i]) * b.limbs_[j] + r.limbs_[i + j] + carry;
                r.limbs_[i + j] = static_cast<uint32_t>(cur);
                carry = cur >> 32;
            }
            r.limbs_[i + b.limbs_.size()] += static_cast<uint32_t>(carry);
        }
        r.normalize();
        r.sign_ = (a.sign_ == b.sign_) ? 1 : -1;
        return r;
    }

    // Truncated division (C semantics): quotient rounds toward zero and the
    // remainder carries the dividend's sign.
    static void divmod(const BigInt& a, const BigInt& b, BigInt& q, BigInt& r) {
        if (b.is_zero()) throw std::domain_error("BigInt: division by zero");
        int c = cmp_mag(a.limbs_, b.limbs_);
        if (c < 0) {
            q = BigInt();
            r = a;
            return;
        }
        // binary shift-and-subtract on magnitudes
        BigInt rem, quo;
        quo.limbs_.assign(a.limbs_.size(), 0);
        for (size_t bit = a.limbs_.size() * 32; bit-- > 0;) {
            rem.shl1();
            if (a.bit(bit)) rem.set_bit0();
            if (cmp_mag(rem.limbs_, b.limbs_) >= 0) {
                rem.limbs_ = sub_mag(rem.limbs_, b.limbs_);
                quo.limbs_[bit / 32] |= (1u << (bit % 32));
            }
        }
        quo.normalize();
        rem.normalize();
        quo.sign_ = quo.is_zero() ? 1 : (a.sign_ == b.sign_ ? 1 : -1);
        rem.sign_ = rem.is_zero() ? 1 : a.sign_;
        q = quo;
        r = rem;
    }

    friend BigInt operator/(const BigInt& a, const BigInt& b) {
        BigInt q, r;
        divmod(a, b, q, r);
        return q;
    }

    friend BigInt operator%(const BigInt& a, const BigInt& b) {
        BigInt q, r;
        divmod(a, b, q, r);
        return r;
    }

    friend bool operator==(const BigInt& a, const BigInt& b) {
        return a.sign() == b.sign() && a.limbs_ == b.limbs_;
    }
    friend bool operator!=(const BigInt& a, const BigInt& b) { return !(a == b); }
    friend bool operator<(const BigInt& a, const BigInt& b) {
        if (a.sign() != b.sign()) return a.sign() < b.sign();
        int c = cmp_mag(a.limbs_, b.limbs_);
        return a.sign() >= 0 ? c < 0 : c > 0;
    }
    friend bool operator>(const BigInt& a, const BigInt& b) { return b < a; }
    friend bool operator<=(const BigInt& a, const BigInt& b) { return !(b < a); }
    friend bool operator>=(const BigInt& a, const BigInt& b) { return !(a < b); }

    static BigInt gcd(BigInt a, BigInt b) {
        a.sign_ = 1;
        b.sign_ = 1;
        while (!b.is_zero()) {
            BigInt q, r;
            divmod(a, b, q, r);
            a = b;
            b = r;
        }
        return a;
    }

    std::string to_string() const {
        if (is_zero()) return "0";
        // repeated division by 1e9, cheap at the magnitudes we see
        std::vector<uint32_t> tmp = limbs_;
        std::string out;
        while (!tmp.empty()) {
            uint64_t rem = 0;
            for (size_t i = tmp.size(); i-- > 0;) {
                uint64_t cur = (rem << 32) | tmp[i];
                tmp[i] = static_cast<uint32_t>(cur / 1000000000ull);
                rem = cur % 1000000000ull;
            }
            while (!tmp.empty() && tmp.back() == 0) tmp.pop_back();
            char buf[10];
            for (int d = 0; d < 9; ++d) {
                buf[d] = static_cast<char>('0' + rem % 10);
                rem /= 10;
            }
            out.append(buf, 9);
        }
        while (out.size() > 1 && out.back() == '0') out.pop_back();
        if (sign_ < 0) out.push_back('-');
        std::reverse(out.begin(), out.end());
        return out;
    }

    // Best-effort conversion for small values; throws when out of range.
    long long to_ll() const {
        if (limbs_.size() > 2) throw std::overflow_error("BigInt: to_ll overflow");
        unsigned long long m = 0;
        for (size_t i = limbs_.size(); i-- > 0;) m = (m << 32) | limbs_[i];
        if (sign_ >= 0) {
            if (m > 0x7fffffffffffffffull) throw std::overflow_error("BigInt: to_ll overflow");
            return static_cast<long long>(m);
        }
        if (m > 0x8000000000000000ull) throw std::overflow_error("BigInt: to_ll overflow");
        return -static_cast<long long>(m - 1) - 1;
    }

private:
    void set_u64(unsigned long long v) {
        limbs_.clear();
        while (v) {
            limbs_.push_back(static_cast<uint32_t>(v));
            v >>= 32;
        }
    }

    void normalize() {
        while (!limbs_.empty() && limbs_.back() == 0) limbs_.pop_back();
        if (limbs_.empty()) sign_ = 1;
    }

    bool bit(size_t i) const {
        size_t limb = i / 32;
        if (limb >= limbs_.size()) return false;
        return (limbs_[limb] >> (i % 32)) & 1u;
    }

    void shl1() {
        uint32_t carry = 0;
        for (auto& l : limbs_) {
            uint32_t nc = l >> 31;
            l = (l << 1) | carry;
            carry = nc;
        }
        if (carry) limbs_.push_back(carry);
    }

    void set_bit0() {
        if (limbs_.empty()) limbs_.push_back(0);
        limbs_[0] |= 1u;
    }

    void mul_small(uint32_t m) {
        uint64_t carry = 0;
        for (auto& l : limbs_) {
            uint64_t cur = static_cast<uint64_t>(l) * m + carry;
            l = static_cast<uint32_t>(cur);
            carry = cur >> 32;
        }
        while (carry) {
            limbs_.push_back(static_cast<uint32_t>(carry));
            carry >>= 32;
        }
        normalize();
    }

    void add_small(uint32_t a) {
        uint64_t carry = a;
        for (size_t i = 0; i < limbs_.size() && carry; ++i) {
            uint64_t cur = limbs_[i] + carry;
            limbs_[i] = static_cast<uint32_t>(cur);
            carry = cur >> 32;
        }
        if (carry) limbs_.push_back(static_cast<uint32_t>(carry));
    }

    static int cmp_mag(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
        if (a.size() != b.size()) return a.size() < b.size() ? -1 : 1;
        for (size_t i = a.size(); i-- > 0;) {
            if (a[i] != b[i]) return a[i] < b[i] ? -1 : 1;
        }
        return 0;
    }

    static std::vector<uint32_t> add_mag(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
        std::vector<uint32_t> r(std::max(a.size(), b.size()) + 1, 0);
        uint64_t carry = 0;
        for (size_t i = 0; i < r.size(); ++i) {
            uint64_t cur = carry;
            if (i < a.size()) cur += a[i];
            if (i < b.size()) cur += b[i];
            r[i] = static_cast<uint32_t>(cur);
            carry = cur >> 32;
        }
        while (!r.empty() && r.back() == 0) r.pop_back();
        return r;
    }

    // requires |a| >= |b|
    static std::vector<uint32_t> sub_mag(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
        std::vector<uint32_t> r = a;
        int64_t borrow = 0;
        for (size_t i = 0; i < r.size(); ++i) {
            int64_t cur = static_cast<int64_t>(r[i]) - borrow - (i < b.size() ? b[i] : 0);
            if (cur < 0) {
                cur += (1ll << 32);
                borrow = 1;
            } else {
                borrow = 0;
            }
            r[i] = static_cast<uint32_t>(cur);
        }
        while (!r.empty() && r.back() == 0) r.pop_back();
        return r;
    }

    std::vector<uint32_t> limbs_;
    int sign_ = 1;
};

// Rational in lowest terms, denominator > 0.
class Rational {
public:
    Rational() : num_(0), den_(1) {}
    Rational(long long v) : num_(v), den_(1) {}  // NOLINT: implicit by design
    Rational(BigInt num, BigInt den) : num_(std::move(num)), den_(std::move(den)) { reduce(); }

    // Parses "123", "-4", "3.50", "1/2". Commas as thousands separators are
    // accepted and stripped.
    static Rational parse(std::string_view s);
    static bool try_parse(std::string_view s, Rational& out);

    const BigInt& num() const { return num_; }
    const BigInt& den() const { return den_; }

    bool is_integer() const { return den_ == BigInt(1); }
    bool is_zero() const { return num_.is_zero(); }
    bool is_positive() const { return num_.sign() > 0; }

    friend Rational operator+(const Rational& a, const Rational& b) {
        return Rational(a.num_ * b.den_ + b.num_ * a.den_, a.den_ * b.den_);
    }
    friend Rational operator-(const Rational& a, const Rational& b) {
        return Rational(a.num_ * b.den_ - b.num_ * a.den_, a.den_ * b.den_);
    }
    friend Rational operator*(const Rational& a, const Rational& b) {
        return Rational(a.num_ * b.num_, a.den_ * b.den_);
    }
    friend Rational operator/(const Rational& a, const Rational& b) {
        if (b.num_.is_zero()) throw std::domain_error("Rational: division by zero");
        return Rational(a.num_ * b.den_, a.den_ * b.num_);
    }
    Rational operator-() const {
        Rational r = *this;
        r.num_ = -r.num_;
        return r;
    }

    friend bool operator==(const Rational& a, const Rational& b) {
        return a.num_ == b.num_ && a.den_ == b.den_;
    }
    friend bool operator!=(const Rational& a, const Rational& b) { return !(a == b); }
    friend bool operator<(const Rational& a, const Rational& b) {
        return a.num_ * b.den_ < b.num_ * a.den_;
    }

    // "24", "-7", "10/3"
    std::string to_string() const {
        if (is_integer()) return num_.to_string();
        return num_.to_string() + "/" + den_.to_string();
    }

private:
    void reduce() {
        if (den_.is_zero()) throw std::domain_error("Rational: zero denominator");
        if (den_.sign() < 0) {
            num_ = -num_;
            den_ = -den_;
        }
        if (num_.is_zero()) {
            den_ = BigInt(1);
            return;
        }
        BigInt g = BigInt::gcd(num_, den_);
        num_ = num_ / g;
        den_ = den_ / g;
    }

    BigInt num_;
    BigInt den_;  // > 0
};

inline bool Rational::try_parse(std::string_view raw, Rational& out) {
    std::string s;
    s.reserve(raw.size());
    for (char c : raw) {
        if (c == ',') continue;  // thousands separator
        s.push_back(c);
    }
    if (s.empty()) return false;
    size_t slash = s.find('/');
    try {
        if (slash != std::string::npos) {
            if (slash == 0 || slash + 1 >= s.size()) return false;
            BigInt n = BigInt::from_decimal(std::string_view(s).substr(0, slash));
            BigInt d = BigInt::from_decimal(std::string_view(s).substr(slash + 1));
            if (d.is_zero()) return false;
            out = Rational(n, d);
            return true;
        }
        size_t dot = s.find('.');
        if (dot == std::string::npos) {
            out = Rational(BigInt::from_decimal(s), BigInt(1));
            return true;
        }
        std::string intpart = s.substr(0, dot);
        std::string frac = s.substr(dot + 1);
        if (frac.empty() && (intpart.empty() || intpart == "+" || intpart == "-")) return false;
        for (char c : frac) {
            if (c < '0' || c > '9') return false;
        }
        bool neg = !intpart.empty() && intpart[0] == '-';
        if (intpart.empty() || intpart == "+" || intpart == "-") intpart += "0";
        BigInt ip = BigInt::from_decimal(intpart);
        BigInt scale(1);
        BigInt fp(0);
        for (char c : frac) {
            fp = fp * BigInt(10) + BigInt(c - '0');
            scale = scale * BigInt(10);
        }
        BigInt n = ip.abs() * scale + fp;
        if (neg || ip.sign() < 0) n = -n;
        out = Rational(n, scale);
        return true;
    } catch (const std::invalid_argument&) {
        return false;
    }
}

inline Rational Rational::parse(std::string_view s) {
    Rational r;
    if (!try_parse(s, r)) throw std::invalid_argument("Rational: cannot parse '" + std::string(s) + "'");
    return r;
}

}  // namespace cloze
