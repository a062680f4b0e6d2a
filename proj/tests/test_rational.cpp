#include <doctest.h>

#include "cloze/rational.hpp"
#include "support.hpp"

using cloze::BigInt;
using cloze::Rational;
using cloze::Rng;

TEST_CASE("bigint basics") {
    CHECK(BigInt(0).to_string() == "0");
    CHECK(BigInt(-42).to_string() == "-42");
    CHECK((BigInt(1000000000) * BigInt(1000000000)).to_string() == "1000000000000000000");
    CHECK(BigInt::from_decimal("12345678901234567890123456789").to_string() ==
          "12345678901234567890123456789");
    CHECK((BigInt::from_decimal("-5") + BigInt(5)).to_string() == "0");
    CHECK((BigInt(7) - BigInt(10)).to_string() == "-3");
}

TEST_CASE("bigint agrees with long long within range") {
    Rng rng(1234);
    for (int i = 0; i < 3000; ++i) {
        long long a = rng.uniform_int(-1000000, 1000000);
        long long b = rng.uniform_int(-1000000, 1000000);
        CHECK(BigInt(a) + BigInt(b) == BigInt(a + b));
        CHECK(BigInt(a) - BigInt(b) == BigInt(a - b));
        CHECK(BigInt(a) * BigInt(b) == BigInt(a * b));
        if (b != 0) {
            CHECK(BigInt(a) / BigInt(b) == BigInt(a / b));
            CHECK(BigInt(a) % BigInt(b) == BigInt(a % b));
        }
        CHECK((BigInt(a) < BigInt(b)) == (a < b));
    }
}

TEST_CASE("bigint power-of-two ladder") {
    // 2^100, computed independently
    BigInt two(2), p(1);
    for (int i = 0; i < 100; ++i) p = p * two;
    CHECK(p.to_string() == "1267650600228229401496703205376");
    CHECK((p / BigInt::from_decimal("1125899906842624")).to_string() == "1125899906842624");
}

TEST_CASE("bigint divmod is truncated division") {
    BigInt q, r;
    BigInt::divmod(BigInt(-7), BigInt(2), q, r);
    CHECK(q == BigInt(-3));
    CHECK(r == BigInt(-1));
    BigInt::divmod(BigInt(7), BigInt(-2), q, r);
    CHECK(q == BigInt(-3));
    CHECK(r == BigInt(1));
    CHECK_THROWS_AS(BigInt::divmod(BigInt(1), BigInt(0), q, r), std::domain_error);
}

TEST_CASE("rational reduction and arithmetic") {
    CHECK(Rational(BigInt(4), BigInt(6)).to_string() == "2/3");
    CHECK(Rational(BigInt(4), BigInt(-6)).to_string() == "-2/3");
    CHECK((Rational(1) / Rational(3) + Rational(1) / Rational(6)).to_string() == "1/2");
    CHECK((Rational(2) * Rational(BigInt(3), BigInt(4))).to_string() == "3/2");
    CHECK_THROWS_AS(Rational(1) / Rational(0), std::domain_error);
    CHECK(Rational(BigInt(0), BigInt(5)).to_string() == "0");
}

TEST_CASE("rational parsing") {
    CHECK(Rational::parse("1,234").to_string() == "1234");
    CHECK(Rational::parse("1234.0").to_string() == "1234");
    CHECK(Rational::parse("3.50").to_string() == "7/2");
    CHECK(Rational::parse("-0.25").to_string() == "-1/4");
    CHECK(Rational::parse("10/4").to_string() == "5/2");
    CHECK(Rational::parse("+7").to_string() == "7");
    Rational r;
    CHECK_FALSE(Rational::try_parse("", r));
    CHECK_FALSE(Rational::try_parse("abc", r));
    CHECK_FALSE(Rational::try_parse("1/0", r));
    CHECK_FALSE(Rational::try_parse("1.2.3", r));
}

TEST_CASE("rational comparison is exact") {
    CHECK(Rational::parse("0.1") + Rational::parse("0.2") == Rational::parse("0.3"));
    CHECK(Rational::parse("1/3") != Rational::parse("0.3333333333"));
    CHECK(Rational::parse("-1/2") < Rational::parse("1/3"));
}
