#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "ems/errors.hpp"
#include "ems/numerics.hpp"

using namespace ems;

namespace {

// Independent softmax oracle in extended precision.
Vector naive_softmax(const Vector& row) {
    long double z = 0.0L;
    for (double x : row) {
        z += expl(static_cast<long double>(x));
    }
    Vector out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = static_cast<double>(expl(static_cast<long double>(row[i])) / z);
    }
    return out;
}

// Independent cosine oracle in extended precision.
double naive_cosine(const Vector& a, const Vector& b) {
    long double num = 0.0L, na = 0.0L, nb = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += static_cast<long double>(a[i]) * b[i];
        na += static_cast<long double>(a[i]) * a[i];
        nb += static_cast<long double>(b[i]) * b[i];
    }
    return static_cast<double>(num / (sqrtl(na) * sqrtl(nb)));
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("softmax of equal logits is uniform") {
    const Vector out = stable_softmax_row(Vector{0.0, 0.0, 0.0});
    for (double x : out) {
        CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
}

TEST_CASE("softmax survives huge logits via max subtraction") {
    const Vector out = stable_softmax_row(Vector{1000.0, 1000.0});
    CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(std::isfinite(out[0]));
}

TEST_CASE("softmax matches the naive oracle") {
    const Vector row{1.0, 2.0, 3.0};
    const Vector expect = naive_softmax(row);
    const Vector got = stable_softmax_row(row);
    for (std::size_t i = 0; i < row.size(); ++i) {
        CHECK(std::abs(got[i] - expect[i]) < 1e-12);
    }
}

TEST_CASE("softmax sums to one and is permutation equivariant") {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> normal(0.0, 3.0);
    for (int rep = 0; rep < 50; ++rep) {
        Vector row(17);
        for (double& x : row) {
            x = normal(gen);
        }
        const Vector out = stable_softmax_row(row);
        double sum = 0.0;
        for (double x : out) {
            CHECK(x > 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);

        Vector perm_row = row;
        std::reverse(perm_row.begin(), perm_row.end());
        const Vector perm_out = stable_softmax_row(perm_row);
        for (std::size_t i = 0; i < row.size(); ++i) {
            CHECK(perm_out[i] == doctest::Approx(out[row.size() - 1 - i]).epsilon(1e-15));
        }
    }
}

TEST_CASE("softmax rejects an empty row") {
    CHECK_THROWS_AS(stable_softmax_row(Vector{}), std::invalid_argument);
}

TEST_CASE("cosine of a vector with itself is one") {
    const Vector a{0.3, -1.2, 4.0};
    CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("cosine of orthogonal vectors is zero") {
    CHECK(cosine_similarity(Vector{1.0, 0.0}, Vector{0.0, 1.0}) == 0.0);
}

TEST_CASE("cosine matches the extended-precision oracle") {
    const Vector a{1.0, 2.0, 3.0};
    const Vector b{4.0, 5.0, 6.0};
    CHECK(std::abs(cosine_similarity(a, b) - naive_cosine(a, b)) < 1e-12);
}

TEST_CASE("cosine is symmetric and scale invariant") {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
        Vector a(9), b(9);
        for (std::size_t i = 0; i < 9; ++i) {
            a[i] = normal(gen);
            b[i] = normal(gen);
        }
        const double ab = cosine_similarity(a, b);
        CHECK(std::abs(ab - cosine_similarity(b, a)) < 1e-15);
        Vector a2 = a, b2 = b;
        for (double& x : a2) x *= 7.5;
        for (double& x : b2) x *= 0.03;
        CHECK(std::abs(ab - cosine_similarity(a2, b2)) < 1e-12);
        CHECK(ab <= 1.0);
        CHECK(ab >= -1.0);
    }
}

TEST_CASE("cosine rejects zero-norm input") {
    CHECK_THROWS_AS(cosine_similarity(Vector{0.0, 0.0}, Vector{1.0, 0.0}), DegenerateInputError);
    CHECK_THROWS_AS(cosine_similarity(Vector{1.0}, Vector{1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("mean pool with kernel one is the identity") {
    const Vector s{3.0, 1.0, 4.0, 1.0, 5.0};
    CHECK(mean_pool_1d(s, 1) == s);
}

TEST_CASE("mean pool keeps constants fixed") {
    const Vector s(9, 2.5);
    CHECK(mean_pool_1d(s, 5) == s);
    CHECK(mean_pool_1d(mean_pool_1d(s, 5), 5) == s);
}

TEST_CASE("mean pool truncates windows at the edges") {
    const Vector s{0.0, 0.0, 9.0, 0.0, 0.0};
    const Vector expect{0.0, 3.0, 3.0, 3.0, 0.0};
    const Vector got = mean_pool_1d(s, 3);
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-15));
    }
}

TEST_CASE("mean pool rejects bad kernels") {
    CHECK_THROWS_AS(mean_pool_1d(Vector{1.0, 2.0, 3.0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(mean_pool_1d(Vector{1.0, 2.0}, 3), std::invalid_argument);
}

}  // TEST_SUITE
