#include <doctest.h>

#include <cmath>

#include "mpum/linalg.hpp"
#include "mpum/rng.hpp"

using namespace mpum;

TEST_CASE("solve_linear recovers a known solution") {
    Rng rng(101);
    const int64_t n = 8, k = 3;
    Mat a(n, n);
    for (auto& x : a.v) x = rng.uniform(-1.0, 1.0);
    for (int64_t i = 0; i < n; ++i) a.at(i, i) += 4.0;  // keep it well conditioned
    Mat x_true(n, k);
    for (auto& x : x_true.v) x = rng.uniform(-2.0, 2.0);
    Mat b = matmul(a, x_true);
    Mat x = solve_linear(a, b);
    for (size_t i = 0; i < x.v.size(); ++i) CHECK(x.v[i] == doctest::Approx(x_true.v[i]).epsilon(1e-9));
}

TEST_CASE("solve_linear needs pivoting for a zero leading diagonal") {
    Mat a(2, 2);
    a.at(0, 0) = 0.0;
    a.at(0, 1) = 1.0;
    a.at(1, 0) = 1.0;
    a.at(1, 1) = 0.0;
    Mat b(2, 1);
    b.at(0, 0) = 3.0;
    b.at(1, 0) = 5.0;
    Mat x = solve_linear(a, b);
    CHECK(x.at(0, 0) == doctest::Approx(5.0));
    CHECK(x.at(1, 0) == doctest::Approx(3.0));
}

TEST_CASE("solve_linear rejects singular systems") {
    Mat a(2, 2);
    a.at(0, 0) = 1.0;
    a.at(0, 1) = 2.0;
    a.at(1, 0) = 2.0;
    a.at(1, 1) = 4.0;
    Mat b(2, 1);
    CHECK_THROWS_AS(solve_linear(a, b), NumericError);
}

TEST_CASE("eigen_symmetric on a hand-diagonalizable matrix") {
    // [[2,1],[1,2]] has eigenpairs 3:(1,1)/sqrt2 and 1:(1,-1)/sqrt2
    Mat a(2, 2);
    a.at(0, 0) = 2;
    a.at(0, 1) = 1;
    a.at(1, 0) = 1;
    a.at(1, 1) = 2;
    auto e = eigen_symmetric(a);
    CHECK(e.values[0] == doctest::Approx(3.0));
    CHECK(e.values[1] == doctest::Approx(1.0));
    const double s = 1.0 / std::sqrt(2.0);
    CHECK(std::abs(e.vectors.at(0, 0)) == doctest::Approx(s));
    CHECK(std::abs(e.vectors.at(1, 0)) == doctest::Approx(s));
    CHECK(e.vectors.at(0, 0) * e.vectors.at(1, 0) > 0);  // same sign
    CHECK(e.vectors.at(0, 1) * e.vectors.at(1, 1) < 0);
}

TEST_CASE("eigen_symmetric reconstructs a random symmetric matrix") {
    Rng rng(202);
    const int64_t n = 10;
    Mat a(n, n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i; j < n; ++j) {
            const double x = rng.uniform(-1.0, 1.0);
            a.at(i, j) = x;
            a.at(j, i) = x;
        }
    auto e = eigen_symmetric(a);
    for (size_t i = 1; i < e.values.size(); ++i) CHECK(e.values[i - 1] >= e.values[i]);

    // A == V diag(w) V^T and V^T V == I
    Mat d(n, n);
    for (int64_t i = 0; i < n; ++i) d.at(i, i) = e.values[static_cast<size_t>(i)];
    Mat rec = matmul(matmul(e.vectors, d), transpose(e.vectors));
    for (size_t i = 0; i < a.v.size(); ++i) CHECK(rec.v[i] == doctest::Approx(a.v[i]).epsilon(1e-8));
    Mat gram = matmul(transpose(e.vectors), e.vectors);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) CHECK(gram.at(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).scale(1.0));
}
