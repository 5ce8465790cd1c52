#include "nclens/errors.hpp"
#include "nclens/rng.hpp"
#include "nclens/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace nclens;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, CounterRng& rng) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

} // namespace

TEST_CASE("matmul examples") {
    const Matrix a(2, 2, {1, 2, 3, 4});
    CHECK(matmul(Matrix::identity(2), a) == a);
    const Matrix z = matmul(Matrix(2, 3), Matrix(3, 2, {1, 2, 3, 4, 5, 6}));
    for (double x : z.data()) CHECK(x == 0.0);
    const Matrix p = matmul(a, Matrix(2, 1, {5, 6}));
    CHECK(p(0, 0) == 17.0);
    CHECK(p(1, 0) == 39.0);
    CHECK_THROWS_AS(matmul(a, Matrix(3, 1)), ShapeError);
}

TEST_CASE("matrix rejects bad data") {
    CHECK_THROWS_AS(Matrix(2, 2, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Matrix(1, 2, {1, std::numeric_limits<double>::quiet_NaN()}), NumericError);
}

TEST_CASE("matmul associativity on random chains") {
    CounterRng rng(1, {});
    for (int t = 0; t < 50; ++t) {
        const Matrix a = random_matrix(4, 4, rng), b = random_matrix(4, 4, rng), c = random_matrix(4, 4, rng);
        const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < 16; ++i) {
            const double scale = std::max(1.0, std::abs(l.data()[i]));
            CHECK(std::abs(l.data()[i] - r.data()[i]) / scale < 1e-6);
        }
    }
}

TEST_CASE("softmax examples") {
    const Vector u = softmax(std::vector<double>{2.5, 2.5, 2.5});
    for (double x : u) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-15));
    const Vector s = softmax(std::vector<double>{1000, 0});
    CHECK(s[0] == doctest::Approx(1.0));
    CHECK(s[1] < 1e-300);
    const Vector c = softmax(std::vector<double>{std::log(2.0), 0});
    CHECK(std::abs(c[0] - 2.0 / 3) < 1e-12);
    CHECK(std::abs(c[1] - 1.0 / 3) < 1e-12);
    CHECK_THROWS_AS(softmax(std::vector<double>{1, std::numeric_limits<double>::infinity()}), NumericError);
    CHECK_THROWS_AS(softmax(std::vector<double>{1, 2}, 0.0), ArgumentError);
}

TEST_CASE("softmax sums to one on random inputs") {
    CounterRng rng(2, {});
    for (int t = 0; t < 1000; ++t) {
        Vector z(1 + rng.below(40));
        for (double& x : z) x = rng.normal() * 30.0;
        const double temp = 0.1 + 3.0 * rng.uniform();
        double sum = 0;
        for (double p : softmax(z, temp)) {
            CHECK(p >= 0.0);
            sum += p;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("normalize examples") {
    const Vector ones(4, 1.0);
    for (double x : normalize(Vector(4, 0.0), ones, 1e-6, NormKind::rms)) CHECK(x == 0.0);
    const Vector v{1, -1, 1, -1};
    const Vector fixed = normalize(v, ones, 0.0, NormKind::rms);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(fixed[i] - v[i]) < 1e-6);
    const Vector r = normalize(std::vector<double>{3, 4}, std::vector<double>{1, 1}, 0.0, NormKind::rms);
    CHECK(std::abs(r[0] - 3 / std::sqrt(12.5)) < 1e-15);
    CHECK(std::abs(r[1] - 4 / std::sqrt(12.5)) < 1e-15);
    const Vector ln = normalize(std::vector<double>{1, 3}, std::vector<double>{1, 1}, 0.0, NormKind::layernorm);
    CHECK(std::abs(ln[0] + 1.0) < 1e-15);
    CHECK(std::abs(ln[1] - 1.0) < 1e-15);
    CHECK_THROWS_AS(normalize(std::vector<double>{1, 2}, ones, 0.0, NormKind::rms), ShapeError);
}

TEST_CASE("normalize is scale invariant without eps") {
    CounterRng rng(3, {});
    for (int t = 0; t < 200; ++t) {
        Vector v(8), g(8);
        for (double& x : v) x = rng.normal();
        for (double& x : g) x = 0.5 + rng.uniform();
        const double k = 0.01 + 100 * rng.uniform();
        Vector kv = v;
        for (double& x : kv) x *= k;
        for (NormKind kind : {NormKind::rms, NormKind::layernorm}) {
            const Vector a = normalize(v, g, 0.0, kind), b = normalize(kv, g, 0.0, kind);
            for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
        }
    }
}

TEST_CASE("compensated sum recovers small terms") {
    CompensatedSum s;
    s.add(1e16);
    for (int i = 0; i < 1000; ++i) s.add(1.0);
    s.add(-1e16);
    CHECK(s.value() == 1000.0);
}

TEST_CASE("counter rng is keyed and reproducible") {
    CounterRng a(42, {1, 2}), b(42, {1, 2}), c(42, {1, 3});
    for (int i = 0; i < 10; ++i) {
        const auto x = a.next();
        CHECK(x == b.next());
        CHECK(x != c.next());
    }
    CounterRng u(5, {});
    double mean = 0;
    for (int i = 0; i < 100000; ++i) mean += u.uniform();
    CHECK(std::abs(mean / 100000 - 0.5) < 0.01);
}
