#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <vector>

#include "wsvd/errors.hpp"
#include "wsvd/linalg.hpp"
#include "wsvd/matrix.hpp"
#include "wsvd/rng.hpp"

using wsvd::Matrix;
using wsvd::Rng;
using wsvd::SvdResult;

namespace {

Matrix reassemble(const SvdResult& s) {
    Matrix scaled = s.u;
    for (std::size_t i = 0; i < scaled.rows(); ++i)
        for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= s.sigma[j];
    return wsvd::matmul(scaled, s.vt);
}

void check_svd_invariants(const Matrix& m, double recon_tol = 1e-9) {
    SvdResult s = wsvd::svd(m);
    const std::size_t k = std::min(m.rows(), m.cols());
    REQUIRE(s.sigma.size() == k);
    REQUIRE(s.u.rows() == m.rows());
    REQUIRE(s.u.cols() == k);
    REQUIRE(s.vt.rows() == k);
    REQUIRE(s.vt.cols() == m.cols());
    for (std::size_t i = 0; i + 1 < k; ++i) CHECK(s.sigma[i] >= s.sigma[i + 1]);
    for (double sv : s.sigma) CHECK(sv >= 0.0);
    CHECK(wsvd::orthonormality_defect(s.u) < 1e-10);
    CHECK(wsvd::orthonormality_defect(s.vt.transposed()) < 1e-10);
    double scale = std::max(m.frobenius_norm(), 1.0);
    CHECK((reassemble(s) - m).frobenius_norm() < recon_tol * scale);
}

} // namespace

TEST_CASE("svd of a diagonal matrix") {
    Matrix m = Matrix::from_rows({{3, 0}, {0, 1}});
    SvdResult s = wsvd::svd(m);
    REQUIRE(s.sigma.size() == 2);
    CHECK(s.sigma[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(s.sigma[1] == doctest::Approx(1.0).epsilon(1e-14));
    // sign convention puts the largest entry of each u column at +1
    CHECK(wsvd::max_abs_diff(s.u, Matrix::identity(2)) < 1e-12);
    CHECK(wsvd::max_abs_diff(s.vt, Matrix::identity(2)) < 1e-12);
}

TEST_CASE("svd of the zero matrix") {
    Matrix z(4, 3);
    SvdResult s = wsvd::svd(z);
    REQUIRE(s.sigma.size() == 3);
    for (double sv : s.sigma) CHECK(sv == 0.0);
    // basis is still orthonormal even with zero spectrum
    CHECK(wsvd::orthonormality_defect(s.u) < 1e-12);
    CHECK(wsvd::orthonormality_defect(s.vt.transposed()) < 1e-12);
}

TEST_CASE("svd invariants on random shapes") {
    Rng rng(101);
    check_svd_invariants(rng.normal_matrix(8, 5));  // tall
    check_svd_invariants(rng.normal_matrix(5, 8));  // wide
    check_svd_invariants(rng.normal_matrix(6, 6));  // square
    check_svd_invariants(rng.normal_matrix(1, 7));  // single row
    check_svd_invariants(rng.normal_matrix(7, 1));  // single column
    check_svd_invariants(rng.normal_matrix(64, 16));
}

TEST_CASE("svd of a rank-deficient matrix") {
    Rng rng(102);
    Matrix left = rng.normal_matrix(8, 2);
    Matrix right = rng.normal_matrix(2, 6);
    Matrix m = wsvd::matmul(left, right); // rank 2 by construction
    check_svd_invariants(m);
    SvdResult s = wsvd::svd(m);
    CHECK(s.sigma[0] > 0.1);
    CHECK(s.sigma[1] > 1e-10);
    for (std::size_t i = 2; i < s.sigma.size(); ++i)
        CHECK(s.sigma[i] < 1e-9 * s.sigma[0]);
}

TEST_CASE("svd of an ill-scaled matrix") {
    Rng rng(103);
    Matrix m = rng.normal_matrix(6, 6);
    for (std::size_t j = 0; j < 6; ++j) {
        double scale = std::pow(10.0, 4.0 - static_cast<double>(j) * 2.0); // 1e4 .. 1e-6
        for (std::size_t i = 0; i < 6; ++i) m(i, j) *= scale;
    }
    check_svd_invariants(m);
}

TEST_CASE("svd determinism") {
    Rng rng(104);
    Matrix m = rng.normal_matrix(10, 7);
    SvdResult s1 = wsvd::svd(m);
    SvdResult s2 = wsvd::svd(m);
    CHECK(wsvd::max_abs_diff(s1.u, s2.u) == 0.0);
    CHECK(wsvd::max_abs_diff(s1.vt, s2.vt) == 0.0);
    for (std::size_t i = 0; i < s1.sigma.size(); ++i) CHECK(s1.sigma[i] == s2.sigma[i]);
}

TEST_CASE("svd rejects empty input") {
    CHECK_THROWS_AS(wsvd::svd(Matrix()), wsvd::ShapeError);
}

TEST_CASE("truncate at full rank reproduces the input") {
    Rng rng(105);
    Matrix m = rng.normal_matrix(8, 5);
    SvdResult s = wsvd::svd(m);
    auto [a, b] = wsvd::truncate(s, 5);
    CHECK((wsvd::matmul(a, b) - m).frobenius_norm() < 1e-9 * m.frobenius_norm());
}

TEST_CASE("truncate diag(3,1) to rank 1") {
    SvdResult s = wsvd::svd(Matrix::from_rows({{3, 0}, {0, 1}}));
    auto [a, b] = wsvd::truncate(s, 1);
    REQUIRE(a.rows() == 2);
    REQUIRE(a.cols() == 1);
    REQUIRE(b.rows() == 1);
    REQUIRE(b.cols() == 2);
    Matrix ab = wsvd::matmul(a, b);
    CHECK(wsvd::max_abs_diff(ab, Matrix::from_rows({{3, 0}, {0, 0}})) < 1e-12);
}

TEST_CASE("truncation residual equals the singular tail") {
    Rng rng(106);
    Matrix m = rng.normal_matrix(8, 8);
    SvdResult s = wsvd::svd(m);
    for (std::size_t r : {std::size_t{1}, std::size_t{3}, std::size_t{7}}) {
        auto [a, b] = wsvd::truncate(s, r);
        double resid = (m - wsvd::matmul(a, b)).frobenius_norm();
        double tail = std::sqrt(wsvd::tail_energy(s, r));
        CHECK(resid == doctest::Approx(tail).epsilon(1e-9));
    }
    // rank 8 keeps everything
    CHECK(wsvd::tail_energy(s, 8) == 0.0);
}

TEST_CASE("truncated product never exceeds the leading singular value") {
    Rng rng(107);
    Matrix m = rng.normal_matrix(9, 6);
    SvdResult s = wsvd::svd(m);
    auto [a, b] = wsvd::truncate(s, 3);
    SvdResult s2 = wsvd::svd(wsvd::matmul(a, b));
    CHECK(s2.sigma[0] <= s.sigma[0] * (1.0 + 1e-12));
}

TEST_CASE("truncate rejects out-of-range ranks") {
    SvdResult s = wsvd::svd(Matrix::identity(3));
    CHECK_THROWS_AS(wsvd::truncate(s, 0), wsvd::ShapeError);
    CHECK_THROWS_AS(wsvd::truncate(s, 4), wsvd::ShapeError);
}

TEST_CASE("hadamard base cases") {
    Matrix h1 = wsvd::hadamard(1);
    REQUIRE(h1.rows() == 1);
    CHECK(h1(0, 0) == 1.0);

    Matrix h2 = wsvd::hadamard(2);
    const double s = 1.0 / std::sqrt(2.0);
    CHECK(h2(0, 0) == doctest::Approx(s).epsilon(1e-15));
    CHECK(h2(0, 1) == doctest::Approx(s).epsilon(1e-15));
    CHECK(h2(1, 0) == doctest::Approx(s).epsilon(1e-15));
    CHECK(h2(1, 1) == doctest::Approx(-s).epsilon(1e-15));
}

TEST_CASE("hadamard is orthonormal for all power-of-two sizes up to 256") {
    for (std::size_t d = 1; d <= 256; d *= 2) {
        Matrix h = wsvd::hadamard(d);
        CHECK(wsvd::orthonormality_defect(h) < 1e-12);
        Matrix hht = wsvd::matmul_nt(h, h);
        CHECK(wsvd::max_abs_diff(hht, Matrix::identity(d)) < 1e-12);
        double mag = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                CHECK(std::abs(std::abs(h(i, j)) - mag) < 1e-15);
    }
}

TEST_CASE("hadamard rejects non-power-of-two sizes") {
    CHECK_THROWS_AS(wsvd::hadamard(3), wsvd::ShapeError);
    CHECK_THROWS_AS(wsvd::hadamard(12), wsvd::ShapeError);
    CHECK_THROWS_AS(wsvd::hadamard(0), wsvd::ShapeError);
}

TEST_CASE("skew parameter validation") {
    Matrix good = Matrix::from_rows({{0, 2}, {-2, 0}});
    CHECK_NOTHROW(wsvd::SkewParam{good});
    Matrix bad = Matrix::from_rows({{0, 2}, {2, 0}});
    CHECK_THROWS_AS(wsvd::SkewParam{bad}, wsvd::ShapeError);
    Matrix rect(2, 3);
    CHECK_THROWS_AS(wsvd::SkewParam{rect}, wsvd::ShapeError);

    wsvd::SkewParam z = wsvd::SkewParam::zero(4);
    CHECK(z.dim() == 4);
    CHECK(z.theta.max_abs() == 0.0);

    // antisymmetric part of [[5,1],[3,-2]] has off-diagonal (1-3)/2 = -1
    Matrix any = Matrix::from_rows({{5, 1}, {3, -2}});
    wsvd::SkewParam p = wsvd::SkewParam::project(any);
    CHECK(p.theta(0, 0) == 0.0);
    CHECK(p.theta(1, 1) == 0.0);
    CHECK(p.theta(0, 1) == -1.0);
    CHECK(p.theta(1, 0) == 1.0);
}

TEST_CASE("cayley of zero is exactly the identity") {
    Matrix q = wsvd::cayley(wsvd::SkewParam::zero(5));
    CHECK(wsvd::max_abs_diff(q, Matrix::identity(5)) == 0.0);
}

TEST_CASE("cayley of a 2x2 skew is a planar rotation") {
    // theta = [[0,1],[-1,0]] maps to [[0.6,-0.8],[0.8,0.6]]
    wsvd::SkewParam p{Matrix::from_rows({{0, 1}, {-1, 0}})};
    Matrix q = wsvd::cayley(p);
    CHECK(q(0, 0) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(q(0, 1) == doctest::Approx(-0.8).epsilon(1e-14));
    CHECK(q(1, 0) == doctest::Approx(0.8).epsilon(1e-14));
    CHECK(q(1, 1) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(wsvd::max_abs_diff(wsvd::matmul_tn(q, q), Matrix::identity(2)) < 1e-12);
}

TEST_CASE("cayley output is orthogonal for random skew inputs") {
    Rng rng(108);
    for (int trial = 0; trial < 4; ++trial) {
        wsvd::SkewParam p = wsvd::SkewParam::project(rng.normal_matrix(16, 16));
        Matrix q = wsvd::cayley(p);
        CHECK(wsvd::max_abs_diff(wsvd::matmul_tn(q, q), Matrix::identity(16)) < 1e-10);
    }
}

TEST_CASE("cayley gradient matches finite differences") {
    Rng rng(109);
    const std::size_t d = 6;
    wsvd::SkewParam p = wsvd::SkewParam::project(rng.normal_matrix(d, d));
    Matrix c = rng.normal_matrix(d, d); // loss: sum(c .* q), so dL/dq = c

    auto [q, p_inv] = wsvd::cayley_with_inverse(p);
    Matrix g = wsvd::cayley_grad(q, p_inv, c);
    // the pullback of a skew perturbation direction lands in skew space
    CHECK(wsvd::max_abs_diff(g, g.transposed() * -1.0) < 1e-12);

    const double eps = 1e-6;
    for (auto [i, j] : {std::pair<std::size_t, std::size_t>{0, 1}, {2, 4}, {3, 5}}) {
        // perturb along E_ij - E_ji to stay skew
        Matrix tp = p.theta;
        tp(i, j) += eps;
        tp(j, i) -= eps;
        Matrix tm = p.theta;
        tm(i, j) -= eps;
        tm(j, i) += eps;
        double lp = wsvd::elem_mul(c, wsvd::cayley(wsvd::SkewParam{tp})).sum();
        double lm = wsvd::elem_mul(c, wsvd::cayley(wsvd::SkewParam{tm})).sum();
        double fd = (lp - lm) / (2.0 * eps);
        double analytic = 2.0 * g(i, j); // <g, E_ij - E_ji> with g skew
        CHECK(analytic == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("solve and inverse on a known system") {
    // [[2,1],[1,3]] x = [[5],[10]] has x = [[1],[3]]
    Matrix a = Matrix::from_rows({{2, 1}, {1, 3}});
    Matrix b = Matrix::from_rows({{5}, {10}});
    Matrix x = wsvd::solve(a, b);
    CHECK(x(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(x(1, 0) == doctest::Approx(3.0).epsilon(1e-12));

    Matrix inv = wsvd::inverse(a);
    CHECK(wsvd::max_abs_diff(wsvd::matmul(a, inv), Matrix::identity(2)) < 1e-12);

    Rng rng(110);
    Matrix big = rng.normal_matrix(12, 12);
    Matrix rhs = rng.normal_matrix(12, 3);
    Matrix sol = wsvd::solve(big, rhs);
    CHECK((wsvd::matmul(big, sol) - rhs).max_abs() < 1e-9);
}

TEST_CASE("solve rejects singular and mismatched systems") {
    Matrix sing = Matrix::from_rows({{1, 2}, {2, 4}});
    Matrix b = Matrix::from_rows({{1}, {1}});
    CHECK_THROWS_AS(wsvd::solve(sing, b), wsvd::NumericError);
    Matrix rect(2, 3);
    CHECK_THROWS_AS(wsvd::solve(rect, b), wsvd::ShapeError);
    Matrix tall(3, 1);
    CHECK_THROWS_AS(wsvd::solve(Matrix::identity(2), tall), wsvd::ShapeError);
}
