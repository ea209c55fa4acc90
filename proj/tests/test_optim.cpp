#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "wsvd/errors.hpp"
#include "wsvd/matrix.hpp"
#include "wsvd/optim.hpp"
#include "wsvd/rng.hpp"

using wsvd::AdamState;
using wsvd::Matrix;

TEST_CASE("first step matches the hand-computed update") {
    // With bias correction, step one reduces to p -= lr * g / (|g| + eps).
    Matrix p = Matrix::from_rows({{5.0, -1.0}});
    Matrix g = Matrix::from_rows({{2.0, -4.0}});
    AdamState adam(1, 2);
    adam.step(p, g, 0.1);
    CHECK(adam.steps_taken() == 1);
    CHECK(p(0, 0) == doctest::Approx(5.0 - 0.1 * (2.0 / (2.0 + 1e-8))).epsilon(1e-14));
    CHECK(p(0, 1) == doctest::Approx(-1.0 - 0.1 * (-4.0 / (4.0 + 1e-8))).epsilon(1e-14));
}

TEST_CASE("second step with a constant gradient") {
    // m_hat and v_hat stay exactly g and g^2 when the gradient never changes,
    // so every step moves by lr * sign(g) up to eps.
    Matrix p = Matrix::from_rows({{1.0}});
    Matrix g = Matrix::from_rows({{3.0}});
    AdamState adam(1, 1);
    adam.step(p, g, 0.01);
    adam.step(p, g, 0.01);
    CHECK(adam.steps_taken() == 2);
    CHECK(p(0, 0) == doctest::Approx(1.0 - 2.0 * 0.01 * (3.0 / (3.0 + 1e-8))).epsilon(1e-12));
}

TEST_CASE("moment state tracks the gradient history") {
    // step 1 g=1, step 2 g=0: m = 0.09, v = 0.000999, both bias-corrected
    Matrix p = Matrix::from_rows({{0.0}});
    AdamState adam(1, 1);
    adam.step(p, Matrix::from_rows({{1.0}}), 0.5);
    double after_first = p(0, 0);
    adam.step(p, Matrix::from_rows({{0.0}}), 0.5);
    double m_hat = (0.9 * 0.1 * 1.0) / (1.0 - 0.9 * 0.9);
    double v_hat = (0.999 * 0.001 * 1.0) / (1.0 - 0.999 * 0.999);
    double expected = after_first - 0.5 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(p(0, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero gradient leaves fresh parameters unchanged") {
    Matrix p = Matrix::from_rows({{2.0, 3.0}, {4.0, 5.0}});
    Matrix copy = p;
    AdamState adam(2, 2);
    adam.step(p, Matrix(2, 2), 1.0);
    CHECK(wsvd::max_abs_diff(p, copy) == 0.0);
}

TEST_CASE("updates are elementwise independent") {
    wsvd::Rng rng(5);
    Matrix p = rng.normal_matrix(3, 4);
    Matrix g = rng.normal_matrix(3, 4);
    Matrix p_joint = p;
    AdamState joint(3, 4);
    joint.step(p_joint, g, 0.05);
    // same result entry by entry through independent 1x1 states
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            Matrix pe(1, 1, p(i, j));
            Matrix ge(1, 1, g(i, j));
            AdamState solo(1, 1);
            solo.step(pe, ge, 0.05);
            CHECK(pe(0, 0) == p_joint(i, j));
        }
    }
}

TEST_CASE("descends a quadratic bowl") {
    // minimize 0.5 * ||p - t||^2; gradient p - t
    Matrix t = Matrix::from_rows({{1.0, -2.0}});
    Matrix p(1, 2);
    AdamState adam(1, 2);
    for (int i = 0; i < 2000; ++i) adam.step(p, p - t, 0.01);
    CHECK((p - t).max_abs() < 1e-3);
}

TEST_CASE("shape mismatches are rejected") {
    Matrix p(2, 2);
    Matrix g(2, 3);
    AdamState adam(2, 2);
    CHECK_THROWS_AS(adam.step(p, g, 0.1), wsvd::ShapeError);
    AdamState wrong(3, 3);
    Matrix g2(2, 2);
    CHECK_THROWS_AS(wrong.step(p, g2, 0.1), wsvd::ShapeError);
}
