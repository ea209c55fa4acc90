#pragma once

#include <cstddef>

#include "wsvd/matrix.hpp"

namespace wsvd {

/// Elementwise adaptive-moment update (decay 0.9 / 0.999, eps 1e-8) with
/// bias correction. One state per parameter matrix; step() applies
/// p -= lr * m_hat / (sqrt(v_hat) + eps) in place.
class AdamState {
public:
    AdamState() = default;
    explicit AdamState(std::size_t rows, std::size_t cols) : m_(rows, cols), v_(rows, cols) {}

    void step(Matrix& param, const Matrix& grad, double lr);
    std::size_t steps_taken() const { return t_; }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    Matrix m_;
    Matrix v_;
    std::size_t t_ = 0;
};

} // namespace wsvd
