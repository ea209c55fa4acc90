#include "wsvd/optim.hpp"

#include <cmath>

#include "wsvd/errors.hpp"

namespace wsvd {

void AdamState::step(Matrix& param, const Matrix& grad, double lr) {
    if (param.rows() != m_.rows() || param.cols() != m_.cols() || grad.rows() != m_.rows() ||
        grad.cols() != m_.cols()) {
        throw ShapeError("adam step: state is " + std::to_string(m_.rows()) + "x" +
                         std::to_string(m_.cols()) + ", param " + std::to_string(param.rows()) +
                         "x" + std::to_string(param.cols()) + ", grad " +
                         std::to_string(grad.rows()) + "x" + std::to_string(grad.cols()));
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i];
        double& m = m_.data()[i];
        double& v = v_.data()[i];
        m = kBeta1 * m + (1.0 - kBeta1) * g;
        v = kBeta2 * v + (1.0 - kBeta2) * g * g;
        param.data()[i] -= lr * (m / c1) / (std::sqrt(v / c2) + kEps);
    }
}

} // namespace wsvd
