#include "wsvd/fisher.hpp"

#include <string>

#include "wsvd/errors.hpp"

namespace wsvd::fisher {

namespace {

void require_nonempty(const std::vector<Matrix>& grads) {
    if (grads.empty()) throw ShapeError("fisher accumulation over zero samples");
    for (std::size_t i = 1; i < grads.size(); ++i) {
        if (grads[i].rows() != grads[0].rows() || grads[i].cols() != grads[0].cols()) {
            throw ShapeError("gradient " + std::to_string(i) + " is " +
                             std::to_string(grads[i].rows()) + "x" +
                             std::to_string(grads[i].cols()) + ", expected " +
                             std::to_string(grads[0].rows()) + "x" +
                             std::to_string(grads[0].cols()));
        }
    }
}

void require_orthogonal(const Matrix& rotation) {
    if (rotation.rows() != rotation.cols()) {
        throw ShapeError("rotation must be square, got " + std::to_string(rotation.rows()) + "x" +
                         std::to_string(rotation.cols()));
    }
    const double defect = orthonormality_defect(rotation);
    if (!(defect <= 1e-10)) {
        throw NumericError("rotation is not orthogonal: ||S^T S - I||_F = " +
                           std::to_string(defect));
    }
}

} // namespace

FisherScores accumulate(const std::vector<Matrix>& per_sample_grads) {
    require_nonempty(per_sample_grads);
    Accumulator acc;
    for (const Matrix& g : per_sample_grads) acc.add(g);
    return acc.plain();
}

Matrix mean_gradient(const std::vector<Matrix>& per_sample_grads) {
    require_nonempty(per_sample_grads);
    Accumulator acc;
    for (const Matrix& g : per_sample_grads) acc.add(g);
    return acc.mean();
}

FisherScores accumulate_rotated(const std::vector<Matrix>& per_sample_grads,
                                const Matrix& rotation) {
    require_nonempty(per_sample_grads);
    Accumulator acc{rotation};
    for (const Matrix& g : per_sample_grads) acc.add(g);
    return acc.rotated();
}

Accumulator::Accumulator(Matrix rotation) : rotation_(std::move(rotation)) {
    require_orthogonal(rotation_);
}

void Accumulator::add(const Matrix& grad) {
    grad.ensure_finite("fisher sample gradient");
    if (count_ == 0) {
        sum_sq_ = Matrix(grad.rows(), grad.cols());
        sum_ = Matrix(grad.rows(), grad.cols());
        if (!rotation_.empty()) sum_sq_rot_ = Matrix(grad.rows(), grad.cols());
    } else if (grad.rows() != sum_sq_.rows() || grad.cols() != sum_sq_.cols()) {
        throw ShapeError("fisher sample " + std::to_string(count_) + " is " +
                         std::to_string(grad.rows()) + "x" + std::to_string(grad.cols()) +
                         ", expected " + std::to_string(sum_sq_.rows()) + "x" +
                         std::to_string(sum_sq_.cols()));
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = grad.data()[i];
        sum_sq_.data()[i] += g * g;
        sum_.data()[i] += g;
    }
    if (!rotation_.empty()) {
        if (rotation_.cols() != grad.rows()) {
            throw ShapeError("rotation is " + std::to_string(rotation_.rows()) + "x" +
                             std::to_string(rotation_.cols()) + " but gradients have " +
                             std::to_string(grad.rows()) + " rows");
        }
        Matrix rg = matmul(rotation_, grad);
        for (std::size_t i = 0; i < rg.size(); ++i) {
            const double g = rg.data()[i];
            sum_sq_rot_.data()[i] += g * g;
        }
    }
    ++count_;
}

FisherScores Accumulator::plain() const {
    if (count_ == 0) throw ShapeError("fisher accumulator holds zero samples");
    FisherScores f{sum_sq_, count_};
    f.scores *= 1.0 / static_cast<double>(count_);
    return f;
}

FisherScores Accumulator::rotated() const {
    if (count_ == 0) throw ShapeError("fisher accumulator holds zero samples");
    if (rotation_.empty()) throw ShapeError("fisher accumulator was built without a rotation");
    FisherScores f{sum_sq_rot_, count_};
    f.scores *= 1.0 / static_cast<double>(count_);
    return f;
}

Matrix Accumulator::mean() const {
    if (count_ == 0) throw ShapeError("fisher accumulator holds zero samples");
    Matrix m = sum_;
    m *= 1.0 / static_cast<double>(count_);
    return m;
}

std::vector<Matrix> per_sample_gradients(const toy::ModelConfig& cfg,
                                         const toy::AttentionWeights& w, const toy::TaskMaps& task,
                                         const toy::CalibrationBatch& batch,
                                         toy::WeightId target) {
    std::vector<Matrix> grads;
    grads.reserve(batch.inputs.size());
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        toy::AttentionWeights g =
            toy::backward_sample(cfg, w, task, batch.inputs[s], batch.targets[s]);
        grads.push_back(toy::select(g, target));
    }
    return grads;
}

FisherScores accumulate_fisher(const toy::ModelConfig& cfg, const toy::AttentionWeights& w,
                               const toy::TaskMaps& task, const toy::CalibrationBatch& batch,
                               toy::WeightId target) {
    return accumulate(per_sample_gradients(cfg, w, task, batch, target));
}

Matrix expected_gradient(const toy::ModelConfig& cfg, const toy::AttentionWeights& w,
                         const toy::TaskMaps& task, const toy::CalibrationBatch& batch,
                         toy::WeightId target) {
    return mean_gradient(per_sample_gradients(cfg, w, task, batch, target));
}

} // namespace wsvd::fisher
