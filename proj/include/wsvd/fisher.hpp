#pragma once

#include <cstddef>
#include <vector>

#include "wsvd/matrix.hpp"
#include "wsvd/toymodel.hpp"

namespace wsvd::fisher {

/// Diagonal curvature proxy for one weight matrix: the mean over calibration
/// samples of the squared per-sample loss gradient, taken elementwise.
struct FisherScores {
    Matrix scores;
    std::size_t sample_count = 0;
};

/// Mean of g (.) g over the given per-sample gradients, accumulated in input
/// order. Scores are nonnegative by construction.
FisherScores accumulate(const std::vector<Matrix>& per_sample_grads);

/// Mean per-sample gradient, same reduction order.
Matrix mean_gradient(const std::vector<Matrix>& per_sample_grads);

/// Rotated variant: each per-sample gradient is rotated first, then squared,
/// i.e. mean of (rot g) (.) (rot g). Squaring does not commute with rotation,
/// so this is NOT rot applied to accumulate(). `rotation` must be orthogonal
/// within 1e-10 or NumericError reports the deviation norm.
FisherScores accumulate_rotated(const std::vector<Matrix>& per_sample_grads,
                                const Matrix& rotation);

/// Streaming accumulator with the same reduction order as the functions
/// above; add() one per-sample gradient at a time.
class Accumulator {
public:
    Accumulator() = default;
    /// With a rotation, rotated() is also tracked from the same samples.
    explicit Accumulator(Matrix rotation);

    void add(const Matrix& grad);
    std::size_t count() const { return count_; }
    FisherScores plain() const;
    FisherScores rotated() const;
    Matrix mean() const;

private:
    Matrix rotation_;
    Matrix sum_sq_;
    Matrix sum_sq_rot_;
    Matrix sum_;
    std::size_t count_ = 0;
};

// model-coupled conveniences

std::vector<Matrix> per_sample_gradients(const toy::ModelConfig& cfg,
                                         const toy::AttentionWeights& w, const toy::TaskMaps& task,
                                         const toy::CalibrationBatch& batch, toy::WeightId target);

FisherScores accumulate_fisher(const toy::ModelConfig& cfg, const toy::AttentionWeights& w,
                               const toy::TaskMaps& task, const toy::CalibrationBatch& batch,
                               toy::WeightId target);

Matrix expected_gradient(const toy::ModelConfig& cfg, const toy::AttentionWeights& w,
                         const toy::TaskMaps& task, const toy::CalibrationBatch& batch,
                         toy::WeightId target);

} // namespace wsvd::fisher
