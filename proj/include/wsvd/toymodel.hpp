#pragma once

#include <cstdint>
#include <vector>

#include "wsvd/matrix.hpp"

namespace wsvd::toy {

/// Stack of multi-head causal self-attention layers, each followed by an
/// output projection and a tanh feed-forward block (no residual paths, so
/// all-zero weights map any input to zero output). Trained against a
/// sequence-regression surrogate: the target for position t is a fixed random
/// linear map of the input at position t+1 (last position targets zero).
struct ModelConfig {
    std::size_t embed_dim = 128; // E, power of two, equal to n_heads * head_dim
    std::size_t head_dim = 32;   // H
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t ffn_dim = 0;  // hidden width of the feed-forward block; 0 means 2 * embed_dim
    std::size_t task_dim = 0; // feature size of the calibration targets; 0 means embed_dim
    std::uint64_t seed = 0;
    std::size_t outlier_channels = 0; // calibration inputs: channels scaled by outlier_factor
    double outlier_factor = 10.0;

    void validate() const;
    std::size_t ffn() const { return ffn_dim == 0 ? 2 * embed_dim : ffn_dim; }
    std::size_t task() const { return task_dim == 0 ? embed_dim : task_dim; }
};

struct LayerWeights {
    Matrix w_q, w_k, w_v; // E x E; columns [h*H, (h+1)*H) belong to head h
    Matrix w_o;           // E x E
    Matrix ff1;           // E x ffn
    Matrix ff2;           // ffn x E
};

struct AttentionWeights {
    std::vector<LayerWeights> layers;
};

/// Fixed random maps defining the calibration task; not trainable.
struct TaskMaps {
    Matrix target_map; // E x task: builds targets from shifted inputs
    Matrix readout;    // E x task: maps model output to target space
};

struct CalibrationBatch {
    std::vector<Matrix> inputs;  // each L x E
    std::vector<Matrix> targets; // each L x task
    std::size_t seq_len = 0;
};

/// Name of one weight matrix inside the stack.
enum class WeightKind { Q, K, V, O, Ff1, Ff2 };

struct WeightId {
    std::size_t layer = 0;
    WeightKind kind = WeightKind::Q;
};

const Matrix& select(const AttentionWeights& w, WeightId id);
Matrix& select(AttentionWeights& w, WeightId id);
std::string weight_name(WeightId id);

AttentionWeights init_weights(const ModelConfig& cfg);
AttentionWeights zero_like(const AttentionWeights& w);
TaskMaps make_task(const ModelConfig& cfg);
CalibrationBatch generate_calibration(const ModelConfig& cfg, std::size_t n_samples,
                                      std::size_t seq_len);

/// Intermediates of one layer kept for the backward pass.
struct LayerTrace {
    Matrix input;              // L x E
    Matrix q, k, v;            // L x E
    std::vector<Matrix> probs; // per head, L x L causal softmax
    Matrix heads_out;          // L x E, concatenated head outputs
    Matrix o_proj;             // heads_out * w_o
    Matrix ffn_hidden;         // tanh(o_proj * ff1)
};

/// Runs the stack on one sequence. Rows of every softmax sum to one over the
/// unmasked (j <= i) positions; output row t depends only on input rows <= t.
Matrix forward(const ModelConfig& cfg, const AttentionWeights& w, const Matrix& x,
               std::vector<LayerTrace>* trace = nullptr);

/// Mean squared error between readout(output) and the target, averaged over
/// all positions and target features, times loss_scale.
double sample_loss(const ModelConfig& cfg, const TaskMaps& task, const Matrix& output,
                   const Matrix& target, double loss_scale = 1.0);

/// Analytic gradient of sample_loss with respect to every weight matrix.
AttentionWeights backward_sample(const ModelConfig& cfg, const AttentionWeights& w,
                                 const TaskMaps& task, const Matrix& x, const Matrix& target,
                                 double loss_scale = 1.0);

double batch_loss(const ModelConfig& cfg, const AttentionWeights& w, const TaskMaps& task,
                  const CalibrationBatch& batch, double loss_scale = 1.0);

/// Mean of the per-sample gradients, accumulated in batch order.
AttentionWeights backward(const ModelConfig& cfg, const AttentionWeights& w, const TaskMaps& task,
                          const CalibrationBatch& batch, double loss_scale = 1.0);

} // namespace wsvd::toy
