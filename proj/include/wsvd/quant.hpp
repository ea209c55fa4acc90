#pragma once

#include <cstdint>
#include <vector>

#include "wsvd/factorize.hpp"
#include "wsvd/matrix.hpp"

namespace wsvd::quant {

/// Row-major integer tensor, stored as 8-bit two's complement (4-bit values
/// also live here, range-checked).
struct IntMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> data;

    IntMatrix() = default;
    IntMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}
    std::int8_t operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    std::int8_t& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
};

struct QuantSpec {
    int weight_bits = 8;     // 4 or 8
    int activation_bits = 8; // 4 or 8
    std::vector<double> clip_grid = default_clip_grid(); // searched for weights

    static std::vector<double> default_clip_grid(); // 0.50, 0.55, ..., 1.00
    void validate() const;
};

/// Symmetric integer range limit for a bit width: 2^(bits-1) - 1.
int qmax(int bits);

/// Weight quantization result: per-output-channel (column) scales and one
/// clip ratio shared by the whole matrix.
struct WeightQuant {
    IntMatrix q;
    std::vector<double> scales; // one per column, always > 0
    double clip = 1.0;
    int bits = 8;
};

/// Round-to-nearest with per-column symmetric scales. scale_j is
/// clip * max|column j| / qmax; the clip ratio is chosen from the grid by
/// linear search minimizing total squared dequantization error (first grid
/// point wins ties). All-zero columns get scale 1 and integer 0.
WeightQuant quantize_weight(const Matrix& w, const QuantSpec& spec);

/// Quantize with caller-fixed per-column scales (no clip search).
WeightQuant quantize_with_scales(const Matrix& w, const std::vector<double>& scales, int bits);

Matrix dequantize_weight(const WeightQuant& wq);

/// Per-row (per-token) symmetric activation quantization at full range.
struct ActivationQuant {
    IntMatrix q;
    std::vector<double> scales; // one per row, always > 0
    int bits = 8;
};

ActivationQuant quantize_activation(const Matrix& x, int bits);
Matrix dequantize_activation(const ActivationQuant& aq);

/// Orthogonal rotations threaded through a factored head: s1 acts on the
/// embedding side, s2 on the latent side.
struct RotationPair {
    Matrix s1; // E x E, orthonormal within 1e-12
    Matrix s2; // rank x rank, orthonormal within 1e-10

    void validate(std::size_t embed_dim, std::size_t rank) const;
};

/// (a, b) -> (s1 a s2^T, s2 b). The product of the factors is unchanged
/// because s2^T s2 = I; validated against the pair's tolerances.
factorize::HeadFactors insert_rotations(const factorize::HeadFactors& f, const RotationPair& pair);

/// Straight-through fake quantization: returns dequantize(quantize(w)) with
/// dynamic per-column scales clip * max|col| / qmax. If ste_mask is given it
/// receives 1 where |w| <= scale * qmax (gradient passes) and 0 elsewhere.
Matrix fake_quantize(const Matrix& w, double clip, int bits, Matrix* ste_mask = nullptr);

/// Quantization-aware objective: || F' (.) (s1 w - Q(s1 a s2^T) Q(s2 b)) ||^2
/// evaluated with fake quantization at the given clips.
double qat_objective(const Matrix& rotated_target, const Matrix& rotated_fisher, const Matrix& a,
                     const Matrix& b, const Matrix& s1, const Matrix& s2, double clip_a,
                     double clip_b, int bits);

struct QatOptions {
    std::size_t steps = 50;
    double lr = 1e-5;
    QuantSpec spec;
};

/// Fully quantized head: integer factors, per-column scales, frozen clips,
/// and the skew parameter of the trained latent rotation.
struct QuantizedFactors {
    WeightQuant a; // quantized s1 * a * s2^T
    WeightQuant b; // quantized s2 * b
    Matrix s2_skew;
    std::size_t rank = 0;
    std::size_t layer = 0;
    std::size_t head = 0;
    factorize::Role role = factorize::Role::K;
    int weight_bits = 8;
};

struct QatResult {
    QuantizedFactors quantized;
    factorize::HeadFactors factors; // trained unrotated factors
    Matrix s2;                      // trained latent rotation
    factorize::FinetuneReport report;
    double max_s2_defect = 0.0;     // max ||s2^T s2 - I||_F seen over all steps
};

/// Local quantization-aware tuning of one head. Trains a, b and the latent
/// rotation s2 (through its skew parameter, so orthogonality is kept by
/// construction) against qat_objective with straight-through gradients.
/// Scales are recomputed from the current factors every step; clip ratios are
/// frozen from a grid search at initialization. s1 stays fixed. Returns the
/// best iterate visited, so the result never scores worse than direct
/// round-to-nearest quantization of the input factors.
QatResult local_qat(const factorize::HeadFactors& f, const Matrix& s1, const Matrix& w_head,
                    const Matrix& rotated_fisher, const QatOptions& opts = {});

} // namespace wsvd::quant
