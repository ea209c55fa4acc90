#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "wsvd/matrix.hpp"

namespace wsvd::factorize {

/// Projection role of a factored head inside an attention layer.
enum class Role { Q, K, V };

const char* role_name(Role r);
Role role_from_name(const std::string& name);

/// Low-rank split of one head's projection slice: w_head ~ a * b with
/// a (E x rank) and b (rank x head_dim).
struct HeadFactors {
    Matrix a;
    Matrix b;
    std::size_t rank = 0;
    std::size_t layer = 0;
    std::size_t head = 0;
    Role role = Role::K;
};

/// Columns [head * head_dim, (head+1) * head_dim) of a full projection.
Matrix head_slice(const Matrix& w_full, std::size_t head, std::size_t head_dim);

/// SVD-truncates one head's slice of a full projection matrix to `rank`.
HeadFactors per_head_svd(const Matrix& w_full, std::size_t layer, Role role, std::size_t head,
                         std::size_t head_dim, std::size_t rank);

/// Spectrum and importance weight of one head, the allocator's input.
struct HeadEnergy {
    std::size_t layer = 0;
    std::size_t head = 0;
    Role role = Role::K;
    std::vector<double> sigma; // nonincreasing singular values of the head slice
    double fisher_weight = 1.0; // mean Fisher score over the slice
};

struct RankPlan {
    struct Entry {
        std::size_t layer = 0;
        std::size_t head = 0;
        Role role = Role::K;
        std::size_t rank = 0;
    };
    std::vector<Entry> entries;
    double target_rho1 = 0.0;
    double achieved_rho1 = 0.0;
    double achieved_rho2 = 0.0; // mean rank / head_dim
    bool uniform = false;

    std::size_t rank_of(std::size_t layer, Role role, std::size_t head) const;
};

/// Spends the parameter budget target_rho1 * E * H per head on rank units of
/// cost E + H each. Every head gets at least rank 1; the remaining units go
/// greedily to the largest marginal gain fisher_weight * sigma[rank]^2, ties
/// broken by lower layer, then role order Q < K < V, then lower head index.
/// With uniform_rank the same rounded rank is used everywhere. Budgets below
/// one rank unit per head are rejected, naming the minimum feasible rho1.
RankPlan allocate_ranks(const std::vector<HeadEnergy>& heads, std::size_t embed_dim,
                        std::size_t head_dim, double target_rho1, bool uniform_rank = false);

/// sum_ij fisher(i,j) * (w - a*b)(i,j)^2
double weighted_loss(const Matrix& w, const Matrix& fisher, const Matrix& a, const Matrix& b);

/// Analytic gradients of weighted_loss: ga = -2 (F (.) (W - AB)) B^T and
/// gb = -2 A^T (F (.) (W - AB)).
void weighted_loss_grads(const Matrix& w, const Matrix& fisher, const Matrix& a, const Matrix& b,
                         Matrix& ga, Matrix& gb);

struct FinetuneOptions {
    std::size_t steps = 100;
    double lr = 1e-4;
};

struct FinetuneReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double learning_rate = 0.0;
    std::size_t step_count = 0;  // completed steps; trace.size() == step_count + 1
    std::vector<double> trace;
    bool aborted = false;
    std::string diagnostic;
};

/// Local fine-tune of one head's factors against the Fisher-weighted
/// reconstruction objective, adaptive-moment updates on both factors. Returns
/// the best iterate visited (never worse than the input factors). A non-finite
/// loss aborts the loop and returns the last finite state with a diagnostic.
std::pair<HeadFactors, FinetuneReport> weighted_finetune(const HeadFactors& factors,
                                                         const Matrix& w_target,
                                                         const Matrix& fisher,
                                                         const FinetuneOptions& opts = {});

} // namespace wsvd::factorize
