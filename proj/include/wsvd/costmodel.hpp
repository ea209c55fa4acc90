#pragma once

#include <cstdint>
#include <string>

#include "wsvd/matrix.hpp"

namespace wsvd::cost {

/// Exact rational number. Arithmetic never rounds; reduction keeps num/den
/// coprime with den > 0, so equality is plain field comparison.
struct Ratio {
    long long num = 0;
    long long den = 1;

    static Ratio of(long long num, long long den);
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool operator==(const Ratio& o) const { return num == o.num && den == o.den; }
    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

struct CostInputs {
    std::uint64_t embed_dim = 0;   // E
    std::uint64_t head_dim = 0;    // H
    std::uint64_t seq_len = 0;     // L
    std::uint64_t head_rank = 0;   // r, per-head latent width
    std::uint64_t shared_rank = 0; // R, shared latent width

    void validate() const;
};

/// Per-head decode-step costs of reconstructing one head from a latent cache.
/// gamma counts reconstruction multiply-accumulates, eta counts latent scalars
/// read. shared: gamma = L*R*H, eta = L*R. per-head: gamma = L*r*H, eta = L*r.
struct GammaEta {
    std::uint64_t gamma_shared = 0;
    std::uint64_t eta_shared = 0;
    std::uint64_t gamma_per_head = 0;
    std::uint64_t eta_per_head = 0;
};

GammaEta gamma_eta(const CostInputs& in);

/// Compression ratios as exact rationals:
/// rho1 = (E + H) * r / (E * H) (parameter ratio of one factored head),
/// rho2 = r / H (latent width ratio).
struct RhoRatios {
    Ratio rho1;
    Ratio rho2;
};

RhoRatios rho(std::uint64_t embed_dim, std::uint64_t head_dim, std::uint64_t head_rank);

} // namespace wsvd::cost
