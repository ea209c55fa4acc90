#include "wsvd/costmodel.hpp"

#include <numeric>

#include "wsvd/errors.hpp"

namespace wsvd::cost {

Ratio Ratio::of(long long num, long long den) {
    if (den == 0) throw NumericError("ratio with zero denominator");
    if (den < 0) {
        num = -num;
        den = -den;
    }
    const long long g = std::gcd(num < 0 ? -num : num, den);
    return Ratio{g == 0 ? 0 : num / g, g == 0 ? 1 : den / g};
}

void CostInputs::validate() const {
    if (embed_dim == 0 || head_dim == 0 || seq_len == 0) {
        throw ConfigError("cost inputs need positive embed_dim, head_dim, seq_len");
    }
    if (head_dim > embed_dim) {
        throw ConfigError("head_dim " + std::to_string(head_dim) + " exceeds embed_dim " +
                          std::to_string(embed_dim));
    }
    if (head_rank == 0 || head_rank > head_dim) {
        throw ConfigError("head_rank " + std::to_string(head_rank) + " outside [1, " +
                          std::to_string(head_dim) + "]");
    }
    if (shared_rank > embed_dim) {
        throw ConfigError("shared_rank " + std::to_string(shared_rank) + " exceeds embed_dim " +
                          std::to_string(embed_dim));
    }
}

GammaEta gamma_eta(const CostInputs& in) {
    in.validate();
    if (in.shared_rank == 0) {
        throw ConfigError("gamma_eta needs a positive shared_rank");
    }
    GammaEta g;
    g.gamma_shared = in.seq_len * in.shared_rank * in.head_dim;
    g.eta_shared = in.seq_len * in.shared_rank;
    g.gamma_per_head = in.seq_len * in.head_rank * in.head_dim;
    g.eta_per_head = in.seq_len * in.head_rank;
    return g;
}

RhoRatios rho(std::uint64_t embed_dim, std::uint64_t head_dim, std::uint64_t head_rank) {
    CostInputs in{embed_dim, head_dim, 1, head_rank, embed_dim};
    in.validate();
    RhoRatios out;
    out.rho1 = Ratio::of(static_cast<long long>((embed_dim + head_dim) * head_rank),
                         static_cast<long long>(embed_dim * head_dim));
    out.rho2 = Ratio::of(static_cast<long long>(head_rank), static_cast<long long>(head_dim));
    return out;
}

} // namespace wsvd::cost
