#pragma once

#include <cstdint>
#include <random>

#include "wsvd/matrix.hpp"

namespace wsvd {

/// Deterministic random source. Draws go through mt19937_64 plus explicit
/// bit-level uniform and Box-Muller normal transforms, so the stream depends
/// only on the seed, never on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Independent substream: the pair (seed, stream_id) is hashed into the
    /// engine seed so components can split one master seed without overlap.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id);

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double normal();

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace wsvd
