#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wsvd/factorize.hpp"
#include "wsvd/matrix.hpp"

namespace wsvd::decode {

/// Logical memory streams tallied during decoding. The flops column counts
/// multiply-accumulates of the tensor contractions only; loads and stores
/// count scalars moved. Query-path projection work is tallied on Query.
enum class Stream {
    LatentK,
    LatentV,
    FullK,
    FullV,
    WeightsB,
    Query,
    Output,
};
constexpr std::size_t kStreamCount = 7;
const char* stream_name(Stream s);

struct StreamTally {
    std::uint64_t loads = 0;
    std::uint64_t stores = 0;
    std::uint64_t flops = 0;
};

/// Monotone per-stream counters; the only mutations are increments.
class TrafficCounter {
public:
    void add_loads(Stream s, std::uint64_t n) { at(s).loads += n; }
    void add_stores(Stream s, std::uint64_t n) { at(s).stores += n; }
    void add_flops(Stream s, std::uint64_t n) { at(s).flops += n; }
    const StreamTally& operator[](Stream s) const {
        return tallies_[static_cast<std::size_t>(s)];
    }
    std::uint64_t total_loads() const;
    std::uint64_t total_stores() const;

private:
    StreamTally& at(Stream s) { return tallies_[static_cast<std::size_t>(s)]; }
    std::array<StreamTally, kStreamCount> tallies_{};
};

struct TileConfig {
    std::size_t tile_len = 32; // rows of cache processed per tile; >= 1
};

/// Running state of a streaming (online) softmax: max, denominator, and the
/// weighted accumulator in whatever space the values live in (latent width
/// for fused decoding, head width for dense baselines).
struct SoftmaxState {
    double max_score = 0.0;
    double denom = 0.0;
    std::vector<double> acc;
    bool empty = true;

    void observe(double score, std::span<const double> value);
    /// Exact-weight merge of two partial states; commutative and associative
    /// up to floating-point reassociation.
    void merge(const SoftmaxState& other);
};

/// Per-head factored projections of one attention layer.
struct HeadProjection {
    factorize::HeadFactors q, k, v;
};

struct LayerFactors {
    std::vector<HeadProjection> heads;
    std::size_t embed_dim = 0;
    std::size_t head_dim = 0;
};

/// Growing per-head latent caches; row t of head h holds x_t * A_{kh} and
/// x_t * A_{vh}.
class LatentCache {
public:
    explicit LatentCache(const LayerFactors& f);
    std::size_t length() const { return length_; }
    std::size_t n_heads() const { return k_.size(); }
    const Matrix& latent_k(std::size_t head) const { return k_[head]; }
    const Matrix& latent_v(std::size_t head) const { return v_[head]; }
    void push(std::size_t head, std::span<const double> ck, std::span<const double> cv);
    void bump_length() { ++length_; }

private:
    std::vector<Matrix> k_, v_;
    std::size_t length_ = 0;
};

/// Projects one token into every head's latent caches (stores counted on the
/// latent streams) and returns the per-head query rows (n_heads x head_dim).
Matrix append_token(LatentCache& cache, const LayerFactors& f, std::span<const double> x,
                    TrafficCounter* counter = nullptr);

/// One fused decode step over the cached positions: per head, stream latent-K
/// tiles, reconstruct keys through B_k (loaded once per head per step), fold
/// scores into an online softmax whose accumulator stays in the latent-V
/// space, and up-project through B_v only after the last tile. Scores are
/// scaled by 1/sqrt(head_dim) before entering the running max. Returns
/// n_heads x head_dim outputs. Counters see exactly length * rank latent
/// loads per head per stream.
Matrix fused_decode_step(const LatentCache& cache, const LayerFactors& f, const Matrix& q_heads,
                         const TileConfig& tiles, TrafficCounter& counter);

/// Dense per-head key/value caches for the uncompressed baselines.
class FullKvCache {
public:
    FullKvCache(std::size_t n_heads, std::size_t head_dim);
    std::size_t length() const { return length_; }
    std::size_t n_heads() const { return k_.size(); }
    const Matrix& keys(std::size_t head) const { return k_[head]; }
    const Matrix& values(std::size_t head) const { return v_[head]; }
    void push(std::size_t head, std::span<const double> k, std::span<const double> v);
    void bump_length() { ++length_; }

private:
    std::vector<Matrix> k_, v_;
    std::size_t length_ = 0;
};

/// Dense projection weights of one layer (columns sliced per head).
struct DenseProjections {
    Matrix w_q, w_k, w_v; // E x E
    std::size_t head_dim = 0;
};

Matrix append_token_dense(FullKvCache& cache, const DenseProjections& w, std::span<const double> x,
                          TrafficCounter* counter = nullptr);

/// Materializing attention: the full score row is written out (stores on the
/// Query stream) before the softmax. Loads match flash_decode_step exactly.
Matrix eager_decode_step(const FullKvCache& cache, const Matrix& q_heads,
                         TrafficCounter& counter);

/// Streaming attention over dense caches with the same online softmax as the
/// fused path.
Matrix flash_decode_step(const FullKvCache& cache, const Matrix& q_heads, const TileConfig& tiles,
                         TrafficCounter& counter);

/// One shared latent per layer (width R) that every head reads in full.
struct SharedLatentCache {
    Matrix c_k, c_v; // L x R
    std::size_t length() const { return c_k.rows(); }
};

struct SharedFactors {
    Matrix a_k, a_v; // E x R
    Matrix b_k, b_v; // R x E, head h uses columns [h*H, (h+1)*H)
    std::size_t head_dim = 0;
    std::size_t n_heads = 0;
};

void append_token_shared(SharedLatentCache& cache, const SharedFactors& f,
                         std::span<const double> x, TrafficCounter* counter = nullptr);

/// Shared-latent decode: every head streams the whole width-R cache, so the
/// latent streams see length * R loads per head per step. With materialize
/// the full keys and values are written back and reloaded first (the naive
/// schedule), adding length * head_dim stores and loads per head per stream.
Matrix shared_decode_step(const SharedLatentCache& cache, const SharedFactors& f,
                          const Matrix& q_heads, const TileConfig& tiles, TrafficCounter& counter,
                          bool materialize = false);

enum class Mode { Fused, Eager, FlashFull, SharedLatent };
const char* mode_name(Mode m);
Mode mode_from_name(const std::string& name);

/// Analytic per-head, per-step expectations for one mode, compared against
/// measured counters. gamma: reconstruction multiply-accumulates; eta: cache
/// scalars read per head.
struct TrafficReport {
    Mode mode = Mode::Fused;
    std::uint64_t seq_len = 0;
    std::uint64_t n_heads = 0;
    std::uint64_t analytic_gamma = 0;
    std::uint64_t analytic_eta = 0;
    std::uint64_t measured_cache_loads_per_head = 0;
    std::uint64_t measured_reconstruction_flops_per_head = 0;
    bool match = false;
    double bytes_loaded_fp64 = 0.0; // 8 bytes per scalar
    double bytes_loaded_fp16 = 0.0; // informational 2-byte column
};

TrafficReport traffic_report(Mode mode, const TrafficCounter& counter, std::uint64_t seq_len,
                             std::uint64_t n_heads, std::uint64_t head_dim, std::uint64_t rank_k,
                             std::uint64_t shared_rank);

} // namespace wsvd::decode
