#include "wsvd/decode.hpp"

#include <algorithm>
#include <cmath>

#include "wsvd/errors.hpp"

namespace wsvd::decode {

const char* stream_name(Stream s) {
    switch (s) {
        case Stream::LatentK: return "latent_k";
        case Stream::LatentV: return "latent_v";
        case Stream::FullK: return "full_k";
        case Stream::FullV: return "full_v";
        case Stream::WeightsB: return "weights_b";
        case Stream::Query: return "query";
        case Stream::Output: return "output";
    }
    return "?";
}

std::uint64_t TrafficCounter::total_loads() const {
    std::uint64_t t = 0;
    for (const StreamTally& s : tallies_) t += s.loads;
    return t;
}

std::uint64_t TrafficCounter::total_stores() const {
    std::uint64_t t = 0;
    for (const StreamTally& s : tallies_) t += s.stores;
    return t;
}

void SoftmaxState::observe(double score, std::span<const double> value) {
    if (empty) {
        max_score = score;
        denom = 1.0;
        acc.assign(value.begin(), value.end());
        empty = false;
        return;
    }
    if (value.size() != acc.size()) {
        throw ShapeError("softmax state holds width " + std::to_string(acc.size()) +
                         ", observed width " + std::to_string(value.size()));
    }
    if (score <= max_score) {
        const double w = std::exp(score - max_score);
        denom += w;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * value[i];
    } else {
        const double c = std::exp(max_score - score);
        denom = denom * c + 1.0;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] * c + value[i];
        max_score = score;
    }
}

void SoftmaxState::merge(const SoftmaxState& other) {
    if (other.empty) return;
    if (empty) {
        *this = other;
        return;
    }
    if (other.acc.size() != acc.size()) {
        throw ShapeError("merging softmax states of widths " + std::to_string(acc.size()) +
                         " and " + std::to_string(other.acc.size()));
    }
    const double m = std::max(max_score, other.max_score);
    const double c1 = std::exp(max_score - m);
    const double c2 = std::exp(other.max_score - m);
    denom = denom * c1 + other.denom * c2;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] * c1 + other.acc[i] * c2;
    max_score = m;
}

// ===== fused path =====

LatentCache::LatentCache(const LayerFactors& f) {
    if (f.heads.empty()) throw ShapeError("latent cache over zero heads");
    k_.resize(f.heads.size());
    v_.resize(f.heads.size());
    for (std::size_t h = 0; h < f.heads.size(); ++h) {
        k_[h] = Matrix(0, f.heads[h].k.rank);
        v_[h] = Matrix(0, f.heads[h].v.rank);
    }
}

void LatentCache::push(std::size_t head, std::span<const double> ck, std::span<const double> cv) {
    k_[head].append_row(ck);
    v_[head].append_row(cv);
}

namespace {

/// row vector (len m) times matrix (m x n)
std::vector<double> vec_mat(std::span<const double> x, const Matrix& m) {
    if (x.size() != m.rows()) {
        throw ShapeError("vec_mat: vector length " + std::to_string(x.size()) + " vs matrix " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = m.data().data() + i * m.cols();
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += xi * row[j];
    }
    return out;
}

std::size_t clamp_tile(const TileConfig& tiles, std::size_t len) {
    if (tiles.tile_len == 0) throw ConfigError("tile length must be >= 1");
    return std::min(tiles.tile_len, len);
}

void require_query(const Matrix& q_heads, std::size_t n_heads, std::size_t head_dim) {
    if (q_heads.rows() != n_heads || q_heads.cols() != head_dim) {
        throw ShapeError("query block must be " + std::to_string(n_heads) + "x" +
                         std::to_string(head_dim) + ", got " + std::to_string(q_heads.rows()) +
                         "x" + std::to_string(q_heads.cols()));
    }
}

} // namespace

Matrix append_token(LatentCache& cache, const LayerFactors& f, std::span<const double> x,
                    TrafficCounter* counter) {
    if (x.size() != f.embed_dim) {
        throw ShapeError("token has " + std::to_string(x.size()) + " features, layer expects " +
                         std::to_string(f.embed_dim));
    }
    if (counter) counter->add_loads(Stream::Query, f.embed_dim);
    Matrix q_heads(f.heads.size(), f.head_dim);
    for (std::size_t h = 0; h < f.heads.size(); ++h) {
        const HeadProjection& p = f.heads[h];
        std::vector<double> ck = vec_mat(x, p.k.a);
        std::vector<double> cv = vec_mat(x, p.v.a);
        std::vector<double> cq = vec_mat(x, p.q.a);
        std::vector<double> qh = vec_mat(cq, p.q.b);
        cache.push(h, ck, cv);
        for (std::size_t j = 0; j < f.head_dim; ++j) q_heads(h, j) = qh[j];
        if (counter) {
            counter->add_flops(Stream::LatentK, f.embed_dim * p.k.rank);
            counter->add_stores(Stream::LatentK, p.k.rank);
            counter->add_flops(Stream::LatentV, f.embed_dim * p.v.rank);
            counter->add_stores(Stream::LatentV, p.v.rank);
            counter->add_flops(Stream::Query, f.embed_dim * p.q.rank + p.q.rank * f.head_dim);
        }
    }
    cache.bump_length();
    return q_heads;
}

Matrix fused_decode_step(const LatentCache& cache, const LayerFactors& f, const Matrix& q_heads,
                         const TileConfig& tiles, TrafficCounter& counter) {
    const std::size_t len = cache.length();
    if (len == 0) throw ShapeError("decode step over an empty cache");
    if (cache.n_heads() != f.heads.size()) {
        throw ShapeError("cache holds " + std::to_string(cache.n_heads()) + " heads, factors " +
                         std::to_string(f.heads.size()));
    }
    require_query(q_heads, f.heads.size(), f.head_dim);
    const std::size_t tile = clamp_tile(tiles, len);
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(f.head_dim));

    Matrix out(f.heads.size(), f.head_dim);
    for (std::size_t h = 0; h < f.heads.size(); ++h) {
        const Matrix& ck = cache.latent_k(h);
        const Matrix& cv = cache.latent_v(h);
        const Matrix& bk = f.heads[h].k.b;
        const Matrix& bv = f.heads[h].v.b;
        const std::size_t rk = f.heads[h].k.rank;
        const std::size_t rv = f.heads[h].v.rank;

        // B factors enter on-chip once per head per step
        counter.add_loads(Stream::WeightsB, rk * f.head_dim + rv * f.head_dim);
        counter.add_loads(Stream::Query, f.head_dim);

        const std::span<const double> qh = q_heads.row(h);
        SoftmaxState state;
        for (std::size_t t0 = 0; t0 < len; t0 += tile) {
            const std::size_t t1 = std::min(t0 + tile, len);
            counter.add_loads(Stream::LatentK, (t1 - t0) * rk);
            counter.add_loads(Stream::LatentV, (t1 - t0) * rv);
            SoftmaxState local;
            for (std::size_t j = t0; j < t1; ++j) {
                std::vector<double> key = vec_mat(ck.row(j), bk);
                counter.add_flops(Stream::LatentK, rk * f.head_dim);
                const double score = dot(qh, key) * inv_sqrt_h;
                counter.add_flops(Stream::Query, f.head_dim);
                local.observe(score, cv.row(j));
                counter.add_flops(Stream::LatentV, rv);
            }
            state.merge(local);
        }
        // accumulator lives in latent space; one up-projection after the tiles
        std::vector<double> latent_out(state.acc);
        for (double& v : latent_out) v /= state.denom;
        std::vector<double> head_out = vec_mat(latent_out, bv);
        counter.add_flops(Stream::Output, rv * f.head_dim);
        counter.add_stores(Stream::Output, f.head_dim);
        for (std::size_t j = 0; j < f.head_dim; ++j) out(h, j) = head_out[j];
    }
    return out;
}

// ===== dense baselines =====

FullKvCache::FullKvCache(std::size_t n_heads, std::size_t head_dim) {
    if (n_heads == 0 || head_dim == 0) throw ShapeError("empty kv cache geometry");
    k_.assign(n_heads, Matrix(0, head_dim));
    v_.assign(n_heads, Matrix(0, head_dim));
}

void FullKvCache::push(std::size_t head, std::span<const double> k, std::span<const double> v) {
    k_[head].append_row(k);
    v_[head].append_row(v);
}

Matrix append_token_dense(FullKvCache& cache, const DenseProjections& w, std::span<const double> x,
                          TrafficCounter* counter) {
    const std::size_t e = w.w_q.rows();
    if (x.size() != e) {
        throw ShapeError("token has " + std::to_string(x.size()) + " features, layer expects " +
                         std::to_string(e));
    }
    if (counter) counter->add_loads(Stream::Query, e);
    const std::size_t hd = w.head_dim;
    const std::size_t n_heads = cache.n_heads();
    std::vector<double> q = vec_mat(x, w.w_q);
    std::vector<double> k = vec_mat(x, w.w_k);
    std::vector<double> v = vec_mat(x, w.w_v);
    Matrix q_heads(n_heads, hd);
    for (std::size_t h = 0; h < n_heads; ++h) {
        cache.push(h, {k.data() + h * hd, hd}, {v.data() + h * hd, hd});
        for (std::size_t j = 0; j < hd; ++j) q_heads(h, j) = q[h * hd + j];
        if (counter) {
            counter->add_flops(Stream::FullK, e * hd);
            counter->add_stores(Stream::FullK, hd);
            counter->add_flops(Stream::FullV, e * hd);
            counter->add_stores(Stream::FullV, hd);
            counter->add_flops(Stream::Query, e * hd);
        }
    }
    cache.bump_length();
    return q_heads;
}

Matrix eager_decode_step(const FullKvCache& cache, const Matrix& q_heads,
                         TrafficCounter& counter) {
    const std::size_t len = cache.length();
    if (len == 0) throw ShapeError("decode step over an empty cache");
    const std::size_t hd = cache.keys(0).cols();
    require_query(q_heads, cache.n_heads(), hd);
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix out(cache.n_heads(), hd);
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
        const Matrix& keys = cache.keys(h);
        const Matrix& values = cache.values(h);
        const std::span<const double> qh = q_heads.row(h);
        counter.add_loads(Stream::Query, hd);

        // materialized score row, then a one-shot softmax over it
        std::vector<double> scores(len);
        counter.add_loads(Stream::FullK, len * hd);
        for (std::size_t j = 0; j < len; ++j) {
            scores[j] = dot(qh, keys.row(j)) * inv_sqrt_h;
        }
        counter.add_flops(Stream::Query, len * hd);
        counter.add_stores(Stream::Query, len); // the score row is written out

        const double mx = *std::max_element(scores.begin(), scores.end());
        double denom = 0.0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        std::vector<double> acc(hd, 0.0);
        counter.add_loads(Stream::FullV, len * hd);
        for (std::size_t j = 0; j < len; ++j) {
            const double* row = values.data().data() + j * hd;
            for (std::size_t c = 0; c < hd; ++c) acc[c] += scores[j] * row[c];
        }
        counter.add_flops(Stream::FullV, len * hd);
        counter.add_stores(Stream::Output, hd);
        for (std::size_t c = 0; c < hd; ++c) out(h, c) = acc[c] / denom;
    }
    return out;
}

Matrix flash_decode_step(const FullKvCache& cache, const Matrix& q_heads, const TileConfig& tiles,
                         TrafficCounter& counter) {
    const std::size_t len = cache.length();
    if (len == 0) throw ShapeError("decode step over an empty cache");
    const std::size_t hd = cache.keys(0).cols();
    require_query(q_heads, cache.n_heads(), hd);
    const std::size_t tile = clamp_tile(tiles, len);
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix out(cache.n_heads(), hd);
    for (std::size_t h = 0; h < cache.n_heads(); ++h) {
        const Matrix& keys = cache.keys(h);
        const Matrix& values = cache.values(h);
        const std::span<const double> qh = q_heads.row(h);
        counter.add_loads(Stream::Query, hd);

        SoftmaxState state;
        for (std::size_t t0 = 0; t0 < len; t0 += tile) {
            const std::size_t t1 = std::min(t0 + tile, len);
            counter.add_loads(Stream::FullK, (t1 - t0) * hd);
            counter.add_loads(Stream::FullV, (t1 - t0) * hd);
            SoftmaxState local;
            for (std::size_t j = t0; j < t1; ++j) {
                const double score = dot(qh, keys.row(j)) * inv_sqrt_h;
                counter.add_flops(Stream::Query, hd);
                local.observe(score, values.row(j));
                counter.add_flops(Stream::FullV, hd);
            }
            state.merge(local);
        }
        counter.add_stores(Stream::Output, hd);
        for (std::size_t c = 0; c < hd; ++c) out(h, c) = state.acc[c] / state.denom;
    }
    return out;
}

// ===== shared-latent baseline =====

void append_token_shared(SharedLatentCache& cache, const SharedFactors& f,
                         std::span<const double> x, TrafficCounter* counter) {
    const std::size_t e = f.a_k.rows();
    if (x.size() != e) {
        throw ShapeError("token has " + std::to_string(x.size()) + " features, layer expects " +
                         std::to_string(e));
    }
    std::vector<double> ck = vec_mat(x, f.a_k);
    std::vector<double> cv = vec_mat(x, f.a_v);
    cache.c_k.append_row(ck);
    cache.c_v.append_row(cv);
    if (counter) {
        counter->add_loads(Stream::Query, e);
        // one shared latent row per token, written once for all heads
        counter->add_flops(Stream::LatentK, e * f.a_k.cols());
        counter->add_stores(Stream::LatentK, f.a_k.cols());
        counter->add_flops(Stream::LatentV, e * f.a_v.cols());
        counter->add_stores(Stream::LatentV, f.a_v.cols());
    }
}

Matrix shared_decode_step(const SharedLatentCache& cache, const SharedFactors& f,
                          const Matrix& q_heads, const TileConfig& tiles, TrafficCounter& counter,
                          bool materialize) {
    const std::size_t len = cache.length();
    if (len == 0) throw ShapeError("decode step over an empty cache");
    const std::size_t hd = f.head_dim;
    const std::size_t rr = f.b_k.rows(); // shared width R
    require_query(q_heads, f.n_heads, hd);
    const std::size_t tile = clamp_tile(tiles, len);
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix out(f.n_heads, hd);
    for (std::size_t h = 0; h < f.n_heads; ++h) {
        const Matrix bk = f.b_k.col_block(h * hd, hd); // R x H
        const Matrix bv = f.b_v.col_block(h * hd, hd);
        const std::span<const double> qh = q_heads.row(h);
        counter.add_loads(Stream::WeightsB, 2 * rr * hd);
        counter.add_loads(Stream::Query, hd);

        if (materialize) {
            // naive schedule: rebuild this head's full keys and values, write
            // them back, reload them, then attend
            Matrix keys = matmul(cache.c_k, bk);
            Matrix values = matmul(cache.c_v, bv);
            counter.add_loads(Stream::LatentK, len * rr);
            counter.add_flops(Stream::LatentK, len * rr * hd);
            counter.add_loads(Stream::LatentV, len * rr);
            counter.add_flops(Stream::LatentV, len * rr * hd);
            counter.add_stores(Stream::FullK, len * hd);
            counter.add_stores(Stream::FullV, len * hd);
            counter.add_loads(Stream::FullK, len * hd);
            counter.add_loads(Stream::FullV, len * hd);

            std::vector<double> scores(len);
            for (std::size_t j = 0; j < len; ++j) {
                scores[j] = dot(qh, keys.row(j)) * inv_sqrt_h;
            }
            counter.add_flops(Stream::Query, len * hd);
            const double mx = *std::max_element(scores.begin(), scores.end());
            double denom = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            std::vector<double> acc(hd, 0.0);
            for (std::size_t j = 0; j < len; ++j) {
                const double* row = values.data().data() + j * hd;
                for (std::size_t c = 0; c < hd; ++c) acc[c] += scores[j] * row[c];
            }
            counter.add_flops(Stream::FullV, len * hd);
            counter.add_stores(Stream::Output, hd);
            for (std::size_t c = 0; c < hd; ++c) out(h, c) = acc[c] / denom;
            continue;
        }

        // streamed schedule: every head still reads the whole width-R latent
        SoftmaxState state;
        for (std::size_t t0 = 0; t0 < len; t0 += tile) {
            const std::size_t t1 = std::min(t0 + tile, len);
            counter.add_loads(Stream::LatentK, (t1 - t0) * rr);
            counter.add_loads(Stream::LatentV, (t1 - t0) * rr);
            SoftmaxState local;
            for (std::size_t j = t0; j < t1; ++j) {
                std::vector<double> key = vec_mat(cache.c_k.row(j), bk);
                counter.add_flops(Stream::LatentK, rr * hd);
                const double score = dot(qh, key) * inv_sqrt_h;
                counter.add_flops(Stream::Query, hd);
                local.observe(score, cache.c_v.row(j));
                counter.add_flops(Stream::LatentV, rr);
            }
            state.merge(local);
        }
        std::vector<double> latent_out(state.acc);
        for (double& v : latent_out) v /= state.denom;
        std::vector<double> head_out = vec_mat(latent_out, bv);
        counter.add_flops(Stream::Output, rr * hd);
        counter.add_stores(Stream::Output, hd);
        for (std::size_t c = 0; c < hd; ++c) out(h, c) = head_out[c];
    }
    return out;
}

const char* mode_name(Mode m) {
    switch (m) {
        case Mode::Fused: return "fused";
        case Mode::Eager: return "eager";
        case Mode::FlashFull: return "flash_full";
        case Mode::SharedLatent: return "shared_latent";
    }
    return "?";
}

Mode mode_from_name(const std::string& name) {
    if (name == "fused") return Mode::Fused;
    if (name == "eager") return Mode::Eager;
    if (name == "flash_full") return Mode::FlashFull;
    if (name == "shared_latent") return Mode::SharedLatent;
    throw ConfigError("unknown decode mode '" + name + "'");
}

TrafficReport traffic_report(Mode mode, const TrafficCounter& counter, std::uint64_t seq_len,
                             std::uint64_t n_heads, std::uint64_t head_dim, std::uint64_t rank_k,
                             std::uint64_t shared_rank) {
    if (n_heads == 0) throw ConfigError("traffic report over zero heads");
    TrafficReport rep;
    rep.mode = mode;
    rep.seq_len = seq_len;
    rep.n_heads = n_heads;
    switch (mode) {
        case Mode::Fused:
            rep.analytic_eta = seq_len * rank_k;
            rep.analytic_gamma = seq_len * rank_k * head_dim;
            break;
        case Mode::SharedLatent:
            rep.analytic_eta = seq_len * shared_rank;
            rep.analytic_gamma = seq_len * shared_rank * head_dim;
            break;
        case Mode::Eager:
        case Mode::FlashFull:
            rep.analytic_eta = seq_len * head_dim; // dense rows read, no reconstruction
            rep.analytic_gamma = 0;
            break;
    }
    const bool latent = mode == Mode::Fused || mode == Mode::SharedLatent;
    const StreamTally& cache_stream =
        counter[latent ? Stream::LatentK : Stream::FullK];
    const bool divisible =
        cache_stream.loads % n_heads == 0 && cache_stream.flops % n_heads == 0;
    rep.measured_cache_loads_per_head = divisible ? cache_stream.loads / n_heads : 0;
    rep.measured_reconstruction_flops_per_head = divisible ? cache_stream.flops / n_heads : 0;
    rep.match = divisible && rep.measured_cache_loads_per_head == rep.analytic_eta &&
                rep.measured_reconstruction_flops_per_head == rep.analytic_gamma;
    rep.bytes_loaded_fp64 = 8.0 * static_cast<double>(counter.total_loads());
    rep.bytes_loaded_fp16 = 2.0 * static_cast<double>(counter.total_loads());
    return rep;
}

} // namespace wsvd::decode
