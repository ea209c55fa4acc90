#include "wsvd/toymodel.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "wsvd/errors.hpp"
#include "wsvd/rng.hpp"

namespace wsvd::toy {

namespace {

// rng substream ids; a fixed layout keeps every artifact reproducible from one seed
constexpr std::uint64_t kStreamWeights = 1;
constexpr std::uint64_t kStreamTask = 2;
constexpr std::uint64_t kStreamCalibration = 3;

void require_input(const ModelConfig& cfg, const Matrix& x, const char* what) {
    if (x.rows() == 0 || x.cols() != cfg.embed_dim) {
        throw ShapeError(std::string(what) + " must be L x " + std::to_string(cfg.embed_dim) +
                         " with L >= 1, got " + std::to_string(x.rows()) + "x" +
                         std::to_string(x.cols()));
    }
}

} // namespace

void ModelConfig::validate() const {
    if (embed_dim == 0 || !std::has_single_bit(embed_dim)) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be a power of two");
    }
    if (n_heads == 0 || head_dim == 0 || n_heads * head_dim != embed_dim) {
        throw ConfigError("n_heads * head_dim must equal embed_dim, got " +
                          std::to_string(n_heads) + " * " + std::to_string(head_dim) + " != " +
                          std::to_string(embed_dim));
    }
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (outlier_channels > embed_dim) {
        throw ConfigError("outlier_channels " + std::to_string(outlier_channels) +
                          " exceeds embed_dim " + std::to_string(embed_dim));
    }
}

const Matrix& select(const AttentionWeights& w, WeightId id) {
    const LayerWeights& l = w.layers.at(id.layer);
    switch (id.kind) {
        case WeightKind::Q: return l.w_q;
        case WeightKind::K: return l.w_k;
        case WeightKind::V: return l.w_v;
        case WeightKind::O: return l.w_o;
        case WeightKind::Ff1: return l.ff1;
        case WeightKind::Ff2: return l.ff2;
    }
    throw ConfigError("unknown weight kind");
}

Matrix& select(AttentionWeights& w, WeightId id) {
    return const_cast<Matrix&>(select(static_cast<const AttentionWeights&>(w), id));
}

std::string weight_name(WeightId id) {
    const char* kind = nullptr;
    switch (id.kind) {
        case WeightKind::Q: kind = "w_q"; break;
        case WeightKind::K: kind = "w_k"; break;
        case WeightKind::V: kind = "w_v"; break;
        case WeightKind::O: kind = "w_o"; break;
        case WeightKind::Ff1: kind = "ff1"; break;
        case WeightKind::Ff2: kind = "ff2"; break;
    }
    return "layer" + std::to_string(id.layer) + "." + kind;
}

AttentionWeights init_weights(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng = Rng::stream(cfg.seed, kStreamWeights);
    const std::size_t e = cfg.embed_dim;
    const std::size_t f = cfg.ffn();
    // 1/sqrt(fan_in) keeps activations near unit scale through the stack
    const double se = 1.0 / std::sqrt(static_cast<double>(e));
    const double sf = 1.0 / std::sqrt(static_cast<double>(f));
    AttentionWeights w;
    w.layers.reserve(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.w_q = rng.normal_matrix(e, e, se);
        lw.w_k = rng.normal_matrix(e, e, se);
        lw.w_v = rng.normal_matrix(e, e, se);
        lw.w_o = rng.normal_matrix(e, e, se);
        lw.ff1 = rng.normal_matrix(e, f, se);
        lw.ff2 = rng.normal_matrix(f, e, sf);
        w.layers.push_back(std::move(lw));
    }
    return w;
}

AttentionWeights zero_like(const AttentionWeights& w) {
    AttentionWeights z;
    z.layers.reserve(w.layers.size());
    for (const LayerWeights& l : w.layers) {
        LayerWeights zl;
        zl.w_q = Matrix(l.w_q.rows(), l.w_q.cols());
        zl.w_k = Matrix(l.w_k.rows(), l.w_k.cols());
        zl.w_v = Matrix(l.w_v.rows(), l.w_v.cols());
        zl.w_o = Matrix(l.w_o.rows(), l.w_o.cols());
        zl.ff1 = Matrix(l.ff1.rows(), l.ff1.cols());
        zl.ff2 = Matrix(l.ff2.rows(), l.ff2.cols());
        z.layers.push_back(std::move(zl));
    }
    return z;
}

TaskMaps make_task(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng = Rng::stream(cfg.seed, kStreamTask);
    const double s = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    TaskMaps t;
    t.target_map = rng.normal_matrix(cfg.embed_dim, cfg.task(), s);
    t.readout = cfg.task() == cfg.embed_dim ? Matrix::identity(cfg.embed_dim)
                                            : rng.normal_matrix(cfg.embed_dim, cfg.task(), s);
    return t;
}

CalibrationBatch generate_calibration(const ModelConfig& cfg, std::size_t n_samples,
                                      std::size_t seq_len) {
    cfg.validate();
    if (n_samples == 0 || seq_len == 0) {
        throw ConfigError("calibration needs n_samples >= 1 and seq_len >= 1");
    }
    Rng rng = Rng::stream(cfg.seed, kStreamCalibration);
    const TaskMaps task = make_task(cfg);

    // outlier channels are spread evenly across the embedding
    std::vector<std::size_t> outliers;
    for (std::size_t i = 0; i < cfg.outlier_channels; ++i) {
        outliers.push_back(i * cfg.embed_dim / cfg.outlier_channels);
    }

    CalibrationBatch batch;
    batch.seq_len = seq_len;
    batch.inputs.reserve(n_samples);
    batch.targets.reserve(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        Matrix x = rng.normal_matrix(seq_len, cfg.embed_dim);
        for (std::size_t ch : outliers) {
            for (std::size_t t = 0; t < seq_len; ++t) x(t, ch) *= cfg.outlier_factor;
        }
        // target row t = (input row t+1) * target_map; last row targets zero
        Matrix shifted(seq_len, cfg.embed_dim);
        for (std::size_t t = 0; t + 1 < seq_len; ++t) {
            for (std::size_t c = 0; c < cfg.embed_dim; ++c) shifted(t, c) = x(t + 1, c);
        }
        batch.targets.push_back(matmul(shifted, task.target_map));
        batch.inputs.push_back(std::move(x));
    }
    return batch;
}

namespace {

/// Causal softmax over row prefix j <= i; rows of the result sum to one over
/// the unmasked positions, masked positions hold exact zeros.
Matrix causal_softmax(const Matrix& scores) {
    const std::size_t n = scores.rows();
    Matrix p(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = scores(i, 0);
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double e = std::exp(scores(i, j) - mx);
            p(i, j) = e;
            denom += e;
        }
        for (std::size_t j = 0; j <= i; ++j) p(i, j) /= denom;
    }
    return p;
}

} // namespace

Matrix forward(const ModelConfig& cfg, const AttentionWeights& w, const Matrix& x,
               std::vector<LayerTrace>* trace) {
    cfg.validate();
    require_input(cfg, x, "forward input");
    if (w.layers.size() != cfg.n_layers) {
        throw ShapeError("weights hold " + std::to_string(w.layers.size()) + " layers, config " +
                         std::to_string(cfg.n_layers));
    }
    const std::size_t L = x.rows();
    const std::size_t H = cfg.head_dim;
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(H));
    if (trace) trace->clear();

    Matrix cur = x;
    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        const LayerWeights& lw = w.layers[li];
        LayerTrace t;
        t.input = cur;
        t.q = matmul(cur, lw.w_q);
        t.k = matmul(cur, lw.w_k);
        t.v = matmul(cur, lw.w_v);
        t.heads_out = Matrix(L, cfg.embed_dim);
        t.probs.reserve(cfg.n_heads);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const Matrix qh = t.q.col_block(h * H, H);
            const Matrix kh = t.k.col_block(h * H, H);
            const Matrix vh = t.v.col_block(h * H, H);
            Matrix scores = matmul_nt(qh, kh);
            scores *= inv_sqrt_h;
            Matrix p = causal_softmax(scores);
            t.heads_out.set_col_block(h * H, matmul(p, vh));
            t.probs.push_back(std::move(p));
        }
        t.o_proj = matmul(t.heads_out, lw.w_o);
        Matrix pre = matmul(t.o_proj, lw.ff1);
        t.ffn_hidden = Matrix(L, cfg.ffn());
        for (std::size_t i = 0; i < pre.size(); ++i) t.ffn_hidden.data()[i] = std::tanh(pre.data()[i]);
        cur = matmul(t.ffn_hidden, lw.ff2);
        if (trace) trace->push_back(std::move(t));
    }
    cur.ensure_finite("forward output");
    return cur;
}

double sample_loss(const ModelConfig& cfg, const TaskMaps& task, const Matrix& output,
                   const Matrix& target, double loss_scale) {
    Matrix pred = matmul(output, task.readout);
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw ShapeError("loss: prediction " + std::to_string(pred.rows()) + "x" +
                         std::to_string(pred.cols()) + " vs target " +
                         std::to_string(target.rows()) + "x" + std::to_string(target.cols()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data()[i] - target.data()[i];
        s += d * d;
    }
    return loss_scale * s / static_cast<double>(pred.size());
}

AttentionWeights backward_sample(const ModelConfig& cfg, const AttentionWeights& w,
                                 const TaskMaps& task, const Matrix& x, const Matrix& target,
                                 double loss_scale) {
    std::vector<LayerTrace> trace;
    Matrix output = forward(cfg, w, x, &trace);

    const std::size_t L = x.rows();
    const std::size_t H = cfg.head_dim;
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(H));

    // d loss / d output
    Matrix pred = matmul(output, task.readout);
    Matrix dpred(pred.rows(), pred.cols());
    const double c = 2.0 * loss_scale / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        dpred.data()[i] = c * (pred.data()[i] - target.data()[i]);
    }
    Matrix dcur = matmul_nt(dpred, task.readout);

    AttentionWeights grads = zero_like(w);
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerWeights& lw = w.layers[li];
        const LayerTrace& t = trace[li];
        LayerWeights& g = grads.layers[li];

        // feed-forward block: cur = tanh(o_proj * ff1) * ff2
        g.ff2 = matmul_tn(t.ffn_hidden, dcur);
        Matrix dhidden = matmul_nt(dcur, lw.ff2);
        for (std::size_t i = 0; i < dhidden.size(); ++i) {
            const double h = t.ffn_hidden.data()[i];
            dhidden.data()[i] *= 1.0 - h * h;
        }
        g.ff1 = matmul_tn(t.o_proj, dhidden);
        Matrix do_proj = matmul_nt(dhidden, lw.ff1);

        // output projection
        g.w_o = matmul_tn(t.heads_out, do_proj);
        Matrix dheads = matmul_nt(do_proj, lw.w_o);

        Matrix dq(L, cfg.embed_dim), dk(L, cfg.embed_dim), dv(L, cfg.embed_dim);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const Matrix qh = t.q.col_block(h * H, H);
            const Matrix kh = t.k.col_block(h * H, H);
            const Matrix vh = t.v.col_block(h * H, H);
            const Matrix& p = t.probs[h];
            const Matrix doh = dheads.col_block(h * H, H);

            Matrix dp = matmul_nt(doh, vh);
            dv.set_col_block(h * H, matmul_tn(p, doh));

            // softmax backward restricted to the causal prefix
            Matrix ds(L, L);
            for (std::size_t i = 0; i < L; ++i) {
                double inner = 0.0;
                for (std::size_t j = 0; j <= i; ++j) inner += dp(i, j) * p(i, j);
                for (std::size_t j = 0; j <= i; ++j) {
                    ds(i, j) = p(i, j) * (dp(i, j) - inner) * inv_sqrt_h;
                }
            }
            dq.set_col_block(h * H, matmul(ds, kh));
            dk.set_col_block(h * H, matmul_tn(ds, qh));
        }
        g.w_q = matmul_tn(t.input, dq);
        g.w_k = matmul_tn(t.input, dk);
        g.w_v = matmul_tn(t.input, dv);

        if (li > 0) {
            dcur = matmul_nt(dq, lw.w_q);
            dcur += matmul_nt(dk, lw.w_k);
            dcur += matmul_nt(dv, lw.w_v);
        }
    }
    return grads;
}

double batch_loss(const ModelConfig& cfg, const AttentionWeights& w, const TaskMaps& task,
                  const CalibrationBatch& batch, double loss_scale) {
    if (batch.inputs.empty() || batch.inputs.size() != batch.targets.size()) {
        throw ShapeError("batch has " + std::to_string(batch.inputs.size()) + " inputs and " +
                         std::to_string(batch.targets.size()) + " targets");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        Matrix out = forward(cfg, w, batch.inputs[i]);
        s += sample_loss(cfg, task, out, batch.targets[i], loss_scale);
    }
    return s / static_cast<double>(batch.inputs.size());
}

AttentionWeights backward(const ModelConfig& cfg, const AttentionWeights& w, const TaskMaps& task,
                          const CalibrationBatch& batch, double loss_scale) {
    if (batch.inputs.empty() || batch.inputs.size() != batch.targets.size()) {
        throw ShapeError("batch has " + std::to_string(batch.inputs.size()) + " inputs and " +
                         std::to_string(batch.targets.size()) + " targets");
    }
    AttentionWeights acc = zero_like(w);
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        AttentionWeights g = backward_sample(cfg, w, task, batch.inputs[s], batch.targets[s],
                                             loss_scale);
        for (std::size_t l = 0; l < acc.layers.size(); ++l) {
            acc.layers[l].w_q += g.layers[l].w_q;
            acc.layers[l].w_k += g.layers[l].w_k;
            acc.layers[l].w_v += g.layers[l].w_v;
            acc.layers[l].w_o += g.layers[l].w_o;
            acc.layers[l].ff1 += g.layers[l].ff1;
            acc.layers[l].ff2 += g.layers[l].ff2;
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.inputs.size());
    for (LayerWeights& l : acc.layers) {
        l.w_q *= inv;
        l.w_k *= inv;
        l.w_v *= inv;
        l.w_o *= inv;
        l.ff1 *= inv;
        l.ff2 *= inv;
    }
    return acc;
}

} // namespace wsvd::toy
