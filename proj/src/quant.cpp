#include "wsvd/quant.hpp"

#include <cmath>
#include <string>

#include "wsvd/errors.hpp"
#include "wsvd/linalg.hpp"
#include "wsvd/optim.hpp"

namespace wsvd::quant {

std::vector<double> QuantSpec::default_clip_grid() {
    std::vector<double> g;
    for (int i = 10; i <= 20; ++i) g.push_back(static_cast<double>(i) / 20.0);
    return g;
}

void QuantSpec::validate() const {
    if (weight_bits != 4 && weight_bits != 8) {
        throw ConfigError("weight_bits must be 4 or 8, got " + std::to_string(weight_bits));
    }
    if (activation_bits != 4 && activation_bits != 8) {
        throw ConfigError("activation_bits must be 4 or 8, got " +
                          std::to_string(activation_bits));
    }
    if (clip_grid.empty()) throw ConfigError("empty clip grid");
    for (double c : clip_grid) {
        if (!(c > 0.0) || c > 1.0) {
            throw ConfigError("clip ratio " + std::to_string(c) + " outside (0, 1]");
        }
    }
}

int qmax(int bits) {
    if (bits != 4 && bits != 8) throw ConfigError("bit width must be 4 or 8");
    return (1 << (bits - 1)) - 1;
}

namespace {

std::vector<double> column_max_abs(const Matrix& w) {
    std::vector<double> m(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            m[j] = std::max(m[j], std::abs(w(i, j)));
        }
    }
    return m;
}

std::vector<double> scales_for_clip(const std::vector<double>& maxabs, double clip, int bits) {
    const double q = static_cast<double>(qmax(bits));
    std::vector<double> s(maxabs.size());
    for (std::size_t j = 0; j < maxabs.size(); ++j) {
        s[j] = maxabs[j] == 0.0 ? 1.0 : clip * maxabs[j] / q; // zero columns quantize to 0 at scale 1
    }
    return s;
}

double quantize_error(const Matrix& w, const std::vector<double>& scales, int bits) {
    const auto lim = static_cast<long long>(qmax(bits));
    double err = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            const double s = scales[j];
            long long q = std::llround(w(i, j) / s);
            q = std::clamp(q, -lim, lim);
            const double d = w(i, j) - static_cast<double>(q) * s;
            err += d * d;
        }
    }
    return err;
}

} // namespace

WeightQuant quantize_with_scales(const Matrix& w, const std::vector<double>& scales, int bits) {
    if (scales.size() != w.cols()) {
        throw ShapeError("quantize: " + std::to_string(scales.size()) + " scales for " +
                         std::to_string(w.cols()) + " columns");
    }
    for (double s : scales) {
        if (!(s > 0.0)) throw NumericError("quantization scales must be positive");
    }
    const auto lim = static_cast<long long>(qmax(bits));
    WeightQuant out;
    out.q = IntMatrix(w.rows(), w.cols());
    out.scales = scales;
    out.bits = bits;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            long long q = std::llround(w(i, j) / scales[j]);
            out.q(i, j) = static_cast<std::int8_t>(std::clamp(q, -lim, lim));
        }
    }
    return out;
}

WeightQuant quantize_weight(const Matrix& w, const QuantSpec& spec) {
    spec.validate();
    w.ensure_finite("quantize input");
    const std::vector<double> maxabs = column_max_abs(w);

    double best_clip = spec.clip_grid.front();
    double best_err = -1.0;
    for (double clip : spec.clip_grid) {
        const double err = quantize_error(w, scales_for_clip(maxabs, clip, spec.weight_bits),
                                          spec.weight_bits);
        if (best_err < 0.0 || err < best_err) { // strict: first grid point wins ties
            best_err = err;
            best_clip = clip;
        }
    }
    WeightQuant out =
        quantize_with_scales(w, scales_for_clip(maxabs, best_clip, spec.weight_bits),
                             spec.weight_bits);
    out.clip = best_clip;
    return out;
}

Matrix dequantize_weight(const WeightQuant& wq) {
    Matrix w(wq.q.rows, wq.q.cols);
    for (std::size_t i = 0; i < wq.q.rows; ++i) {
        for (std::size_t j = 0; j < wq.q.cols; ++j) {
            w(i, j) = static_cast<double>(wq.q(i, j)) * wq.scales[j];
        }
    }
    return w;
}

ActivationQuant quantize_activation(const Matrix& x, int bits) {
    x.ensure_finite("activation quantize input");
    const auto lim = static_cast<long long>(qmax(bits));
    const double q = static_cast<double>(qmax(bits));
    ActivationQuant out;
    out.q = IntMatrix(x.rows(), x.cols());
    out.scales.resize(x.rows());
    out.bits = bits;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) m = std::max(m, std::abs(x(i, j)));
        const double s = m == 0.0 ? 1.0 : m / q;
        out.scales[i] = s;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            out.q(i, j) = static_cast<std::int8_t>(
                std::clamp(std::llround(x(i, j) / s), -lim, lim));
        }
    }
    return out;
}

Matrix dequantize_activation(const ActivationQuant& aq) {
    Matrix x(aq.q.rows, aq.q.cols);
    for (std::size_t i = 0; i < aq.q.rows; ++i) {
        for (std::size_t j = 0; j < aq.q.cols; ++j) {
            x(i, j) = static_cast<double>(aq.q(i, j)) * aq.scales[i];
        }
    }
    return x;
}

void RotationPair::validate(std::size_t embed_dim, std::size_t rank) const {
    if (s1.rows() != embed_dim || s1.cols() != embed_dim) {
        throw ShapeError("s1 must be " + std::to_string(embed_dim) + "x" +
                         std::to_string(embed_dim) + ", got " + std::to_string(s1.rows()) + "x" +
                         std::to_string(s1.cols()));
    }
    if (s2.rows() != rank || s2.cols() != rank) {
        throw ShapeError("s2 must be " + std::to_string(rank) + "x" + std::to_string(rank) +
                         ", got " + std::to_string(s2.rows()) + "x" + std::to_string(s2.cols()));
    }
    const double d1 = orthonormality_defect(s1);
    if (!(d1 <= 1e-12)) {
        throw NumericError("s1 orthogonality defect " + std::to_string(d1) + " exceeds 1e-12");
    }
    const double d2 = orthonormality_defect(s2);
    if (!(d2 <= 1e-10)) {
        throw NumericError("s2 orthogonality defect " + std::to_string(d2) + " exceeds 1e-10");
    }
}

factorize::HeadFactors insert_rotations(const factorize::HeadFactors& f,
                                        const RotationPair& pair) {
    pair.validate(f.a.rows(), f.rank);
    factorize::HeadFactors out = f;
    out.a = matmul_nt(matmul(pair.s1, f.a), pair.s2);
    out.b = matmul(pair.s2, f.b);
    return out;
}

Matrix fake_quantize(const Matrix& w, double clip, int bits, Matrix* ste_mask) {
    const auto lim = static_cast<long long>(qmax(bits));
    const double q = static_cast<double>(qmax(bits));
    const std::vector<double> maxabs = column_max_abs(w);
    Matrix out(w.rows(), w.cols());
    if (ste_mask) *ste_mask = Matrix(w.rows(), w.cols());
    for (std::size_t j = 0; j < w.cols(); ++j) {
        const double s = maxabs[j] == 0.0 ? 1.0 : clip * maxabs[j] / q;
        const double pass = s * q; // gradient passes through inside the clip range
        for (std::size_t i = 0; i < w.rows(); ++i) {
            const long long qi = std::clamp(std::llround(w(i, j) / s), -lim, lim);
            out(i, j) = static_cast<double>(qi) * s;
            if (ste_mask && std::abs(w(i, j)) <= pass) (*ste_mask)(i, j) = 1.0;
        }
    }
    return out;
}

double qat_objective(const Matrix& rotated_target, const Matrix& rotated_fisher, const Matrix& a,
                     const Matrix& b, const Matrix& s1, const Matrix& s2, double clip_a,
                     double clip_b, int bits) {
    Matrix a_rot = matmul_nt(matmul(s1, a), s2);
    Matrix b_rot = matmul(s2, b);
    Matrix qa = fake_quantize(a_rot, clip_a, bits, nullptr);
    Matrix qb = fake_quantize(b_rot, clip_b, bits, nullptr);
    Matrix rec = matmul(qa, qb);
    double s = 0.0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        const double d = rotated_target.data()[i] - rec.data()[i];
        s += rotated_fisher.data()[i] * d * d;
    }
    return s;
}

QatResult local_qat(const factorize::HeadFactors& f, const Matrix& s1, const Matrix& w_head,
                    const Matrix& rotated_fisher, const QatOptions& opts) {
    opts.spec.validate();
    const std::size_t e = f.a.rows();
    const std::size_t r = f.rank;
    if (f.b.rows() != r || f.a.cols() != r) {
        throw ShapeError("factors disagree with rank " + std::to_string(r));
    }
    if (w_head.rows() != e || w_head.cols() != f.b.cols()) {
        throw ShapeError("target head is " + std::to_string(w_head.rows()) + "x" +
                         std::to_string(w_head.cols()) + ", factors produce " + std::to_string(e) +
                         "x" + std::to_string(f.b.cols()));
    }
    if (rotated_fisher.rows() != w_head.rows() || rotated_fisher.cols() != w_head.cols()) {
        throw ShapeError("rotated fisher is " + std::to_string(rotated_fisher.rows()) + "x" +
                         std::to_string(rotated_fisher.cols()) + ", target " +
                         std::to_string(w_head.rows()) + "x" + std::to_string(w_head.cols()));
    }
    {
        const double d1 = orthonormality_defect(s1);
        if (!(d1 <= 1e-12)) {
            throw NumericError("s1 orthogonality defect " + std::to_string(d1) +
                               " exceeds 1e-12");
        }
    }
    const int bits = opts.spec.weight_bits;
    const Matrix target = matmul(s1, w_head); // s1 * w, fixed throughout

    // clip ratios are frozen from a grid search at the initial rotation (s2 = I)
    Matrix a = f.a;
    Matrix b = f.b;
    const double clip_a = quantize_weight(matmul(s1, a), opts.spec).clip;
    const double clip_b = quantize_weight(b, opts.spec).clip;

    SkewParam theta = SkewParam::zero(r);
    Matrix s2 = Matrix::identity(r);

    factorize::FinetuneReport rep;
    rep.learning_rate = opts.lr;
    double loss = qat_objective(target, rotated_fisher, a, b, s1, s2, clip_a, clip_b, bits);
    rep.initial_loss = loss;
    rep.trace.push_back(loss);

    Matrix best_a = a, best_b = b, best_theta = theta.theta;
    double best_loss = loss;
    double max_defect = orthonormality_defect(s2);

    AdamState opt_a(a.rows(), a.cols());
    AdamState opt_b(b.rows(), b.cols());
    AdamState opt_t(r, r);

    for (std::size_t step = 0; step < opts.steps; ++step) {
        auto [q2, p_inv] = cayley_with_inverse(theta);
        s2 = std::move(q2);
        max_defect = std::max(max_defect, orthonormality_defect(s2));

        Matrix s1a = matmul(s1, a);
        Matrix a_rot = matmul_nt(s1a, s2);
        Matrix b_rot = matmul(s2, b);
        Matrix mask_a, mask_b;
        Matrix qa = fake_quantize(a_rot, clip_a, bits, &mask_a);
        Matrix qb = fake_quantize(b_rot, clip_b, bits, &mask_b);

        Matrix res = matmul(qa, qb);
        for (std::size_t i = 0; i < res.size(); ++i) {
            res.data()[i] = rotated_fisher.data()[i] * (target.data()[i] - res.data()[i]);
        }
        // adjoints of the fake-quantized factors, gated by the pass-through masks
        Matrix g_qa = matmul_nt(res, qb);
        g_qa *= -2.0;
        Matrix g_qb = matmul_tn(qa, res);
        g_qb *= -2.0;
        g_qa = elem_mul(g_qa, mask_a);
        g_qb = elem_mul(g_qb, mask_b);

        Matrix g_a = matmul(matmul_tn(s1, g_qa), s2);
        Matrix g_b = matmul_tn(s2, g_qb);
        Matrix g_s2 = matmul_tn(g_qa, s1a);
        g_s2 += matmul_nt(g_qb, b);
        Matrix g_theta = cayley_grad(s2, p_inv, g_s2);

        Matrix prev_a = a, prev_b = b, prev_theta = theta.theta;
        opt_a.step(a, g_a, opts.lr);
        opt_b.step(b, g_b, opts.lr);
        Matrix th = theta.theta;
        opt_t.step(th, g_theta, opts.lr);
        theta = SkewParam::project(th); // exact no-op when already skew

        Matrix s2_next = cayley(theta);
        max_defect = std::max(max_defect, orthonormality_defect(s2_next));
        loss = qat_objective(target, rotated_fisher, a, b, s1, s2_next, clip_a, clip_b, bits);
        if (!std::isfinite(loss)) {
            rep.aborted = true;
            rep.diagnostic = "non-finite objective at step " + std::to_string(step + 1) +
                             "; returning last finite state";
            a = std::move(prev_a);
            b = std::move(prev_b);
            theta = SkewParam(std::move(prev_theta));
            break;
        }
        rep.trace.push_back(loss);
        ++rep.step_count;
        if (loss < best_loss) {
            best_loss = loss;
            best_a = a;
            best_b = b;
            best_theta = theta.theta;
        }
    }
    rep.final_loss = best_loss;

    QatResult out;
    out.factors = f;
    out.factors.a = best_a;
    out.factors.b = best_b;
    out.s2 = cayley(SkewParam(best_theta));
    out.max_s2_defect = std::max(max_defect, orthonormality_defect(out.s2));
    out.report = std::move(rep);

    // export integers at the trained point: dynamic scales, frozen clips
    Matrix a_rot = matmul_nt(matmul(s1, best_a), out.s2);
    Matrix b_rot = matmul(out.s2, best_b);
    out.quantized.a = quantize_with_scales(
        a_rot, scales_for_clip(column_max_abs(a_rot), clip_a, bits), bits);
    out.quantized.a.clip = clip_a;
    out.quantized.b = quantize_with_scales(
        b_rot, scales_for_clip(column_max_abs(b_rot), clip_b, bits), bits);
    out.quantized.b.clip = clip_b;
    out.quantized.s2_skew = best_theta;
    out.quantized.rank = f.rank;
    out.quantized.layer = f.layer;
    out.quantized.head = f.head;
    out.quantized.role = f.role;
    out.quantized.weight_bits = bits;
    return out;
}

} // namespace wsvd::quant
