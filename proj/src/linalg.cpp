#include "wsvd/linalg.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "wsvd/errors.hpp"

namespace wsvd {

namespace {

constexpr double kPairTol = 1e-12; // relative column-pair orthogonality threshold
constexpr int kMaxSweeps = 64;
constexpr double kNullColumn = 1e-13; // columns below this * ||m||_F are treated as numerically null

struct JacobiState {
    Matrix a; // working copy, columns converge to sigma_j * u_j
    Matrix v; // accumulated rotations, n x n orthogonal
};

double offdiag_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < a.cols(); ++i) {
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            double g = 0.0;
            for (std::size_t k = 0; k < a.rows(); ++k) g += a(k, i) * a(k, j);
            s += g * g;
        }
    }
    return std::sqrt(s);
}

void rotate_cols(Matrix& m, std::size_t i, std::size_t j, double c, double s) {
    for (std::size_t k = 0; k < m.rows(); ++k) {
        const double mi = m(k, i);
        const double mj = m(k, j);
        m(k, i) = c * mi - s * mj;
        m(k, j) = s * mi + c * mj;
    }
}

/// Core iteration on a tall matrix (rows >= cols).
JacobiState jacobi_sweeps(const Matrix& input) {
    JacobiState st{input, Matrix::identity(input.cols())};
    const std::size_t n = input.cols();

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t k = 0; k < st.a.rows(); ++k) {
                    const double ai = st.a(k, i);
                    const double aj = st.a(k, j);
                    alpha += ai * ai;
                    beta += aj * aj;
                    gamma += ai * aj;
                }
                if (std::abs(gamma) <= kPairTol * std::sqrt(alpha) * std::sqrt(beta)) continue;
                converged = false;
                // classic Jacobi angle; t solves t^2 + 2*zeta*t - 1 = 0
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = zeta == 0.0
                                     ? 1.0
                                     : std::copysign(1.0, zeta) /
                                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_cols(st.a, i, j, c, s);
                rotate_cols(st.v, i, j, c, s);
            }
        }
    }
    if (!converged) {
        throw NumericError("svd: Jacobi sweeps exhausted on " + std::to_string(input.rows()) + "x" +
                           std::to_string(input.cols()) + " matrix, off-diagonal norm " +
                           std::to_string(offdiag_norm(st.a)));
    }
    return st;
}

/// Deterministic orthonormal fill-in for columns whose singular value is
/// numerically null: Gram-Schmidt of canonical basis vectors against the
/// columns already in place.
void complete_null_columns(Matrix& u, const std::vector<bool>& is_null) {
    const std::size_t m = u.rows();
    const std::size_t k = u.cols();
    std::size_t candidate = 0;
    for (std::size_t j = 0; j < k; ++j) {
        if (!is_null[j]) continue;
        while (true) {
            if (candidate >= m) {
                throw NumericError("svd: failed to complete an orthonormal basis for " +
                                   std::to_string(m) + "x" + std::to_string(k) + " left factor");
            }
            std::vector<double> v(m, 0.0);
            v[candidate] = 1.0;
            ++candidate;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t c = 0; c < k; ++c) {
                    if (is_null[c] && c >= j) continue; // not yet filled
                    double d = 0.0;
                    for (std::size_t rr = 0; rr < m; ++rr) d += v[rr] * u(rr, c);
                    for (std::size_t rr = 0; rr < m; ++rr) v[rr] -= d * u(rr, c);
                }
            }
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (std::size_t rr = 0; rr < m; ++rr) u(rr, j) = v[rr] / norm;
                break;
            }
        }
    }
}

void apply_sign_convention(Matrix& u, Matrix& vt) {
    for (std::size_t j = 0; j < u.cols(); ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < u.rows(); ++i) {
            const double a = std::abs(u(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = -u(i, j);
            for (std::size_t c = 0; c < vt.cols(); ++c) vt(j, c) = -vt(j, c);
        }
    }
}

SvdResult svd_tall(const Matrix& input) {
    JacobiState st = jacobi_sweeps(input);
    const std::size_t n = input.cols();
    const double fro = input.frobenius_norm();

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < st.a.rows(); ++k) s += st.a(k, j) * st.a(k, j);
        norms[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdResult out;
    out.sigma.resize(n);
    out.u = Matrix(input.rows(), n);
    out.vt = Matrix(n, n);
    std::vector<bool> is_null(n, false);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.sigma[j] = norms[src];
        is_null[j] = norms[src] <= kNullColumn * fro;
        if (!is_null[j]) {
            for (std::size_t i = 0; i < input.rows(); ++i) out.u(i, j) = st.a(i, src) / norms[src];
        }
        for (std::size_t c = 0; c < n; ++c) out.vt(j, c) = st.v(c, src);
    }
    complete_null_columns(out.u, is_null);
    return out;
}

} // namespace

SvdResult svd(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw ShapeError("svd: empty input " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
    }
    m.ensure_finite("svd input");

    SvdResult out;
    if (m.rows() >= m.cols()) {
        out = svd_tall(m);
    } else {
        SvdResult t = svd_tall(m.transposed());
        out.sigma = std::move(t.sigma);
        out.u = t.vt.transposed();
        out.vt = t.u.transposed();
    }
    apply_sign_convention(out.u, out.vt);
    out.u.ensure_finite("svd left factor");
    out.vt.ensure_finite("svd right factor");
    return out;
}

std::pair<Matrix, Matrix> truncate(const SvdResult& s, std::size_t r) {
    if (r < 1 || r > s.sigma.size()) {
        throw ShapeError("truncate: rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(s.sigma.size()) + "]");
    }
    Matrix a(s.u.rows(), r);
    Matrix b(r, s.vt.cols());
    for (std::size_t j = 0; j < r; ++j) {
        const double root = std::sqrt(s.sigma[j]);
        for (std::size_t i = 0; i < a.rows(); ++i) a(i, j) = s.u(i, j) * root;
        for (std::size_t c = 0; c < b.cols(); ++c) b(j, c) = root * s.vt(j, c);
    }
    return {std::move(a), std::move(b)};
}

double tail_energy(const SvdResult& s, std::size_t r) {
    double e = 0.0;
    for (std::size_t i = r; i < s.sigma.size(); ++i) e += s.sigma[i] * s.sigma[i];
    return e;
}

Matrix hadamard(std::size_t dim) {
    if (dim == 0 || !std::has_single_bit(dim)) {
        const std::size_t lo = dim == 0 ? 1 : std::bit_floor(dim);
        const std::size_t hi = dim == 0 ? 1 : std::bit_ceil(dim);
        throw ShapeError("hadamard: size " + std::to_string(dim) +
                         " is not a power of two (nearest valid: " + std::to_string(lo) + ", " +
                         std::to_string(hi) + ")");
    }
    Matrix h(dim, dim);
    h(0, 0) = 1.0;
    for (std::size_t block = 1; block < dim; block *= 2) {
        // Sylvester doubling: [[h, h], [h, -h]]
        for (std::size_t i = 0; i < block; ++i) {
            for (std::size_t j = 0; j < block; ++j) {
                const double v = h(i, j);
                h(i, j + block) = v;
                h(i + block, j) = v;
                h(i + block, j + block) = -v;
            }
        }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : h.data()) v *= scale;
    return h;
}

SkewParam::SkewParam(Matrix t) : theta(std::move(t)) {
    if (theta.rows() != theta.cols()) {
        throw ShapeError("skew parameter must be square, got " + std::to_string(theta.rows()) +
                         "x" + std::to_string(theta.cols()));
    }
    for (std::size_t i = 0; i < theta.rows(); ++i) {
        for (std::size_t j = 0; j < theta.cols(); ++j) {
            // bitwise antisymmetry; negation is exact in IEEE-754
            if (theta(i, j) != -theta(j, i) || (i == j && theta(i, i) != 0.0)) {
                throw ShapeError("skew parameter violates theta(i,j) == -theta(j,i) at (" +
                                 std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }
    theta.ensure_finite("skew parameter");
}

SkewParam SkewParam::zero(std::size_t dim) { return SkewParam(Matrix(dim, dim)); }

SkewParam SkewParam::project(const Matrix& m) {
    if (m.rows() != m.cols()) {
        throw ShapeError("skew projection needs a square matrix, got " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()));
    }
    Matrix t(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = i + 1; j < m.cols(); ++j) {
            const double v = 0.5 * (m(i, j) - m(j, i));
            t(i, j) = v;
            t(j, i) = -v;
        }
    }
    return SkewParam(std::move(t));
}

Matrix cayley(const SkewParam& p) { return cayley_with_inverse(p).first; }

std::pair<Matrix, Matrix> cayley_with_inverse(const SkewParam& p) {
    const std::size_t n = p.dim();
    Matrix plus = Matrix::identity(n);  // I + theta/2
    Matrix minus = Matrix::identity(n); // I - theta/2
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            plus(i, j) += 0.5 * p.theta(i, j);
            minus(i, j) -= 0.5 * p.theta(i, j);
        }
    }
    Matrix inv = inverse(plus);
    return {matmul(minus, inv), std::move(inv)};
}

Matrix cayley_grad(const Matrix& q, const Matrix& p_inv, const Matrix& g_q) {
    // dq = -1/2 (I + q) dtheta p_inv, so the raw adjoint is
    // -1/2 (I + q)^T g_q p_inv^T, projected onto the skew subspace.
    Matrix iq = q;
    for (std::size_t i = 0; i < iq.rows(); ++i) iq(i, i) += 1.0;
    Matrix raw = matmul_nt(matmul_tn(iq, g_q), p_inv);
    raw *= -0.5;
    return SkewParam::project(raw).theta;
}

Matrix solve(const Matrix& a, const Matrix& b) {
    if (a.rows() != a.cols()) {
        throw ShapeError("solve requires a square system, got " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()));
    }
    if (a.rows() != b.rows()) {
        throw ShapeError("solve: system is " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " but rhs has " + std::to_string(b.rows()) +
                         " rows");
    }
    const std::size_t n = a.rows();
    Matrix lu = a;
    Matrix x = b;
    double max_pivot = 0.0;
    double min_pivot = 0.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(lu(r, col)) > std::abs(lu(piv, col))) piv = r;
        }
        const double pivot = lu(piv, col);
        const double apiv = std::abs(pivot);
        max_pivot = std::max(max_pivot, apiv);
        min_pivot = col == 0 ? apiv : std::min(min_pivot, apiv);
        if (apiv <= 1e-300 || apiv <= 1e-15 * max_pivot) {
            const double cond = min_pivot > 0.0 ? max_pivot / min_pivot
                                                : std::numeric_limits<double>::infinity();
            throw NumericError("solve: numerically singular " + std::to_string(n) + "x" +
                               std::to_string(n) + " system (pivot-ratio condition estimate " +
                               std::to_string(cond) + ")");
        }
        if (piv != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(lu(col, c), lu(piv, c));
            for (std::size_t c = 0; c < x.cols(); ++c) std::swap(x(col, c), x(piv, c));
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = lu(r, col) / pivot;
            if (f == 0.0) continue;
            lu(r, col) = 0.0;
            for (std::size_t c = col + 1; c < n; ++c) lu(r, c) -= f * lu(col, c);
            for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) -= f * x(col, c);
        }
    }
    for (std::size_t ri = n; ri-- > 0;) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            double s = x(ri, c);
            for (std::size_t k = ri + 1; k < n; ++k) s -= lu(ri, k) * x(k, c);
            x(ri, c) = s / lu(ri, ri);
        }
    }
    return x;
}

Matrix inverse(const Matrix& a) { return solve(a, Matrix::identity(a.rows())); }

} // namespace wsvd
