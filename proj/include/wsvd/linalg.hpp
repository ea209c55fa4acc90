#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "wsvd/matrix.hpp"

namespace wsvd {

/// Factorization m = u * diag(sigma) * vt with k = min(rows, cols).
/// sigma is nonincreasing and nonnegative; the columns of u (rows x k) and the
/// rows of vt (k x cols) are orthonormal. Sign convention: the largest-magnitude
/// entry of each column of u is nonnegative (first index wins ties).
struct SvdResult {
    Matrix u;
    std::vector<double> sigma;
    Matrix vt;
};

/// One-sided Jacobi SVD with cyclic sweeps. A column pair is rotated while
/// |a_i . a_j| > 1e-12 * |a_i| * |a_j|; at most 64 sweeps, then NumericError
/// naming the dimensions and the residual off-diagonal norm. Deterministic
/// for identical input bits.
SvdResult svd(const Matrix& m);

/// Rank-r split from an SVD: a = u_r * sqrt(sigma_r), b = sqrt(sigma_r) * vt_r,
/// so a*b is the best rank-r approximation of the decomposed matrix.
/// Requires 1 <= r <= sigma.size().
std::pair<Matrix, Matrix> truncate(const SvdResult& s, std::size_t r);

/// Squared tail energy sum(sigma_i^2, i > r); sqrt of it is the Frobenius
/// error of the rank-r approximation.
double tail_energy(const SvdResult& s, std::size_t r);

/// Orthonormal Sylvester-Hadamard matrix of size dim x dim, entries are
/// +-1/sqrt(dim). dim must be a power of two; otherwise ShapeError naming the
/// nearest valid sizes.
Matrix hadamard(std::size_t dim);

/// Exactly skew-symmetric square parameter: theta(i,j) == -theta(j,i) bitwise.
struct SkewParam {
    explicit SkewParam(Matrix theta);
    static SkewParam zero(std::size_t dim);
    /// Antisymmetric part (m - m^T)/2 with an exactly zero diagonal, the
    /// orthogonal projection of any square matrix onto the skew subspace.
    static SkewParam project(const Matrix& m);

    std::size_t dim() const { return theta.rows(); }
    Matrix theta;
};

/// Cayley transform q = (I - theta/2) * (I + theta/2)^-1; q is orthogonal for
/// any skew parameter and cayley(0) is exactly the identity. A numerically
/// singular I + theta/2 raises NumericError with a condition estimate.
Matrix cayley(const SkewParam& p);

/// cayley(p) together with inv(I + theta/2), which the gradient needs.
std::pair<Matrix, Matrix> cayley_with_inverse(const SkewParam& p);

/// Pullback of a loss gradient through the Cayley transform: given
/// g = dL/dq at q = cayley(theta), returns the skew-projected dL/dtheta.
Matrix cayley_grad(const Matrix& q, const Matrix& p_inv, const Matrix& g_q);

/// Solves a x = b by Gaussian elimination with partial pivoting.
Matrix solve(const Matrix& a, const Matrix& b);

/// Explicit inverse via solve(a, I).
Matrix inverse(const Matrix& a);

} // namespace wsvd
