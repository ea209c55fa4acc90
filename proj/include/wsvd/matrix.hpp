#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace wsvd {

/// Dense row-major matrix of doubles. Value-semantic; shapes are checked on
/// every operation and mismatches throw ShapeError naming both operands.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }

    std::span<const double> row(std::size_t i) const;
    std::span<double> row(std::size_t i);
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    Matrix transposed() const;
    /// Copy of columns [c0, c0 + width).
    Matrix col_block(std::size_t c0, std::size_t width) const;
    void set_col_block(std::size_t c0, const Matrix& block);
    void append_row(std::span<const double> values);

    double frobenius_norm() const;
    double max_abs() const;
    double sum() const;
    bool all_finite() const;
    /// Throws NumericError naming `what` if any entry is not finite.
    void ensure_finite(const std::string& what) const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);
    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);    // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b); // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b); // a * b^T
Matrix elem_mul(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Matrix& a, const Matrix& b);
/// ||a^T a - I||_F, the orthonormality defect of the columns of `a`.
double orthonormality_defect(const Matrix& a);

// ===== binary matrix files =====
//
// Layout: 8 magic bytes "WSVDMAT1", then rows and cols as 64-bit little-endian
// unsigned integers, then rows*cols IEEE-754 doubles, little-endian, row-major.

void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

} // namespace wsvd
