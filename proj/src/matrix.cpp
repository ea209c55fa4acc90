#include "wsvd/matrix.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "wsvd/errors.hpp"

namespace wsvd {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + " requires equal shapes, got " +
                         shape_str(a.rows(), a.cols()) + " and " + shape_str(b.rows(), b.cols()));
    }
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix init: " + std::to_string(data_.size()) + " values for shape " +
                         shape_str(rows_, cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("matrix init: ragged row " + std::to_string(i));
        }
        std::size_t j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

std::span<const double> Matrix::row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
}

std::span<double> Matrix::row(std::size_t i) {
    return {data_.data() + i * cols_, cols_};
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

Matrix Matrix::col_block(std::size_t c0, std::size_t width) const {
    if (c0 + width > cols_) {
        throw ShapeError("col_block [" + std::to_string(c0) + ", " + std::to_string(c0 + width) +
                         ") out of range for " + shape_str(rows_, cols_));
    }
    Matrix b(rows_, width);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < width; ++j) b(i, j) = (*this)(i, c0 + j);
    return b;
}

void Matrix::set_col_block(std::size_t c0, const Matrix& block) {
    if (block.rows() != rows_ || c0 + block.cols() > cols_) {
        throw ShapeError("set_col_block " + shape_str(block.rows(), block.cols()) + " at column " +
                         std::to_string(c0) + " into " + shape_str(rows_, cols_));
    }
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < block.cols(); ++j) (*this)(i, c0 + j) = block(i, j);
}

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) {
        throw ShapeError("append_row: " + std::to_string(values.size()) + " values onto " +
                         shape_str(rows_, cols_));
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

double Matrix::frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

double Matrix::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::ensure_finite(const std::string& what) const {
    if (!all_finite()) {
        throw NumericError(what + ": non-finite entry in " + shape_str(rows_, cols_) + " matrix");
    }
}

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "subtract");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
    }
    Matrix c(a.rows(), b.cols());
    // ikj order keeps the inner loop contiguous in both b and c
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.data().data() + i * c.cols();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* bk = b.data().data() + k * b.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: " + shape_str(a.rows(), a.cols()) + "^T * " +
                         shape_str(b.rows(), b.cols()));
    }
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ak = a.data().data() + k * a.cols();
        const double* bk = b.data().data() + k * b.cols();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = c.data().data() + i * c.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()) + "^T");
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            c(i, j) = dot(a.row(i), b.row(j));
        }
    }
    return c;
}

Matrix elem_mul(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "elem_mul");
    Matrix c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
    return c;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

double orthonormality_defect(const Matrix& a) {
    Matrix g = matmul_tn(a, a);
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
    return g.frobenius_norm();
}

// ===== binary matrix files =====

namespace {

constexpr char kMagic[8] = {'W', 'S', 'V', 'D', 'M', 'A', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

} // namespace

void save_matrix(const std::string& path, const Matrix& m) {
    std::string buf;
    buf.reserve(24 + 8 * m.size());
    buf.append(kMagic, sizeof kMagic);
    put_u64(buf, m.rows());
    put_u64(buf, m.cols());
    for (double v : m.data()) put_u64(buf, std::bit_cast<std::uint64_t>(v));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write: " + path);
}

Matrix load_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 24 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError("not a matrix file: " + path);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    const std::uint64_t rows = get_u64(p + 8);
    const std::uint64_t cols = get_u64(p + 16);
    const std::uint64_t n = rows * cols;
    if (buf.size() != 24 + 8 * n) {
        throw IoError("truncated matrix file (" + std::to_string(buf.size()) + " bytes for " +
                      std::to_string(rows) + "x" + std::to_string(cols) + "): " + path);
    }
    std::vector<double> values(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        values[i] = std::bit_cast<double>(get_u64(p + 24 + 8 * i));
    }
    return Matrix(rows, cols, std::move(values));
}

} // namespace wsvd
