#pragma once

#include <cassert>
#include <span>
#include <vector>

#include "fptq/common.hpp"

namespace fptq {

class Rng;

// Dense row-major matrix. Arithmetic runs in double regardless of the
// storage tag; f32-tagged results are rounded through float element-wise
// (see Dtype in common.hpp). Accumulation order of every op is fixed, so
// results are reproducible bit for bit.
class Matrix {
public:
    Matrix() = default;
    Matrix(index_t rows, index_t cols, Dtype dtype = Dtype::f64)
        : rows_(rows), cols_(cols), dtype_(dtype), data_(static_cast<std::size_t>(rows * cols), 0.0) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Matrix: negative dimension");
    }
    Matrix(index_t rows, index_t cols, std::vector<double> data, Dtype dtype = Dtype::f64);

    static Matrix zeros(index_t rows, index_t cols, Dtype dtype = Dtype::f64) { return Matrix(rows, cols, dtype); }
    static Matrix identity(index_t n, Dtype dtype = Dtype::f64);
    static Matrix diag(const std::vector<double>& entries, Dtype dtype = Dtype::f64);
    static Matrix row_vector(std::vector<double> entries, Dtype dtype = Dtype::f64);
    static Matrix random_gaussian(index_t rows, index_t cols, Rng& rng, double stddev = 1.0,
                                  Dtype dtype = Dtype::f64);

    index_t rows() const { return rows_; }
    index_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    Dtype dtype() const { return dtype_; }

    double& at(index_t r, index_t c) {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<std::size_t>(r * cols_ + c)];
    }
    double at(index_t r, index_t c) const {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<std::size_t>(r * cols_ + c)];
    }

    std::span<double> row(index_t r) { return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)}; }
    std::span<const double> row(index_t r) const {
        return {data_.data() + r * cols_, static_cast<std::size_t>(cols_)};
    }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    // Re-round storage after in-place edits; no-op for f64.
    void normalize_storage();
    Matrix with_dtype(Dtype d) const;

    bool all_finite() const;
    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

private:
    index_t rows_ = 0;
    index_t cols_ = 0;
    Dtype dtype_ = Dtype::f64;
    std::vector<double> data_;
};

// c[i][j] = sum_k a[i][k] * b[k][j], k ascending. The accumulation order is
// part of the contract: it matches the naive (i, j, k) triple loop exactly.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard_product(const Matrix& a, const Matrix& b);  // element-wise a.*b
Matrix scale(const Matrix& m, double c);

// Scale row r by factors[r]; factors.size() == rows.
Matrix scale_rows(const Matrix& m, const std::vector<double>& factors);
// Scale column c by factors[c]; factors.size() == cols.
Matrix scale_cols(const Matrix& m, const std::vector<double>& factors);

// LU with partial pivoting. Throws NumericalError when the matrix is
// numerically singular.
Matrix inverse(const Matrix& m);
double determinant(const Matrix& m);

// Largest |entry|.
double max_abs(const Matrix& m);
// Frobenius norm.
double fro_norm(const Matrix& m);

// Columns [c0, c1) as a new matrix.
Matrix col_slice(const Matrix& m, index_t c0, index_t c1);
// Writes block into columns [c0, c0 + block.cols()) of dst.
void paste_col_slice(Matrix& dst, index_t c0, const Matrix& block);

// Entry-wise L_p norm (sum |m_ij|^p)^(1/p), p >= 1.
double lp_norm(const Matrix& m, double p);

// max |a - b| over entries; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace fptq
