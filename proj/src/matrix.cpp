#include "fptq/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "fptq/rng.hpp"

namespace fptq {

Matrix::Matrix(index_t rows, index_t cols, std::vector<double> data, Dtype dtype)
    : rows_(rows), cols_(cols), dtype_(dtype), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(rows * cols))
        throw std::invalid_argument("Matrix: data length != rows*cols");
    normalize_storage();
}

Matrix Matrix::identity(index_t n, Dtype dtype) {
    Matrix m(n, n, dtype);
    for (index_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::diag(const std::vector<double>& entries, Dtype dtype) {
    const index_t n = static_cast<index_t>(entries.size());
    Matrix m(n, n, dtype);
    for (index_t i = 0; i < n; ++i) m.at(i, i) = entries[static_cast<std::size_t>(i)];
    m.normalize_storage();
    return m;
}

Matrix Matrix::row_vector(std::vector<double> entries, Dtype dtype) {
    const index_t n = static_cast<index_t>(entries.size());
    return Matrix(1, n, std::move(entries), dtype);
}

Matrix Matrix::random_gaussian(index_t rows, index_t cols, Rng& rng, double stddev, Dtype dtype) {
    Matrix m(rows, cols, dtype);
    for (auto& v : m.data()) v = rng.gaussian(0.0, stddev);
    m.normalize_storage();
    return m;
}

void Matrix::normalize_storage() {
    if (dtype_ == Dtype::f32) {
        for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
    }
}

Matrix Matrix::with_dtype(Dtype d) const {
    Matrix m = *this;
    m.dtype_ = d;
    m.normalize_storage();
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix c(a.rows(), b.cols(), promote(a.dtype(), b.dtype()));
    // (i, k, j) loop order for contiguous inner access. Each c[i][j] still
    // accumulates its terms in ascending k, identical to the naive triple
    // loop, so the result is bitwise the same.
    const index_t n = a.rows(), kk = a.cols(), mm = b.cols();
    // Rows are processed four at a time so each load of b feeds four
    // independent accumulator chains; per (i, j) the updates still happen in
    // strictly ascending k, identical to the single-row loop.
    index_t i = 0;
    for (; i + 4 <= n; i += 4) {
        double* __restrict__ c0 = c.row(i).data();
        double* __restrict__ c1 = c.row(i + 1).data();
        double* __restrict__ c2 = c.row(i + 2).data();
        double* __restrict__ c3 = c.row(i + 3).data();
        for (index_t k = 0; k < kk; ++k) {
            const double a0 = a.at(i, k), a1 = a.at(i + 1, k), a2 = a.at(i + 2, k), a3 = a.at(i + 3, k);
            const double* __restrict__ brow = b.row(k).data();
            for (index_t j = 0; j < mm; ++j) {
                const double bj = brow[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
    }
    for (; i < n; ++i) {
        double* __restrict__ crow = c.row(i).data();
        for (index_t k = 0; k < kk; ++k) {
            const double aik = a.at(i, k);
            const double* __restrict__ brow = b.row(k).data();
            for (index_t j = 0; j < mm; ++j) crow[j] += aik * brow[j];
        }
    }
    c.normalize_storage();
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows(), m.dtype());
    for (index_t r = 0; r < m.rows(); ++r)
        for (index_t c = 0; c < m.cols(); ++c) t.at(c, r) = m.at(r, c);
    return t;
}

namespace {

template <typename F>
Matrix zip(const Matrix& a, const Matrix& b, F f, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
    Matrix c(a.rows(), a.cols(), promote(a.dtype(), b.dtype()));
    for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = f(a.data()[i], b.data()[i]);
    c.normalize_storage();
    return c;
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, [](double x, double y) { return x + y; }, "add");
}

Matrix sub(const Matrix& a, const Matrix& b) {
    return zip(a, b, [](double x, double y) { return x - y; }, "sub");
}

Matrix hadamard_product(const Matrix& a, const Matrix& b) {
    return zip(a, b, [](double x, double y) { return x * y; }, "hadamard_product");
}

Matrix scale(const Matrix& m, double c) {
    Matrix out = m;
    for (auto& v : out.data()) v *= c;
    out.normalize_storage();
    return out;
}

Matrix scale_rows(const Matrix& m, const std::vector<double>& factors) {
    if (static_cast<index_t>(factors.size()) != m.rows())
        throw std::invalid_argument("scale_rows: factor count != rows");
    Matrix out = m;
    for (index_t r = 0; r < m.rows(); ++r) {
        const double f = factors[static_cast<std::size_t>(r)];
        for (double& v : out.row(r)) v *= f;
    }
    out.normalize_storage();
    return out;
}

Matrix scale_cols(const Matrix& m, const std::vector<double>& factors) {
    if (static_cast<index_t>(factors.size()) != m.cols())
        throw std::invalid_argument("scale_cols: factor count != cols");
    Matrix out = m;
    for (index_t r = 0; r < m.rows(); ++r)
        for (index_t c = 0; c < m.cols(); ++c) out.at(r, c) *= factors[static_cast<std::size_t>(c)];
    out.normalize_storage();
    return out;
}

namespace {

// In-place LU with partial pivoting; returns pivot permutation and sign.
// Throws on exact zero pivot column.
int lu_decompose(Matrix& a, std::vector<index_t>& piv) {
    const index_t n = a.rows();
    piv.resize(static_cast<std::size_t>(n));
    int sign = 1;
    for (index_t i = 0; i < n; ++i) piv[static_cast<std::size_t>(i)] = i;
    for (index_t k = 0; k < n; ++k) {
        index_t p = k;
        double best = std::abs(a.at(k, k));
        for (index_t i = k + 1; i < n; ++i) {
            const double v = std::abs(a.at(i, k));
            if (v > best) {
                best = v;
                p = i;
            }
        }
        if (best == 0.0) throw NumericalError("lu_decompose: singular matrix");
        if (p != k) {
            for (index_t j = 0; j < n; ++j) std::swap(a.at(p, j), a.at(k, j));
            std::swap(piv[static_cast<std::size_t>(p)], piv[static_cast<std::size_t>(k)]);
            sign = -sign;
        }
        const double pivot = a.at(k, k);
        for (index_t i = k + 1; i < n; ++i) {
            const double l = a.at(i, k) / pivot;
            a.at(i, k) = l;
            for (index_t j = k + 1; j < n; ++j) a.at(i, j) -= l * a.at(k, j);
        }
    }
    return sign;
}

}  // namespace

Matrix inverse(const Matrix& m) {
    if (m.rows() != m.cols()) throw std::invalid_argument("inverse: matrix not square");
    const index_t n = m.rows();
    Matrix lu = m.with_dtype(Dtype::f64);
    std::vector<index_t> piv;
    lu_decompose(lu, piv);
    Matrix inv(n, n, Dtype::f64);
    std::vector<double> col(static_cast<std::size_t>(n));
    for (index_t c = 0; c < n; ++c) {
        // Solve A x = e_c using the pivoted factors.
        for (index_t i = 0; i < n; ++i)
            col[static_cast<std::size_t>(i)] = (piv[static_cast<std::size_t>(i)] == c) ? 1.0 : 0.0;
        for (index_t i = 1; i < n; ++i) {
            double s = col[static_cast<std::size_t>(i)];
            for (index_t j = 0; j < i; ++j) s -= lu.at(i, j) * col[static_cast<std::size_t>(j)];
            col[static_cast<std::size_t>(i)] = s;
        }
        for (index_t i = n - 1; i >= 0; --i) {
            double s = col[static_cast<std::size_t>(i)];
            for (index_t j = i + 1; j < n; ++j) s -= lu.at(i, j) * col[static_cast<std::size_t>(j)];
            col[static_cast<std::size_t>(i)] = s / lu.at(i, i);
        }
        for (index_t i = 0; i < n; ++i) inv.at(i, c) = col[static_cast<std::size_t>(i)];
    }
    if (!inv.all_finite()) throw NumericalError("inverse: non-finite result");
    return inv.with_dtype(m.dtype());
}

double determinant(const Matrix& m) {
    if (m.rows() != m.cols()) throw std::invalid_argument("determinant: matrix not square");
    Matrix lu = m.with_dtype(Dtype::f64);
    std::vector<index_t> piv;
    double det;
    try {
        det = lu_decompose(lu, piv);
    } catch (const NumericalError&) {
        return 0.0;
    }
    for (index_t i = 0; i < m.rows(); ++i) det *= lu.at(i, i);
    return det;
}

Matrix col_slice(const Matrix& m, index_t c0, index_t c1) {
    if (c0 < 0 || c1 > m.cols() || c0 > c1) throw std::invalid_argument("col_slice: bad column range");
    Matrix out(m.rows(), c1 - c0, m.dtype());
    for (index_t r = 0; r < m.rows(); ++r)
        for (index_t c = c0; c < c1; ++c) out.at(r, c - c0) = m.at(r, c);
    return out;
}

void paste_col_slice(Matrix& dst, index_t c0, const Matrix& block) {
    if (block.rows() != dst.rows() || c0 < 0 || c0 + block.cols() > dst.cols())
        throw std::invalid_argument("paste_col_slice: block does not fit");
    for (index_t r = 0; r < dst.rows(); ++r)
        for (index_t c = 0; c < block.cols(); ++c) dst.at(r, c0 + c) = block.at(r, c);
    dst.normalize_storage();
}

double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.data()) best = std::max(best, std::abs(v));
    return best;
}

double fro_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) s += v * v;
    return std::sqrt(s);
}

namespace {

// |v|^p with multiplication fast paths for the small integer p used by the
// local objectives (4) and range setting (2, 3).
inline double abs_pow(double v, double p) {
    const double a = std::abs(v);
    if (p == 2.0) return a * a;
    if (p == 3.0) return a * a * a;
    if (p == 4.0) {
        const double sq = a * a;
        return sq * sq;
    }
    return std::pow(a, p);
}

}  // namespace

double lp_norm(const Matrix& m, double p) {
    if (!(p >= 1.0)) throw std::invalid_argument("lp_norm: p must be >= 1");
    double s = 0.0;
    for (double v : m.data()) s += abs_pow(v, p);
    return std::pow(s, 1.0 / p);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double best = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
    return best;
}

}  // namespace fptq
