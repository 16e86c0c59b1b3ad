#include "fptq/rotation.hpp"

#include <cmath>

#include "fptq/rng.hpp"

namespace fptq {

Matrix Rotation2::realize() const {
    const double c = std::cos(angle), s = std::sin(angle);
    return Matrix(2, 2, {c, s, -s, c});
}

Matrix SkewParam::realize() const {
    if (params.size() != param_count(dim)) throw std::invalid_argument("SkewParam: wrong parameter count");
    Matrix a(dim, dim);
    std::size_t k = 0;
    for (index_t i = 1; i < dim; ++i) {
        for (index_t j = 0; j < i; ++j, ++k) {
            a.at(i, j) = params[k];
            a.at(j, i) = -params[k];
        }
    }
    return a;
}

Matrix cayley(const SkewParam& param) {
    const Matrix a = param.realize();
    const Matrix eye = Matrix::identity(param.dim);
    // I + A is invertible for any real skew-symmetric A (eigenvalues 1 + it).
    return matmul(sub(eye, a), inverse(add(eye, a)));
}

std::vector<double> cayley_param_grad(const SkewParam& param, const Matrix& grad_q) {
    const Matrix a = param.realize();
    const Matrix eye = Matrix::identity(param.dim);
    const Matrix b = inverse(add(eye, a));           // (I + A)^-1
    const Matrix q = matmul(sub(eye, a), b);         // cayley(param)
    // dF = <G, dQ>, dQ = -(I + Q) dA (I + A)^-1, so with
    // C = (I + A)^-1 G^T (I + Q): dF/da_pq = C_pq - C_qp  (p > q).
    const Matrix c = matmul(matmul(b, transpose(grad_q)), add(eye, q));
    std::vector<double> grad(SkewParam::param_count(param.dim));
    std::size_t k = 0;
    for (index_t p = 1; p < param.dim; ++p)
        for (index_t qi = 0; qi < p; ++qi, ++k) grad[k] = c.at(p, qi) - c.at(qi, p);
    return grad;
}

Matrix random_orthogonal(index_t dim, std::uint64_t seed) {
    if (dim < 1) throw std::invalid_argument("random_orthogonal: dim must be >= 1");
    Rng rng(seed);
    Matrix q = Matrix::random_gaussian(dim, dim, rng);
    // Modified Gram-Schmidt over rows, with one re-orthogonalization pass.
    for (index_t i = 0; i < dim; ++i) {
        auto ri = q.row(i);
        for (int pass = 0; pass < 2; ++pass) {
            for (index_t j = 0; j < i; ++j) {
                auto rj = q.row(j);
                double dot = 0.0;
                for (index_t c = 0; c < dim; ++c) dot += ri[static_cast<std::size_t>(c)] * rj[static_cast<std::size_t>(c)];
                for (index_t c = 0; c < dim; ++c) ri[static_cast<std::size_t>(c)] -= dot * rj[static_cast<std::size_t>(c)];
            }
        }
        double norm = 0.0;
        for (double v : ri) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw NumericalError("random_orthogonal: degenerate draw");
        for (double& v : ri) v /= norm;
        // Positive-diagonal convention makes the draw unique (and dim 1 -> [[1]]).
        if (ri[static_cast<std::size_t>(i)] < 0.0)
            for (double& v : ri) v = -v;
    }
    if (determinant(q) < 0.0) {
        // Flip the last row to land in SO(dim).
        for (double& v : q.row(dim - 1)) v = -v;
    }
    return q;
}

}  // namespace fptq
