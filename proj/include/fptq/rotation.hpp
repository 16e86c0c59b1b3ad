#pragma once

#include <vector>

#include "fptq/matrix.hpp"

namespace fptq {

class Rng;

// Planar rotation acting on row vectors from the right:
//   (x, y) * R(theta) = (x cos - y sin, x sin + y cos),
// i.e. R(theta) = [[cos, sin], [-sin, cos]]. det = +1. The same convention
// is used everywhere rotations touch activations (position embeddings,
// per-pair transforms), so compositions stay internally consistent.
struct Rotation2 {
    double angle = 0.0;

    Matrix realize() const;
};

// Lower-triangle parameters of a skew-symmetric matrix A (dim*(dim-1)/2
// entries, row-major over i > j). A[i][j] = params[k], A[j][i] = -params[k].
struct SkewParam {
    index_t dim = 0;
    std::vector<double> params;

    SkewParam() = default;
    explicit SkewParam(index_t dim_) : dim(dim_), params(static_cast<std::size_t>(dim_ * (dim_ - 1) / 2), 0.0) {}

    static std::size_t param_count(index_t dim) { return static_cast<std::size_t>(dim * (dim - 1) / 2); }
    Matrix realize() const;  // the full skew-symmetric matrix
};

// Cayley map (I - A)(I + A)^-1. Always orthogonal with det +1 for
// skew-symmetric A; for dim 2 with single parameter a it is the planar
// rotation by 2*atan(a).
Matrix cayley(const SkewParam& param);

// Pullback of a matrix-space gradient through the Cayley map. grad_q holds
// dF/dQ at Q = cayley(param); the return value is dF/dparams in SkewParam
// layout. Used by the analytic path of the local rotation objective.
std::vector<double> cayley_param_grad(const SkewParam& param, const Matrix& grad_q);

// Haar-ish random orthogonal matrix with det +1, built by modified
// Gram-Schmidt on a seeded Gaussian matrix with a positive-diagonal
// convention. Deterministic per seed.
Matrix random_orthogonal(index_t dim, std::uint64_t seed);

}  // namespace fptq
