#pragma once

#include <cstdint>
#include <vector>

#include "fptq/matrix.hpp"

namespace fptq {

// Arithmetic-op tally for the fast path (adds/subs plus scaling mults),
// accumulated in bulk as the butterfly stages run.
struct HadamardOpCount {
    std::uint64_t adds = 0;
    std::uint64_t mults = 0;
    std::uint64_t total() const { return adds + mults; }
};

// Block-diagonal Walsh-Hadamard transform diag(H_b1, ..., H_bK) with
// H_b = (1/sqrt b) * Sylvester construction. Every block size must be a
// power of two and the sizes must sum to dim. H is symmetric and
// orthogonal, so the transform is its own inverse.
struct BlockHadamardPlan {
    index_t dim = 0;
    std::vector<index_t> blocks;

    BlockHadamardPlan() = default;
    BlockHadamardPlan(index_t dim_, std::vector<index_t> blocks_);

    // Realized dim x dim block-diagonal matrix (oracle / merge path).
    Matrix realized() const;
};

// Decomposition used when the caller does not pick blocks explicitly:
// uniform 256-wide blocks when dim is a multiple of 256, otherwise greedy
// largest power of two first (12 -> [8, 4], 172 -> [128, 32, 8, 4]).
BlockHadamardPlan default_hadamard_plan(index_t dim);

// Applies the plan to each row of x via the in-place butterfly,
// O(b log b) per block per row. Bit-identical to multiplying by
// plan.realized() up to float rounding; within 1e-12 in double.
Matrix hadamard_apply(const BlockHadamardPlan& plan, const Matrix& x, HadamardOpCount* count = nullptr);

}  // namespace fptq
