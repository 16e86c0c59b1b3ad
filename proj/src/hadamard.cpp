#include "fptq/hadamard.hpp"

#include <bit>
#include <cmath>

namespace fptq {

namespace {

bool is_pow2(index_t v) { return v >= 1 && (v & (v - 1)) == 0; }

int log2i(index_t v) {
    int l = 0;
    while ((index_t{1} << l) < v) ++l;
    return l;
}

}  // namespace

BlockHadamardPlan::BlockHadamardPlan(index_t dim_, std::vector<index_t> blocks_)
    : dim(dim_), blocks(std::move(blocks_)) {
    index_t sum = 0;
    for (index_t b : blocks) {
        if (!is_pow2(b)) throw std::invalid_argument("BlockHadamardPlan: block size not a power of two");
        sum += b;
    }
    if (sum != dim) throw std::invalid_argument("BlockHadamardPlan: block sizes do not sum to dim");
}

Matrix BlockHadamardPlan::realized() const {
    Matrix h(dim, dim);
    index_t offset = 0;
    for (index_t b : blocks) {
        const double s = 1.0 / std::sqrt(static_cast<double>(b));
        // Entry (i, j) of the Sylvester matrix is (-1)^popcount(i & j).
        for (index_t i = 0; i < b; ++i)
            for (index_t j = 0; j < b; ++j)
                h.at(offset + i, offset + j) = (std::popcount(static_cast<std::uint64_t>(i & j)) & 1) ? -s : s;
        offset += b;
    }
    return h;
}

BlockHadamardPlan default_hadamard_plan(index_t dim) {
    if (dim < 1) throw std::invalid_argument("default_hadamard_plan: dim must be >= 1");
    std::vector<index_t> blocks;
    if (dim % 256 == 0) {
        blocks.assign(static_cast<std::size_t>(dim / 256), 256);
    } else {
        index_t rest = dim;
        while (rest > 0) {
            index_t b = 1;
            while (b * 2 <= rest) b *= 2;
            blocks.push_back(b);
            rest -= b;
        }
    }
    return BlockHadamardPlan(dim, std::move(blocks));
}

Matrix hadamard_apply(const BlockHadamardPlan& plan, const Matrix& x, HadamardOpCount* count) {
    if (x.cols() != plan.dim) throw std::invalid_argument("hadamard_apply: input cols != plan dim");
    Matrix out = x;
    for (index_t r = 0; r < out.rows(); ++r) {
        double* row = out.row(r).data();
        index_t offset = 0;
        for (index_t b : plan.blocks) {
            double* seg = row + offset;
            for (index_t len = 1; len < b; len <<= 1) {
                for (index_t i = 0; i < b; i += 2 * len) {
                    for (index_t j = i; j < i + len; ++j) {
                        const double u = seg[j];
                        const double v = seg[j + len];
                        seg[j] = u + v;
                        seg[j + len] = u - v;
                    }
                }
            }
            if (b > 1) {
                const double s = 1.0 / std::sqrt(static_cast<double>(b));
                for (index_t j = 0; j < b; ++j) seg[j] *= s;
            }
            if (count) {
                count->adds += static_cast<std::uint64_t>(b) * static_cast<std::uint64_t>(log2i(b));
                count->mults += b > 1 ? static_cast<std::uint64_t>(b) : 0;
            }
            offset += b;
        }
    }
    out.normalize_storage();
    return out;
}

}  // namespace fptq
