#include "fptq/quant.hpp"

#include <algorithm>
#include <cmath>

namespace fptq {

const char* granularity_name(Granularity g) {
    switch (g) {
        case Granularity::per_tensor: return "per_tensor";
        case Granularity::per_channel: return "per_channel";
        case Granularity::per_token: return "per_token";
    }
    return "?";
}

void QuantGrid::validate() const {
    if (bits < 2 || bits > 16) throw std::invalid_argument("QuantGrid: bits must be in [2, 16]");
    if (scale.empty()) throw std::invalid_argument("QuantGrid: empty scale");
    for (double s : scale)
        if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("QuantGrid: scale must be positive");
    if (zero_point.size() != scale.size()) throw std::invalid_argument("QuantGrid: zero_point size mismatch");
    for (double z : zero_point)
        if (z < qmin() || z > qmax() || z != std::floor(z))
            throw std::invalid_argument("QuantGrid: zero_point outside integer range");
}

void RangeSettingSpec::validate() const {
    if (!(p >= 1.0)) throw std::invalid_argument("RangeSettingSpec: p must be >= 1 (or the minmax sentinel)");
    if (n_candidates < 2) throw std::invalid_argument("RangeSettingSpec: need at least 2 candidates");
    if (calibration_batches < 1) throw std::invalid_argument("RangeSettingSpec: need at least 1 calibration batch");
}

double round_half_even(double v) {
    const double f = std::floor(v);
    const double diff = v - f;
    if (diff > 0.5) return f + 1.0;
    if (diff < 0.5) return f;
    return (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
}

namespace {

inline double quantize_one(double x, double scale, double zp, double lo, double hi,
                           bool skip_rounding = false) {
    const double t = x / scale;
    const double q = std::clamp((skip_rounding ? t : round_half_even(t)) + zp, lo, hi);
    return (q - zp) * scale;
}

QuantGrid grid_from_range(double lo, double hi, int bits, bool symmetric) {
    QuantGrid g;
    g.bits = bits;
    g.symmetric = symmetric;
    if (symmetric) {
        const double amax = std::max(std::abs(lo), std::abs(hi));
        g.scale = {amax > 0.0 ? amax / g.qmax() : 1.0};
        g.zero_point = {0.0};
        g.degenerate = !(amax > 0.0);
    } else {
        // The range always includes zero so that zero is representable.
        lo = std::min(lo, 0.0);
        hi = std::max(hi, 0.0);
        const double span = hi - lo;
        if (span > 0.0) {
            g.scale = {span / g.qmax()};
            g.zero_point = {std::clamp(round_half_even(-lo / g.scale[0]), g.qmin(), g.qmax())};
        } else {
            g.scale = {1.0};
            g.zero_point = {0.0};
            g.degenerate = true;
        }
    }
    return g;
}

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

double lp_quant_loss(const Matrix& samples, const QuantGrid& g, double p) {
    const double lo = g.qmin(), hi = g.qmax();
    double loss = 0.0;
    for (double x : samples.data()) {
        const double dq = quantize_one(x, g.scale[0], g.zero_point[0], lo, hi);
        loss += abs_pow(x - dq, p);
    }
    return loss;
}

}  // namespace

Matrix fake_quantize(const Matrix& x, const QuantGrid& grid) {
    grid.validate();
    if (!x.all_finite()) throw std::invalid_argument("fake_quantize: non-finite input");
    const double lo = grid.qmin(), hi = grid.qmax();
    Matrix out(x.rows(), x.cols(), x.dtype());
    switch (grid.granularity) {
        case Granularity::per_tensor: {
            const double s = grid.scale[0], z = grid.zero_point[0];
            for (std::size_t i = 0; i < x.size(); ++i)
                out.data()[i] = quantize_one(x.data()[i], s, z, lo, hi, grid.skip_rounding);
            break;
        }
        case Granularity::per_channel: {
            if (static_cast<index_t>(grid.scale.size()) != x.cols())
                throw std::invalid_argument("fake_quantize: per-channel scale count != cols");
            for (index_t r = 0; r < x.rows(); ++r)
                for (index_t c = 0; c < x.cols(); ++c) {
                    const auto ci = static_cast<std::size_t>(c);
                    out.at(r, c) = quantize_one(x.at(r, c), grid.scale[ci], grid.zero_point[ci], lo, hi,
                                                grid.skip_rounding);
                }
            break;
        }
        case Granularity::per_token: {
            if (!grid.dynamic)
                throw std::invalid_argument("fake_quantize: static per-token grids are not supported");
            for (index_t r = 0; r < x.rows(); ++r) {
                const QuantGrid rowg = dynamic_grid(x.row(r), grid.bits, grid.symmetric);
                const double s = rowg.scale[0], z = rowg.zero_point[0];
                for (index_t c = 0; c < x.cols(); ++c)
                    out.at(r, c) = quantize_one(x.at(r, c), s, z, rowg.qmin(), rowg.qmax(), grid.skip_rounding);
            }
            break;
        }
    }
    out.normalize_storage();
    return out;
}

QuantGrid minmax_grid(const Matrix& samples, int bits, bool symmetric) {
    double lo = 0.0, hi = 0.0;
    for (double v : samples.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    QuantGrid g = grid_from_range(lo, hi, bits, symmetric);
    g.validate();
    return g;
}

QuantGrid set_range_lp(const Matrix& samples, const RangeSettingSpec& spec, int bits, bool symmetric) {
    if (samples.size() == 0) throw std::invalid_argument("set_range_lp: no samples");
    if (!samples.all_finite()) throw std::invalid_argument("set_range_lp: non-finite samples");
    if (spec.p == RangeSettingSpec::kMinMax) return minmax_grid(samples, bits, symmetric);
    spec.validate();

    double lo = 0.0, hi = 0.0;
    for (double v : samples.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (lo == 0.0 && hi == 0.0) {
        QuantGrid g = grid_from_range(0.0, 0.0, bits, symmetric);
        return g;
    }

    QuantGrid best;
    double best_loss = std::numeric_limits<double>::infinity();
    for (int k = 0; k < spec.n_candidates; ++k) {
        const double frac = 0.1 + 0.9 * static_cast<double>(k) / static_cast<double>(spec.n_candidates - 1);
        QuantGrid cand = grid_from_range(frac * lo, frac * hi, bits, symmetric);
        const double loss = lp_quant_loss(samples, cand, spec.p);
        if (loss < best_loss) {
            best_loss = loss;
            best = cand;
        }
    }
    best.validate();
    return best;
}

QuantGrid set_range_lp_per_channel(const Matrix& weights, const RangeSettingSpec& spec, int bits,
                                   bool symmetric) {
    const index_t n = weights.cols();
    if (n == 0) throw std::invalid_argument("set_range_lp_per_channel: no channels");
    QuantGrid g;
    g.bits = bits;
    g.symmetric = symmetric;
    g.granularity = Granularity::per_channel;
    g.scale.assign(static_cast<std::size_t>(n), 1.0);
    g.zero_point.assign(static_cast<std::size_t>(n), 0.0);
    Matrix column(weights.rows(), 1);
    for (index_t c = 0; c < n; ++c) {
        for (index_t r = 0; r < weights.rows(); ++r) column.at(r, 0) = weights.at(r, c);
        const QuantGrid cg = set_range_lp(column, spec, bits, symmetric);
        g.scale[static_cast<std::size_t>(c)] = cg.scale[0];
        g.zero_point[static_cast<std::size_t>(c)] = cg.zero_point[0];
        g.degenerate = g.degenerate || cg.degenerate;
    }
    g.validate();
    return g;
}

QuantGrid dynamic_grid(std::span<const double> token_row, int bits, bool symmetric) {
    double lo = 0.0, hi = 0.0;
    for (double v : token_row) {
        if (!std::isfinite(v)) throw std::invalid_argument("dynamic_grid: non-finite row");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    QuantGrid g = grid_from_range(lo, hi, bits, symmetric);
    g.dynamic = true;
    g.granularity = Granularity::per_token;
    return g;
}

QuantErrorStats quant_error(const Matrix& x, const QuantGrid& grid, double p) {
    const Matrix dq = fake_quantize(x, grid);
    QuantErrorStats stats;
    stats.lp_error = lp_norm(sub(x, dq), p);
    double signal = 0.0, noise = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = x.data()[i] - dq.data()[i];
        signal += x.data()[i] * x.data()[i];
        noise += e * e;
    }
    if (noise == 0.0) {
        stats.sqnr_db = std::numeric_limits<double>::infinity();
    } else if (signal == 0.0) {
        stats.sqnr_db = -std::numeric_limits<double>::infinity();
    } else {
        stats.sqnr_db = 10.0 * std::log10(signal / noise);
    }
    return stats;
}

}  // namespace fptq
