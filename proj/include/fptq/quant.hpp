#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "fptq/matrix.hpp"

namespace fptq {

enum class Granularity : std::uint8_t { per_tensor, per_channel, per_token };

const char* granularity_name(Granularity g);

// Uniform affine quantizer description. Simulated ("fake") quantization
// maps x -> (clamp(round_half_even(x / scale) + zero_point, qmin, qmax)
//            - zero_point) * scale.
//
// Integer ranges: symmetric grids use [-2^(b-1), 2^(b-1)-1] with
// zero_point 0; asymmetric grids use [0, 2^b - 1].
struct QuantGrid {
    int bits = 8;
    bool symmetric = true;
    bool dynamic = false;  // per-token minmax computed at apply time
    Granularity granularity = Granularity::per_tensor;
    std::vector<double> scale = {1.0};  // 1 entry, or one per channel
    std::vector<double> zero_point = {0.0};
    bool degenerate = false;  // calibration saw only zeros; unit-scale fallback
    // Evaluation-mode knob for straight-through gradients: clamp to the
    // representable range but skip rounding (rounding acts as identity).
    bool skip_rounding = false;

    double qmin() const { return symmetric ? -std::ldexp(1.0, bits - 1) : 0.0; }
    double qmax() const { return symmetric ? std::ldexp(1.0, bits - 1) - 1.0 : std::ldexp(1.0, bits) - 1.0; }

    void validate() const;
};

// Range-setting configuration. p is the norm the clipping search minimizes;
// the infinity sentinel selects plain minmax.
struct RangeSettingSpec {
    static constexpr double kMinMax = std::numeric_limits<double>::infinity();

    double p = 3.0;
    int n_candidates = 128;         // clip fractions, linearly spaced in [0.1, 1]
    int calibration_batches = 64;   // sequences pushed through the FP net

    void validate() const;
};

double round_half_even(double v);

// Quantize-dequantize x through the grid. Idempotent; throws on
// non-finite input. Per-channel grids index by column; dynamic grids
// build a per-row minmax grid on the fly.
Matrix fake_quantize(const Matrix& x, const QuantGrid& grid);

// Minmax grid over all entries of samples.
QuantGrid minmax_grid(const Matrix& samples, int bits, bool symmetric);

// Grid whose clipping range minimizes sum |x - Q(x)|^p over a candidate
// set of clip fractions of the minmax range. p = RangeSettingSpec::kMinMax
// returns the minmax grid exactly. All-zero samples yield a unit-scale
// grid with the degenerate flag set.
QuantGrid set_range_lp(const Matrix& samples, const RangeSettingSpec& spec, int bits, bool symmetric);

// Column-wise variant for weight tensors: independent clip search per
// output channel. Produces a per_channel grid.
QuantGrid set_range_lp_per_channel(const Matrix& weights, const RangeSettingSpec& spec, int bits,
                                   bool symmetric);

// Per-token minmax grid for one activation row.
QuantGrid dynamic_grid(std::span<const double> token_row, int bits, bool symmetric);

struct QuantErrorStats {
    double lp_error = 0.0;
    double sqnr_db = 0.0;  // +inf when the error is exactly zero
};

QuantErrorStats quant_error(const Matrix& x, const QuantGrid& grid, double p);

}  // namespace fptq
