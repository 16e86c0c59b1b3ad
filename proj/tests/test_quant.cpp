#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fptq/quant.hpp"
#include "fptq/rng.hpp"
#include "test_support.hpp"

using namespace fptq;
using fptq::test::random_matrix;

namespace {

QuantGrid symmetric_grid(int bits, double scale) {
    QuantGrid g;
    g.bits = bits;
    g.scale = {scale};
    return g;
}

}  // namespace

TEST_CASE("fake_quantize fixed points and clamping") {
    const QuantGrid g = symmetric_grid(4, 1.0);
    // values already on the grid come back exactly
    const Matrix on_grid(1, 4, {-8, -3, 0, 7});
    const Matrix q = fake_quantize(on_grid, g);
    for (std::size_t i = 0; i < q.size(); ++i) CHECK(q.data()[i] == on_grid.data()[i]);

    CHECK(fake_quantize(Matrix(1, 1, {2.4}), g).at(0, 0) == 2.0);
    CHECK(fake_quantize(Matrix(1, 1, {100.0}), g).at(0, 0) == 7.0);   // clamp to qmax
    CHECK(fake_quantize(Matrix(1, 1, {-100.0}), g).at(0, 0) == -8.0); // clamp to qmin
}

TEST_CASE("fake_quantize uses round-half-to-even") {
    const QuantGrid g = symmetric_grid(8, 1.0);
    CHECK(fake_quantize(Matrix(1, 1, {2.5}), g).at(0, 0) == 2.0);
    CHECK(fake_quantize(Matrix(1, 1, {3.5}), g).at(0, 0) == 4.0);
    CHECK(fake_quantize(Matrix(1, 1, {-2.5}), g).at(0, 0) == -2.0);
}

TEST_CASE("fake_quantize matches exhaustive nearest-level oracle") {
    const QuantGrid g = symmetric_grid(4, 0.37);
    Rng rng(3);
    const Matrix x = Matrix::random_gaussian(16, 16, rng, 1.5);
    const Matrix got = fake_quantize(x, g);
    for (std::size_t i = 0; i < x.size(); ++i) {
        // argmin over all 16 representable levels
        double best = std::numeric_limits<double>::infinity();
        for (int level = -8; level <= 7; ++level) {
            const double err = std::abs(x.data()[i] - level * g.scale[0]);
            best = std::min(best, err);
        }
        // ties can legitimately go either way under round-half-even; accept
        // any level at minimal distance
        CHECK(std::abs(x.data()[i] - got.data()[i]) <= best + 1e-12);
    }
}

TEST_CASE("fake_quantize idempotence") {
    Rng rng(4);
    for (bool symmetric : {true, false}) {
        QuantGrid g;
        g.bits = 5;
        g.symmetric = symmetric;
        g.scale = {0.21};
        g.zero_point = {symmetric ? 0.0 : 11.0};
        const Matrix x = Matrix::random_gaussian(8, 8, rng);
        const Matrix once = fake_quantize(x, g);
        const Matrix twice = fake_quantize(once, g);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(once.data()[i] == twice.data()[i]);
    }
}

TEST_CASE("fake_quantize per-element error bound for unclipped values") {
    const QuantGrid g = symmetric_grid(6, 0.13);
    Rng rng(5);
    Matrix x = Matrix::random_gaussian(10, 10, rng, 0.5);
    const Matrix q = fake_quantize(x, g);
    const double clip_hi = g.qmax() * g.scale[0], clip_lo = g.qmin() * g.scale[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        if (v <= clip_hi && v >= clip_lo)
            CHECK(std::abs(q.data()[i] - v) <= g.scale[0] / 2 + 1e-12);
    }
}

TEST_CASE("fake_quantize rejects non-finite input") {
    const QuantGrid g = symmetric_grid(8, 1.0);
    CHECK_THROWS_AS(fake_quantize(Matrix(1, 1, {std::numeric_limits<double>::infinity()}), g),
                    std::invalid_argument);
}

TEST_CASE("grid validation") {
    QuantGrid g;
    g.bits = 1;
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
    g.bits = 8;
    g.scale = {0.0};
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
    g.scale = {1.0};
    g.zero_point = {0.5};
    CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("set_range_lp minmax sentinel is exact") {
    const Matrix samples(1, 2, {-1.0, 1.0});
    RangeSettingSpec spec;
    spec.p = RangeSettingSpec::kMinMax;
    const QuantGrid g = set_range_lp(samples, spec, 8, true);
    CHECK(g.scale[0] == doctest::Approx(1.0 / 127.0).epsilon(1e-15));

    // p = 3 never does worse than minmax on its own candidate set, and on a
    // heavy-tailed tensor (2% of entries scaled x8) it strictly clips
    Rng rng(6);
    Matrix heavy = Matrix::random_gaussian(1, 1000, rng);
    for (index_t c = 0; c < 1000; c += 50) heavy.at(0, c) *= 8.0;
    RangeSettingSpec l3;
    const QuantGrid g3 = set_range_lp(heavy, l3, 4, true);
    const QuantGrid gmm = minmax_grid(heavy, 4, true);
    CHECK(g3.scale[0] * g3.qmax() < max_abs(heavy));  // the tail gets clipped
    CHECK(quant_error(heavy, g3, 3.0).lp_error < quant_error(heavy, gmm, 3.0).lp_error);
}

TEST_CASE("set_range_lp degenerate all-zero samples") {
    RangeSettingSpec spec;
    const QuantGrid g = set_range_lp(Matrix(4, 4), spec, 8, true);
    CHECK(g.degenerate);
    CHECK(g.scale[0] == 1.0);
    const Matrix q = fake_quantize(Matrix(4, 4), g);
    CHECK(max_abs(q) == 0.0);
}

TEST_CASE("set_range_lp asymmetric covers zero") {
    Rng rng(7);
    Matrix samples = Matrix::random_gaussian(1, 500, rng);
    for (auto& v : samples.data()) v = std::abs(v) + 1.0;  // strictly positive
    RangeSettingSpec spec;
    const QuantGrid g = set_range_lp(samples, spec, 8, false);
    CHECK_FALSE(g.symmetric);
    // zero must quantize to exactly zero
    CHECK(fake_quantize(Matrix(1, 1, {0.0}), g).at(0, 0) == 0.0);
}

TEST_CASE("per-channel range setting") {
    Rng rng(8);
    Matrix w = Matrix::random_gaussian(32, 4, rng);
    for (index_t r = 0; r < w.rows(); ++r) w.at(r, 2) *= 50.0;  // one hot channel
    RangeSettingSpec spec;
    const QuantGrid g = set_range_lp_per_channel(w, spec, 4, true);
    CHECK(g.granularity == Granularity::per_channel);
    CHECK(g.scale.size() == 4);
    CHECK(g.scale[2] > 10.0 * g.scale[0]);  // hot channel gets its own range
    const Matrix q = fake_quantize(w, g);
    // channel 0 error bounded by its own scale, unaffected by channel 2
    for (index_t r = 0; r < w.rows(); ++r)
        CHECK(std::abs(q.at(r, 0) - w.at(r, 0)) <= g.scale[0] * (1 + g.qmax()));
}

TEST_CASE("dynamic per-token grids") {
    const QuantGrid zero_row = dynamic_grid(std::vector<double>{0.0, 0.0}, 8, true);
    CHECK(zero_row.degenerate);
    CHECK(fake_quantize(Matrix(1, 2), zero_row).at(0, 0) == 0.0);

    const QuantGrid g = dynamic_grid(std::vector<double>{-2.0, 2.0}, 8, true);
    CHECK(g.scale[0] == doctest::Approx(2.0 / 127.0).epsilon(1e-15));

    // rows with disparate scales: dynamic beats a static per-tensor minmax grid
    Matrix rows(2, 8);
    Rng rng(9);
    for (index_t c = 0; c < 8; ++c) {
        rows.at(0, c) = rng.gaussian() * 0.01;
        rows.at(1, c) = rng.gaussian() * 100.0;
    }
    QuantGrid dyn;
    dyn.bits = 8;
    dyn.dynamic = true;
    dyn.granularity = Granularity::per_token;
    const QuantGrid stat = minmax_grid(rows, 8, true);
    const double dyn_err = fro_norm(sub(rows, fake_quantize(rows, dyn)));
    const double stat_err = fro_norm(sub(rows, fake_quantize(rows, stat)));
    CHECK(dyn_err < stat_err);
}

TEST_CASE("quant_error stats") {
    const QuantGrid wide = symmetric_grid(16, 1e-4);
    Rng rng(10);
    const Matrix x = Matrix::random_gaussian(8, 8, rng);
    const auto stats = quant_error(x, wide, 2.0);
    CHECK(stats.lp_error < 1e-2);
    CHECK(stats.sqnr_db > 60.0);

    // exactly representable input: zero error, +inf SQNR
    const Matrix grid_points(1, 3, {-2e-4, 0.0, 5e-4});
    const auto exact = quant_error(grid_points, wide, 2.0);
    CHECK(exact.lp_error == 0.0);
    CHECK(std::isinf(exact.sqnr_db));
    CHECK(exact.sqnr_db > 0);

    // independent recomputation oracle
    const QuantGrid g4 = symmetric_grid(4, 0.3);
    const Matrix dq = fake_quantize(x, g4);
    double sum3 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sum3 += std::pow(std::abs(x.data()[i] - dq.data()[i]), 3.0);
    CHECK(test::rel_diff(quant_error(x, g4, 3.0).lp_error, std::cbrt(sum3)) < 1e-12);
}

TEST_CASE("16-bit minmax grid on bounded data has relative error below 1e-3") {
    Rng rng(11);
    const Matrix x = Matrix::random_gaussian(32, 32, rng, 3.0);
    const QuantGrid g = minmax_grid(x, 16, true);
    const Matrix q = fake_quantize(x, g);
    CHECK(fro_norm(sub(x, q)) / fro_norm(x) < 1e-3);
}

TEST_CASE("straight-through mode clamps without rounding") {
    QuantGrid g = symmetric_grid(4, 1.0);
    g.skip_rounding = true;
    CHECK(fake_quantize(Matrix(1, 1, {2.4}), g).at(0, 0) == doctest::Approx(2.4));
    CHECK(fake_quantize(Matrix(1, 1, {100.0}), g).at(0, 0) == 7.0);
}
