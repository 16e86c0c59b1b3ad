#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "fptq/model.hpp"
#include "fptq/rng.hpp"
#include "fptq/serialize.hpp"
#include "test_support.hpp"

using namespace fptq;
using fptq::test::micro_config;
using fptq::test::tiny_config;

TEST_CASE("location names round-trip and split") {
    for (Location loc : all_activation_locations()) {
        CHECK_FALSE(is_weight_location(loc));
        CHECK(location_from_name(location_name(loc)) == loc);
    }
    for (Location loc : all_weight_locations()) CHECK(is_weight_location(loc));
    CHECK(all_activation_locations().size() == 18);
    CHECK(all_weight_locations().size() == 7);
    CHECK_THROWS_AS(location_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("init_model determinism and config validation") {
    const ModelConfig cfg = tiny_config(5);
    const ModelParams a = init_model(cfg);
    const ModelParams b = init_model(cfg);
    for (std::size_t i = 0; i < a.embedding.size(); ++i) CHECK(a.embedding.data()[i] == b.embedding.data()[i]);
    for (std::size_t i = 0; i < a.head.size(); ++i) CHECK(a.head.data()[i] == b.head.data()[i]);

    ModelConfig odd = cfg;
    odd.d_head = 7;
    CHECK_THROWS_AS(init_model(odd), std::invalid_argument);
    ModelConfig mismatch = cfg;
    mismatch.n_kv_heads = 3;
    CHECK_THROWS_AS(init_model(mismatch), std::invalid_argument);
}

TEST_CASE("init_model entry std tracks init_std / sqrt(fan_in)") {
    ModelConfig cfg = tiny_config(6);
    cfg.init_std = 2.0;
    const ModelParams p = init_model(cfg);
    // w_g has d_model x d_ffn = 11008 entries, enough for a 10% check
    const Matrix& w = p.blocks[0].w_g;
    double sum_sq = 0.0;
    for (double v : w.data()) sum_sq += v * v;
    const double sample_std = std::sqrt(sum_sq / static_cast<double>(w.size()));
    const double expected = cfg.init_std / std::sqrt(static_cast<double>(cfg.d_model));
    CHECK(sample_std == doctest::Approx(expected).epsilon(0.10));
}

TEST_CASE("outlier injection scales exactly the chosen columns") {
    const ModelConfig cfg = tiny_config(7);
    const ModelParams clean = init_model(cfg);
    OutlierSpec spec;
    spec.push_back({OutlierInjection::Target::wu_col, {0}, 50.0});
    const ModelParams injected = init_model(cfg, spec);
    for (index_t blk = 0; blk < cfg.n_blocks; ++blk) {
        const Matrix& wc = clean.blocks[static_cast<std::size_t>(blk)].w_u;
        const Matrix& wi = injected.blocks[static_cast<std::size_t>(blk)].w_u;
        for (index_t r = 0; r < wc.rows(); ++r) {
            CHECK(wi.at(r, 0) == wc.at(r, 0) * 50.0);
            for (index_t c = 1; c < wc.cols(); ++c) CHECK(wi.at(r, c) == wc.at(r, c));
        }
    }
    OutlierSpec bad;
    bad.push_back({OutlierInjection::Target::embedding_row, {cfg.vocab + 3}, 2.0});
    CHECK_THROWS_AS(init_model(cfg, bad), std::invalid_argument);
}

TEST_CASE("rope_embed basics") {
    // position 0: identity
    const Matrix x = fptq::test::random_matrix(1, 8, 12);
    const Matrix r0 = rope_embed(x, 0, default_rope_thetas(8));
    CHECK(max_abs_diff(r0, x) == 0.0);

    // quarter turn: [1, 0] at position 1 with theta = pi/2 -> [0, 1]
    const Matrix e1(1, 2, {1.0, 0.0});
    const Matrix turned = rope_embed(e1, 1, {M_PI / 2});
    CHECK(turned.at(0, 0) == doctest::Approx(0.0));
    CHECK(turned.at(0, 1) == doctest::Approx(1.0));

    CHECK_THROWS_AS(rope_embed(Matrix(1, 3), 0, {1.0}), std::invalid_argument);
}

TEST_CASE("rope inner products depend only on relative position") {
    Rng rng(13);
    const auto thetas = default_rope_thetas(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix q = Matrix::random_gaussian(1, 8, rng);
        const Matrix k = Matrix::random_gaussian(1, 8, rng);
        const index_t i = static_cast<index_t>(rng.uniform_index(32));
        const index_t j = static_cast<index_t>(rng.uniform_index(32));
        auto dot = [&](const Matrix& a, const Matrix& b) {
            double s = 0.0;
            for (index_t c = 0; c < a.cols(); ++c) s += a.at(0, c) * b.at(0, c);
            return s;
        };
        const double base = dot(rope_embed(q, i, thetas), rope_embed(k, j, thetas));
        const double shifted = dot(rope_embed(q, i + 5, thetas), rope_embed(k, j + 5, thetas));
        CHECK(std::abs(base - shifted) < 1e-10);
    }
}

TEST_CASE("rmsnorm definition, scale invariance, orthogonal equivariance") {
    Rng rng(14);
    const Matrix x = Matrix::random_gaussian(6, 16, rng);
    const std::vector<double> gamma(16, 1.0);
    const Matrix normed = rmsnorm(x, gamma);
    // definition: row / ((1/sqrt d) ||row||_2)
    for (index_t r = 0; r < x.rows(); ++r) {
        double sq = 0.0;
        for (double v : x.row(r)) sq += v * v;
        const double rms = std::sqrt(sq / 16.0);
        for (index_t c = 0; c < 16; ++c) CHECK(normed.at(r, c) == doctest::Approx(x.at(r, c) / rms));
    }
    // per-token scale invariance is exact up to roundoff (no epsilon inside)
    const Matrix scaled = rmsnorm(scale(x, 37.5), gamma);
    CHECK(max_abs_diff(scaled, normed) < 1e-12);

    // RMSNorm(X M) = RMSNorm(X) M for orthogonal M at unit gamma
    const Matrix m = random_orthogonal(16, 99);
    const Matrix lhs = rmsnorm(matmul(x, m), gamma);
    const Matrix rhs = matmul(rmsnorm(x, gamma), m);
    CHECK(max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("forward: tap bookkeeping does not change logits") {
    const ModelParams params = init_model(tiny_config(15));
    const TokenBatch batch = fptq::test::tokens(16, 2, 12, params.config.vocab);
    const ForwardResult plain = forward(params, batch, {});
    ForwardOptions opt;
    for (Location loc : all_activation_locations()) opt.taps.insert(loc);
    const ForwardResult tapped = forward(params, batch, opt);
    for (std::size_t i = 0; i < plain.logits.size(); ++i)
        for (std::size_t k = 0; k < plain.logits[i].size(); ++k)
            CHECK(plain.logits[i].data()[k] == tapped.logits[i].data()[k]);
    for (Location loc : all_activation_locations()) CHECK(tapped.tape.has(loc));
    for (const auto& [loc, tensor] : tapped.tape.slots) CHECK(tensor.all_finite());
}

TEST_CASE("forward: tape holds exactly the requested locations") {
    const ModelParams params = init_model(micro_config(151));
    const TokenBatch batch = fptq::test::tokens(152, 1, 8, params.config.vocab);
    ForwardOptions opt;
    opt.taps = {Location::mm, Location::ra, Location::qe};
    const Tape tape = forward(params, batch, opt).tape;
    CHECK(tape.slots.size() == 3);
    for (Location loc : opt.taps) CHECK(tape.has(loc));
    CHECK_FALSE(tape.has(Location::d));
    CHECK_THROWS_AS(tape.at(Location::d), std::invalid_argument);
}

TEST_CASE("forward: empty quantizer map is bitwise a no-op") {
    const ModelParams params = init_model(tiny_config(17));
    const TokenBatch batch = fptq::test::tokens(18, 1, 16, params.config.vocab);
    QuantizerSet empty;
    ForwardOptions opt;
    opt.quantizers = &empty;
    const auto a = forward(params, batch, {}).logits;
    const auto b = forward(params, batch, opt).logits;
    for (std::size_t k = 0; k < a[0].size(); ++k) CHECK(a[0].data()[k] == b[0].data()[k]);
}

TEST_CASE("forward: wide 16-bit grids are near-lossless") {
    const ModelParams params = init_model(tiny_config(19));
    const ModelConfig& cfg = params.config;
    const TokenBatch batch = fptq::test::tokens(20, 2, 16, cfg.vocab);

    // grids straight from clean tapes / weights
    ForwardOptions tap_opt;
    for (Location loc : all_activation_locations()) tap_opt.taps.insert(loc);
    const Tape tape = forward(params, batch, tap_opt).tape;
    QuantizerSet qs;
    for (Location loc : all_activation_locations()) qs.activations[loc] = minmax_grid(tape.at(loc), 16, true);
    RangeSettingSpec mm;
    mm.p = RangeSettingSpec::kMinMax;
    for (Location loc : all_weight_locations()) {
        std::vector<QuantGrid> grids;
        for (const auto& b : params.blocks) {
            const Matrix* w = nullptr;
            switch (loc) {
                case Location::Wq: w = &b.w_q; break;
                case Location::Wk: w = &b.w_k; break;
                case Location::Wv: w = &b.w_v; break;
                case Location::Wo: w = &b.w_o; break;
                case Location::Wg: w = &b.w_g; break;
                case Location::Wu: w = &b.w_u; break;
                case Location::Wd: w = &b.w_d; break;
                default: break;
            }
            grids.push_back(set_range_lp_per_channel(*w, mm, 16, true));
        }
        qs.weights[loc] = grids;
    }
    ForwardOptions opt;
    opt.quantizers = &qs;
    const auto fp = forward(params, batch, {}).logits;
    const auto quant = forward(params, batch, opt).logits;
    for (std::size_t i = 0; i < fp.size(); ++i) CHECK(max_abs_diff(fp[i], quant[i]) < 1e-3);
}

TEST_CASE("forward: GQA equals unrolled multi-head with duplicated KV heads") {
    ModelConfig cfg = micro_config(21);  // m = 2
    const ModelParams grouped = init_model(cfg);

    ModelConfig unrolled_cfg = cfg;
    unrolled_cfg.n_kv_heads = cfg.n_q_heads;  // m = 1
    ModelParams unrolled = init_model(unrolled_cfg);
    unrolled.embedding = grouped.embedding;
    unrolled.head = grouped.head;
    unrolled.gamma_final = grouped.gamma_final;
    const index_t dh = cfg.d_head, m = cfg.group_size();
    for (std::size_t blk = 0; blk < unrolled.blocks.size(); ++blk) {
        auto& ub = unrolled.blocks[blk];
        const auto& gb = grouped.blocks[blk];
        ub.w_q = gb.w_q;
        ub.w_o = gb.w_o;
        ub.w_g = gb.w_g;
        ub.w_u = gb.w_u;
        ub.w_d = gb.w_d;
        ub.gamma_attn = gb.gamma_attn;
        ub.gamma_mlp = gb.gamma_mlp;
        ub.w_k = Matrix(cfg.d_model, unrolled_cfg.n_kv_heads * dh);
        ub.w_v = Matrix(cfg.d_model, unrolled_cfg.n_kv_heads * dh);
        for (index_t qh = 0; qh < cfg.n_q_heads; ++qh) {
            const index_t kv = qh / m;
            paste_col_slice(ub.w_k, qh * dh, col_slice(gb.w_k, kv * dh, (kv + 1) * dh));
            paste_col_slice(ub.w_v, qh * dh, col_slice(gb.w_v, kv * dh, (kv + 1) * dh));
        }
    }
    const TokenBatch batch = fptq::test::tokens(22, 2, 10, cfg.vocab);
    const auto a = forward(grouped, batch, {}).logits;
    const auto b = forward(unrolled, batch, {}).logits;
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) < 1e-10);
}

TEST_CASE("forward: softmax rows sum to one and future positions are exactly zero") {
    const ModelParams params = init_model(micro_config(23));
    const index_t l = 9;
    const TokenBatch batch = fptq::test::tokens(24, 1, l, params.config.vocab);
    ForwardOptions opt;
    opt.taps = {Location::ap};
    const Tape tape = forward(params, batch, opt).tape;
    const Matrix& ap = tape.at(Location::ap);
    CHECK(ap.cols() == l);
    CHECK(ap.rows() % l == 0);
    for (index_t r = 0; r < ap.rows(); ++r) {
        const index_t qpos = r % l;
        double sum = 0.0;
        for (index_t c = 0; c < ap.cols(); ++c) {
            if (c > qpos) CHECK(ap.at(r, c) == 0.0);
            sum += ap.at(r, c);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("forward rejects bad tokens and bad quantizer wiring") {
    const ModelParams params = init_model(micro_config(25));
    const TokenBatch bad_tokens{{static_cast<std::int32_t>(params.config.vocab + 1)}};
    CHECK_THROWS_AS(forward(params, bad_tokens, {}), std::invalid_argument);
    const TokenBatch empty_seq{{}};
    CHECK_THROWS_AS(forward(params, empty_seq, {}), std::invalid_argument);

    QuantizerSet qs;
    qs.activations[Location::Wq] = QuantGrid{};  // weight alias in the activation slot
    ForwardOptions opt;
    opt.quantizers = &qs;
    const TokenBatch ok{{1, 2, 3}};
    CHECK_THROWS_AS(forward(params, ok, opt), std::invalid_argument);

    ForwardOptions bad_plan;
    bad_plan.online_hadamard = default_hadamard_plan(params.config.d_ffn + 4);
    CHECK_THROWS_AS(forward(params, ok, bad_plan), std::invalid_argument);
}

TEST_CASE("attention_probs_values_bmm") {
    // one-hot rows select value rows exactly
    Matrix probs(2, 3);
    probs.at(0, 2) = 1.0;
    probs.at(1, 0) = 1.0;
    const Matrix values = fptq::test::random_matrix(3, 4, 26);
    const auto picked = attention_probs_values_bmm({probs}, {values});
    for (index_t c = 0; c < 4; ++c) {
        CHECK(picked[0].at(0, c) == values.at(2, c));
        CHECK(picked[0].at(1, c) == values.at(0, c));
    }

    // uniform rows average the value rows
    Matrix uniform(1, 4);
    for (index_t c = 0; c < 4; ++c) uniform.at(0, c) = 0.25;
    const Matrix v4 = fptq::test::random_matrix(4, 5, 27);
    const auto mean = attention_probs_values_bmm({uniform}, {v4});
    for (index_t c = 0; c < 5; ++c) {
        double expect = 0.0;
        for (index_t r = 0; r < 4; ++r) expect += v4.at(r, c);
        CHECK(mean[0].at(0, c) == doctest::Approx(expect / 4.0).epsilon(1e-12));
    }

    // per-slice loop oracle on a random batch of slices
    Rng rng(28);
    std::vector<Matrix> ps, vs;
    for (int s = 0; s < 6; ++s) {
        ps.push_back(Matrix::random_gaussian(3, 7, rng));
        vs.push_back(Matrix::random_gaussian(7, 2, rng));
    }
    const auto got = attention_probs_values_bmm(ps, vs);
    for (int s = 0; s < 6; ++s) {
        for (index_t i = 0; i < 3; ++i)
            for (index_t j = 0; j < 2; ++j) {
                double acc = 0.0;
                for (index_t k = 0; k < 7; ++k) acc += ps[s].at(i, k) * vs[s].at(k, j);
                CHECK(got[s].at(i, j) == doctest::Approx(acc).epsilon(1e-12));
            }
    }

    CHECK_THROWS_AS(attention_probs_values_bmm({Matrix(2, 3)}, {Matrix(4, 2)}), std::invalid_argument);
}

TEST_CASE("model serialization round-trips bit-exact") {
    for (Dtype dtype : {Dtype::f64, Dtype::f32}) {
        ModelConfig cfg = micro_config(29);
        cfg.dtype = dtype;
        const ModelParams params = init_model(cfg);
        const std::string prefix = std::string("/tmp/fptq_test_model_") + dtype_name(dtype);
        save_model(params, prefix);
        const ModelParams loaded = load_model(prefix);
        CHECK(loaded.config.dtype == dtype);
        for (std::size_t i = 0; i < params.embedding.size(); ++i)
            CHECK(loaded.embedding.data()[i] == params.embedding.data()[i]);
        for (std::size_t b = 0; b < params.blocks.size(); ++b) {
            for (std::size_t i = 0; i < params.blocks[b].w_d.size(); ++i)
                CHECK(loaded.blocks[b].w_d.data()[i] == params.blocks[b].w_d.data()[i]);
            CHECK(loaded.blocks[b].gamma_attn == params.blocks[b].gamma_attn);
        }
        const TokenBatch batch = fptq::test::tokens(30, 1, 8, cfg.vocab);
        const auto a = forward(params, batch, {}).logits;
        const auto b = forward(loaded, batch, {}).logits;
        for (std::size_t k = 0; k < a[0].size(); ++k) CHECK(a[0].data()[k] == b[0].data()[k]);
        std::remove((prefix + ".json").c_str());
        std::remove((prefix + ".bin").c_str());
    }
}
