#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "fptq/rng.hpp"
#include "fptq/serialize.hpp"
#include "fptq/transforms.hpp"
#include "test_support.hpp"

using namespace fptq;
using fptq::test::tiny_config;

namespace {

std::vector<TokenBatch> check_batches(const ModelConfig& cfg, std::uint64_t seed, int count = 4) {
    std::vector<TokenBatch> batches;
    for (int i = 0; i < count; ++i)
        batches.push_back(fptq::test::tokens(seed + 100 * static_cast<std::uint64_t>(i + 1), 2, 24, cfg.vocab));
    return batches;
}

double dot_row(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (index_t c = 0; c < a.cols(); ++c) s += a.at(0, c) * b.at(0, c);
    return s;
}

double max_over_rms(const Matrix& m) {
    double sq = 0.0;
    for (double v : m.data()) sq += v * v;
    return max_abs(m) / std::sqrt(sq / static_cast<double>(m.size()));
}

}  // namespace

TEST_CASE("prerope transform structure: inverse pairing and RoPE commutation") {
    ModelConfig cfg = tiny_config(31);
    Rng rng(32);
    const PreRopeTransform t = PreRopeTransform::random(cfg, rng);
    const auto thetas = cfg.thetas();
    for (index_t blk = 0; blk < cfg.n_blocks; ++blk) {
        for (index_t h = 0; h < cfg.n_kv_heads; ++h) {
            const auto& head = t.blocks[static_cast<std::size_t>(blk)][static_cast<std::size_t>(h)];
            // query counterpart times key transform transposed is the identity
            const Matrix prod = matmul(PreRopeTransform::realize_query_head(head),
                                       transpose(PreRopeTransform::realize_key_head(head)));
            CHECK(max_abs_diff(prod, Matrix::identity(cfg.d_head)) < 1e-12);
            // T_k commutes with the positional rotation at any position
            for (index_t pos : {1, 5, 17}) {
                Matrix rot(cfg.d_head, cfg.d_head);
                for (std::size_t n = 0; n < thetas.size(); ++n) {
                    const double ang = static_cast<double>(pos) * thetas[n];
                    const index_t o = static_cast<index_t>(2 * n);
                    rot.at(o, o) = std::cos(ang);
                    rot.at(o, o + 1) = std::sin(ang);
                    rot.at(o + 1, o) = -std::sin(ang);
                    rot.at(o + 1, o + 1) = std::cos(ang);
                }
                const Matrix tk = PreRopeTransform::realize_key_head(head);
                CHECK(max_abs_diff(matmul(tk, rot), matmul(rot, tk)) < 1e-12);
            }
        }
    }
}

TEST_CASE("merge_prerope: identity is bitwise no-op, random preserves attention logits") {
    ModelConfig cfg = tiny_config(33);
    const ModelParams params = init_model(cfg);
    const ModelParams same = merge_prerope(params, PreRopeTransform::identity(cfg));
    for (std::size_t b = 0; b < params.blocks.size(); ++b)
        for (std::size_t i = 0; i < params.blocks[b].w_q.size(); ++i)
            CHECK(same.blocks[b].w_q.data()[i] == params.blocks[b].w_q.data()[i]);

    // RoPE'd query-key inner products unchanged for random inputs and
    // positions, per query head
    Rng rng(34);
    const PreRopeTransform t = PreRopeTransform::random(cfg, rng);
    const ModelParams merged = merge_prerope(params, t);
    const auto thetas = cfg.thetas();
    const index_t dh = cfg.d_head;
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix xi = Matrix::random_gaussian(1, cfg.d_model, rng);
        const Matrix xj = Matrix::random_gaussian(1, cfg.d_model, rng);
        const index_t pos_i = static_cast<index_t>(rng.uniform_index(64));
        const index_t pos_j = static_cast<index_t>(rng.uniform_index(64));
        const index_t blk = static_cast<index_t>(rng.uniform_index(static_cast<std::uint64_t>(cfg.n_blocks)));
        const auto& b0 = params.blocks[static_cast<std::size_t>(blk)];
        const auto& b1 = merged.blocks[static_cast<std::size_t>(blk)];
        for (index_t qh = 0; qh < cfg.n_q_heads; ++qh) {
            const index_t kv = qh / cfg.group_size();
            auto head_dot = [&](const BlockParams& bp) {
                const Matrix q = rope_embed(col_slice(matmul(xi, bp.w_q), qh * dh, (qh + 1) * dh), pos_i, thetas);
                const Matrix k = rope_embed(col_slice(matmul(xj, bp.w_k), kv * dh, (kv + 1) * dh), pos_j, thetas);
                return dot_row(q, k);
            };
            CHECK(std::abs(head_dot(b0) - head_dot(b1)) < 1e-10);
        }
    }
}

TEST_CASE("merge_prerope with unit scales preserves per-pair key norms") {
    ModelConfig cfg = tiny_config(310);
    const ModelParams params = init_model(cfg);
    Rng rng(311);
    PreRopeTransform t = PreRopeTransform::random(cfg, rng);
    for (auto& block : t.blocks)
        for (auto& head : block)
            for (double& sc : head.scales) sc = 1.0;  // rotations only
    const ModelParams merged = merge_prerope(params, t);

    const Matrix x = Matrix::random_gaussian(5, cfg.d_model, rng);
    const Matrix k0 = matmul(x, params.blocks[0].w_k);
    const Matrix k1 = matmul(x, merged.blocks[0].w_k);
    for (index_t r = 0; r < k0.rows(); ++r)
        for (index_t pair = 0; pair < k0.cols() / 2; ++pair) {
            const double n0 = std::hypot(k0.at(r, 2 * pair), k0.at(r, 2 * pair + 1));
            const double n1 = std::hypot(k1.at(r, 2 * pair), k1.at(r, 2 * pair + 1));
            CHECK(n1 == doctest::Approx(n0).epsilon(1e-12));
        }
}

TEST_CASE("merge_prerope full-model preservation and validation errors") {
    ModelConfig cfg = tiny_config(35);
    const ModelParams params = init_model(cfg);
    Rng rng(36);
    const PreRopeTransform t = PreRopeTransform::random(cfg, rng);
    const ModelParams merged = merge_prerope(params, t);
    CHECK(verify_preservation(params, {}, merged, {}, check_batches(cfg, 37)) < 1e-10);

    PreRopeTransform bad = t;
    bad.blocks[0][0].scales[0] = 0.0;
    CHECK_THROWS_AS(merge_prerope(params, bad), std::invalid_argument);
    PreRopeTransform wrong_heads = t;
    wrong_heads.blocks[0].pop_back();
    CHECK_THROWS_AS(merge_prerope(params, wrong_heads), std::invalid_argument);
}

TEST_CASE("merge_value_transform preserves logits (GQA m=2) and rejects singular blocks") {
    ModelConfig cfg = tiny_config(38);
    const ModelParams params = init_model(cfg);
    Rng rng(39);
    const ValueTransform t = ValueTransform::random(cfg, rng);
    const ModelParams merged = merge_value_transform(params, t);
    for (const auto& batch : check_batches(cfg, 40)) {
        const auto a = forward(params, batch, {}).logits;
        const auto b = forward(merged, batch, {}).logits;
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) < 1e-8);
    }

    ValueTransform singular = t;
    singular.blocks[0][0] = Matrix(cfg.d_head, cfg.d_head);  // all zeros
    CHECK_THROWS_AS(merge_value_transform(params, singular), NumericalError);
}

TEST_CASE("merge_value_transform with per-head permutations permutes the value tape") {
    ModelConfig cfg = tiny_config(41);
    const ModelParams params = init_model(cfg);
    ValueTransform t = ValueTransform::identity(cfg);
    Matrix perm(cfg.d_head, cfg.d_head);
    for (index_t i = 0; i < cfg.d_head; ++i) perm.at(i, (i + 1) % cfg.d_head) = 1.0;
    for (auto& block : t.blocks) block[0] = perm;  // head 0: cyclic column shift

    const ModelParams merged = merge_value_transform(params, t);
    const TokenBatch batch = fptq::test::tokens(42, 1, 8, cfg.vocab);
    ForwardOptions opt;
    opt.taps = {Location::v};
    const Matrix v0 = forward(params, batch, opt).tape.at(Location::v);
    const Matrix v1 = forward(merged, batch, opt).tape.at(Location::v);
    for (index_t r = 0; r < v0.rows(); ++r)
        for (index_t c = 0; c < cfg.d_head; ++c)
            CHECK(v1.at(r, (c + 1) % cfg.d_head) == doctest::Approx(v0.at(r, c)).epsilon(1e-12));
}

TEST_CASE("merge_up_scaler: ones no-op, doubling moves the mm tape, logits preserved") {
    ModelConfig cfg = tiny_config(43);
    const ModelParams params = init_model(cfg);

    const ModelParams same = merge_up_scaler(params, UpScaler::identity(cfg));
    for (std::size_t i = 0; i < params.blocks[0].w_u.size(); ++i)
        CHECK(same.blocks[0].w_u.data()[i] == params.blocks[0].w_u.data()[i]);

    UpScaler doubling = UpScaler::identity(cfg);
    for (auto& block : doubling.blocks)
        for (double& s : block) s = 2.0;
    const ModelParams doubled = merge_up_scaler(params, doubling);
    const TokenBatch batch = fptq::test::tokens(44, 1, 8, cfg.vocab);
    ForwardOptions opt;
    opt.taps = {Location::mm, Location::d};
    const auto r0 = forward(params, batch, opt);
    const auto r1 = forward(doubled, batch, opt);
    CHECK(max_abs_diff(scale(r0.tape.at(Location::mm), 2.0), r1.tape.at(Location::mm)) < 1e-10);
    CHECK(max_abs_diff(r0.tape.at(Location::d), r1.tape.at(Location::d)) < 1e-10);

    Rng rng(45);
    const ModelParams merged = merge_up_scaler(params, UpScaler::random(cfg, rng));
    CHECK(verify_preservation(params, {}, merged, {}, check_batches(cfg, 46)) < 1e-8);

    UpScaler zero = UpScaler::identity(cfg);
    zero.blocks[0][5] = 0.0;
    CHECK_THROWS_AS(merge_up_scaler(params, zero), std::invalid_argument);
}

TEST_CASE("fold_norm_scales preserves logits") {
    ModelConfig cfg = tiny_config(47);
    ModelParams params = init_model(cfg);
    Rng rng(48);
    for (auto& b : params.blocks) {
        for (auto& v : b.gamma_attn) v = std::exp(rng.gaussian(0.0, 0.3));
        for (auto& v : b.gamma_mlp) v = std::exp(rng.gaussian(0.0, 0.3));
    }
    for (auto& v : params.gamma_final) v = std::exp(rng.gaussian(0.0, 0.3));

    const ModelParams folded = fold_norm_scales(params);
    for (const auto& b : folded.blocks) {
        for (double v : b.gamma_attn) CHECK(v == 1.0);
        for (double v : b.gamma_mlp) CHECK(v == 1.0);
    }
    CHECK(verify_preservation(params, {}, folded, {}, check_batches(cfg, 49)) < 1e-10);

    // scalar case: gamma = 2 doubles the following weights
    ModelParams twos = init_model(cfg);
    for (auto& v : twos.blocks[0].gamma_attn) v = 2.0;
    const ModelParams folded2 = fold_norm_scales(twos);
    for (std::size_t i = 0; i < twos.blocks[0].w_q.size(); ++i)
        CHECK(folded2.blocks[0].w_q.data()[i] == 2.0 * twos.blocks[0].w_q.data()[i]);
}

TEST_CASE("merge_rotation: identity no-op, random orthogonal preserves, unfolded gammas rejected") {
    ModelConfig cfg = tiny_config(50);
    ModelParams raw = init_model(cfg);
    Rng rng(51);
    for (auto& v : raw.blocks[0].gamma_attn) v = std::exp(rng.gaussian(0.0, 0.2));
    CHECK_THROWS_AS(merge_rotation(raw, ResidualRotation::random(cfg.d_model, 1)), std::invalid_argument);

    const ModelParams params = fold_norm_scales(raw);
    const ModelParams same = merge_rotation(params, ResidualRotation::identity(cfg.d_model));
    CHECK(verify_preservation(params, {}, same, {}, check_batches(cfg, 52)) < 1e-12);

    const ModelParams merged = merge_rotation(params, ResidualRotation::random(cfg.d_model, 53));
    CHECK(verify_preservation(params, {}, merged, {}, check_batches(cfg, 54)) < 1e-8);

    ResidualRotation bogus{fptq::test::random_matrix(cfg.d_model, cfg.d_model, 55)};
    CHECK_THROWS_AS(merge_rotation(params, bogus), std::invalid_argument);
}

TEST_CASE("merge_rotation with a block-Hadamard matrix reduces residual outlier ratio") {
    ModelConfig cfg = tiny_config(56);
    // channel-level residual outliers (token-level ones are rotation-invariant)
    OutlierSpec outliers;
    outliers.push_back({OutlierInjection::Target::embedding_col, {5, 9}, 24.0});
    outliers.push_back({OutlierInjection::Target::wd_col, {5, 9}, 8.0});
    const ModelParams params = fold_norm_scales(init_model(cfg, outliers));
    const Matrix h = default_hadamard_plan(cfg.d_model).realized();
    const ModelParams merged = merge_rotation(params, ResidualRotation{h});
    CHECK(verify_preservation(params, {}, merged, {}, check_batches(cfg, 57)) < 1e-8);

    const TokenBatch batch = fptq::test::tokens(58, 2, 16, cfg.vocab);
    ForwardOptions opt;
    opt.taps = {Location::ra};
    const Matrix t0 = forward(params, batch, opt).tape.at(Location::ra);
    const Matrix t1 = forward(merged, batch, opt).tape.at(Location::ra);
    CHECK(max_over_rms(t1) < max_over_rms(t0));
}

TEST_CASE("residual scaling: recursion matches direct unroll, unit-RMS taps, preserved logits") {
    for (index_t n_blocks : {1, 2, 3, 4}) {
        ModelConfig cfg = tiny_config(59 + static_cast<std::uint64_t>(n_blocks));
        cfg.n_blocks = n_blocks;
        const ModelParams params = init_model(cfg);
        const index_t l = 12;
        const TokenBatch batch = fptq::test::tokens(60, 1, l, cfg.vocab);

        ForwardOptions scaled;
        scaled.residual_scaling = true;
        scaled.taps = {Location::ra, Location::rm};
        const ForwardResult rs = forward(params, batch, scaled);

        // direct unroll: S_n = 1 / ||X_n||_R where X_1 is the embedding
        // output and X_{n+1} is the unscaled forward's residual after
        // sub-block n
        ForwardOptions plain_taps;
        plain_taps.taps = {Location::ra, Location::rm};
        const ForwardResult ru = forward(params, batch, plain_taps);

        Matrix embed(l, cfg.d_model);
        for (index_t i = 0; i < l; ++i)
            for (index_t c = 0; c < cfg.d_model; ++c)
                embed.at(i, c) = params.embedding.at(batch[0][static_cast<std::size_t>(i)], c);

        const auto& trace = rs.scaling_trace.at(0);
        CHECK(static_cast<index_t>(trace.size()) == cfg.n_subblocks());
        for (index_t n = 0; n < cfg.n_subblocks(); ++n) {
            std::vector<double> x_rms;
            if (n == 0) {
                x_rms = row_rms(embed);
            } else {
                const Location loc = (n - 1) % 2 == 0 ? Location::ra : Location::rm;
                const Matrix& tape = ru.tape.at(loc);
                const index_t block_row = ((n - 1) / 2) * l;
                Matrix xn(l, cfg.d_model);
                for (index_t i = 0; i < l; ++i)
                    for (index_t c = 0; c < cfg.d_model; ++c) xn.at(i, c) = tape.at(block_row + i, c);
                x_rms = row_rms(xn);
            }
            for (index_t i = 0; i < l; ++i) {
                const double direct = 1.0 / x_rms[static_cast<std::size_t>(i)];
                const double recursed = trace[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)];
                CHECK(std::abs(recursed - direct) / direct < 1e-10);
            }
        }

        for (Location loc : {Location::ra, Location::rm})
            for (double rms : row_rms(rs.tape.at(loc))) CHECK(rms == doctest::Approx(1.0).epsilon(1e-6));

        ForwardOptions scaled_only;
        scaled_only.residual_scaling = true;
        const auto a = forward(params, batch, {}).logits;
        const auto b = forward(params, batch, scaled_only).logits;
        CHECK(max_abs_diff(a[0], b[0]) < 1e-8);
    }
}

TEST_CASE("attach_online_hadamard preserves logits for power-of-two and 172-wide FFNs") {
    for (index_t d_ffn : {128, 172}) {
        ModelConfig cfg = tiny_config(70 + static_cast<std::uint64_t>(d_ffn));
        cfg.d_ffn = d_ffn;
        const ModelParams params = init_model(cfg);
        const BlockHadamardPlan plan = default_hadamard_plan(d_ffn);
        if (d_ffn == 172) CHECK(plan.blocks == std::vector<index_t>{128, 32, 8, 4});
        const ModelParams folded = attach_online_hadamard(params, plan);
        ForwardOptions online;
        online.online_hadamard = plan;
        CHECK(verify_preservation(params, {}, folded, online, check_batches(cfg, 71)) < 1e-8);

        CHECK_THROWS_AS(attach_online_hadamard(params, default_hadamard_plan(d_ffn + 4)),
                        std::invalid_argument);
    }
}

TEST_CASE("mm tape records the post-Hadamard activation; constant block concentrates") {
    ModelConfig cfg = tiny_config(72);
    cfg.d_ffn = 128;
    const ModelParams params = init_model(cfg);
    const BlockHadamardPlan plan = default_hadamard_plan(cfg.d_ffn);
    const ModelParams folded = attach_online_hadamard(params, plan);
    const TokenBatch batch = fptq::test::tokens(73, 1, 6, cfg.vocab);

    ForwardOptions plain;
    plain.taps = {Location::mm};
    ForwardOptions online = plain;
    online.online_hadamard = plan;
    const Matrix mm_raw = forward(params, batch, plain).tape.at(Location::mm);
    const Matrix mm_had = forward(folded, batch, online).tape.at(Location::mm);
    CHECK(max_abs_diff(matmul(mm_raw, plan.realized()), mm_had) < 1e-10);

    // first Walsh row: a constant block maps to (c sqrt(b), 0, ..., 0)
    const BlockHadamardPlan small(8, {8});
    Matrix constant(1, 8);
    for (index_t c = 0; c < 8; ++c) constant.at(0, c) = 3.0;
    const Matrix out = hadamard_apply(small, constant);
    CHECK(out.at(0, 0) == doctest::Approx(3.0 * std::sqrt(8.0)).epsilon(1e-12));
    for (index_t c = 1; c < 8; ++c) CHECK(out.at(0, c) == doctest::Approx(0.0));
}

TEST_CASE("full transform stack preserves logits; corrupted merge is caught") {
    ModelConfig cfg = tiny_config(74);
    const ModelParams params = init_model(cfg);
    Rng rng(75);

    TransformSet set;
    set.rotation = ResidualRotation::random(cfg.d_model, 76);
    set.prerope = PreRopeTransform::random(cfg, rng);
    set.value = ValueTransform::random(cfg, rng);
    set.upscaler = UpScaler::random(cfg, rng);
    set.hadamard = default_hadamard_plan(cfg.d_ffn);
    set.residual_scaling = true;

    const ModelParams merged = apply_transform_set(params, set);
    const ForwardOptions runtime = transform_runtime_options(set);
    CHECK(verify_preservation(params, {}, merged, runtime, check_batches(cfg, 77)) < 1e-7);

    // negative control: value transform merged into w_v without the inverse in w_o
    ModelParams corrupted = params;
    for (index_t blk = 0; blk < cfg.n_blocks; ++blk) {
        auto& b = corrupted.blocks[static_cast<std::size_t>(blk)];
        const auto& heads = set.value->blocks[static_cast<std::size_t>(blk)];
        for (index_t h = 0; h < cfg.n_kv_heads; ++h) {
            const Matrix cols = col_slice(b.w_v, h * cfg.d_head, (h + 1) * cfg.d_head);
            paste_col_slice(b.w_v, h * cfg.d_head, matmul(cols, heads[static_cast<std::size_t>(h)]));
        }
    }
    CHECK(verify_preservation(params, {}, corrupted, {}, check_batches(cfg, 78)) > 1e-2);
}

TEST_CASE("transform composition order does not matter on disjoint weights") {
    ModelConfig cfg = tiny_config(79);
    const ModelParams params = init_model(cfg);
    Rng rng(80);
    const ValueTransform value = ValueTransform::random(cfg, rng);
    const UpScaler up = UpScaler::random(cfg, rng);
    const ModelParams vu = merge_up_scaler(merge_value_transform(params, value), up);
    const ModelParams uv = merge_value_transform(merge_up_scaler(params, up), value);
    for (std::size_t b = 0; b < vu.blocks.size(); ++b) {
        CHECK(max_abs_diff(vu.blocks[b].w_v, uv.blocks[b].w_v) == 0.0);
        CHECK(max_abs_diff(vu.blocks[b].w_o, uv.blocks[b].w_o) == 0.0);
        CHECK(max_abs_diff(vu.blocks[b].w_u, uv.blocks[b].w_u) == 0.0);
        CHECK(max_abs_diff(vu.blocks[b].w_d, uv.blocks[b].w_d) == 0.0);
    }
}

TEST_CASE("hadamard + upscaler stack reduces merged-weight L4 and mm outlier ratio on the fixture") {
    ModelConfig cfg = tiny_config(81);
    OutlierSpec outliers;
    outliers.push_back({OutlierInjection::Target::wu_col, {3, 57, 131}, 32.0});
    const ModelParams params = init_model(cfg, outliers);

    // channel-balancing scales from the closed-form per-channel L4 trade-off
    UpScaler balancing = UpScaler::identity(cfg);
    for (index_t blk = 0; blk < cfg.n_blocks; ++blk) {
        const auto& b = params.blocks[static_cast<std::size_t>(blk)];
        for (index_t c = 0; c < cfg.d_ffn; ++c) {
            double up4 = 0.0, down4 = 0.0;
            for (index_t r = 0; r < b.w_u.rows(); ++r) up4 += std::pow(b.w_u.at(r, c), 4.0);
            for (index_t k = 0; k < b.w_d.cols(); ++k) down4 += std::pow(b.w_d.at(c, k), 4.0);
            balancing.blocks[static_cast<std::size_t>(blk)][static_cast<std::size_t>(c)] =
                std::pow(down4 / up4, 1.0 / 8.0);
        }
    }
    const BlockHadamardPlan plan = default_hadamard_plan(cfg.d_ffn);
    const ModelParams transformed = attach_online_hadamard(merge_up_scaler(params, balancing), plan);

    auto stack_l4 = [](const ModelParams& p) {
        double total = 0.0;
        for (const auto& b : p.blocks) total += lp_norm(b.w_u, 4.0) + lp_norm(b.w_d, 4.0);
        return total;
    };
    CHECK(stack_l4(transformed) < stack_l4(params));

    const TokenBatch batch = fptq::test::tokens(82, 2, 16, cfg.vocab);
    ForwardOptions plain;
    plain.taps = {Location::mm};
    ForwardOptions online = plain;
    online.online_hadamard = plan;
    const Matrix mm0 = forward(params, batch, plain).tape.at(Location::mm);
    const Matrix mm1 = forward(transformed, batch, online).tape.at(Location::mm);
    CHECK(max_over_rms(mm1) < max_over_rms(mm0));
}

TEST_CASE("verify_preservation basics") {
    ModelConfig cfg = tiny_config(83);
    const ModelParams params = init_model(cfg);
    CHECK(verify_preservation(params, {}, params, {}, check_batches(cfg, 84)) == 0.0);

    ModelConfig other = cfg;
    other.d_ffn = 64;
    const ModelParams different = init_model(other);
    CHECK_THROWS_AS(verify_preservation(params, {}, different, {}, check_batches(cfg, 85)),
                    std::invalid_argument);
}

TEST_CASE("transform set serialization round-trips") {
    ModelConfig cfg = tiny_config(86);
    Rng rng(87);
    TransformSet set;
    set.rotation = ResidualRotation::random(cfg.d_model, 88);
    set.prerope = PreRopeTransform::random(cfg, rng);
    set.value = ValueTransform::random(cfg, rng);
    set.upscaler = UpScaler::random(cfg, rng);
    set.hadamard = default_hadamard_plan(cfg.d_ffn);
    set.residual_scaling = true;

    const std::string prefix = "/tmp/fptq_test_transforms";
    save_transform_set(set, cfg, prefix);
    const TransformSet loaded = load_transform_set(prefix, cfg);
    CHECK(loaded.residual_scaling);
    CHECK(loaded.hadamard->blocks == set.hadamard->blocks);
    CHECK(max_abs_diff(loaded.rotation->rotation, set.rotation->rotation) == 0.0);
    for (std::size_t b = 0; b < set.prerope->blocks.size(); ++b)
        for (std::size_t h = 0; h < set.prerope->blocks[b].size(); ++h) {
            CHECK(loaded.prerope->blocks[b][h].scales == set.prerope->blocks[b][h].scales);
            CHECK(loaded.prerope->blocks[b][h].angles == set.prerope->blocks[b][h].angles);
        }
    for (std::size_t b = 0; b < set.value->blocks.size(); ++b)
        for (std::size_t h = 0; h < set.value->blocks[b].size(); ++h)
            CHECK(max_abs_diff(loaded.value->blocks[b][h], set.value->blocks[b][h]) == 0.0);
    std::remove((prefix + ".json").c_str());
    std::remove((prefix + ".bin").c_str());
}
