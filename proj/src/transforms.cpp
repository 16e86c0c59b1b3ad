#include "fptq/transforms.hpp"

#include <cmath>

#include "fptq/rng.hpp"

namespace fptq {

namespace {

index_t pairs_per_head(const ModelConfig& cfg) { return cfg.d_head / 2; }

void check_gammas_folded(const ModelParams& params, const char* op) {
    auto is_ones = [](const std::vector<double>& g) {
        for (double v : g)
            if (v != 1.0) return false;
        return true;
    };
    for (const auto& b : params.blocks)
        if (!is_ones(b.gamma_attn) || !is_ones(b.gamma_mlp))
            throw std::invalid_argument(std::string(op) + ": norm scales must be folded first");
    if (!is_ones(params.gamma_final))
        throw std::invalid_argument(std::string(op) + ": final norm scale must be folded first");
}

}  // namespace

// --- PreRopeTransform -------------------------------------------------------

PreRopeTransform PreRopeTransform::identity(const ModelConfig& cfg) {
    PreRopeTransform t;
    const std::size_t n = static_cast<std::size_t>(pairs_per_head(cfg));
    t.blocks.assign(static_cast<std::size_t>(cfg.n_blocks),
                    std::vector<PreRopeHeadTransform>(
                        static_cast<std::size_t>(cfg.n_kv_heads),
                        PreRopeHeadTransform{std::vector<double>(n, 1.0), std::vector<double>(n, 0.0)}));
    return t;
}

PreRopeTransform PreRopeTransform::random(const ModelConfig& cfg, Rng& rng, double log_scale_spread,
                                          double angle_spread) {
    PreRopeTransform t = identity(cfg);
    for (auto& block : t.blocks)
        for (auto& head : block)
            for (std::size_t n = 0; n < head.scales.size(); ++n) {
                head.scales[n] = std::exp(rng.uniform(-log_scale_spread, log_scale_spread));
                head.angles[n] = rng.uniform(-angle_spread, angle_spread);
            }
    return t;
}

Matrix PreRopeTransform::realize_key_head(const PreRopeHeadTransform& head) {
    const index_t dh = static_cast<index_t>(head.scales.size()) * 2;
    Matrix t(dh, dh);
    for (std::size_t n = 0; n < head.scales.size(); ++n) {
        const double s = head.scales[n];
        const double c = std::cos(head.angles[n]), si = std::sin(head.angles[n]);
        const index_t o = static_cast<index_t>(2 * n);
        t.at(o, o) = s * c;
        t.at(o, o + 1) = s * si;
        t.at(o + 1, o) = -s * si;
        t.at(o + 1, o + 1) = s * c;
    }
    return t;
}

Matrix PreRopeTransform::realize_query_head(const PreRopeHeadTransform& head) {
    PreRopeHeadTransform inv = head;
    for (double& s : inv.scales) s = 1.0 / s;
    return realize_key_head(inv);
}

Matrix PreRopeTransform::realize_key(const ModelConfig& cfg, index_t block) const {
    validate(cfg);
    const index_t dh = cfg.d_head;
    Matrix t(cfg.n_kv_heads * dh, cfg.n_kv_heads * dh);
    const auto& heads = blocks[static_cast<std::size_t>(block)];
    for (index_t h = 0; h < cfg.n_kv_heads; ++h) {
        const Matrix th = realize_key_head(heads[static_cast<std::size_t>(h)]);
        for (index_t i = 0; i < dh; ++i)
            for (index_t j = 0; j < dh; ++j) t.at(h * dh + i, h * dh + j) = th.at(i, j);
    }
    return t;
}

Matrix PreRopeTransform::realize_query(const ModelConfig& cfg, index_t block) const {
    validate(cfg);
    const index_t dh = cfg.d_head, m = cfg.group_size();
    Matrix t(cfg.n_q_heads * dh, cfg.n_q_heads * dh);
    const auto& heads = blocks[static_cast<std::size_t>(block)];
    for (index_t qh = 0; qh < cfg.n_q_heads; ++qh) {
        const Matrix th = realize_query_head(heads[static_cast<std::size_t>(qh / m)]);
        for (index_t i = 0; i < dh; ++i)
            for (index_t j = 0; j < dh; ++j) t.at(qh * dh + i, qh * dh + j) = th.at(i, j);
    }
    return t;
}

void PreRopeTransform::validate(const ModelConfig& cfg) const {
    if (static_cast<index_t>(blocks.size()) != cfg.n_blocks)
        throw std::invalid_argument("PreRopeTransform: block count mismatch");
    for (const auto& block : blocks) {
        if (static_cast<index_t>(block.size()) != cfg.n_kv_heads)
            throw std::invalid_argument("PreRopeTransform: kv head count mismatch");
        for (const auto& head : block) {
            if (static_cast<index_t>(head.scales.size()) != pairs_per_head(cfg) ||
                head.angles.size() != head.scales.size())
                throw std::invalid_argument("PreRopeTransform: pair count mismatch");
            for (double s : head.scales)
                if (s == 0.0 || !std::isfinite(s))
                    throw std::invalid_argument("PreRopeTransform: zero or non-finite scale");
        }
    }
}

ModelParams merge_prerope(const ModelParams& params, const PreRopeTransform& t) {
    t.validate(params.config);
    ModelParams out = params;
    for (index_t blk = 0; blk < params.config.n_blocks; ++blk) {
        auto& b = out.blocks[static_cast<std::size_t>(blk)];
        b.w_q = matmul(b.w_q, t.realize_query(params.config, blk));
        b.w_k = matmul(b.w_k, t.realize_key(params.config, blk));
    }
    return out;
}

// --- ValueTransform ---------------------------------------------------------

ValueTransform ValueTransform::identity(const ModelConfig& cfg) {
    ValueTransform t;
    t.blocks.assign(static_cast<std::size_t>(cfg.n_blocks),
                    std::vector<Matrix>(static_cast<std::size_t>(cfg.n_kv_heads), Matrix::identity(cfg.d_head)));
    return t;
}

ValueTransform ValueTransform::random(const ModelConfig& cfg, Rng& rng, double spread) {
    ValueTransform t = identity(cfg);
    for (auto& block : t.blocks)
        for (auto& head : block) {
            Matrix perturb = Matrix::random_gaussian(cfg.d_head, cfg.d_head, rng, spread);
            head = add(head, perturb);
        }
    t.validate(cfg);
    return t;
}

void ValueTransform::validate(const ModelConfig& cfg) const {
    if (static_cast<index_t>(blocks.size()) != cfg.n_blocks)
        throw std::invalid_argument("ValueTransform: block count mismatch");
    for (const auto& block : blocks) {
        if (static_cast<index_t>(block.size()) != cfg.n_kv_heads)
            throw std::invalid_argument("ValueTransform: kv head count mismatch");
        for (const auto& head : block) {
            if (head.rows() != cfg.d_head || head.cols() != cfg.d_head)
                throw std::invalid_argument("ValueTransform: head matrix must be d_head x d_head");
            const Matrix inv = inverse(head);  // throws NumericalError when singular
            if (fro_norm(head) * fro_norm(inv) > kValueConditionLimit)
                throw NumericalError("ValueTransform: head matrix condition number above limit");
        }
    }
}

ModelParams merge_value_transform(const ModelParams& params, const ValueTransform& t) {
    t.validate(params.config);
    const ModelConfig& cfg = params.config;
    const index_t dh = cfg.d_head, m = cfg.group_size();
    ModelParams out = params;
    for (index_t blk = 0; blk < cfg.n_blocks; ++blk) {
        auto& b = out.blocks[static_cast<std::size_t>(blk)];
        const auto& heads = t.blocks[static_cast<std::size_t>(blk)];
        // w_v columns per kv head
        for (index_t h = 0; h < cfg.n_kv_heads; ++h) {
            const Matrix cols = col_slice(b.w_v, h * dh, (h + 1) * dh);
            paste_col_slice(b.w_v, h * dh, matmul(cols, heads[static_cast<std::size_t>(h)]));
        }
        // w_o rows per query head get the matching inverse
        Matrix new_o = b.w_o;
        for (index_t qh = 0; qh < cfg.n_q_heads; ++qh) {
            const Matrix inv = inverse(heads[static_cast<std::size_t>(qh / m)]);
            Matrix rows(dh, b.w_o.cols(), b.w_o.dtype());
            for (index_t i = 0; i < dh; ++i)
                for (index_t c = 0; c < b.w_o.cols(); ++c) rows.at(i, c) = b.w_o.at(qh * dh + i, c);
            const Matrix mixed = matmul(inv, rows);
            for (index_t i = 0; i < dh; ++i)
                for (index_t c = 0; c < b.w_o.cols(); ++c) new_o.at(qh * dh + i, c) = mixed.at(i, c);
        }
        new_o.normalize_storage();
        b.w_o = std::move(new_o);
    }
    return out;
}

// --- UpScaler ----------------------------------------------------------------

UpScaler UpScaler::identity(const ModelConfig& cfg) {
    UpScaler t;
    t.blocks.assign(static_cast<std::size_t>(cfg.n_blocks),
                    std::vector<double>(static_cast<std::size_t>(cfg.d_ffn), 1.0));
    return t;
}

UpScaler UpScaler::random(const ModelConfig& cfg, Rng& rng, double log_spread) {
    UpScaler t = identity(cfg);
    for (auto& block : t.blocks)
        for (double& s : block) s = std::exp(rng.uniform(-log_spread, log_spread));
    return t;
}

void UpScaler::validate(const ModelConfig& cfg) const {
    if (static_cast<index_t>(blocks.size()) != cfg.n_blocks)
        throw std::invalid_argument("UpScaler: block count mismatch");
    for (const auto& block : blocks) {
        if (static_cast<index_t>(block.size()) != cfg.d_ffn)
            throw std::invalid_argument("UpScaler: scale count != d_ffn");
        for (double s : block)
            if (s == 0.0 || !std::isfinite(s)) throw std::invalid_argument("UpScaler: zero or non-finite scale");
    }
}

ModelParams merge_up_scaler(const ModelParams& params, const UpScaler& t) {
    t.validate(params.config);
    ModelParams out = params;
    for (index_t blk = 0; blk < params.config.n_blocks; ++blk) {
        auto& b = out.blocks[static_cast<std::size_t>(blk)];
        const auto& s = t.blocks[static_cast<std::size_t>(blk)];
        std::vector<double> inv(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) inv[i] = 1.0 / s[i];
        b.w_u = scale_cols(b.w_u, s);
        b.w_d = scale_rows(b.w_d, inv);
    }
    return out;
}

// --- ResidualRotation ---------------------------------------------------------

ResidualRotation ResidualRotation::identity(index_t d_model) {
    return ResidualRotation{Matrix::identity(d_model)};
}

ResidualRotation ResidualRotation::from_skew(const SkewParam& skew) { return ResidualRotation{cayley(skew)}; }

ResidualRotation ResidualRotation::random(index_t d_model, std::uint64_t seed) {
    return ResidualRotation{random_orthogonal(d_model, seed)};
}

void ResidualRotation::validate(index_t d_model) const {
    if (rotation.rows() != d_model || rotation.cols() != d_model)
        throw std::invalid_argument("ResidualRotation: size mismatch");
    const Matrix gram = matmul(rotation, transpose(rotation));
    if (max_abs_diff(gram, Matrix::identity(d_model)) > 1e-8)
        throw std::invalid_argument("ResidualRotation: matrix is not orthogonal");
}

ModelParams merge_rotation(const ModelParams& params, const ResidualRotation& t) {
    t.validate(params.config.d_model);
    check_gammas_folded(params, "merge_rotation");
    const Matrix& r = t.rotation;
    const Matrix rt = transpose(r);
    ModelParams out = params;
    out.embedding = matmul(params.embedding, r);
    for (auto& b : out.blocks) {
        b.w_q = matmul(rt, b.w_q);
        b.w_k = matmul(rt, b.w_k);
        b.w_v = matmul(rt, b.w_v);
        b.w_g = matmul(rt, b.w_g);
        b.w_u = matmul(rt, b.w_u);
        b.w_o = matmul(b.w_o, r);
        b.w_d = matmul(b.w_d, r);
    }
    out.head = matmul(rt, out.head);
    return out;
}

// --- fold / hadamard / composition ---------------------------------------------

ModelParams fold_norm_scales(const ModelParams& params) {
    ModelParams out = params;
    const index_t dm = params.config.d_model;
    auto ones = std::vector<double>(static_cast<std::size_t>(dm), 1.0);
    for (auto& b : out.blocks) {
        b.w_q = scale_rows(b.w_q, b.gamma_attn);
        b.w_k = scale_rows(b.w_k, b.gamma_attn);
        b.w_v = scale_rows(b.w_v, b.gamma_attn);
        b.gamma_attn = ones;
        b.w_g = scale_rows(b.w_g, b.gamma_mlp);
        b.w_u = scale_rows(b.w_u, b.gamma_mlp);
        b.gamma_mlp = ones;
    }
    out.head = scale_rows(out.head, out.gamma_final);
    out.gamma_final = ones;
    return out;
}

ModelParams attach_online_hadamard(const ModelParams& params, const BlockHadamardPlan& plan) {
    if (plan.dim != params.config.d_ffn)
        throw std::invalid_argument("attach_online_hadamard: plan dim != d_ffn");
    const Matrix ht = transpose(plan.realized());
    ModelParams out = params;
    for (auto& b : out.blocks) b.w_d = matmul(ht, b.w_d);
    return out;
}

ModelParams apply_transform_set(const ModelParams& params, const TransformSet& set) {
    ModelParams out = params;
    if (set.rotation) {
        out = fold_norm_scales(out);
        out = merge_rotation(out, *set.rotation);
    }
    if (set.prerope) out = merge_prerope(out, *set.prerope);
    if (set.value) out = merge_value_transform(out, *set.value);
    if (set.upscaler) out = merge_up_scaler(out, *set.upscaler);
    if (set.hadamard) out = attach_online_hadamard(out, *set.hadamard);
    return out;
}

ForwardOptions transform_runtime_options(const TransformSet& set) {
    ForwardOptions opt;
    opt.residual_scaling = set.residual_scaling;
    opt.online_hadamard = set.hadamard;
    return opt;
}

double verify_preservation(const ModelParams& a, const ForwardOptions& a_options, const ModelParams& b,
                           const ForwardOptions& b_options, const std::vector<TokenBatch>& batches) {
    const auto& ca = a.config;
    const auto& cb = b.config;
    if (ca.d_model != cb.d_model || ca.n_blocks != cb.n_blocks || ca.vocab != cb.vocab ||
        ca.n_q_heads != cb.n_q_heads || ca.n_kv_heads != cb.n_kv_heads || ca.d_head != cb.d_head ||
        ca.d_ffn != cb.d_ffn)
        throw std::invalid_argument("verify_preservation: model configs differ");
    double worst = 0.0;
    for (const TokenBatch& batch : batches) {
        const ForwardResult ra = forward(a, batch, a_options);
        const ForwardResult rb = forward(b, batch, b_options);
        for (std::size_t i = 0; i < ra.logits.size(); ++i) {
            const double dev = max_abs_diff(ra.logits[i], rb.logits[i]) / (1.0 + max_abs(ra.logits[i]));
            worst = std::max(worst, dev);
        }
    }
    return worst;
}

}  // namespace fptq
