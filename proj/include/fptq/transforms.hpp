#pragma once

#include <optional>

#include "fptq/model.hpp"
#include "fptq/rotation.hpp"

namespace fptq {

// ---------------------------------------------------------------------------
// Function-preserving transform families. Each family carries per-block
// parameters (the rotation is shared across blocks), realizes to explicit
// matrices, and merges into ModelParams together with its inverse
// counterpart so that full-model logits are unchanged.
// ---------------------------------------------------------------------------

// Scaled planar rotations per RoPE pair for one kv head: block n of the
// realized key transform is scales[n] * R(angles[n]); the query side uses
// 1/scales[n] * R(angles[n]). Scales are kept positive; a sign flip is
// expressible as angle + pi.
struct PreRopeHeadTransform {
    std::vector<double> scales;
    std::vector<double> angles;
};

struct PreRopeTransform {
    // [block][kv head]
    std::vector<std::vector<PreRopeHeadTransform>> blocks;

    static PreRopeTransform identity(const ModelConfig& cfg);
    static PreRopeTransform random(const ModelConfig& cfg, Rng& rng, double log_scale_spread = 0.5,
                                   double angle_spread = 3.0);

    // T_k for one head: (d_head x d_head) block-diagonal of scaled rotations.
    static Matrix realize_key_head(const PreRopeHeadTransform& head);
    // Inverse-scale counterpart applied to the query side.
    static Matrix realize_query_head(const PreRopeHeadTransform& head);
    // Full key transform for a block: diag over kv heads.
    Matrix realize_key(const ModelConfig& cfg, index_t block) const;
    // Full query transform: each head's counterpart repeated group_size times.
    Matrix realize_query(const ModelConfig& cfg, index_t block) const;

    void validate(const ModelConfig& cfg) const;
};

// One invertible d_head x d_head matrix per kv head per block.
struct ValueTransform {
    std::vector<std::vector<Matrix>> blocks;  // [block][kv head]

    static ValueTransform identity(const ModelConfig& cfg);
    static ValueTransform random(const ModelConfig& cfg, Rng& rng, double spread = 0.3);

    void validate(const ModelConfig& cfg) const;
};

// Condition-number guard for value-transform blocks (Frobenius estimate).
inline constexpr double kValueConditionLimit = 1e8;

// Positive per-channel scales on the up projection, inverse merged into the
// down projection rows.
struct UpScaler {
    std::vector<std::vector<double>> blocks;  // [block][d_ffn]

    static UpScaler identity(const ModelConfig& cfg);
    static UpScaler random(const ModelConfig& cfg, Rng& rng, double log_spread = 0.5);

    void validate(const ModelConfig& cfg) const;
};

// Orthogonal rotation of the residual stream, shared by all blocks.
struct ResidualRotation {
    Matrix rotation;  // d_model x d_model, R R^T = I

    static ResidualRotation identity(index_t d_model);
    static ResidualRotation from_skew(const SkewParam& skew);
    static ResidualRotation random(index_t d_model, std::uint64_t seed);

    void validate(index_t d_model) const;
};

// Per-(token, position) scales maintained by the pseudodynamic residual
// scaling recursion during one forward pass: S_0 = 1, thereafter
// S_n = S_{n-1} / ||Z~_{n-1}||_R. forward() exposes the realized values in
// ForwardResult::scaling_trace.
struct ResidualScalingState {
    std::vector<double> scales;  // one per position, all positive
};

// Everything a fitted pipeline carries: parameters of the merged families
// plus the two online modes.
struct TransformSet {
    std::optional<PreRopeTransform> prerope;
    std::optional<ValueTransform> value;
    std::optional<UpScaler> upscaler;
    std::optional<ResidualRotation> rotation;
    std::optional<BlockHadamardPlan> hadamard;  // online transform at mm
    bool residual_scaling = false;
};

// --- merges ---------------------------------------------------------------

// w_q <- w_q * T_q (per-head inverse scales, repeated per group),
// w_k <- w_k * T_k. Attention logits are preserved for every position pair.
ModelParams merge_prerope(const ModelParams& params, const PreRopeTransform& t);

// w_v <- w_v * diag(T_v per head); w_o <- diag(T_v^-1 repeated) * w_o.
ModelParams merge_value_transform(const ModelParams& params, const ValueTransform& t);

// w_u <- w_u * diag(s); w_d <- diag(s)^-1 * w_d. Preserved because the
// element-wise SwiGLU product commutes with diagonal scaling.
ModelParams merge_up_scaler(const ModelParams& params, const UpScaler& t);

// Input-side weights of every block premultiplied by R^T, output-side
// (w_o, w_d) postmultiplied by R; embedding output rotated, head input
// rotated back. Requires all norm scales folded (exactly one) first.
ModelParams merge_rotation(const ModelParams& params, const ResidualRotation& t);

// Absorbs every RMSNorm gamma into the rows of the following linear
// layer(s) and resets the gammas to one. Logits preserved.
ModelParams fold_norm_scales(const ModelParams& params);

// Folds the online Hadamard's inverse into every block's w_d. The forward
// pass must then run with options.online_hadamard = plan.
ModelParams attach_online_hadamard(const ModelParams& params, const BlockHadamardPlan& plan);

// Applies the whole set in the canonical order (fold norms, rotation,
// prerope, value, upscaler, hadamard fold). Returns merged params; run the
// result with transform_runtime_options(set).
ModelParams apply_transform_set(const ModelParams& params, const TransformSet& set);

// Forward modes matching a transform set (online hadamard + residual
// scaling); merged families need no runtime support.
ForwardOptions transform_runtime_options(const TransformSet& set);

// Max over batches of ||logits_a - logits_b||_inf / (1 + ||logits_a||_inf).
double verify_preservation(const ModelParams& a, const ForwardOptions& a_options, const ModelParams& b,
                           const ForwardOptions& b_options, const std::vector<TokenBatch>& batches);

}  // namespace fptq
