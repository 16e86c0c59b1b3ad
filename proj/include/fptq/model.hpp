#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "fptq/hadamard.hpp"
#include "fptq/matrix.hpp"
#include "fptq/quant.hpp"

namespace fptq {

class Rng;

// Quantizer tap points. Activation aliases follow the standard naming for
// decoder blocks (norm outputs, projections, RoPE-embedded queries/keys,
// attention BMM operands, SwiGLU stages, residual adds); W* aliases denote
// the weight tensors themselves.
enum class Location : std::uint8_t {
    q, k, v, o, g, u, d, gs, mm, na, nm, qe, ke, ap, aw, ao, ra, rm,
    Wq, Wk, Wv, Wo, Wg, Wu, Wd,
};

const char* location_name(Location loc);
Location location_from_name(const std::string& name);
bool is_weight_location(Location loc);
const std::vector<Location>& all_activation_locations();
const std::vector<Location>& all_weight_locations();

// theta_n = 10000^(-2n / d_head) for pair n.
std::vector<double> default_rope_thetas(index_t d_head);

struct ModelConfig {
    index_t d_model = 64;
    index_t n_blocks = 2;    // L transformer blocks; N = 2L sub-blocks
    index_t n_q_heads = 8;   // m * n_kv_heads
    index_t n_kv_heads = 4;
    index_t d_head = 8;      // even; d_head/2 rotation pairs
    index_t d_ffn = 172;     // intentionally not a power of two
    index_t vocab = 257;
    std::vector<double> rope_thetas;  // filled from default_rope_thetas when empty
    std::uint64_t seed = 1;
    double init_std = 1.0;   // per-matrix entry std is init_std / sqrt(fan_in)
    Dtype dtype = Dtype::f64;

    index_t group_size() const { return n_q_heads / n_kv_heads; }  // m
    index_t n_subblocks() const { return 2 * n_blocks; }
    void validate() const;
    std::vector<double> thetas() const;
};

struct BlockParams {
    Matrix w_q;  // d_model x (mH * d_head)
    Matrix w_k;  // d_model x (H * d_head)
    Matrix w_v;  // d_model x (H * d_head)
    Matrix w_o;  // (mH * d_head) x d_model, bias-free
    Matrix w_g;  // d_model x d_ffn
    Matrix w_u;  // d_model x d_ffn
    Matrix w_d;  // d_ffn x d_model, bias-free
    std::vector<double> gamma_attn;  // RMSNorm scale, attention sub-block
    std::vector<double> gamma_mlp;   // RMSNorm scale, MLP sub-block
};

struct ModelParams {
    ModelConfig config;
    Matrix embedding;  // vocab x d_model
    std::vector<BlockParams> blocks;
    std::vector<double> gamma_final;
    Matrix head;  // d_model x vocab

    void validate() const;
};

// Synthetic outlier structure layered onto the Gaussian init: scales chosen
// embedding rows (token-level outliers feeding the residual) or chosen
// columns of the MLP projections (channel-level outliers).
struct OutlierInjection {
    enum class Target : std::uint8_t { embedding_row, embedding_col, wu_col, wg_col, wd_col };
    Target target = Target::wu_col;
    std::vector<index_t> indices;
    double factor = 1.0;
};
using OutlierSpec = std::vector<OutlierInjection>;

const char* outlier_target_name(OutlierInjection::Target t);
OutlierInjection::Target outlier_target_from_name(const std::string& name);

// Gaussian-initialized weights, deterministic per cfg.seed. Draw order is
// fixed: embedding, then per block (w_q, w_k, w_v, w_o, w_g, w_u, w_d),
// then head.
ModelParams init_model(const ModelConfig& cfg, const OutlierSpec& outliers = {});

// Multiplies row i of x by the block-diagonal rotation with pair n rotated
// by (position_offset + i) * thetas[n]. Pairing is interleaved: columns
// (2n, 2n+1) form pair n. Rotation convention matches Rotation2: at
// theta = pi/2 row [1, 0] maps to [0, 1].
Matrix rope_embed(const Matrix& x, index_t position_offset, const std::vector<double>& thetas);

// Root-mean-square along each row: (1/sqrt d) * ||row||_2.
std::vector<double> row_rms(const Matrix& x);

// x / ||x||_R * gamma per row. No stability epsilon: the division uses the
// exact RMS (guarded against all-zero rows only), which keeps the norm
// exactly invariant to per-token rescaling and exactly equivariant to
// orthogonal feature mixes at unit gamma.
Matrix rmsnorm(const Matrix& x, const std::vector<double>& gamma);

Matrix silu(const Matrix& x);

// Recorded activations keyed by location. Rows append in batch-item-major
// order, then block, then head (for per-head tensors).
struct Tape {
    std::map<Location, Matrix> slots;

    bool has(Location loc) const { return slots.count(loc) != 0; }
    const Matrix& at(Location loc) const;
    void append(Location loc, const Matrix& value);
};

// Static per-alias activation grids (shared by every block) plus per-block
// per-output-channel weight grids.
struct QuantizerSet {
    std::map<Location, QuantGrid> activations;
    std::map<Location, std::vector<QuantGrid>> weights;

    bool empty() const { return activations.empty() && weights.empty(); }
};

using TokenSeq = std::vector<std::int32_t>;
using TokenBatch = std::vector<TokenSeq>;

struct ForwardOptions {
    std::set<Location> taps;
    const QuantizerSet* quantizers = nullptr;
    bool residual_scaling = false;
    // Online transform on the down-projection input; its merged inverse
    // must already be folded into w_d for the model to be preserved.
    std::optional<BlockHadamardPlan> online_hadamard;
};

struct ForwardResult {
    std::vector<Matrix> logits;  // one (seq_len x vocab) matrix per batch item
    Tape tape;
    // When residual_scaling is on: per batch item, per sub-block n, the
    // recursion scales S_n (one entry per position).
    std::vector<std::vector<std::vector<double>>> scaling_trace;
};

ForwardResult forward(const ModelParams& params, const TokenBatch& tokens, const ForwardOptions& options = {});

// Contraction over l2 per (sample, head) slice: probs[i] (l1 x l2) times
// values[i] (l2 x d_head).
std::vector<Matrix> attention_probs_values_bmm(const std::vector<Matrix>& probs,
                                               const std::vector<Matrix>& values);

}  // namespace fptq
