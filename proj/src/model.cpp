#include "fptq/model.hpp"

#include <algorithm>
#include <cmath>

#include "fptq/rng.hpp"

namespace fptq {

namespace {

struct LocationEntry {
    Location loc;
    const char* name;
};

constexpr LocationEntry kLocationTable[] = {
    {Location::q, "q"},   {Location::k, "k"},   {Location::v, "v"},   {Location::o, "o"},
    {Location::g, "g"},   {Location::u, "u"},   {Location::d, "d"},   {Location::gs, "gs"},
    {Location::mm, "mm"}, {Location::na, "na"}, {Location::nm, "nm"}, {Location::qe, "qe"},
    {Location::ke, "ke"}, {Location::ap, "ap"}, {Location::aw, "aw"}, {Location::ao, "ao"},
    {Location::ra, "ra"}, {Location::rm, "rm"}, {Location::Wq, "Wq"}, {Location::Wk, "Wk"},
    {Location::Wv, "Wv"}, {Location::Wo, "Wo"}, {Location::Wg, "Wg"}, {Location::Wu, "Wu"},
    {Location::Wd, "Wd"},
};

}  // namespace

const char* location_name(Location loc) {
    for (const auto& e : kLocationTable)
        if (e.loc == loc) return e.name;
    throw std::invalid_argument("location_name: unknown location");
}

Location location_from_name(const std::string& name) {
    for (const auto& e : kLocationTable)
        if (name == e.name) return e.loc;
    throw std::invalid_argument("unknown quantizer location: " + name);
}

bool is_weight_location(Location loc) {
    return static_cast<int>(loc) >= static_cast<int>(Location::Wq);
}

const std::vector<Location>& all_activation_locations() {
    static const std::vector<Location> locs = [] {
        std::vector<Location> v;
        for (const auto& e : kLocationTable)
            if (!is_weight_location(e.loc)) v.push_back(e.loc);
        return v;
    }();
    return locs;
}

const std::vector<Location>& all_weight_locations() {
    static const std::vector<Location> locs = [] {
        std::vector<Location> v;
        for (const auto& e : kLocationTable)
            if (is_weight_location(e.loc)) v.push_back(e.loc);
        return v;
    }();
    return locs;
}

std::vector<double> default_rope_thetas(index_t d_head) {
    if (d_head < 2 || d_head % 2 != 0) throw std::invalid_argument("default_rope_thetas: d_head must be even");
    std::vector<double> thetas(static_cast<std::size_t>(d_head / 2));
    for (std::size_t n = 0; n < thetas.size(); ++n)
        thetas[n] = std::pow(10000.0, -2.0 * static_cast<double>(n) / static_cast<double>(d_head));
    return thetas;
}

void ModelConfig::validate() const {
    if (d_model < 1 || n_blocks < 1 || n_q_heads < 1 || n_kv_heads < 1 || d_head < 1 || d_ffn < 1 || vocab < 2)
        throw std::invalid_argument("ModelConfig: dimensions must be positive (vocab >= 2)");
    if (d_head % 2 != 0) throw std::invalid_argument("ModelConfig: d_head must be even");
    if (n_q_heads % n_kv_heads != 0)
        throw std::invalid_argument("ModelConfig: n_q_heads must be a multiple of n_kv_heads");
    if (d_model != n_q_heads * d_head)
        throw std::invalid_argument("ModelConfig: d_model must equal n_q_heads * d_head");
    if (!rope_thetas.empty() && static_cast<index_t>(rope_thetas.size()) != d_head / 2)
        throw std::invalid_argument("ModelConfig: rope_thetas must have d_head/2 entries");
    if (!(init_std > 0.0)) throw std::invalid_argument("ModelConfig: init_std must be positive");
}

std::vector<double> ModelConfig::thetas() const {
    return rope_thetas.empty() ? default_rope_thetas(d_head) : rope_thetas;
}

void ModelParams::validate() const {
    config.validate();
    const index_t dm = config.d_model, dh = config.d_head;
    const index_t qcols = config.n_q_heads * dh, kvcols = config.n_kv_heads * dh;
    auto expect = [](const Matrix& m, index_t r, index_t c, const char* what) {
        if (m.rows() != r || m.cols() != c)
            throw std::invalid_argument(std::string("ModelParams: bad shape for ") + what);
    };
    expect(embedding, config.vocab, dm, "embedding");
    expect(head, dm, config.vocab, "head");
    if (static_cast<index_t>(blocks.size()) != config.n_blocks)
        throw std::invalid_argument("ModelParams: block count mismatch");
    if (static_cast<index_t>(gamma_final.size()) != dm)
        throw std::invalid_argument("ModelParams: gamma_final size mismatch");
    for (const auto& b : blocks) {
        expect(b.w_q, dm, qcols, "w_q");
        expect(b.w_k, dm, kvcols, "w_k");
        expect(b.w_v, dm, kvcols, "w_v");
        expect(b.w_o, qcols, dm, "w_o");
        expect(b.w_g, dm, config.d_ffn, "w_g");
        expect(b.w_u, dm, config.d_ffn, "w_u");
        expect(b.w_d, config.d_ffn, dm, "w_d");
        if (static_cast<index_t>(b.gamma_attn.size()) != dm || static_cast<index_t>(b.gamma_mlp.size()) != dm)
            throw std::invalid_argument("ModelParams: norm scale size mismatch");
    }
}

const char* outlier_target_name(OutlierInjection::Target t) {
    switch (t) {
        case OutlierInjection::Target::embedding_row: return "embedding_row";
        case OutlierInjection::Target::embedding_col: return "embedding_col";
        case OutlierInjection::Target::wu_col: return "wu_col";
        case OutlierInjection::Target::wg_col: return "wg_col";
        case OutlierInjection::Target::wd_col: return "wd_col";
    }
    return "?";
}

OutlierInjection::Target outlier_target_from_name(const std::string& name) {
    if (name == "embedding_row") return OutlierInjection::Target::embedding_row;
    if (name == "embedding_col") return OutlierInjection::Target::embedding_col;
    if (name == "wu_col") return OutlierInjection::Target::wu_col;
    if (name == "wg_col") return OutlierInjection::Target::wg_col;
    if (name == "wd_col") return OutlierInjection::Target::wd_col;
    throw std::invalid_argument("unknown outlier target: " + name);
}

namespace {

void scale_row_inplace(Matrix& m, index_t row, double factor) {
    if (row < 0 || row >= m.rows()) throw std::invalid_argument("outlier injection: row index out of range");
    for (double& v : m.row(row)) v *= factor;
    m.normalize_storage();
}

void scale_col_inplace(Matrix& m, index_t col, double factor) {
    if (col < 0 || col >= m.cols()) throw std::invalid_argument("outlier injection: column index out of range");
    for (index_t r = 0; r < m.rows(); ++r) m.at(r, col) *= factor;
    m.normalize_storage();
}

}  // namespace

ModelParams init_model(const ModelConfig& cfg, const OutlierSpec& outliers) {
    cfg.validate();
    Rng rng(cfg.seed);
    ModelParams p;
    p.config = cfg;
    p.config.rope_thetas = cfg.thetas();

    const index_t dm = cfg.d_model, dh = cfg.d_head;
    const index_t qcols = cfg.n_q_heads * dh, kvcols = cfg.n_kv_heads * dh;
    const Dtype dt = cfg.dtype;
    auto gauss = [&](index_t r, index_t c, index_t fan_in) {
        return Matrix::random_gaussian(r, c, rng, cfg.init_std / std::sqrt(static_cast<double>(fan_in)), dt);
    };

    p.embedding = gauss(cfg.vocab, dm, 1);
    p.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
    for (auto& b : p.blocks) {
        b.w_q = gauss(dm, qcols, dm);
        b.w_k = gauss(dm, kvcols, dm);
        b.w_v = gauss(dm, kvcols, dm);
        b.w_o = gauss(qcols, dm, qcols);
        b.w_g = gauss(dm, cfg.d_ffn, dm);
        b.w_u = gauss(dm, cfg.d_ffn, dm);
        b.w_d = gauss(cfg.d_ffn, dm, cfg.d_ffn);
        b.gamma_attn.assign(static_cast<std::size_t>(dm), 1.0);
        b.gamma_mlp.assign(static_cast<std::size_t>(dm), 1.0);
    }
    p.gamma_final.assign(static_cast<std::size_t>(dm), 1.0);
    p.head = gauss(dm, cfg.vocab, dm);

    for (const auto& inj : outliers) {
        for (index_t idx : inj.indices) {
            switch (inj.target) {
                case OutlierInjection::Target::embedding_row:
                    scale_row_inplace(p.embedding, idx, inj.factor);
                    break;
                case OutlierInjection::Target::embedding_col:
                    scale_col_inplace(p.embedding, idx, inj.factor);
                    break;
                case OutlierInjection::Target::wu_col:
                    for (auto& b : p.blocks) scale_col_inplace(b.w_u, idx, inj.factor);
                    break;
                case OutlierInjection::Target::wg_col:
                    for (auto& b : p.blocks) scale_col_inplace(b.w_g, idx, inj.factor);
                    break;
                case OutlierInjection::Target::wd_col:
                    for (auto& b : p.blocks) scale_col_inplace(b.w_d, idx, inj.factor);
                    break;
            }
        }
    }
    p.validate();
    return p;
}

Matrix rope_embed(const Matrix& x, index_t position_offset, const std::vector<double>& thetas) {
    if (x.cols() % 2 != 0) throw std::invalid_argument("rope_embed: feature dim must be even");
    if (static_cast<index_t>(thetas.size()) != x.cols() / 2)
        throw std::invalid_argument("rope_embed: need one theta per dimension pair");
    Matrix out(x.rows(), x.cols(), x.dtype());
    for (index_t i = 0; i < x.rows(); ++i) {
        const double pos = static_cast<double>(position_offset + i);
        for (index_t n = 0; n < x.cols() / 2; ++n) {
            const double angle = pos * thetas[static_cast<std::size_t>(n)];
            const double c = std::cos(angle), s = std::sin(angle);
            const double a = x.at(i, 2 * n), b = x.at(i, 2 * n + 1);
            out.at(i, 2 * n) = a * c - b * s;
            out.at(i, 2 * n + 1) = a * s + b * c;
        }
    }
    out.normalize_storage();
    return out;
}

std::vector<double> row_rms(const Matrix& x) {
    std::vector<double> rms(static_cast<std::size_t>(x.rows()));
    for (index_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (double v : x.row(r)) s += v * v;
        rms[static_cast<std::size_t>(r)] = std::sqrt(s / static_cast<double>(x.cols()));
    }
    return rms;
}

namespace {

// Zero-row guard only; not a stability epsilon (see rmsnorm contract).
constexpr double kRmsFloor = 1e-30;

}  // namespace

Matrix rmsnorm(const Matrix& x, const std::vector<double>& gamma) {
    if (static_cast<index_t>(gamma.size()) != x.cols())
        throw std::invalid_argument("rmsnorm: gamma size != feature dim");
    const std::vector<double> rms = row_rms(x);
    Matrix out(x.rows(), x.cols(), x.dtype());
    for (index_t r = 0; r < x.rows(); ++r) {
        const double inv = 1.0 / std::max(rms[static_cast<std::size_t>(r)], kRmsFloor);
        for (index_t c = 0; c < x.cols(); ++c)
            out.at(r, c) = x.at(r, c) * inv * gamma[static_cast<std::size_t>(c)];
    }
    out.normalize_storage();
    return out;
}

Matrix silu(const Matrix& x) {
    Matrix out(x.rows(), x.cols(), x.dtype());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        out.data()[i] = v / (1.0 + std::exp(-v));
    }
    out.normalize_storage();
    return out;
}

const Matrix& Tape::at(Location loc) const {
    auto it = slots.find(loc);
    if (it == slots.end())
        throw std::invalid_argument(std::string("Tape: no recording at ") + location_name(loc));
    return it->second;
}

void Tape::append(Location loc, const Matrix& value) {
    auto it = slots.find(loc);
    if (it == slots.end()) {
        slots.emplace(loc, value);
        return;
    }
    Matrix& existing = it->second;
    if (existing.cols() != value.cols()) throw std::invalid_argument("Tape: appending mismatched feature dim");
    Matrix merged(existing.rows() + value.rows(), existing.cols(), promote(existing.dtype(), value.dtype()));
    std::copy(existing.data().begin(), existing.data().end(), merged.data().begin());
    std::copy(value.data().begin(), value.data().end(), merged.data().begin() + existing.size());
    existing = std::move(merged);
}

namespace {

const QuantGrid* activation_grid(const ForwardOptions& opt, Location loc) {
    if (!opt.quantizers) return nullptr;
    auto it = opt.quantizers->activations.find(loc);
    return it == opt.quantizers->activations.end() ? nullptr : &it->second;
}

// Records the (pre-quantization) activation if tapped, then fake-quantizes
// in place if a grid is attached. Downstream always consumes the returned
// value.
struct TapPoint {
    const ForwardOptions& opt;
    Tape& tape;

    void operator()(Location loc, Matrix& value) const {
        if (opt.taps.count(loc)) tape.append(loc, value);
        if (const QuantGrid* grid = activation_grid(opt, loc)) value = fake_quantize(value, *grid);
    }
};

// Weight as used by the forward pass: fake-quantized copy when a grid is
// attached for (loc, block), otherwise the original (no copy).
const Matrix& effective_weight(const Matrix& w, Location loc, index_t block, const ForwardOptions& opt,
                               Matrix& scratch) {
    if (opt.quantizers) {
        auto it = opt.quantizers->weights.find(loc);
        if (it != opt.quantizers->weights.end()) {
            const auto& grids = it->second;
            if (block >= static_cast<index_t>(grids.size()))
                throw std::invalid_argument("forward: missing weight grid for block");
            scratch = fake_quantize(w, grids[static_cast<std::size_t>(block)]);
            return scratch;
        }
    }
    return w;
}

Matrix causal_softmax(const Matrix& scores) {
    Matrix p(scores.rows(), scores.cols(), scores.dtype());
    for (index_t i = 0; i < scores.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (index_t j = 0; j <= i; ++j) mx = std::max(mx, scores.at(i, j));
        double sum = 0.0;
        for (index_t j = 0; j <= i; ++j) {
            const double e = std::exp(scores.at(i, j) - mx);
            p.at(i, j) = e;
            sum += e;
        }
        for (index_t j = 0; j <= i; ++j) p.at(i, j) /= sum;
        // entries j > i stay exactly zero (causal mask)
    }
    p.normalize_storage();
    return p;
}

// RoPE applied independently to each head slice of a concatenated
// (seq x n_heads*d_head) projection output.
Matrix rope_heads(const Matrix& x, index_t n_heads, index_t d_head, const std::vector<double>& thetas) {
    Matrix out(x.rows(), x.cols(), x.dtype());
    for (index_t h = 0; h < n_heads; ++h)
        paste_col_slice(out, h * d_head, rope_embed(col_slice(x, h * d_head, (h + 1) * d_head), 0, thetas));
    return out;
}

struct SubBlockCtx {
    const ModelConfig& cfg;
    const ForwardOptions& opt;
    const TapPoint& tap;
    const std::vector<double>* row_scale;  // S_n when residual scaling is on
};

Matrix attention_subblock(const BlockParams& bp, index_t block_idx, const Matrix& na, const SubBlockCtx& ctx) {
    const index_t dh = ctx.cfg.d_head, n_kv = ctx.cfg.n_kv_heads, n_q = ctx.cfg.n_q_heads;
    const index_t m = ctx.cfg.group_size();
    const std::vector<double> thetas = ctx.cfg.thetas();
    Matrix scratch;

    Matrix q = matmul(na, effective_weight(bp.w_q, Location::Wq, block_idx, ctx.opt, scratch));
    ctx.tap(Location::q, q);
    Matrix k = matmul(na, effective_weight(bp.w_k, Location::Wk, block_idx, ctx.opt, scratch));
    ctx.tap(Location::k, k);
    Matrix v = matmul(na, effective_weight(bp.w_v, Location::Wv, block_idx, ctx.opt, scratch));
    ctx.tap(Location::v, v);

    Matrix qe = rope_heads(q, n_q, dh, thetas);
    ctx.tap(Location::qe, qe);
    Matrix ke = rope_heads(k, n_kv, dh, thetas);
    ctx.tap(Location::ke, ke);

    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix ao(na.rows(), n_q * dh, na.dtype());
    for (index_t qh = 0; qh < n_q; ++qh) {
        const index_t kv = qh / m;
        const Matrix qe_h = col_slice(qe, qh * dh, (qh + 1) * dh);
        const Matrix ke_h = col_slice(ke, kv * dh, (kv + 1) * dh);
        Matrix aw_h = scale(matmul(qe_h, transpose(ke_h)), att_scale);
        ctx.tap(Location::aw, aw_h);
        Matrix ap_h = causal_softmax(aw_h);
        if (ctx.row_scale) ap_h = scale_rows(ap_h, *ctx.row_scale);
        ctx.tap(Location::ap, ap_h);
        const Matrix v_h = col_slice(v, kv * dh, (kv + 1) * dh);
        paste_col_slice(ao, qh * dh, matmul(ap_h, v_h));
    }
    ctx.tap(Location::ao, ao);
    Matrix o = matmul(ao, effective_weight(bp.w_o, Location::Wo, block_idx, ctx.opt, scratch));
    ctx.tap(Location::o, o);
    return o;
}

Matrix mlp_subblock(const BlockParams& bp, index_t block_idx, const Matrix& nm, const SubBlockCtx& ctx) {
    Matrix scratch;
    Matrix g = matmul(nm, effective_weight(bp.w_g, Location::Wg, block_idx, ctx.opt, scratch));
    ctx.tap(Location::g, g);
    Matrix u = matmul(nm, effective_weight(bp.w_u, Location::Wu, block_idx, ctx.opt, scratch));
    ctx.tap(Location::u, u);
    Matrix gs = silu(g);
    ctx.tap(Location::gs, gs);
    Matrix mm = hadamard_product(gs, u);
    if (ctx.row_scale) mm = scale_rows(mm, *ctx.row_scale);
    if (ctx.opt.online_hadamard) mm = hadamard_apply(*ctx.opt.online_hadamard, mm);
    ctx.tap(Location::mm, mm);
    Matrix d = matmul(mm, effective_weight(bp.w_d, Location::Wd, block_idx, ctx.opt, scratch));
    ctx.tap(Location::d, d);
    return d;
}

}  // namespace

ForwardResult forward(const ModelParams& params, const TokenBatch& tokens, const ForwardOptions& options) {
    params.validate();
    const ModelConfig& cfg = params.config;
    if (options.online_hadamard && options.online_hadamard->dim != cfg.d_ffn)
        throw std::invalid_argument("forward: online hadamard plan dim != d_ffn");
    if (options.quantizers) {
        for (const auto& [loc, grid] : options.quantizers->activations) {
            if (is_weight_location(loc))
                throw std::invalid_argument("forward: weight alias used as activation quantizer");
            grid.validate();
        }
        for (const auto& [loc, grids] : options.quantizers->weights) {
            if (!is_weight_location(loc))
                throw std::invalid_argument("forward: activation alias used as weight quantizer");
            if (static_cast<index_t>(grids.size()) != cfg.n_blocks)
                throw std::invalid_argument("forward: weight grids must cover every block");
        }
    }

    ForwardResult result;
    TapPoint tap{options, result.tape};

    for (const TokenSeq& seq : tokens) {
        if (seq.empty()) throw std::invalid_argument("forward: empty token sequence");
        const index_t l = static_cast<index_t>(seq.size());
        Matrix r(l, cfg.d_model, cfg.dtype);
        for (index_t i = 0; i < l; ++i) {
            const auto id = seq[static_cast<std::size_t>(i)];
            if (id < 0 || id >= cfg.vocab) throw std::invalid_argument("forward: token id out of range");
            for (index_t c = 0; c < cfg.d_model; ++c) r.at(i, c) = params.embedding.at(id, c);
        }
        r.normalize_storage();

        std::vector<double> s(static_cast<std::size_t>(l), 1.0);
        std::vector<std::vector<double>> s_trace;

        // Divides the carried residual by its per-token RMS and folds the
        // factor into the running scales: S <- S / ||r||_R. With scaling on
        // the carry is always unit-RMS per token.
        auto normalize_carry = [&](Matrix& carry) {
            const std::vector<double> rms = row_rms(carry);
            std::vector<double> inv(rms.size());
            for (std::size_t i = 0; i < rms.size(); ++i) {
                inv[i] = 1.0 / std::max(rms[i], kRmsFloor);
                s[i] *= inv[i];
            }
            carry = scale_rows(carry, inv);
        };

        if (options.residual_scaling) normalize_carry(r);

        for (index_t blk = 0; blk < cfg.n_blocks; ++blk) {
            const BlockParams& bp = params.blocks[static_cast<std::size_t>(blk)];
            for (int phase = 0; phase < 2; ++phase) {
                if (options.residual_scaling) s_trace.push_back(s);  // S_n entering sub-block n
                const bool is_attn = phase == 0;
                const std::vector<double>& gamma = is_attn ? bp.gamma_attn : bp.gamma_mlp;
                // With scaling on, the carry already has unit RMS; the norm
                // reduces to the gamma multiply (its division was applied at
                // the previous residual add).
                Matrix h = options.residual_scaling ? scale_cols(r, gamma) : rmsnorm(r, gamma);
                tap(is_attn ? Location::na : Location::nm, h);
                SubBlockCtx ctx{cfg, options, tap, options.residual_scaling ? &s : nullptr};
                Matrix y = is_attn ? attention_subblock(bp, blk, h, ctx) : mlp_subblock(bp, blk, h, ctx);
                r = add(r, y);
                if (options.residual_scaling) normalize_carry(r);
                tap(is_attn ? Location::ra : Location::rm, r);
            }
        }

        Matrix final_norm = rmsnorm(r, params.gamma_final);
        result.logits.push_back(matmul(final_norm, params.head));
        if (options.residual_scaling) result.scaling_trace.push_back(std::move(s_trace));
    }
    return result;
}

std::vector<Matrix> attention_probs_values_bmm(const std::vector<Matrix>& probs,
                                               const std::vector<Matrix>& values) {
    if (probs.size() != values.size())
        throw std::invalid_argument("attention_probs_values_bmm: slice count mismatch");
    std::vector<Matrix> out;
    out.reserve(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i].cols() != values[i].rows())
            throw std::invalid_argument("attention_probs_values_bmm: l2 dimension mismatch");
        out.push_back(matmul(probs[i], values[i]));
    }
    return out;
}

}  // namespace fptq
