#include "fptq/optimize.hpp"

#include <algorithm>
#include <cmath>

#include "fptq/rng.hpp"

namespace fptq {

const char* lr_schedule_name(LrSchedule s) {
    return s == LrSchedule::constant ? "constant" : "cosine_warmup";
}

LrSchedule lr_schedule_from_name(const std::string& name) {
    if (name == "constant") return LrSchedule::constant;
    if (name == "cosine_warmup") return LrSchedule::cosine_warmup;
    throw std::invalid_argument("unknown lr schedule: " + name);
}

void OptimizeConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("OptimizeConfig: steps must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("OptimizeConfig: lr must be positive");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw std::invalid_argument("OptimizeConfig: warmup fraction must be in [0, 1)");
    if (!(p >= 1.0)) throw std::invalid_argument("OptimizeConfig: p must be >= 1");
    if (!(fd_step > 0.0)) throw std::invalid_argument("OptimizeConfig: fd_step must be positive");
    if (max_retries < 1) throw std::invalid_argument("OptimizeConfig: max_retries must be >= 1");
}

double schedule_lr(const OptimizeConfig& cfg, int step) {
    if (cfg.schedule == LrSchedule::constant) return cfg.lr;
    const int warmup = static_cast<int>(cfg.warmup_frac * cfg.steps);
    if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
    const double t = static_cast<double>(step - warmup) / static_cast<double>(std::max(cfg.steps - warmup, 1));
    return 0.5 * cfg.lr * (1.0 + std::cos(M_PI * t));
}

TrainTrace local_optimize(const ScalarFn& objective, const std::optional<GradFn>& analytic_grad,
                          const std::vector<double>& initial, const OptimizeConfig& cfg) {
    cfg.validate();
    std::vector<double> theta = initial;
    double current = objective(theta);
    if (!std::isfinite(current)) throw NumericalError("local_optimize: objective not finite at init");

    TrainTrace trace;
    trace.objective.reserve(static_cast<std::size_t>(cfg.steps));
    std::vector<double> candidate(theta.size());
    for (int step = 0; step < cfg.steps; ++step) {
        const std::vector<double> grad =
            analytic_grad ? (*analytic_grad)(theta) : finite_diff_grad(objective, theta, cfg.fd_step);
        double eta = schedule_lr(cfg, step);
        for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
            for (std::size_t i = 0; i < theta.size(); ++i) candidate[i] = theta[i] - eta * grad[i];
            const double value = objective(candidate);
            if (std::isfinite(value) && value <= current) {
                theta = candidate;
                current = value;
                break;
            }
            eta *= 0.5;  // retry rule: shrink until the step stops increasing the objective
        }
        trace.objective.push_back(current);
        ++trace.steps_taken;
    }
    trace.final_params = std::move(theta);
    return trace;
}

// --- local objectives ---------------------------------------------------------

namespace {

void check_folded_for_rotation(const ModelParams& params) {
    for (const auto& b : params.blocks)
        for (const auto* g : {&b.gamma_attn, &b.gamma_mlp})
            for (double v : *g)
                if (v != 1.0)
                    throw std::invalid_argument("rotation objective: norm scales must be folded first");
    for (double v : params.gamma_final)
        if (v != 1.0) throw std::invalid_argument("rotation objective: norm scales must be folded first");
}

double rotation_objective_value(const ModelParams& params, const Matrix& r, double p) {
    const Matrix rt = transpose(r);
    double total = 0.0;
    for (const auto& b : params.blocks) {
        for (const Matrix* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_u, &b.w_g}) total += lp_norm(matmul(rt, *w), p);
        for (const Matrix* w : {&b.w_o, &b.w_d}) total += lp_norm(matmul(*w, r), p);
    }
    return total;
}

// d||Y||_p / dY = ||Y||_p^(1-p) * |y|^(p-1) * sign(y), element-wise.
Matrix lp_norm_grad(const Matrix& y, double p) {
    const double norm = lp_norm(y, p);
    Matrix g(y.rows(), y.cols());
    if (norm == 0.0) return g;
    const double outer = std::pow(norm, 1.0 - p);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double v = y.data()[i];
        const double signed_pow = p == 4.0 ? v * v * v  // |v|^3 sign(v)
                                           : std::pow(std::abs(v), p - 1.0) *
                                                 (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        g.data()[i] = outer * signed_pow;
    }
    return g;
}

}  // namespace

double local_objective_rotation(const ModelParams& params, const ResidualRotation& t, double p) {
    check_folded_for_rotation(params);
    t.validate(params.config.d_model);
    return rotation_objective_value(params, t.rotation, p);
}

RotationObjective::RotationObjective(const ModelParams& params, double p)
    : params_(&params), p_(p), dim_(params.config.d_model) {
    check_folded_for_rotation(params);
    if (!(p >= 1.0)) throw std::invalid_argument("RotationObjective: p must be >= 1");
}

double RotationObjective::operator()(const std::vector<double>& skew_params) const {
    SkewParam skew(dim_);
    skew.params = skew_params;
    return rotation_objective_value(*params_, cayley(skew), p_);
}

std::vector<double> RotationObjective::gradient(const std::vector<double>& skew_params) const {
    SkewParam skew(dim_);
    skew.params = skew_params;
    const Matrix q = cayley(skew);
    const Matrix qt = transpose(q);
    Matrix grad_q(dim_, dim_);
    for (const auto& b : params_->blocks) {
        // input side: Y = Q^T W, dF/dQ += W * (dF/dY)^T
        for (const Matrix* w : {&b.w_q, &b.w_k, &b.w_v, &b.w_u, &b.w_g}) {
            const Matrix gy = lp_norm_grad(matmul(qt, *w), p_);
            grad_q = add(grad_q, matmul(*w, transpose(gy)));
        }
        // output side: Y = W Q, dF/dQ += W^T * dF/dY
        for (const Matrix* w : {&b.w_o, &b.w_d}) {
            const Matrix gy = lp_norm_grad(matmul(*w, q), p_);
            grad_q = add(grad_q, matmul(transpose(*w), gy));
        }
    }
    return cayley_param_grad(skew, grad_q);
}

double local_objective_prerope(const Matrix& w_q, const Matrix& w_k,
                               const std::vector<PreRopeHeadTransform>& heads, index_t group_size,
                               double p) {
    const index_t n_kv = static_cast<index_t>(heads.size());
    if (n_kv == 0 || heads[0].scales.empty()) throw std::invalid_argument("prerope objective: empty transform");
    const index_t dh = static_cast<index_t>(heads[0].scales.size()) * 2;
    if (w_k.cols() != n_kv * dh || w_q.cols() != n_kv * group_size * dh)
        throw std::invalid_argument("prerope objective: weight/head layout mismatch");

    double total = 0.0;
    Matrix wq_t(w_q.rows(), w_q.cols(), w_q.dtype());
    Matrix wk_t(w_k.rows(), w_k.cols(), w_k.dtype());
    for (index_t h = 0; h < n_kv; ++h) {
        const Matrix tk = PreRopeTransform::realize_key_head(heads[static_cast<std::size_t>(h)]);
        paste_col_slice(wk_t, h * dh, matmul(col_slice(w_k, h * dh, (h + 1) * dh), tk));
        const Matrix tq = PreRopeTransform::realize_query_head(heads[static_cast<std::size_t>(h)]);
        for (index_t r = 0; r < group_size; ++r) {
            const index_t qh = h * group_size + r;
            paste_col_slice(wq_t, qh * dh, matmul(col_slice(w_q, qh * dh, (qh + 1) * dh), tq));
        }
    }
    total += lp_norm(wq_t, p);
    total += lp_norm(wk_t, p);
    return total;
}

double local_objective_value_block(const Matrix& w_v, const Matrix& w_o, const std::vector<Matrix>& heads,
                                   index_t group_size, double p) {
    const index_t n_kv = static_cast<index_t>(heads.size());
    if (n_kv == 0) throw std::invalid_argument("value objective: no heads");
    const index_t dh = heads[0].rows();
    if (w_v.cols() != n_kv * dh || w_o.rows() != n_kv * group_size * dh)
        throw std::invalid_argument("value objective: weight/head layout mismatch");

    Matrix wv_t(w_v.rows(), w_v.cols(), w_v.dtype());
    Matrix wo_t(w_o.rows(), w_o.cols(), w_o.dtype());
    for (index_t h = 0; h < n_kv; ++h) {
        const Matrix& t = heads[static_cast<std::size_t>(h)];
        if (t.rows() != dh || t.cols() != dh)
            throw std::invalid_argument("value objective: head matrix must be d_head x d_head");
        paste_col_slice(wv_t, h * dh, matmul(col_slice(w_v, h * dh, (h + 1) * dh), t));
        const Matrix inv = inverse(t);
        for (index_t g = 0; g < group_size; ++g) {
            const index_t row0 = (h * group_size + g) * dh;
            Matrix rows(dh, w_o.cols());
            for (index_t i = 0; i < dh; ++i)
                for (index_t c = 0; c < w_o.cols(); ++c) rows.at(i, c) = w_o.at(row0 + i, c);
            const Matrix mixed = matmul(inv, rows);
            for (index_t i = 0; i < dh; ++i)
                for (index_t c = 0; c < w_o.cols(); ++c) wo_t.at(row0 + i, c) = mixed.at(i, c);
        }
    }
    return lp_norm(wv_t, p) + lp_norm(wo_t, p);
}

double local_objective_upscaler(const Matrix& w_u, const Matrix& w_d, const std::vector<double>& scales,
                                double p) {
    std::vector<double> inv(scales.size());
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (scales[i] == 0.0) throw std::invalid_argument("upscaler objective: zero scale");
        inv[i] = 1.0 / scales[i];
    }
    return lp_norm(scale_cols(w_u, scales), p) + lp_norm(scale_rows(w_d, inv), p);
}

// --- JSD ------------------------------------------------------------------------

namespace {

constexpr double kProbFloor = 1e-12;

void softmax_row(std::span<const double> logits, std::vector<double>& out) {
    out.resize(logits.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
}

}  // namespace

double jsd_loss(const Matrix& student_logits, const Matrix& teacher_logits) {
    if (!student_logits.same_shape(teacher_logits)) throw std::invalid_argument("jsd_loss: shape mismatch");
    std::vector<double> p, q;
    double total = 0.0;
    for (index_t r = 0; r < student_logits.rows(); ++r) {
        softmax_row(student_logits.row(r), p);
        softmax_row(teacher_logits.row(r), q);
        double row = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double pi = std::max(p[i], kProbFloor);
            const double qi = std::max(q[i], kProbFloor);
            const double mi = 0.5 * (pi + qi);
            row += 0.5 * pi * std::log(pi / mi) + 0.5 * qi * std::log(qi / mi);
        }
        total += row;
    }
    return total / static_cast<double>(student_logits.rows());
}

double jsd_loss(const std::vector<Matrix>& student_logits, const std::vector<Matrix>& teacher_logits) {
    if (student_logits.size() != teacher_logits.size())
        throw std::invalid_argument("jsd_loss: batch size mismatch");
    double total = 0.0;
    index_t rows = 0;
    for (std::size_t i = 0; i < student_logits.size(); ++i) {
        total += jsd_loss(student_logits[i], teacher_logits[i]) *
                 static_cast<double>(student_logits[i].rows());
        rows += student_logits[i].rows();
    }
    return total / static_cast<double>(rows);
}

// --- end-to-end -----------------------------------------------------------------

const char* transform_family_name(TransformFamily f) {
    switch (f) {
        case TransformFamily::prerope: return "prerope";
        case TransformFamily::value: return "value";
        case TransformFamily::upscaler: return "upscaler";
        case TransformFamily::rotation: return "rotation";
        case TransformFamily::hadamard: return "hadamard";
        case TransformFamily::resscale: return "resscale";
    }
    return "?";
}

TransformFamily transform_family_from_name(const std::string& name) {
    for (TransformFamily f : {TransformFamily::prerope, TransformFamily::value, TransformFamily::upscaler,
                              TransformFamily::rotation, TransformFamily::hadamard, TransformFamily::resscale})
        if (name == transform_family_name(f)) return f;
    throw std::invalid_argument("unknown transform family: " + name);
}

const char* fd_form_name(FdForm f) { return f == FdForm::forward ? "forward" : "central"; }

FdForm fd_form_from_name(const std::string& name) {
    if (name == "forward") return FdForm::forward;
    if (name == "central") return FdForm::central;
    throw std::invalid_argument("unknown fd form: " + name);
}

const char* grad_mode_name(GradMode m) {
    return m == GradMode::finite_diff ? "finite_diff" : "straight_through";
}

GradMode grad_mode_from_name(const std::string& name) {
    if (name == "finite_diff") return GradMode::finite_diff;
    if (name == "straight_through") return GradMode::straight_through;
    throw std::invalid_argument("unknown grad mode: " + name);
}

void E2EConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("E2EConfig: steps must be >= 0");
    if (batch_size < 1 || seq_len < 1 || n_train_batches < 1)
        throw std::invalid_argument("E2EConfig: batch/seq/train-batch counts must be positive");
    if (!(lr > 0.0) || !(fd_step > 0.0)) throw std::invalid_argument("E2EConfig: lr and fd_step must be positive");
    if (!(divergence_factor > 1.0)) throw std::invalid_argument("E2EConfig: divergence factor must exceed 1");
}

namespace {

Matrix* weight_slot(BlockParams& b, Location loc) {
    switch (loc) {
        case Location::Wq: return &b.w_q;
        case Location::Wk: return &b.w_k;
        case Location::Wv: return &b.w_v;
        case Location::Wo: return &b.w_o;
        case Location::Wg: return &b.w_g;
        case Location::Wu: return &b.w_u;
        case Location::Wd: return &b.w_d;
        default: throw std::invalid_argument("weight_slot: not a weight location");
    }
}

// Folds weight fake-quantization into the parameters so the forward pass
// only has to apply activation grids.
void quantize_weights_into(ModelParams& params, const std::map<Location, std::vector<QuantGrid>>& weights,
                           bool skip_rounding) {
    for (const auto& [loc, grids] : weights) {
        for (index_t blk = 0; blk < params.config.n_blocks; ++blk) {
            QuantGrid grid = grids[static_cast<std::size_t>(blk)];
            grid.skip_rounding = skip_rounding;
            Matrix* w = weight_slot(params.blocks[static_cast<std::size_t>(blk)], loc);
            *w = fake_quantize(*w, grid);
        }
    }
}

}  // namespace

ModelParams Student::effective_params() const {
    ModelParams p = params;
    if (delta_prerope) p = merge_prerope(p, *delta_prerope);
    if (delta_upscaler) p = merge_up_scaler(p, *delta_upscaler);
    return p;
}

ForwardOptions Student::runtime_options(const QuantizerSet* q) const {
    ForwardOptions opt;
    opt.quantizers = q;
    opt.residual_scaling = residual_scaling;
    opt.online_hadamard = online_hadamard;
    return opt;
}

namespace {

// Flat parameter layout for end-to-end training:
//   [activation grid log-scales | weight grid clip log-factors |
//    prerope deltas (log-scale, angle per pair) | upscaler delta log-scales]
struct E2ELayout {
    std::vector<Location> act_locs;
    std::vector<Location> weight_locs;
    bool prerope = false;
    bool upscaler = false;
    std::size_t prerope_count = 0;
    std::size_t upscaler_count = 0;

    std::size_t grid_count() const { return act_locs.size() + weight_locs.size(); }
    std::size_t total() const { return grid_count() + prerope_count + upscaler_count; }
};

E2ELayout make_layout(const Student& student, const E2EConfig& cfg) {
    E2ELayout layout;
    if (cfg.train_grids) {
        for (const auto& [loc, grid] : student.quantizers.activations)
            if (!grid.dynamic) layout.act_locs.push_back(loc);
        for (const auto& [loc, grids] : student.quantizers.weights) {
            (void)grids;
            layout.weight_locs.push_back(loc);
        }
    }
    if (cfg.train_transforms.count(TransformFamily::prerope) && student.delta_prerope) {
        layout.prerope = true;
        for (const auto& block : student.delta_prerope->blocks)
            for (const auto& head : block) layout.prerope_count += 2 * head.scales.size();
    }
    if (cfg.train_transforms.count(TransformFamily::upscaler) && student.delta_upscaler) {
        layout.upscaler = true;
        for (const auto& block : student.delta_upscaler->blocks) layout.upscaler_count += block.size();
    }
    return layout;
}

std::vector<double> pack_params(const Student& student, const E2ELayout& layout) {
    std::vector<double> theta;
    theta.reserve(layout.total());
    for (Location loc : layout.act_locs)
        theta.push_back(std::log(student.quantizers.activations.at(loc).scale[0]));
    for (std::size_t i = 0; i < layout.weight_locs.size(); ++i) theta.push_back(0.0);  // clip factors
    if (layout.prerope)
        for (const auto& block : student.delta_prerope->blocks)
            for (const auto& head : block) {
                for (double s : head.scales) theta.push_back(std::log(s));
                for (double a : head.angles) theta.push_back(a);
            }
    if (layout.upscaler)
        for (const auto& block : student.delta_upscaler->blocks)
            for (double s : block) theta.push_back(std::log(s));
    return theta;
}

void unpack_params(const std::vector<double>& theta, const E2ELayout& layout, Student& student) {
    std::size_t k = 0;
    for (Location loc : layout.act_locs) student.quantizers.activations.at(loc).scale[0] = std::exp(theta[k++]);
    for (Location loc : layout.weight_locs) {
        const double factor = std::exp(theta[k++]);
        for (auto& grid : student.quantizers.weights.at(loc))
            for (double& s : grid.scale) s *= factor;
    }
    if (layout.prerope)
        for (auto& block : student.delta_prerope->blocks)
            for (auto& head : block) {
                for (double& s : head.scales) s = std::exp(theta[k++]);
                for (double& a : head.angles) a = theta[k++];
            }
    if (layout.upscaler)
        for (auto& block : student.delta_upscaler->blocks)
            for (double& s : block) s = std::exp(theta[k++]);
}

// Loss evaluator with caching of everything FD coordinate sweeps leave
// unchanged: merged transform deltas and quantized weights are rebuilt only
// when their parameter section moves.
class E2ELoss {
public:
    E2ELoss(const ModelParams& teacher, const Student& student, const E2ELayout& layout,
            const std::vector<TokenBatch>& data)
        : teacher_(&teacher), student_(&student), layout_(&layout), data_(&data) {
        teacher_logits_.resize(data.size());
    }

    double operator()(const std::vector<double>& theta, std::size_t batch_idx, bool skip_rounding) {
        const TokenBatch& batch = (*data_)[batch_idx];
        const std::vector<Matrix>& teacher_logits = teacher_logits_for(batch_idx);

        // transform-delta + weight-clip section defines the student weights
        std::vector<double> weight_key(theta.begin() + static_cast<std::ptrdiff_t>(layout_->act_locs.size()),
                                       theta.end());
        weight_key.push_back(skip_rounding ? 1.0 : 0.0);
        if (!cached_weights_valid_ || weight_key != cached_weight_key_) {
            rebuild_weights(theta, skip_rounding);
            cached_weight_key_ = std::move(weight_key);
            cached_weights_valid_ = true;
        }

        QuantizerSet act_only;
        act_only.activations = student_->quantizers.activations;
        {
            std::size_t k = 0;
            for (Location loc : layout_->act_locs) act_only.activations.at(loc).scale[0] = std::exp(theta[k++]);
        }
        if (skip_rounding)
            for (auto& [loc, grid] : act_only.activations) grid.skip_rounding = true;

        ForwardOptions opt = student_->runtime_options(&act_only);
        const ForwardResult res = forward(cached_params_, batch, opt);
        return jsd_loss(res.logits, teacher_logits);
    }

private:
    const std::vector<Matrix>& teacher_logits_for(std::size_t batch_idx) {
        if (teacher_logits_[batch_idx].empty())
            teacher_logits_[batch_idx] = forward(*teacher_, (*data_)[batch_idx], {}).logits;
        return teacher_logits_[batch_idx];
    }

    void rebuild_weights(const std::vector<double>& theta, bool skip_rounding) {
        Student tmp = *student_;
        unpack_params(theta, *layout_, tmp);
        cached_params_ = tmp.effective_params();
        quantize_weights_into(cached_params_, tmp.quantizers.weights, skip_rounding);
    }

    const ModelParams* teacher_;
    const Student* student_;
    const E2ELayout* layout_;
    const std::vector<TokenBatch>* data_;
    std::vector<std::vector<Matrix>> teacher_logits_;
    ModelParams cached_params_;
    std::vector<double> cached_weight_key_;
    bool cached_weights_valid_ = false;
};

}  // namespace

TrainTrace e2e_train(const ModelParams& fp_params, Student& student, const std::vector<TokenBatch>& data,
                     const E2EConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("e2e_train: no training batches");

    const E2ELayout layout = make_layout(student, cfg);
    std::vector<double> theta = pack_params(student, layout);
    E2ELoss loss(fp_params, student, layout, data);

    TrainTrace trace;
    if (cfg.steps == 0 || theta.empty()) {
        trace.final_params = theta;
        return trace;
    }

    const double initial = loss(theta, 0, false);
    if (!std::isfinite(initial)) throw NumericalError("e2e_train: initial loss not finite");
    const double divergence_limit = cfg.divergence_factor * std::max(initial, 1e-9);
    const bool ste = cfg.grad_mode == GradMode::straight_through;

    OptimizeConfig sched;
    sched.steps = cfg.steps;
    sched.lr = cfg.lr;
    sched.schedule = cfg.schedule;
    sched.warmup_frac = cfg.warmup_frac;

    std::vector<double> grad(theta.size());
    std::vector<double> point = theta;
    for (int step = 0; step < cfg.steps; ++step) {
        const std::size_t bi = static_cast<std::size_t>(step) % data.size();
        const bool central = cfg.fd_form == FdForm::central;
        const double base = central ? 0.0 : loss(theta, bi, ste);
        if (!central && !std::isfinite(base))
            throw NumericalError("e2e_train: non-finite loss during gradient evaluation");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            point[i] = theta[i] + cfg.fd_step;
            const double up = loss(point, bi, ste);
            double down = base, denom = cfg.fd_step;
            if (central) {
                point[i] = theta[i] - cfg.fd_step;
                down = loss(point, bi, ste);
                denom = 2.0 * cfg.fd_step;
            }
            point[i] = theta[i];
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericalError("e2e_train: non-finite loss during gradient evaluation");
            grad[i] = (up - down) / denom;
        }
        const double eta = schedule_lr(sched, step);
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= eta * grad[i];
        point = theta;
        const double value = loss(theta, bi, false);
        if (!std::isfinite(value) || value > divergence_limit)
            throw NumericalError("e2e_train: diverged at step " + std::to_string(step) +
                                 " (loss " + std::to_string(value) + ", initial " + std::to_string(initial) + ")");
        trace.objective.push_back(value);
        ++trace.steps_taken;
    }

    unpack_params(theta, layout, student);
    trace.final_params = std::move(theta);
    return trace;
}

double evaluate_student_jsd(const ModelParams& fp_params, const Student& student,
                            const std::vector<TokenBatch>& batches) {
    if (batches.empty()) throw std::invalid_argument("evaluate_student_jsd: no batches");
    ModelParams quantized = student.effective_params();
    quantize_weights_into(quantized, student.quantizers.weights, false);
    QuantizerSet act_only;
    act_only.activations = student.quantizers.activations;
    ForwardOptions opt = student.runtime_options(&act_only);

    double total = 0.0;
    for (const TokenBatch& batch : batches) {
        const auto teacher_logits = forward(fp_params, batch, {}).logits;
        const auto student_logits = forward(quantized, batch, opt).logits;
        total += jsd_loss(student_logits, teacher_logits);
    }
    return total / static_cast<double>(batches.size());
}

}  // namespace fptq
