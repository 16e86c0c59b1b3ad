#include "fptq/experiment.hpp"

#include <algorithm>
#include <cmath>

#include "fptq/rng.hpp"
#include "fptq/serialize.hpp"

namespace fptq {

using nlohmann::json;

void BitsSpec::validate() const {
    for (int b : {weights, activations, kv})
        if (b != 0 && b != 4 && b != 8 && b != 16)
            throw std::invalid_argument("BitsSpec: bits must be one of {4, 8, 16} (0 disables the group)");
}

const char* quant_setting_name(QuantSetting s) {
    switch (s) {
        case QuantSetting::linears_kv: return "linears_kv";
        case QuantSetting::plus_bmm: return "plus_bmm";
        case QuantSetting::all_except_residual: return "all_except_residual";
        case QuantSetting::custom: return "custom";
    }
    return "?";
}

QuantSetting quant_setting_from_name(const std::string& name) {
    for (QuantSetting s : {QuantSetting::linears_kv, QuantSetting::plus_bmm,
                           QuantSetting::all_except_residual, QuantSetting::custom})
        if (name == quant_setting_name(s)) return s;
    throw std::invalid_argument("unknown quant setting: " + name);
}

std::vector<Location> expand_setting(QuantSetting setting, bool kv_pre_rope,
                                     const std::vector<Location>& custom) {
    const Location key_loc = kv_pre_rope ? Location::k : Location::ke;
    switch (setting) {
        case QuantSetting::linears_kv:
            return {Location::na, Location::nm, Location::ao, Location::mm, key_loc, Location::v};
        case QuantSetting::plus_bmm: {
            auto locs = expand_setting(QuantSetting::linears_kv, kv_pre_rope, {});
            locs.push_back(Location::qe);
            locs.push_back(Location::ap);
            return locs;
        }
        case QuantSetting::all_except_residual: {
            std::vector<Location> locs;
            for (Location loc : all_activation_locations())
                if (loc != Location::ra && loc != Location::rm) locs.push_back(loc);
            return locs;
        }
        case QuantSetting::custom: {
            if (custom.empty()) throw std::invalid_argument("custom quant setting needs locations");
            for (Location loc : custom)
                if (is_weight_location(loc))
                    throw std::invalid_argument("custom quant setting lists weight alias; weights are "
                                                "governed by bits.weights");
            return custom;
        }
    }
    throw std::invalid_argument("expand_setting: bad setting");
}

void ExperimentConfig::validate() const {
    bits.validate();
    local_opt.validate();
    e2e.validate();
    range_setting.validate();
    if (model_path.empty()) model.validate();
    if (setting == QuantSetting::custom && custom_locations.empty())
        throw std::invalid_argument("ExperimentConfig: custom setting requires custom_locations");
    if (eval_batch_size < 1 || eval_seq_len < 1 || calib_seq_len < 1)
        throw std::invalid_argument("ExperimentConfig: eval/calibration sizes must be positive");
}

json ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["seed"] = seed;
    j["model_path"] = model_path;
    j["model"] = model_config_to_json(model);
    json outs = json::array();
    for (const auto& inj : outliers)
        outs.push_back({{"target", outlier_target_name(inj.target)},
                        {"indices", inj.indices},
                        {"factor", inj.factor}});
    j["outliers"] = outs;
    j["setting"] = quant_setting_name(setting);
    json customs = json::array();
    for (Location loc : custom_locations) customs.push_back(location_name(loc));
    j["custom_locations"] = customs;
    json sweeps = json::array();
    for (Location loc : sweep_locations) sweeps.push_back(location_name(loc));
    j["sweep_locations"] = sweeps;
    j["kv_pre_rope"] = kv_pre_rope;
    j["bits"] = {{"weights", bits.weights}, {"activations", bits.activations}, {"kv", bits.kv}};
    json tf = json::array();
    for (TransformFamily f : transforms) tf.push_back(transform_family_name(f));
    j["transforms"] = tf;
    j["local_opt"] = {{"p", local_opt.p},
                      {"steps", local_opt.steps},
                      {"lr", local_opt.lr},
                      {"schedule", lr_schedule_name(local_opt.schedule)},
                      {"warmup_frac", local_opt.warmup_frac},
                      {"fd_step", local_opt.fd_step},
                      {"max_retries", local_opt.max_retries}};
    json train_tf = json::array();
    for (TransformFamily f : e2e.train_transforms) train_tf.push_back(transform_family_name(f));
    j["e2e"] = {{"steps", e2e.steps},
                {"batch_size", e2e.batch_size},
                {"seq_len", e2e.seq_len},
                {"n_train_batches", e2e.n_train_batches},
                {"lr", e2e.lr},
                {"schedule", lr_schedule_name(e2e.schedule)},
                {"warmup_frac", e2e.warmup_frac},
                {"fd_step", e2e.fd_step},
                {"fd_form", fd_form_name(e2e.fd_form)},
                {"data_seed", e2e.data_seed},
                {"grad_mode", grad_mode_name(e2e.grad_mode)},
                {"train_grids", e2e.train_grids},
                {"train_transforms", train_tf},
                {"divergence_factor", e2e.divergence_factor}};
    j["range_setting"] = {{"p", range_setting.p == RangeSettingSpec::kMinMax ? json("minmax") : json(range_setting.p)},
                          {"n_candidates", range_setting.n_candidates},
                          {"calibration_batches", range_setting.calibration_batches}};
    if (precision) j["precision"] = dtype_name(*precision);
    j["eval_batch_size"] = eval_batch_size;
    j["eval_seq_len"] = eval_seq_len;
    j["calib_seq_len"] = calib_seq_len;
    j["out_path"] = out_path;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig cfg;
    if (j.contains("name")) cfg.name = j.at("name").get<std::string>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("model_path")) cfg.model_path = j.at("model_path").get<std::string>();
    if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
    if (j.contains("outliers"))
        for (const json& o : j.at("outliers")) {
            OutlierInjection inj;
            inj.target = outlier_target_from_name(o.at("target").get<std::string>());
            inj.indices = o.at("indices").get<std::vector<index_t>>();
            inj.factor = o.at("factor").get<double>();
            cfg.outliers.push_back(std::move(inj));
        }
    if (j.contains("setting")) cfg.setting = quant_setting_from_name(j.at("setting").get<std::string>());
    if (j.contains("custom_locations"))
        for (const json& name : j.at("custom_locations"))
            cfg.custom_locations.push_back(location_from_name(name.get<std::string>()));
    if (j.contains("sweep_locations"))
        for (const json& name : j.at("sweep_locations"))
            cfg.sweep_locations.push_back(location_from_name(name.get<std::string>()));
    if (j.contains("kv_pre_rope")) cfg.kv_pre_rope = j.at("kv_pre_rope").get<bool>();
    if (j.contains("bits")) {
        const json& b = j.at("bits");
        if (b.contains("weights")) cfg.bits.weights = b.at("weights").get<int>();
        if (b.contains("activations")) cfg.bits.activations = b.at("activations").get<int>();
        if (b.contains("kv")) cfg.bits.kv = b.at("kv").get<int>();
    }
    if (j.contains("transforms")) {
        cfg.transforms.clear();
        for (const json& name : j.at("transforms"))
            cfg.transforms.insert(transform_family_from_name(name.get<std::string>()));
    }
    if (j.contains("local_opt")) {
        const json& o = j.at("local_opt");
        if (o.contains("p")) cfg.local_opt.p = o.at("p").get<double>();
        if (o.contains("steps")) cfg.local_opt.steps = o.at("steps").get<int>();
        if (o.contains("lr")) cfg.local_opt.lr = o.at("lr").get<double>();
        if (o.contains("schedule"))
            cfg.local_opt.schedule = lr_schedule_from_name(o.at("schedule").get<std::string>());
        if (o.contains("warmup_frac")) cfg.local_opt.warmup_frac = o.at("warmup_frac").get<double>();
        if (o.contains("fd_step")) cfg.local_opt.fd_step = o.at("fd_step").get<double>();
        if (o.contains("max_retries")) cfg.local_opt.max_retries = o.at("max_retries").get<int>();
    }
    if (j.contains("e2e")) {
        const json& o = j.at("e2e");
        if (o.contains("steps")) cfg.e2e.steps = o.at("steps").get<int>();
        if (o.contains("batch_size")) cfg.e2e.batch_size = o.at("batch_size").get<index_t>();
        if (o.contains("seq_len")) cfg.e2e.seq_len = o.at("seq_len").get<index_t>();
        if (o.contains("n_train_batches")) cfg.e2e.n_train_batches = o.at("n_train_batches").get<int>();
        if (o.contains("lr")) cfg.e2e.lr = o.at("lr").get<double>();
        if (o.contains("schedule")) cfg.e2e.schedule = lr_schedule_from_name(o.at("schedule").get<std::string>());
        if (o.contains("warmup_frac")) cfg.e2e.warmup_frac = o.at("warmup_frac").get<double>();
        if (o.contains("fd_step")) cfg.e2e.fd_step = o.at("fd_step").get<double>();
        if (o.contains("fd_form")) cfg.e2e.fd_form = fd_form_from_name(o.at("fd_form").get<std::string>());
        if (o.contains("data_seed")) cfg.e2e.data_seed = o.at("data_seed").get<std::uint64_t>();
        if (o.contains("grad_mode")) cfg.e2e.grad_mode = grad_mode_from_name(o.at("grad_mode").get<std::string>());
        if (o.contains("train_grids")) cfg.e2e.train_grids = o.at("train_grids").get<bool>();
        if (o.contains("train_transforms")) {
            cfg.e2e.train_transforms.clear();
            for (const json& name : o.at("train_transforms"))
                cfg.e2e.train_transforms.insert(transform_family_from_name(name.get<std::string>()));
        }
        if (o.contains("divergence_factor")) cfg.e2e.divergence_factor = o.at("divergence_factor").get<double>();
    }
    if (j.contains("range_setting")) {
        const json& o = j.at("range_setting");
        if (o.contains("p"))
            cfg.range_setting.p = o.at("p").is_string() ? RangeSettingSpec::kMinMax : o.at("p").get<double>();
        if (o.contains("n_candidates")) cfg.range_setting.n_candidates = o.at("n_candidates").get<int>();
        if (o.contains("calibration_batches"))
            cfg.range_setting.calibration_batches = o.at("calibration_batches").get<int>();
    }
    if (j.contains("precision")) cfg.precision = dtype_from_name(j.at("precision").get<std::string>());
    if (j.contains("eval_batch_size")) cfg.eval_batch_size = j.at("eval_batch_size").get<index_t>();
    if (j.contains("eval_seq_len")) cfg.eval_seq_len = j.at("eval_seq_len").get<index_t>();
    if (j.contains("calib_seq_len")) cfg.calib_seq_len = j.at("calib_seq_len").get<index_t>();
    if (j.contains("out_path")) cfg.out_path = j.at("out_path").get<std::string>();
    return cfg;
}

TokenBatch sample_token_batch(Rng& rng, index_t batch_size, index_t seq_len, index_t vocab) {
    TokenBatch batch(static_cast<std::size_t>(batch_size));
    for (auto& seq : batch) {
        seq.resize(static_cast<std::size_t>(seq_len));
        for (auto& id : seq) id = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(vocab)));
    }
    return batch;
}

std::vector<TokenBatch> sample_token_batches(Rng& rng, int count, index_t batch_size, index_t seq_len,
                                             index_t vocab) {
    std::vector<TokenBatch> batches;
    batches.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) batches.push_back(sample_token_batch(rng, batch_size, seq_len, vocab));
    return batches;
}

OutlierSpec standard_fixture_outliers() {
    OutlierSpec spec;
    spec.push_back({OutlierInjection::Target::embedding_row, {7, 42, 190}, 64.0});
    spec.push_back({OutlierInjection::Target::wu_col, {3, 57, 131}, 32.0});
    spec.push_back({OutlierInjection::Target::wg_col, {3, 57, 131}, 6.0});
    return spec;
}

ModelParams make_standard_fixture(std::uint64_t seed) {
    ModelConfig cfg;
    cfg.seed = seed;
    return init_model(cfg, standard_fixture_outliers());
}

namespace {

ModelParams cast_params(ModelParams params, Dtype dtype) {
    params.config.dtype = dtype;
    params.embedding = params.embedding.with_dtype(dtype);
    params.head = params.head.with_dtype(dtype);
    for (auto& b : params.blocks) {
        b.w_q = b.w_q.with_dtype(dtype);
        b.w_k = b.w_k.with_dtype(dtype);
        b.w_v = b.w_v.with_dtype(dtype);
        b.w_o = b.w_o.with_dtype(dtype);
        b.w_g = b.w_g.with_dtype(dtype);
        b.w_u = b.w_u.with_dtype(dtype);
        b.w_d = b.w_d.with_dtype(dtype);
    }
    return params;
}

int bits_for_location(const BitsSpec& bits, Location loc, bool kv_pre_rope) {
    if (is_weight_location(loc)) return bits.weights;
    const Location key_loc = kv_pre_rope ? Location::k : Location::ke;
    if (loc == key_loc || loc == Location::v) return bits.kv;
    return bits.activations;
}

double logits_mse(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < a[i].size(); ++k) {
            const double d = a[i].data()[k] - b[i].data()[k];
            total += d * d;
        }
        count += a[i].size();
    }
    return total / static_cast<double>(count);
}

struct TensorErrorAccumulator {
    double sum_sq_err = 0.0, sum_cube_err = 0.0, sum_sq_signal = 0.0;

    void add(const Matrix& x, const QuantGrid& grid) {
        const Matrix dq = fake_quantize(x, grid);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double e = std::abs(x.data()[i] - dq.data()[i]);
            sum_sq_err += e * e;
            sum_cube_err += e * e * e;
            sum_sq_signal += x.data()[i] * x.data()[i];
        }
    }

    void fill(LocationMetrics& m) const {
        m.l2_error = std::sqrt(sum_sq_err);
        m.l3_error = std::cbrt(sum_cube_err);
        if (sum_sq_err == 0.0)
            m.sqnr_db = std::numeric_limits<double>::infinity();
        else if (sum_sq_signal == 0.0)
            m.sqnr_db = -std::numeric_limits<double>::infinity();
        else
            m.sqnr_db = 10.0 * std::log10(sum_sq_signal / sum_sq_err);
    }
};

const Matrix& block_weight(const BlockParams& b, Location loc) {
    switch (loc) {
        case Location::Wq: return b.w_q;
        case Location::Wk: return b.w_k;
        case Location::Wv: return b.w_v;
        case Location::Wo: return b.w_o;
        case Location::Wg: return b.w_g;
        case Location::Wu: return b.w_u;
        case Location::Wd: return b.w_d;
        default: throw std::invalid_argument("block_weight: not a weight location");
    }
}

std::vector<QuantGrid> weight_grids_for(const ModelParams& params, Location loc,
                                        const RangeSettingSpec& spec, int bits) {
    std::vector<QuantGrid> grids;
    grids.reserve(params.blocks.size());
    for (const auto& b : params.blocks)
        grids.push_back(set_range_lp_per_channel(block_weight(b, loc), spec, bits, true));
    return grids;
}

}  // namespace

ModelParams resolve_model(const ExperimentConfig& cfg) {
    ModelParams params = cfg.model_path.empty() ? init_model(cfg.model, cfg.outliers) : load_model(cfg.model_path);
    if (cfg.precision && *cfg.precision != params.config.dtype) params = cast_params(std::move(params), *cfg.precision);
    return params;
}

Report run_sensitivity(const ExperimentConfig& cfg) {
    cfg.validate();
    ModelParams params = resolve_model(cfg);
    // Quantization-error experiments default to single precision; preservation
    // checks and fits stay in double.
    if (!cfg.precision && params.config.dtype == Dtype::f64) params = cast_params(std::move(params), Dtype::f32);
    const ModelConfig& mc = params.config;

    Rng rng(cfg.seed);
    Rng eval_rng = rng.fork(1);
    Rng calib_rng = rng.fork(2);
    const TokenBatch eval_batch = sample_token_batch(eval_rng, cfg.eval_batch_size, cfg.eval_seq_len, mc.vocab);
    const TokenBatch calib_batch = sample_token_batch(
        calib_rng, cfg.range_setting.calibration_batches, cfg.calib_seq_len, mc.vocab);

    // Clean tapes for range setting and tensor-level error metrics.
    ForwardOptions tap_all;
    for (Location loc : all_activation_locations()) tap_all.taps.insert(loc);
    const Tape calib_tape = forward(params, calib_batch, tap_all).tape;
    const std::vector<Matrix> fp_logits = forward(params, eval_batch, {}).logits;

    Report report;
    report.name = cfg.name;
    report.seed = cfg.seed;
    report.config_echo = cfg.to_json();

    auto sweep_one = [&](const QuantizerSet& qs, LocationMetrics& metrics) {
        ForwardOptions opt;
        opt.quantizers = &qs;
        const auto logits = forward(params, eval_batch, opt).logits;
        metrics.logits_mse = logits_mse(logits, fp_logits);
        metrics.logits_jsd = jsd_loss(logits, fp_logits);
    };

    auto in_sweep = [&](Location loc) {
        return cfg.sweep_locations.empty() ||
               std::find(cfg.sweep_locations.begin(), cfg.sweep_locations.end(), loc) !=
                   cfg.sweep_locations.end();
    };

    for (Location loc : all_activation_locations()) {
        if (!in_sweep(loc)) continue;
        const int bits = bits_for_location(cfg.bits, loc, cfg.kv_pre_rope);
        if (bits == 0) continue;
        QuantizerSet qs;
        qs.activations[loc] = set_range_lp(calib_tape.at(loc), cfg.range_setting, bits, true);
        LocationMetrics metrics;
        TensorErrorAccumulator acc;
        acc.add(calib_tape.at(loc), qs.activations[loc]);
        acc.fill(metrics);
        sweep_one(qs, metrics);
        report.locations[location_name(loc)] = metrics;
    }
    for (Location loc : all_weight_locations()) {
        if (!in_sweep(loc)) continue;
        if (cfg.bits.weights == 0) continue;
        QuantizerSet qs;
        qs.weights[loc] = weight_grids_for(params, loc, cfg.range_setting, cfg.bits.weights);
        LocationMetrics metrics;
        TensorErrorAccumulator acc;
        for (index_t blk = 0; blk < mc.n_blocks; ++blk)
            acc.add(block_weight(params.blocks[static_cast<std::size_t>(blk)], loc),
                    qs.weights[loc][static_cast<std::size_t>(blk)]);
        acc.fill(metrics);
        sweep_one(qs, metrics);
        report.locations[location_name(loc)] = metrics;
    }

    if (!cfg.out_path.empty()) report.save(cfg.out_path);
    return report;
}

namespace {

std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

// Re-throws stage failures with the pipeline stage in the message, keeping
// the exception type (validation vs numerical) intact for the exit code.
template <typename F>
auto fit_stage(const char* stage, F&& body) -> decltype(body()) {
    try {
        return body();
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("fit[") + stage + "]: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("fit[") + stage + "]: " + e.what());
    }
}

// Wraps an objective so numerical failures surface as +inf (the descent
// retry rule then rejects the step).
ScalarFn guard(std::function<double(const std::vector<double>&)> f) {
    return [f = std::move(f)](const std::vector<double>& theta) {
        try {
            return f(theta);
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    };
}

PreRopeTransform decode_prerope_block_params(const ModelConfig& cfg, index_t block,
                                             const std::vector<double>& theta, PreRopeTransform base) {
    const std::size_t pairs = static_cast<std::size_t>(cfg.d_head / 2);
    auto& heads = base.blocks[static_cast<std::size_t>(block)];
    std::size_t k = 0;
    for (auto& head : heads) {
        for (std::size_t n = 0; n < pairs; ++n) head.scales[n] = std::exp(theta[k++]);
        for (std::size_t n = 0; n < pairs; ++n) head.angles[n] = theta[k++];
    }
    return base;
}

}  // namespace

FitArtifacts run_fit(const ExperimentConfig& cfg) {
    cfg.validate();
    const ModelParams teacher = resolve_model(cfg);
    const ModelConfig& mc = teacher.config;
    const double p = cfg.local_opt.p;

    Report report;
    report.name = cfg.name;
    report.seed = cfg.seed;
    report.config_echo = cfg.to_json();

    ModelParams work = teacher;
    TransformSet set;
    set.residual_scaling = cfg.transforms.count(TransformFamily::resscale) != 0;

    // --- local optimization, rotation first, merge after each family ----
    if (cfg.transforms.count(TransformFamily::rotation)) fit_stage("local-rotation", [&] {
        work = fold_norm_scales(work);
        RotationObjective objective(work, p);
        GradFn gradient = [&objective](const std::vector<double>& theta) { return objective.gradient(theta); };
        const TrainTrace trace = local_optimize(
            guard([&objective](const std::vector<double>& theta) { return objective(theta); }), gradient,
            zeros(objective.param_count()), cfg.local_opt);
        SkewParam skew(mc.d_model);
        skew.params = trace.final_params;
        set.rotation = ResidualRotation::from_skew(skew);
        work = merge_rotation(work, *set.rotation);
        report.traces["local.rotation"] = trace.objective;
    });
    if (cfg.transforms.count(TransformFamily::prerope)) fit_stage("local-prerope", [&] {
        PreRopeTransform t = PreRopeTransform::identity(mc);
        for (index_t blk = 0; blk < mc.n_blocks; ++blk) {
            const auto& b = work.blocks[static_cast<std::size_t>(blk)];
            const std::size_t n_params = static_cast<std::size_t>(mc.n_kv_heads * mc.d_head);  // 2 per pair
            const TrainTrace trace = local_optimize(
                guard([&, blk](const std::vector<double>& theta) {
                    const PreRopeTransform cand = decode_prerope_block_params(mc, blk, theta, t);
                    return local_objective_prerope(b.w_q, b.w_k, cand.blocks[static_cast<std::size_t>(blk)],
                                                   mc.group_size(), p);
                }),
                std::nullopt, zeros(n_params), cfg.local_opt);
            t = decode_prerope_block_params(mc, blk, trace.final_params, t);
            report.traces["local.prerope.b" + std::to_string(blk)] = trace.objective;
        }
        set.prerope = t;
        work = merge_prerope(work, t);
    });
    if (cfg.transforms.count(TransformFamily::value)) fit_stage("local-value", [&] {
        ValueTransform t = ValueTransform::identity(mc);
        const std::size_t head_entries = static_cast<std::size_t>(mc.d_head * mc.d_head);
        auto decode_heads = [&](const std::vector<double>& theta) {
            std::vector<Matrix> heads;
            for (index_t h = 0; h < mc.n_kv_heads; ++h)
                heads.emplace_back(mc.d_head, mc.d_head,
                                   std::vector<double>(theta.begin() + static_cast<std::ptrdiff_t>(h * mc.d_head * mc.d_head),
                                                       theta.begin() + static_cast<std::ptrdiff_t>((h + 1) * mc.d_head * mc.d_head)));
            return heads;
        };
        for (index_t blk = 0; blk < mc.n_blocks; ++blk) {
            const auto& b = work.blocks[static_cast<std::size_t>(blk)];
            std::vector<double> init(head_entries * static_cast<std::size_t>(mc.n_kv_heads), 0.0);
            for (index_t h = 0; h < mc.n_kv_heads; ++h)
                for (index_t i = 0; i < mc.d_head; ++i)
                    init[static_cast<std::size_t>(h) * head_entries + static_cast<std::size_t>(i * mc.d_head + i)] = 1.0;
            const TrainTrace trace = local_optimize(
                guard([&](const std::vector<double>& theta) {
                    return local_objective_value_block(b.w_v, b.w_o, decode_heads(theta), mc.group_size(), p);
                }),
                std::nullopt, init, cfg.local_opt);
            const auto heads = decode_heads(trace.final_params);
            for (index_t h = 0; h < mc.n_kv_heads; ++h)
                t.blocks[static_cast<std::size_t>(blk)][static_cast<std::size_t>(h)] =
                    heads[static_cast<std::size_t>(h)];
            report.traces["local.value.b" + std::to_string(blk)] = trace.objective;
        }
        t.validate(mc);
        set.value = t;
        work = merge_value_transform(work, t);
    });
    if (cfg.transforms.count(TransformFamily::upscaler)) fit_stage("local-upscaler", [&] {
        UpScaler t = UpScaler::identity(mc);
        for (index_t blk = 0; blk < mc.n_blocks; ++blk) {
            const auto& b = work.blocks[static_cast<std::size_t>(blk)];
            const TrainTrace trace = local_optimize(
                guard([&](const std::vector<double>& theta) {
                    std::vector<double> s(theta.size());
                    for (std::size_t i = 0; i < theta.size(); ++i) s[i] = std::exp(theta[i]);
                    return local_objective_upscaler(b.w_u, b.w_d, s, p);
                }),
                std::nullopt, zeros(static_cast<std::size_t>(mc.d_ffn)), cfg.local_opt);
            for (std::size_t i = 0; i < trace.final_params.size(); ++i)
                t.blocks[static_cast<std::size_t>(blk)][i] = std::exp(trace.final_params[i]);
            report.traces["local.upscaler.b" + std::to_string(blk)] = trace.objective;
        }
        set.upscaler = t;
        work = merge_up_scaler(work, t);
    });
    if (cfg.transforms.count(TransformFamily::hadamard)) fit_stage("hadamard", [&] {
        set.hadamard = default_hadamard_plan(mc.d_ffn);
        work = attach_online_hadamard(work, *set.hadamard);
    });
    const ForwardOptions runtime = transform_runtime_options(set);

    // --- preservation gate (pre-quantization) ---------------------------
    Rng rng(cfg.seed);
    fit_stage("preservation-check", [&] {
        Rng pres_rng = rng.fork(11);
        const auto batches = sample_token_batches(pres_rng, 4, 4, 32, mc.vocab);
        report.preservation_deviation = verify_preservation(teacher, {}, work, runtime, batches);
    });

    // --- range setting (after transforms, per the pipeline order) -------
    const std::vector<Location> act_locs = expand_setting(cfg.setting, cfg.kv_pre_rope, cfg.custom_locations);
    QuantizerSet quantizers;
    fit_stage("range-setting", [&] {
        Rng calib_rng = rng.fork(12);
        const TokenBatch calib_batch =
            sample_token_batch(calib_rng, cfg.range_setting.calibration_batches, cfg.calib_seq_len, mc.vocab);
        ForwardOptions calib_opt = runtime;
        for (Location loc : act_locs) calib_opt.taps.insert(loc);
        const Tape calib_tape = forward(work, calib_batch, calib_opt).tape;
        for (Location loc : act_locs) {
            const int bits = bits_for_location(cfg.bits, loc, cfg.kv_pre_rope);
            if (bits == 0) continue;
            quantizers.activations[loc] = set_range_lp(calib_tape.at(loc), cfg.range_setting, bits, true);
        }
        if (cfg.bits.weights != 0)
            for (Location loc : all_weight_locations())
                quantizers.weights[loc] = weight_grids_for(work, loc, cfg.range_setting, cfg.bits.weights);
    });

    // --- end-to-end student-teacher training -----------------------------
    Student student;
    student.params = work;
    student.residual_scaling = set.residual_scaling;
    student.online_hadamard = set.hadamard;
    student.quantizers = quantizers;
    if (cfg.transforms.count(TransformFamily::prerope) && cfg.e2e.train_transforms.count(TransformFamily::prerope))
        student.delta_prerope = PreRopeTransform::identity(mc);
    if (cfg.transforms.count(TransformFamily::upscaler) &&
        cfg.e2e.train_transforms.count(TransformFamily::upscaler))
        student.delta_upscaler = UpScaler::identity(mc);

    Rng heldout_rng(cfg.e2e.data_seed + 0x9e3779b9ULL);
    const auto heldout = sample_token_batches(heldout_rng, 4, cfg.e2e.batch_size, cfg.e2e.seq_len, mc.vocab);
    report.jsd_heldout_before = evaluate_student_jsd(teacher, student, heldout);

    if (cfg.e2e.steps > 0) fit_stage("e2e-training", [&] {
        Rng train_rng(cfg.e2e.data_seed);
        const auto train =
            sample_token_batches(train_rng, cfg.e2e.n_train_batches, cfg.e2e.batch_size, cfg.e2e.seq_len, mc.vocab);
        const TrainTrace trace = e2e_train(teacher, student, train, cfg.e2e);
        if (!trace.objective.empty()) report.traces["e2e"] = trace.objective;
    });
    report.jsd_heldout_after = evaluate_student_jsd(teacher, student, heldout);

    // --- final per-location tensor metrics --------------------------------
    {
        Rng eval_rng = rng.fork(13);
        const TokenBatch eval_batch = sample_token_batch(eval_rng, cfg.eval_batch_size, cfg.eval_seq_len, mc.vocab);
        const ModelParams final_params = student.effective_params();
        ForwardOptions tap_opt = runtime;
        for (const auto& [loc, grid] : student.quantizers.activations) tap_opt.taps.insert(loc);
        const Tape tape = forward(final_params, eval_batch, tap_opt).tape;
        for (const auto& [loc, grid] : student.quantizers.activations) {
            LocationMetrics metrics;
            TensorErrorAccumulator acc;
            acc.add(tape.at(loc), grid);
            acc.fill(metrics);
            report.locations[location_name(loc)] = metrics;
        }
        for (const auto& [loc, grids] : student.quantizers.weights) {
            LocationMetrics metrics;
            TensorErrorAccumulator acc;
            for (index_t blk = 0; blk < mc.n_blocks; ++blk)
                acc.add(block_weight(final_params.blocks[static_cast<std::size_t>(blk)], loc),
                        grids[static_cast<std::size_t>(blk)]);
            acc.fill(metrics);
            report.locations[location_name(loc)] = metrics;
        }
    }

    // --- quantizer grids into the report -----------------------------------
    {
        json grids = json::object();
        auto grid_json = [](const QuantGrid& g) {
            return json{{"bits", g.bits},
                        {"symmetric", g.symmetric},
                        {"dynamic", g.dynamic},
                        {"granularity", granularity_name(g.granularity)},
                        {"scale", g.scale},
                        {"zero_point", g.zero_point},
                        {"degenerate", g.degenerate}};
        };
        for (const auto& [loc, grid] : student.quantizers.activations)
            grids[location_name(loc)] = grid_json(grid);
        for (const auto& [loc, per_block] : student.quantizers.weights) {
            json arr = json::array();
            for (const auto& grid : per_block) arr.push_back(grid_json(grid));
            grids[location_name(loc)] = arr;
        }
        report.quantizers = std::move(grids);
    }

    // --- compose e2e deltas into the emitted transform set ----------------
    if (student.delta_prerope) {
        if (!set.prerope) set.prerope = PreRopeTransform::identity(mc);
        for (std::size_t b = 0; b < set.prerope->blocks.size(); ++b)
            for (std::size_t h = 0; h < set.prerope->blocks[b].size(); ++h) {
                auto& base = set.prerope->blocks[b][h];
                const auto& delta = student.delta_prerope->blocks[b][h];
                for (std::size_t n = 0; n < base.scales.size(); ++n) {
                    base.scales[n] *= delta.scales[n];
                    base.angles[n] += delta.angles[n];
                }
            }
    }
    if (student.delta_upscaler) {
        if (!set.upscaler) set.upscaler = UpScaler::identity(mc);
        for (std::size_t b = 0; b < set.upscaler->blocks.size(); ++b)
            for (std::size_t i = 0; i < set.upscaler->blocks[b].size(); ++i)
                set.upscaler->blocks[b][i] *= student.delta_upscaler->blocks[b][i];
    }

    FitArtifacts artifacts{std::move(report), student.effective_params(), std::move(set),
                           std::move(student.quantizers)};
    if (!cfg.out_path.empty()) {
        artifacts.report.save(cfg.out_path + ".report.json");
        save_model(artifacts.transformed, cfg.out_path + ".model");
        save_transform_set(artifacts.transforms, mc, cfg.out_path + ".transforms");
    }
    return artifacts;
}

double run_verify(const std::string& prefix_a, const std::string& prefix_b, const TransformSet* modes_b,
                  std::uint64_t seed) {
    const ModelParams a = load_model(prefix_a);
    const ModelParams b = load_model(prefix_b);
    ForwardOptions opt_b;
    if (modes_b) opt_b = transform_runtime_options(*modes_b);
    Rng rng(seed);
    const auto batches = sample_token_batches(rng, 8, 4, 32, a.config.vocab);
    return verify_preservation(a, {}, b, opt_b, batches);
}

}  // namespace fptq
