// Command-line front end: model generation, sensitivity sweeps, transform
// fitting, report comparison, and preservation verification.
//
// Exit codes: 0 success, 2 validation/usage error, 3 numerical failure.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fptq/experiment.hpp"
#include "fptq/serialize.hpp"

namespace {

using namespace fptq;

std::vector<index_t> parse_index_list(const std::string& csv) {
    std::vector<index_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(static_cast<index_t>(std::stoll(item)));
    return out;
}

std::vector<std::string> parse_name_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

struct CommonFlags {
    std::string config_path;
    std::string model_path;
    std::string out;
    std::string setting;
    std::string transforms;
    std::string name;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int bits_w = -1, bits_a = -1, bits_kv = -1;

    void attach(CLI::App* cmd, bool with_quant) {
        cmd->add_option("--config", config_path, "JSON experiment config; flags override its fields");
        cmd->add_option("--model", model_path, "model file prefix (expects <prefix>.json/.bin)");
        cmd->add_option("--out", out, "output path (report file or artifact prefix)");
        cmd->add_option_function<std::uint64_t>(
            "--seed", [this](const std::uint64_t& v) { seed = v; seed_set = true; }, "experiment seed");
        cmd->add_option("--name", name, "report/config name");
        if (with_quant) {
            cmd->add_option("--bits-w", bits_w, "weight bits (4/8/16, 0 = off)");
            cmd->add_option("--bits-a", bits_a, "activation bits (4/8/16, 0 = off)");
            cmd->add_option("--bits-kv", bits_kv, "kv-cache bits (4/8/16, 0 = off)");
            cmd->add_option("--setting", setting,
                            "quant setting: linears_kv | plus_bmm | all_except_residual | custom");
            cmd->add_option("--transforms", transforms,
                            "comma list from {prerope,value,upscaler,rotation,hadamard,resscale}");
        }
    }

    ExperimentConfig resolve() const {
        ExperimentConfig cfg;
        if (!config_path.empty())
            cfg = ExperimentConfig::from_json(nlohmann::json::parse(read_text_file(config_path)));
        if (!model_path.empty()) cfg.model_path = model_path;
        if (!out.empty()) cfg.out_path = out;
        if (seed_set) cfg.seed = seed;
        if (!name.empty()) cfg.name = name;
        if (bits_w >= 0) cfg.bits.weights = bits_w;
        if (bits_a >= 0) cfg.bits.activations = bits_a;
        if (bits_kv >= 0) cfg.bits.kv = bits_kv;
        if (!setting.empty()) cfg.setting = quant_setting_from_name(setting);
        if (!transforms.empty()) {
            cfg.transforms.clear();
            if (transforms != "none")
                for (const auto& nm : parse_name_list(transforms))
                    cfg.transforms.insert(transform_family_from_name(nm));
        }
        return cfg;
    }
};

int cmd_gen_model(const ModelConfig& mc, const OutlierSpec& outliers, const std::string& out) {
    if (out.empty()) throw std::invalid_argument("gen-model: --out prefix is required");
    const ModelParams params = init_model(mc, outliers);
    save_model(params, out);
    std::size_t n_values = params.embedding.size() + params.head.size() +
                           params.gamma_final.size();
    for (const auto& b : params.blocks)
        n_values += b.w_q.size() + b.w_k.size() + b.w_v.size() + b.w_o.size() + b.w_g.size() +
                    b.w_u.size() + b.w_d.size() + b.gamma_attn.size() + b.gamma_mlp.size();
    std::cout << "wrote " << out << ".json / " << out << ".bin (" << n_values << " values, dtype "
              << dtype_name(mc.dtype) << ", seed " << mc.seed << ")\n";
    return 0;
}

int cmd_sensitivity(const ExperimentConfig& cfg) {
    const Report report = run_sensitivity(cfg);
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [alias, m] : report.locations)
        ranked.emplace_back(m.logits_mse.value_or(0.0), alias);
    std::sort(ranked.rbegin(), ranked.rend());
    std::cout << "sensitivity (" << ranked.size() << " locations, worst first by logits MSE):\n";
    for (const auto& [mse, alias] : ranked) {
        const auto& m = report.locations.at(alias);
        std::cout << "  " << alias << "  mse=" << mse << "  jsd=" << m.logits_jsd.value_or(0.0)
                  << "  sqnr_db=" << m.sqnr_db << "\n";
    }
    if (!cfg.out_path.empty()) std::cout << "report: " << cfg.out_path << "\n";
    return 0;
}

int cmd_fit(const ExperimentConfig& cfg) {
    const FitArtifacts artifacts = run_fit(cfg);
    const Report& r = artifacts.report;
    std::cout << "fit '" << r.name << "' done\n";
    if (r.preservation_deviation)
        std::cout << "  preservation deviation: " << *r.preservation_deviation << "\n";
    if (r.jsd_heldout_before) std::cout << "  held-out JSD before e2e: " << *r.jsd_heldout_before << "\n";
    if (r.jsd_heldout_after) std::cout << "  held-out JSD after e2e:  " << *r.jsd_heldout_after << "\n";
    if (!cfg.out_path.empty())
        std::cout << "artifacts: " << cfg.out_path << ".report.json, .model.{json,bin}, .transforms.{json,bin}\n";
    return 0;
}

int cmd_compare(const std::vector<std::string>& report_paths, const std::string& out) {
    std::vector<Report> reports;
    for (const auto& path : report_paths) reports.push_back(Report::load(path));
    const std::string csv = reports_to_csv(reports);
    const nlohmann::json merged = merge_reports(reports);
    if (out.empty()) {
        std::cout << csv;
    } else {
        write_text_file(out + ".csv", csv);
        write_text_file(out + ".json", merged.dump(2) + "\n");
        std::cout << "wrote " << out << ".csv and " << out << ".json\n";
    }
    return 0;
}

int cmd_verify(const std::string& a, const std::string& b, const std::string& b_transforms, double tol,
               std::uint64_t seed) {
    std::optional<TransformSet> modes;
    if (!b_transforms.empty()) modes = load_transform_set(b_transforms, load_model(b).config);
    const double dev = run_verify(a, b, modes ? &*modes : nullptr, seed);
    std::cout << "max relative deviation: " << dev << " (tolerance " << tol << ")\n";
    if (!(dev <= tol)) {
        std::cerr << "verify: preservation FAILED\n";
        return 3;
    }
    std::cout << "verify: preservation OK\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FPT quantization laboratory for toy decoder transformers"};
    app.require_subcommand(1);

    // gen-model
    auto* gen = app.add_subcommand("gen-model", "generate and save a synthetic toy model");
    ModelConfig mc;
    std::string gen_out, gen_precision = "f64";
    std::string outlier_channels, outlier_gate_channels, outlier_tokens;
    double outlier_factor = 50.0, outlier_gate_factor = 6.0, outlier_token_factor = 64.0;
    bool standard_fixture = false;
    gen->add_option("--d-model", mc.d_model);
    gen->add_option("--blocks", mc.n_blocks);
    gen->add_option("--q-heads", mc.n_q_heads);
    gen->add_option("--kv-heads", mc.n_kv_heads);
    gen->add_option("--d-head", mc.d_head);
    gen->add_option("--d-ffn", mc.d_ffn);
    gen->add_option("--vocab", mc.vocab);
    gen->add_option("--seed", mc.seed);
    gen->add_option("--init-std", mc.init_std);
    gen->add_option("--precision", gen_precision, "f32 or f64");
    gen->add_option("--outlier-channels", outlier_channels, "comma list of W_u columns to scale");
    gen->add_option("--outlier-factor", outlier_factor);
    gen->add_option("--outlier-gate-channels", outlier_gate_channels, "comma list of W_g columns to scale");
    gen->add_option("--outlier-gate-factor", outlier_gate_factor);
    gen->add_option("--outlier-tokens", outlier_tokens, "comma list of embedding rows to scale");
    gen->add_option("--outlier-token-factor", outlier_token_factor);
    gen->add_flag("--standard-fixture", standard_fixture, "apply the standard outlier-injected fixture");
    gen->add_option("--out", gen_out, "output file prefix")->required();

    // sensitivity
    auto* sens = app.add_subcommand("sensitivity", "single-quantizer sweep over tap locations");
    CommonFlags sens_flags;
    sens_flags.attach(sens, true);
    std::string sens_locations;
    sens->add_option("--locations", sens_locations, "comma list of aliases to sweep (default: all)");

    // fit
    auto* fit = app.add_subcommand("fit", "full transform + quantization fitting pipeline");
    CommonFlags fit_flags;
    fit_flags.attach(fit, true);
    int fit_e2e_steps = -1, fit_local_steps = -1;
    bool fit_std_fixture = false;
    fit->add_option("--e2e-steps", fit_e2e_steps, "end-to-end training steps (0 disables)");
    fit->add_option("--local-steps", fit_local_steps, "local optimization steps per transform");
    fit->add_flag("--standard-fixture", fit_std_fixture, "fit the built-in outlier-injected fixture");

    // compare
    auto* cmp = app.add_subcommand("compare", "merge reports into side-by-side CSV/JSON");
    std::vector<std::string> cmp_paths;
    std::string cmp_out;
    cmp->add_option("reports", cmp_paths, "report JSON files")->required()->expected(-1);
    cmp->add_option("--out", cmp_out, "output prefix (<out>.csv, <out>.json); stdout when omitted");

    // verify
    auto* ver = app.add_subcommand("verify", "preservation check between two model files");
    std::string ver_a, ver_b, ver_b_transforms;
    double ver_tol = 1e-7;
    std::uint64_t ver_seed = 7;
    ver->add_option("--a", ver_a, "reference model prefix")->required();
    ver->add_option("--b", ver_b, "transformed model prefix")->required();
    ver->add_option("--b-transforms", ver_b_transforms, "transform-set prefix providing online modes for b");
    ver->add_option("--tol", ver_tol, "max allowed relative deviation");
    ver->add_option("--seed", ver_seed, "seed for the check batches");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            mc.dtype = dtype_from_name(gen_precision);
            OutlierSpec outliers;
            if (standard_fixture) outliers = standard_fixture_outliers();
            if (!outlier_channels.empty())
                outliers.push_back({OutlierInjection::Target::wu_col, parse_index_list(outlier_channels),
                                    outlier_factor});
            if (!outlier_gate_channels.empty())
                outliers.push_back({OutlierInjection::Target::wg_col, parse_index_list(outlier_gate_channels),
                                    outlier_gate_factor});
            if (!outlier_tokens.empty())
                outliers.push_back({OutlierInjection::Target::embedding_row, parse_index_list(outlier_tokens),
                                    outlier_token_factor});
            return cmd_gen_model(mc, outliers, gen_out);
        }
        if (sens->parsed()) {
            ExperimentConfig cfg = sens_flags.resolve();
            if (!sens_locations.empty()) {
                cfg.sweep_locations.clear();
                for (const auto& nm : parse_name_list(sens_locations))
                    cfg.sweep_locations.push_back(location_from_name(nm));
            }
            return cmd_sensitivity(cfg);
        }
        if (fit->parsed()) {
            ExperimentConfig cfg = fit_flags.resolve();
            if (fit_e2e_steps >= 0) cfg.e2e.steps = fit_e2e_steps;
            if (fit_local_steps >= 0) cfg.local_opt.steps = fit_local_steps;
            if (fit_std_fixture) cfg.outliers = standard_fixture_outliers();
            return cmd_fit(cfg);
        }
        if (cmp->parsed()) return cmd_compare(cmp_paths, cmp_out);
        if (ver->parsed()) return cmd_verify(ver_a, ver_b, ver_b_transforms, ver_tol, ver_seed);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fptq::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
