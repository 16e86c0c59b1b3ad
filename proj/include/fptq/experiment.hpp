#pragma once

#include "fptq/optimize.hpp"
#include "fptq/report.hpp"

namespace fptq {

struct BitsSpec {
    int weights = 4;
    int activations = 4;
    int kv = 4;

    void validate() const;  // each in {0, 4, 8, 16}; 0 disables that group
};

// Activation-quantizer presets. KV-cache keys default to the RoPE-embedded
// tap (ke); kv_pre_rope selects the pre-RoPE tap (k) instead.
//   linears_kv:          na, nm, ao, mm, ke (or k), v
//   plus_bmm:            + qe, ap
//   all_except_residual: every activation alias except ra, rm
enum class QuantSetting : std::uint8_t { linears_kv, plus_bmm, all_except_residual, custom };

const char* quant_setting_name(QuantSetting s);
QuantSetting quant_setting_from_name(const std::string& name);
std::vector<Location> expand_setting(QuantSetting setting, bool kv_pre_rope,
                                     const std::vector<Location>& custom = {});

struct ExperimentConfig {
    std::string model_path;  // load when set; otherwise init from `model`
    ModelConfig model;
    OutlierSpec outliers;

    QuantSetting setting = QuantSetting::linears_kv;
    std::vector<Location> custom_locations;
    std::vector<Location> sweep_locations;  // sensitivity subset; empty = all
    bool kv_pre_rope = false;
    BitsSpec bits;

    std::set<TransformFamily> transforms;
    OptimizeConfig local_opt;        // p = 4, 200 steps
    E2EConfig e2e;
    RangeSettingSpec range_setting;  // p = 3, 64 calibration sequences

    std::uint64_t seed = 7;
    std::optional<Dtype> precision;  // overrides the model dtype for the run
    index_t eval_batch_size = 8;
    index_t eval_seq_len = 32;
    index_t calib_seq_len = 64;

    std::string out_path;  // artifact prefix; empty = no files written
    std::string name = "experiment";

    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

// Synthetic token streams; all ids uniform over the vocabulary.
TokenBatch sample_token_batch(Rng& rng, index_t batch_size, index_t seq_len, index_t vocab);
std::vector<TokenBatch> sample_token_batches(Rng& rng, int count, index_t batch_size, index_t seq_len,
                                             index_t vocab);

// The seeded outlier-injected toy model the experiments are calibrated on:
// a few token embeddings scaled hard (token-level residual outliers) plus
// scaled W_u/W_g channels (channel-level SwiGLU outliers).
OutlierSpec standard_fixture_outliers();
ModelParams make_standard_fixture(std::uint64_t seed);

// Resolves model_path / inline config / precision override into parameters.
ModelParams resolve_model(const ExperimentConfig& cfg);

// Per-location single-quantizer sweep: for each location independently,
// range-set a grid, run the evaluation batch, and record tensor- and
// output-level deviations versus the FP model.
Report run_sensitivity(const ExperimentConfig& cfg);

struct FitArtifacts {
    Report report;
    ModelParams transformed;  // merged weights incl. e2e transform deltas
    TransformSet transforms;  // composed local * e2e parameters
    QuantizerSet quantizers;
};

// Full pipeline: choose transforms, locally optimize and merge them
// (rotation first), set quantization ranges, train end-to-end, and emit
// report plus artifacts. Never mutates input model files.
FitArtifacts run_fit(const ExperimentConfig& cfg);

// Preservation check between two model files (CLI `verify`).
double run_verify(const std::string& prefix_a, const std::string& prefix_b,
                  const TransformSet* modes_b, std::uint64_t seed);

}  // namespace fptq
