#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fptq/common.hpp"

namespace fptq {

// Per-quantizer-location error metrics. Tensor-level errors describe the
// quantized activation/weight itself; logits_* describe full-model output
// deviation against the FP teacher when only this quantizer is enabled.
struct LocationMetrics {
    double l2_error = 0.0;
    double l3_error = 0.0;
    double sqnr_db = 0.0;
    std::optional<double> logits_mse;
    std::optional<double> logits_jsd;
};

// Structured experiment output. Serialized as JSON with a schema_version;
// non-finite values use the string sentinels "inf"/"-inf"/"nan" (JSON has
// no literal for them). Serialization is deterministic: keys are sorted and
// doubles use the shortest round-trip representation.
struct Report {
    int schema_version = kReportSchemaVersion;
    std::string tool_version = kToolVersion;
    std::string name = "experiment";
    std::uint64_t seed = 0;
    nlohmann::json config_echo = nlohmann::json::object();
    std::map<std::string, LocationMetrics> locations;  // keyed by alias
    std::optional<double> preservation_deviation;
    std::optional<double> jsd_heldout_before;  // post range setting, pre e2e
    std::optional<double> jsd_heldout_after;
    std::map<std::string, std::vector<double>> traces;  // objective curves
    // Fitted quantizer grids, scale arrays inline (decimal text in the JSON).
    nlohmann::json quantizers = nlohmann::json::object();

    nlohmann::json to_json() const;
    static Report from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static Report load(const std::string& path);
};

// JSON <-> double helpers with the non-finite sentinels.
nlohmann::json json_number(double v);
double number_from_json(const nlohmann::json& j);

// Flat "metric,value" CSV projection of one report. Numbers are printed
// with 17 significant digits so they parse back exactly.
std::string report_to_csv(const Report& report);

// Side-by-side merge: columns ordered by report name, rows by metric name.
std::string reports_to_csv(const std::vector<Report>& reports);
nlohmann::json merge_reports(const std::vector<Report>& reports);

// The flat metric map used by the CSV/merge projections.
std::map<std::string, double> flatten_report(const Report& report);

}  // namespace fptq
