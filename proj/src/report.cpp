#include "fptq/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "fptq/serialize.hpp"

namespace fptq {

using nlohmann::json;

json json_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double number_from_json(const json& j) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        throw std::invalid_argument("not a number sentinel: " + s);
    }
    return j.get<double>();
}

namespace {

json metrics_to_json(const LocationMetrics& m) {
    json j{{"l2_error", json_number(m.l2_error)},
           {"l3_error", json_number(m.l3_error)},
           {"sqnr_db", json_number(m.sqnr_db)}};
    if (m.logits_mse) j["logits_mse"] = json_number(*m.logits_mse);
    if (m.logits_jsd) j["logits_jsd"] = json_number(*m.logits_jsd);
    return j;
}

LocationMetrics metrics_from_json(const json& j) {
    LocationMetrics m;
    m.l2_error = number_from_json(j.at("l2_error"));
    m.l3_error = number_from_json(j.at("l3_error"));
    m.sqnr_db = number_from_json(j.at("sqnr_db"));
    if (j.contains("logits_mse")) m.logits_mse = number_from_json(j.at("logits_mse"));
    if (j.contains("logits_jsd")) m.logits_jsd = number_from_json(j.at("logits_jsd"));
    return m;
}

std::string format_17g(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

json Report::to_json() const {
    json j;
    j["schema_version"] = schema_version;
    j["tool_version"] = tool_version;
    j["name"] = name;
    j["seed"] = seed;
    j["config"] = config_echo;
    json locs = json::object();
    for (const auto& [alias, m] : locations) locs[alias] = metrics_to_json(m);
    j["locations"] = locs;
    if (preservation_deviation) j["preservation_deviation"] = json_number(*preservation_deviation);
    if (jsd_heldout_before) j["jsd_heldout_before"] = json_number(*jsd_heldout_before);
    if (jsd_heldout_after) j["jsd_heldout_after"] = json_number(*jsd_heldout_after);
    json tr = json::object();
    for (const auto& [key, values] : traces) {
        json arr = json::array();
        for (double v : values) arr.push_back(json_number(v));
        tr[key] = arr;
    }
    j["traces"] = tr;
    if (!quantizers.empty()) j["quantizers"] = quantizers;
    return j;
}

Report Report::from_json(const json& j) {
    Report r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion)
        throw std::invalid_argument("unsupported report schema version " + std::to_string(r.schema_version));
    r.tool_version = j.at("tool_version").get<std::string>();
    r.name = j.at("name").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_echo = j.at("config");
    for (const auto& [alias, m] : j.at("locations").items()) r.locations[alias] = metrics_from_json(m);
    if (j.contains("preservation_deviation"))
        r.preservation_deviation = number_from_json(j.at("preservation_deviation"));
    if (j.contains("jsd_heldout_before")) r.jsd_heldout_before = number_from_json(j.at("jsd_heldout_before"));
    if (j.contains("jsd_heldout_after")) r.jsd_heldout_after = number_from_json(j.at("jsd_heldout_after"));
    if (j.contains("traces"))
        for (const auto& [key, arr] : j.at("traces").items()) {
            std::vector<double> values;
            for (const auto& v : arr) values.push_back(number_from_json(v));
            r.traces[key] = std::move(values);
        }
    if (j.contains("quantizers")) r.quantizers = j.at("quantizers");
    return r;
}

void Report::save(const std::string& path) const { write_text_file(path, to_json().dump(2) + "\n"); }

Report Report::load(const std::string& path) { return from_json(json::parse(read_text_file(path))); }

std::map<std::string, double> flatten_report(const Report& report) {
    std::map<std::string, double> flat;
    for (const auto& [alias, m] : report.locations) {
        flat["location." + alias + ".l2_error"] = m.l2_error;
        flat["location." + alias + ".l3_error"] = m.l3_error;
        flat["location." + alias + ".sqnr_db"] = m.sqnr_db;
        if (m.logits_mse) flat["location." + alias + ".logits_mse"] = *m.logits_mse;
        if (m.logits_jsd) flat["location." + alias + ".logits_jsd"] = *m.logits_jsd;
    }
    if (report.preservation_deviation) flat["preservation_deviation"] = *report.preservation_deviation;
    if (report.jsd_heldout_before) flat["jsd_heldout_before"] = *report.jsd_heldout_before;
    if (report.jsd_heldout_after) flat["jsd_heldout_after"] = *report.jsd_heldout_after;
    for (const auto& [key, values] : report.traces) {
        if (!values.empty()) {
            flat["trace." + key + ".first"] = values.front();
            flat["trace." + key + ".last"] = values.back();
        }
    }
    return flat;
}

std::string report_to_csv(const Report& report) {
    std::string csv = "metric,value\n";
    for (const auto& [key, value] : flatten_report(report)) csv += key + "," + format_17g(value) + "\n";
    return csv;
}

std::string reports_to_csv(const std::vector<Report>& reports) {
    std::vector<const Report*> ordered;
    for (const auto& r : reports) ordered.push_back(&r);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const Report* a, const Report* b) { return a->name < b->name; });

    std::map<std::string, std::map<std::string, double>> flats;  // name -> metrics
    std::map<std::string, int> seen;
    std::vector<std::string> names;
    for (const Report* r : ordered) {
        std::string name = r->name;
        if (seen[name]++ > 0) name += "#" + std::to_string(seen[name] - 1);
        names.push_back(name);
        flats[name] = flatten_report(*r);
    }

    std::map<std::string, bool> all_metrics;
    for (const auto& [name, flat] : flats)
        for (const auto& [key, value] : flat) all_metrics[key] = true;

    std::string csv = "metric";
    for (const auto& name : names) csv += "," + name;
    csv += "\n";
    for (const auto& [metric, unused] : all_metrics) {
        csv += metric;
        for (const auto& name : names) {
            const auto& flat = flats[name];
            auto it = flat.find(metric);
            csv += ",";
            if (it != flat.end()) csv += format_17g(it->second);
        }
        csv += "\n";
    }
    return csv;
}

json merge_reports(const std::vector<Report>& reports) {
    std::vector<const Report*> ordered;
    for (const auto& r : reports) ordered.push_back(&r);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const Report* a, const Report* b) { return a->name < b->name; });
    json merged = json::object();
    merged["schema_version"] = kReportSchemaVersion;
    json entries = json::array();
    for (const Report* r : ordered) entries.push_back(r->to_json());
    merged["reports"] = entries;
    return merged;
}

}  // namespace fptq
