#pragma once

#include <iomanip>
#include <map>
#include <sstream>

#include "phasealign/eval/metrics.hpp"
#include "phasealign/io.hpp"

namespace phasealign::eval {

struct MetricKey {
    std::string name;  // e.g. "IoBB50"
    bool iobb = false;
    double threshold = 0.5;
};

/// Report columns in their fixed order.
inline const std::vector<MetricKey>& metric_keys() {
    static const std::vector<MetricKey> keys{{"IoU30", false, 0.3},  {"IoU50", false, 0.5},  {"IoU70", false, 0.7},
                                             {"IoBB30", true, 0.3}, {"IoBB50", true, 0.5}, {"IoBB70", true, 0.7}};
    return keys;
}

struct EvalReport {
    std::vector<std::pair<std::string, std::optional<double>>> ap;  // metric_keys() order
    std::map<std::string, PRCurve> curves;
    std::size_t images = 0, ground_truth = 0, detections = 0;
    std::optional<double> mismatch_dice;
    io::json context = io::json::object();  // config, digests, version

    std::optional<double> at(const std::string& key) const {
        for (const auto& [k, v] : ap)
            if (k == key) return v;
        throw std::out_of_range("no metric " + key);
    }
};

inline EvalReport evaluate(const std::vector<std::vector<Box>>& preds, const std::vector<std::vector<Box>>& gts,
                           IobbDenominator denom = IobbDenominator::predicted) {
    EvalReport r;
    r.images = gts.size();
    for (const auto& g : gts) r.ground_truth += g.size();
    for (const auto& p : preds) r.detections += p.size();
    for (const auto& k : metric_keys()) {
        auto curve = average_precision(preds, gts, k.iobb ? iobb_overlap(denom) : iou_overlap(), k.threshold);
        r.ap.emplace_back(k.name, curve.ap);
        r.curves.emplace(k.name, std::move(curve));
    }
    return r;
}

namespace detail {

inline io::json optional_json(const std::optional<double>& v) { return v ? io::json(*v) : io::json(nullptr); }

inline std::string csv_number(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os << std::setprecision(9) << *v;
    return os.str();
}

}  // namespace detail

inline io::json to_json(const EvalReport& r) {
    io::json j;
    j["ap"] = io::json::object();
    for (const auto& [k, v] : r.ap) j["ap"][k] = detail::optional_json(v);
    j["images"] = r.images;
    j["ground_truth"] = r.ground_truth;
    j["detections"] = r.detections;
    j["mismatch_dice"] = detail::optional_json(r.mismatch_dice);
    j["context"] = r.context;
    return j;
}

inline std::string to_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "metric,ap\n";
    for (const auto& [k, v] : r.ap) os << k << ',' << detail::csv_number(v) << '\n';
    return os.str();
}

inline std::string pr_curve_csv(const PRCurve& c) {
    std::ostringstream os;
    os << "score,precision,recall\n" << std::setprecision(9);
    for (const auto& p : c.points) os << p.score << ',' << p.precision << ',' << p.recall << '\n';
    return os.str();
}

struct SensitivityRow {
    std::string metric;
    std::optional<double> perf_unregistered, perf_registered, sensitivity;
};

struct SensitivityReport {
    std::string tier;  // the unregistered tier this row set compares against tier 0
    std::vector<SensitivityRow> rows;
    std::optional<double> average;  // over rows with a defined sensitivity
};

/// Per-metric sensitivity of `unregistered` against `registered`; keys missing from either
/// report or undefined values are carried as gaps and left out of the average.
inline SensitivityReport sensitivity_report(const std::string& tier, const std::vector<EvalReport>& unregistered,
                                            const std::vector<EvalReport>& registered,
                                            const std::vector<std::string>& prefixes = {}) {
    if (unregistered.size() != registered.size())
        throw std::invalid_argument("sensitivity_report: unregistered and registered report lists differ in length");
    SensitivityReport out{tier, {}, std::nullopt};
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < registered.size(); ++i)
        for (const auto& [key, reg] : registered[i].ap) {
            SensitivityRow row{(prefixes.size() > i ? prefixes[i] : std::string()) + key, unregistered[i].at(key), reg, {}};
            if (row.perf_unregistered && row.perf_registered)
                row.sensitivity = sensitivity(*row.perf_unregistered, *row.perf_registered);
            if (row.sensitivity) sum += *row.sensitivity, ++n;
            out.rows.push_back(row);
        }
    if (n) out.average = sum / static_cast<double>(n);
    return out;
}

inline io::json to_json(const SensitivityReport& r) {
    io::json j;
    j["tier"] = r.tier;
    j["metrics"] = io::json::array();
    for (const auto& row : r.rows)
        j["metrics"].push_back({{"metric", row.metric},
                                {"perf_unregistered", detail::optional_json(row.perf_unregistered)},
                                {"perf_registered", detail::optional_json(row.perf_registered)},
                                {"sensitivity", detail::optional_json(row.sensitivity)}});
    j["average"] = detail::optional_json(r.average);
    return j;
}

inline std::string to_csv(const std::vector<SensitivityReport>& reports) {
    std::ostringstream os;
    os << "tier,metric,perf_unregistered,perf_registered,sensitivity\n";
    for (const auto& r : reports) {
        for (const auto& row : r.rows)
            os << r.tier << ',' << row.metric << ',' << detail::csv_number(row.perf_unregistered) << ','
               << detail::csv_number(row.perf_registered) << ',' << detail::csv_number(row.sensitivity) << '\n';
        os << r.tier << ",average,,," << detail::csv_number(r.average) << '\n';
    }
    return os.str();
}

}  // namespace phasealign::eval
