#include "vfamc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "vfamc/error.hpp"

namespace vfamc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int known_rank(const std::string& key, const std::string& value) {
    static const std::map<std::string, std::vector<std::string>> order{
        {"motion", {"no", "yes"}},
        {"b1_mode", {"shared", "per-contrast"}},
        {"method", {"none", "ratio", "generative"}},
    };
    const auto it = order.find(key);
    if (it == order.end()) return 0;
    const auto pos = std::find(it->second.begin(), it->second.end(), value);
    return pos == it->second.end() ? static_cast<int>(it->second.size()) : static_cast<int>(pos - it->second.begin());
}

bool row_less(const Labels& a, const Labels& b) {
    for (const char* key : {"dataset", "motion", "b1_mode", "method"}) {
        const std::string va = a.count(key) ? a.at(key) : "";
        const std::string vb = b.count(key) ? b.at(key) : "";
        const int ra = known_rank(key, va);
        const int rb = known_rank(key, vb);
        if (ra != rb) return ra < rb;
        if (va != vb) return va < vb;
    }
    return a < b;
}

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sd_of_group_means(const std::vector<const MaeReport*>& group, const std::string& key) {
    std::map<std::string, std::vector<double>> by;
    for (const auto* r : group) {
        const auto it = r->labels.find(key);
        by[it == r->labels.end() ? "" : it->second].push_back(r->mae_percent);
    }
    std::vector<double> means;
    for (const auto& [k, v] : by) means.push_back(mean_of(v));
    return sample_sd(means);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

MaeReport mae(const Volume& estimate, const Volume& reference, const Volume& mask, Labels labels) {
    require_same_grid(estimate, reference, "estimate vs reference");
    require_same_grid(estimate, mask, "estimate vs mask");
    MaeReport r;
    r.labels = std::move(labels);
    r.error_volume = Volume(estimate.grid(), kNaN);
    r.error_volume.intent = "relative_error";
    double sum = 0.0;
    for (std::size_t n = 0; n < estimate.size(); ++n) {
        if (!(mask[n] > 0.5) || !std::isfinite(estimate[n]) || !std::isfinite(reference[n])) continue;
        if (!(reference[n] > 0.0)) throw ConfigError("mae: reference must be positive on the mask");
        const double e = std::abs(reference[n] - estimate[n]) / reference[n];
        r.error_volume[n] = e;
        sum += e;
        ++r.n_voxels;
    }
    if (r.n_voxels == 0) throw ConfigError("mae: empty effective mask");
    r.mae_percent = 100.0 * sum / static_cast<double>(r.n_voxels);
    return r;
}

Volume reference_map(std::span<const Volume> maps) {
    if (maps.empty()) throw ConfigError("reference_map: no maps given");
    for (std::size_t k = 1; k < maps.size(); ++k) require_same_grid(maps[0], maps[k], "reference maps");
    Volume out(maps[0].grid(), kNaN);
    out.intent = "r1";
    for (std::size_t n = 0; n < out.size(); ++n) {
        double s = 0.0;
        int c = 0;
        for (const auto& m : maps)
            if (std::isfinite(m[n])) {
                s += m[n];
                ++c;
            }
        if (c > 0) out[n] = s / c;
    }
    return out;
}

Json report_to_json(const MaeReport& r) {
    return {{"mae_percent", r.mae_percent}, {"n_voxels", r.n_voxels}, {"labels", r.labels}};
}

MaeReport report_from_json(const Json& j) {
    MaeReport r;
    try {
        r.mae_percent = j.at("mae_percent").get<double>();
        r.n_voxels = j.at("n_voxels").get<std::size_t>();
        if (j.contains("labels")) r.labels = j.at("labels").get<Labels>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("malformed report: ") + e.what());
    }
    return r;
}

std::vector<ConditionRow> condition_table(std::span<const MaeReport> reports) {
    std::map<Labels, std::vector<const MaeReport*>> groups;
    for (const auto& r : reports) {
        Labels key = r.labels;
        for (const auto& rk : kReplicateKeys) key.erase(rk);
        groups[key].push_back(&r);
    }
    std::vector<ConditionRow> rows;
    for (const auto& [labels, group] : groups) {
        std::vector<double> v;
        for (const auto* r : group) v.push_back(r->mae_percent);
        ConditionRow row;
        row.labels = labels;
        row.n = v.size();
        row.mean = mean_of(v);
        row.sd = sample_sd(v);
        row.single = v.size() == 1;
        row.sd_across_repeats = sd_of_group_means(group, "repeat");
        row.sd_across_pairings = sd_of_group_means(group, "pairing");
        rows.push_back(row);
    }
    std::stable_sort(rows.begin(), rows.end(), [](const ConditionRow& a, const ConditionRow& b) {
        return row_less(a.labels, b.labels);
    });
    return rows;
}

std::string table_to_csv(const std::vector<ConditionRow>& rows) {
    std::set<std::string> keys;
    for (const auto& r : rows)
        for (const auto& [k, v] : r.labels) keys.insert(k);
    std::vector<std::string> cols;
    for (const char* k : {"dataset", "motion", "b1_mode", "method"})
        if (keys.erase(k)) cols.push_back(k);
    cols.insert(cols.end(), keys.begin(), keys.end());

    std::ostringstream out;
    out << std::setprecision(10);
    for (const auto& c : cols) out << csv_field(c) << ",";
    out << "n,mae_mean,mae_sd,sd_flag,sd_across_repeats,sd_across_pairings\n";
    for (const auto& r : rows) {
        for (const auto& c : cols) {
            const auto it = r.labels.find(c);
            out << csv_field(it == r.labels.end() ? "" : it->second) << ",";
        }
        out << r.n << "," << r.mean << "," << r.sd << "," << (r.single ? "single" : "") << "," << r.sd_across_repeats
            << "," << r.sd_across_pairings << "\n";
    }
    return out.str();
}

Json table_to_json(const std::vector<ConditionRow>& rows) {
    Json out = Json::array();
    for (const auto& r : rows)
        out.push_back({{"labels", r.labels},
                       {"n", r.n},
                       {"mae_mean", r.mean},
                       {"mae_sd", r.sd},
                       {"single", r.single},
                       {"sd_across_repeats", r.sd_across_repeats},
                       {"sd_across_pairings", r.sd_across_pairings}});
    return out;
}

std::string tissue_histograms_csv(const Volume& values, const Volume& labels, const Volume& mask,
                                  const std::vector<std::string>& tissue_of_label, double lo, double hi, int bins) {
    require_same_grid(values, labels, "values vs labels");
    require_same_grid(values, mask, "values vs mask");
    if (!(hi > lo) || bins < 1) throw ConfigError("histogram: need hi > lo and bins >= 1");
    std::map<std::string, std::vector<std::size_t>> counts;
    std::map<std::string, std::size_t> totals;
    for (std::size_t n = 0; n < values.size(); ++n) {
        if (!(mask[n] > 0.5) || !std::isfinite(values[n]) || !std::isfinite(labels[n])) continue;
        const long idx = std::lround(labels[n]);
        if (idx < 0 || idx >= static_cast<long>(tissue_of_label.size())) continue;
        const std::string& t = tissue_of_label[static_cast<std::size_t>(idx)];
        auto& c = counts[t];
        if (c.empty()) c.assign(static_cast<std::size_t>(bins), 0);
        ++totals[t];
        const double f = (values[n] - lo) / (hi - lo);
        if (f < 0.0 || f >= 1.0) continue;
        ++c[static_cast<std::size_t>(f * bins)];
    }
    std::ostringstream out;
    out << std::setprecision(10) << "tissue,bin_lo,bin_hi,count,density\n";
    const double w = (hi - lo) / bins;
    for (const auto& [t, c] : counts)
        for (int b = 0; b < bins; ++b) {
            const double density = static_cast<double>(c[static_cast<std::size_t>(b)]) /
                                   (static_cast<double>(totals[t]) * w);
            out << t << "," << lo + b * w << "," << lo + (b + 1) * w << "," << c[static_cast<std::size_t>(b)] << ","
                << density << "\n";
        }
    return out.str();
}

}  // namespace vfamc
