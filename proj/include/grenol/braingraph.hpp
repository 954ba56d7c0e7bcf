#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grenol/csv.hpp"
#include "grenol/error.hpp"
#include "grenol/tensor.hpp"

namespace grenol {

/// Regions per hemisphere in the Desikan-Killiany atlas.
inline constexpr std::size_t kRoiCount = 34;

inline constexpr std::array<const char*, kRoiCount> kDesikanRoiNames = {
    "bankssts",          "caudalanteriorcingulate", "caudalmiddlefrontal",     "cuneus",
    "entorhinal",        "fusiform",                "inferiorparietal",        "inferiortemporal",
    "isthmuscingulate",  "lateraloccipital",        "lateralorbitofrontal",    "lingual",
    "medialorbitofrontal", "middletemporal",        "parahippocampal",         "paracentral",
    "parsopercularis",   "parsorbitalis",           "parstriangularis",        "pericalcarine",
    "postcentral",       "posteriorcingulate",      "precentral",              "precuneus",
    "rostralanteriorcingulate", "rostralmiddlefrontal", "superiorfrontal",     "superiorparietal",
    "superiortemporal",  "supramarginal",           "frontalpole",             "temporalpole",
    "transversetemporal", "insula",
};

inline constexpr const char* kMeanCurvature = "mean_curvature";
inline constexpr const char* kCorticalThickness = "cortical_thickness";

enum class Hemisphere { lh, rh };

inline const char* to_string(Hemisphere h) { return h == Hemisphere::lh ? "lh" : "rh"; }

inline Hemisphere parse_hemisphere(std::string_view text) {
    if (text == "lh") return Hemisphere::lh;
    if (text == "rh") return Hemisphere::rh;
    throw DataError(DataError::Kind::invalid_value, "unknown hemisphere '" + std::string(text) + "' (expected lh or rh)");
}

struct CorticalRow {
    std::string subject_id;
    Hemisphere hemisphere = Hemisphere::lh;
    std::size_t roi_index = 0;
    std::string roi_name;
    std::vector<double> metrics; // aligned with CorticalTable::metric_names()
};

/// Per-ROI morphological measurements for a set of subjects, validated so that every
/// (subject, hemisphere) group holds exactly one row per ROI.
class CorticalTable {
public:
    CorticalTable() = default;

    /// Validates and indexes `rows`. `metric_names` must start with mean_curvature and
    /// cortical_thickness; any further names are optional metrics.
    CorticalTable(std::vector<std::string> metric_names, std::vector<CorticalRow> rows)
        : metric_names_(std::move(metric_names)), rows_(std::move(rows)) {
        if (metric_names_.size() < 2 || metric_names_[0] != kMeanCurvature || metric_names_[1] != kCorticalThickness) {
            throw DataError(DataError::Kind::missing_column, "table must carry mean_curvature and cortical_thickness");
        }
        build_index();
    }

    const std::vector<std::string>& metric_names() const noexcept { return metric_names_; }
    const std::vector<CorticalRow>& rows() const noexcept { return rows_; }

    bool has_metric(std::string_view name) const {
        return std::find(metric_names_.begin(), metric_names_.end(), name) != metric_names_.end();
    }

    /// Subject ids with data for `hemisphere`, in order of first appearance.
    std::vector<std::string> subjects(Hemisphere hemisphere) const {
        std::vector<std::string> out;
        for (const auto& id : subject_order_) {
            if (groups_.count({id, hemisphere})) out.push_back(id);
        }
        return out;
    }

    std::size_t group_count() const noexcept { return groups_.size(); }

    bool contains(const std::string& subject, Hemisphere hemisphere) const {
        return groups_.count({subject, hemisphere}) > 0;
    }

    /// Raw metric values for one subject/hemisphere, ordered by ROI index.
    std::vector<double> metric_values(const std::string& subject, Hemisphere hemisphere, std::string_view metric) const {
        const auto it = groups_.find({subject, hemisphere});
        if (it == groups_.end()) {
            throw DataError(DataError::Kind::unknown_subject,
                            "subject '" + subject + "' has no " + to_string(hemisphere) + " data");
        }
        const std::size_t col = metric_column(metric);
        std::vector<double> out(kRoiCount);
        for (std::size_t roi = 0; roi < kRoiCount; ++roi) out[roi] = rows_[it->second[roi]].metrics[col];
        return out;
    }

    std::size_t metric_column(std::string_view metric) const {
        const auto it = std::find(metric_names_.begin(), metric_names_.end(), metric);
        if (it == metric_names_.end()) {
            throw DataError(DataError::Kind::unknown_metric, "unknown metric '" + std::string(metric) + "'");
        }
        return static_cast<std::size_t>(it - metric_names_.begin());
    }

private:
    void build_index() {
        std::map<std::pair<std::string, Hemisphere>, std::vector<std::size_t>> pending;
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            const auto& row = rows_[r];
            const std::string where = "subject '" + row.subject_id + "' " + to_string(row.hemisphere) +
                                      " (data row " + std::to_string(r + 1) + ")";
            if (row.metrics.size() != metric_names_.size()) {
                throw DataError(DataError::Kind::missing_column, where + ": wrong number of metric values");
            }
            if (row.roi_index >= kRoiCount) {
                throw DataError(DataError::Kind::invalid_value,
                                where + ": roi_index " + std::to_string(row.roi_index) + " outside 0..33");
            }
            for (std::size_t m = 0; m < 2; ++m) {
                if (!std::isfinite(row.metrics[m])) {
                    throw DataError(DataError::Kind::non_finite, where + ": non-finite " + metric_names_[m]);
                }
            }
            if (!(row.metrics[1] > 0.0)) {
                throw DataError(DataError::Kind::invalid_value, where + ": cortical_thickness must be positive");
            }
            auto& slots = pending[{row.subject_id, row.hemisphere}];
            if (slots.empty()) {
                slots.assign(kRoiCount, kMissing);
                if (std::find(subject_order_.begin(), subject_order_.end(), row.subject_id) == subject_order_.end()) {
                    subject_order_.push_back(row.subject_id);
                }
            }
            if (slots[row.roi_index] != kMissing) {
                throw DataError(DataError::Kind::duplicate_roi,
                                where + ": duplicate roi_index " + std::to_string(row.roi_index));
            }
            slots[row.roi_index] = r;
        }
        for (auto& [key, slots] : pending) {
            const auto missing = std::count(slots.begin(), slots.end(), kMissing);
            if (missing > 0) {
                const auto first = static_cast<std::size_t>(std::find(slots.begin(), slots.end(), kMissing) - slots.begin());
                throw DataError(DataError::Kind::roi_count,
                                "subject '" + key.first + "' " + to_string(key.second) + " has " +
                                    std::to_string(kRoiCount - static_cast<std::size_t>(missing)) +
                                    " of 34 ROIs (missing roi_index " + std::to_string(first) + ")");
            }
            std::array<std::size_t, kRoiCount> idx{};
            std::copy(slots.begin(), slots.end(), idx.begin());
            groups_.emplace(key, idx);
        }
    }

    static constexpr std::size_t kMissing = static_cast<std::size_t>(-1);

    std::vector<std::string> metric_names_;
    std::vector<CorticalRow> rows_;
    std::vector<std::string> subject_order_;
    std::map<std::pair<std::string, Hemisphere>, std::array<std::size_t, kRoiCount>> groups_;
};

/// Reads a cortical table CSV. Required header columns: subject_id, hemisphere,
/// roi_index, mean_curvature, cortical_thickness; roi_name is optional and any other
/// column is kept as an optional numeric metric.
inline CorticalTable read_cortical_table(std::istream& in, const std::string& source = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw DataError(DataError::Kind::missing_column, source + ": empty file");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3); // UTF-8 BOM
    const auto header = csv::split_line(line);

    auto find_col = [&](std::string_view name) -> std::ptrdiff_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (csv::trim(header[i]) == name) return static_cast<std::ptrdiff_t>(i);
        return -1;
    };
    const std::array<const char*, 5> required = {"subject_id", "hemisphere", "roi_index", kMeanCurvature,
                                                 kCorticalThickness};
    std::array<std::size_t, 5> col{};
    for (std::size_t i = 0; i < required.size(); ++i) {
        const auto c = find_col(required[i]);
        if (c < 0) {
            throw DataError(DataError::Kind::missing_column,
                            source + ": missing required column '" + std::string(required[i]) + "'");
        }
        col[i] = static_cast<std::size_t>(c);
    }
    const auto name_col = find_col("roi_name");

    std::vector<std::string> metric_names = {kMeanCurvature, kCorticalThickness};
    std::vector<std::size_t> metric_cols = {col[3], col[4]};
    for (std::size_t i = 0; i < header.size(); ++i) {
        const bool known = std::find(col.begin(), col.end(), i) != col.end() ||
                           static_cast<std::ptrdiff_t>(i) == name_col;
        if (!known) {
            metric_names.emplace_back(csv::trim(header[i]));
            metric_cols.push_back(i);
        }
    }

    std::vector<CorticalRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty() || csv::trim(line) == "\r") continue;
        const auto fields = csv::split_line(line);
        const std::string where = source + ":" + std::to_string(line_no);
        if (fields.size() != header.size()) {
            throw DataError(DataError::Kind::missing_column, where + ": expected " + std::to_string(header.size()) +
                                                                 " fields, got " + std::to_string(fields.size()));
        }
        CorticalRow row;
        row.subject_id = std::string(csv::trim(fields[col[0]]));
        row.hemisphere = parse_hemisphere(csv::trim(fields[col[1]]));
        const auto roi = csv::parse_int(fields[col[2]]);
        if (!roi || *roi < 0) {
            throw DataError(DataError::Kind::invalid_value,
                            where + ": subject '" + row.subject_id + "' has invalid roi_index '" + fields[col[2]] + "'");
        }
        row.roi_index = static_cast<std::size_t>(*roi);
        if (name_col >= 0) row.roi_name = std::string(csv::trim(fields[static_cast<std::size_t>(name_col)]));
        for (std::size_t m = 0; m < metric_cols.size(); ++m) {
            const auto v = csv::parse_double(fields[metric_cols[m]]);
            if (!v && m < 2) {
                throw DataError(DataError::Kind::non_finite, where + ": subject '" + row.subject_id + "' has non-numeric " +
                                                                 metric_names[m]);
            }
            row.metrics.push_back(v.value_or(std::numeric_limits<double>::quiet_NaN()));
        }
        rows.push_back(std::move(row));
    }
    return CorticalTable(std::move(metric_names), std::move(rows));
}

inline CorticalTable load_cortical_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(DataError::Kind::io, "cannot open '" + path + "'");
    return read_cortical_table(in, path);
}

inline void write_cortical_table(const CorticalTable& table, std::ostream& out) {
    out << "subject_id,hemisphere,roi_index,roi_name";
    for (const auto& name : table.metric_names()) out << ',' << csv::quote(name);
    out << '\n';
    for (const auto& row : table.rows()) {
        out << csv::quote(row.subject_id) << ',' << to_string(row.hemisphere) << ',' << row.roi_index << ','
            << csv::quote(row.roi_name);
        for (double v : row.metrics) out << ',' << csv::format_double(v);
        out << '\n';
    }
}

inline void save_cortical_table(const CorticalTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(DataError::Kind::io, "cannot write '" + path + "'");
    write_cortical_table(table, out);
}

/// Morphological dissimilarity e_ij = |n_i − n_j| / (n_i + n_j), zero on the diagonal.
///
/// The upper triangle is computed once and mirrored, so the result is bitwise
/// symmetric. A pair of zero values yields 0.
inline Tensor pairing_edges(std::span<const double> nodes) {
    const std::size_t n = nodes.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(nodes[i])) throw std::invalid_argument("pairing_edges: non-finite node value at " + std::to_string(i));
    }
    Tensor adj = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double denom = nodes[i] + nodes[j];
            double e = 0.0;
            if (denom != 0.0) {
                e = std::abs(nodes[i] - nodes[j]) / denom;
            } else if (nodes[i] != 0.0) {
                throw std::invalid_argument("pairing_edges: nodes " + std::to_string(i) + " and " + std::to_string(j) +
                                            " sum to zero");
            }
            adj.at(i, j) = e;
            adj.at(j, i) = e;
        }
    }
    return adj;
}

/// Node values fed to the pairing function: mean curvature is signed in real data, so
/// its magnitude is used.
inline std::vector<double> node_features(const CorticalTable& table, const std::string& subject, Hemisphere hemisphere,
                                         std::string_view metric) {
    auto values = table.metric_values(subject, hemisphere, metric);
    if (metric == kMeanCurvature) {
        for (double& v : values) v = std::abs(v);
    }
    return values;
}

/// Per-metric min-max scaling fitted on training subjects.
class FeatureScaler {
public:
    struct Range {
        double min = 0.0;
        double max = 1.0;
    };

    void set(const std::string& metric, Range range) {
        if (!(range.max > range.min)) {
            throw DataError(DataError::Kind::invalid_value, "degenerate range for metric '" + metric + "'");
        }
        ranges_[metric] = range;
    }

    bool has(const std::string& metric) const { return ranges_.count(metric) > 0; }

    const Range& range(const std::string& metric) const {
        const auto it = ranges_.find(metric);
        if (it == ranges_.end()) {
            throw DataError(DataError::Kind::unknown_metric, "scaler not fitted for metric '" + metric + "'");
        }
        return it->second;
    }

    const std::map<std::string, Range>& ranges() const noexcept { return ranges_; }

    /// Maps into [0, 1]; values outside the fitted range are clipped.
    double transform(const std::string& metric, double x) const {
        const auto& r = range(metric);
        return std::clamp((x - r.min) / (r.max - r.min), 0.0, 1.0);
    }

    /// Inverse of transform on [0, 1]; inputs outside are clipped first.
    double inverse(const std::string& metric, double y) const {
        const auto& r = range(metric);
        return r.min + std::clamp(y, 0.0, 1.0) * (r.max - r.min);
    }

    std::vector<double> transform(const std::string& metric, std::span<const double> xs) const {
        std::vector<double> out(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) out[i] = transform(metric, xs[i]);
        return out;
    }

    std::vector<double> inverse(const std::string& metric, std::span<const double> ys) const {
        std::vector<double> out(ys.size());
        for (std::size_t i = 0; i < ys.size(); ++i) out[i] = inverse(metric, ys[i]);
        return out;
    }

private:
    std::map<std::string, Range> ranges_;
};

/// Fits min/max of each metric's node features over `subjects` only.
inline FeatureScaler fit_scaler(const CorticalTable& table, Hemisphere hemisphere,
                                const std::vector<std::string>& subjects, const std::vector<std::string>& metrics) {
    if (subjects.empty()) throw std::invalid_argument("fit_scaler: empty training subject list");
    FeatureScaler scaler;
    for (const auto& metric : metrics) {
        FeatureScaler::Range r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
        for (const auto& subject : subjects) {
            for (double v : node_features(table, subject, hemisphere, metric)) {
                r.min = std::min(r.min, v);
                r.max = std::max(r.max, v);
            }
        }
        scaler.set(metric, r);
    }
    return scaler;
}

struct BrainGraph {
    std::string subject_id;
    Hemisphere hemisphere = Hemisphere::lh;
    std::string metric_name;
    std::vector<double> nodes;        // raw (nonnegative) feature per ROI
    std::vector<double> scaled_nodes; // min-max scaled, used by the diffusion model
    Tensor adjacency;                 // pairing_edges(nodes)
};

struct GraphPair {
    BrainGraph source;
    BrainGraph target;
};

inline BrainGraph build_graph(const CorticalTable& table, const std::string& subject, Hemisphere hemisphere,
                              const std::string& metric, const FeatureScaler& scaler) {
    BrainGraph g;
    g.subject_id = subject;
    g.hemisphere = hemisphere;
    g.metric_name = metric;
    g.nodes = node_features(table, subject, hemisphere, metric);
    g.scaled_nodes = scaler.transform(metric, g.nodes);
    g.adjacency = pairing_edges(g.nodes);
    return g;
}

inline GraphPair build_graph_pair(const CorticalTable& table, const std::string& subject, Hemisphere hemisphere,
                                  const std::string& src_metric, const std::string& tgt_metric,
                                  const FeatureScaler& scaler) {
    return {build_graph(table, subject, hemisphere, src_metric, scaler),
            build_graph(table, subject, hemisphere, tgt_metric, scaler)};
}

/// Synthetic cohort where thickness is an affine function of curvature plus a
/// region-specific profile and small noise. Both hemispheres are written per subject.
inline CorticalTable generate_synthetic_dataset(std::size_t n_subjects, std::uint64_t seed) {
    if (n_subjects < 2) throw std::invalid_argument("generate_synthetic_dataset: need at least 2 subjects");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const double n = static_cast<double>(kRoiCount);

    std::vector<CorticalRow> rows;
    rows.reserve(n_subjects * 2 * kRoiCount);
    for (std::size_t s = 0; s < n_subjects; ++s) {
        char id[32];
        std::snprintf(id, sizeof(id), "sub-%03zu", s + 1);
        const double z = normal(rng);
        for (Hemisphere hemi : {Hemisphere::lh, Hemisphere::rh}) {
            for (std::size_t i = 0; i < kRoiCount; ++i) {
                const double x = static_cast<double>(i);
                const double eps = normal(rng);
                const double eps_thick = normal(rng);
                const double curv = std::abs(0.12 + 0.04 * std::sin(two_pi * x / n) + 0.02 * z + 0.01 * eps);
                const double thick =
                    std::max(0.5, 2.0 + 5.0 * curv + 0.3 * std::sin(2.0 * two_pi * x / n) + 0.05 * eps_thick);
                rows.push_back(CorticalRow{id, hemi, i, kDesikanRoiNames[i], {curv, thick}});
            }
        }
    }
    return CorticalTable({kMeanCurvature, kCorticalThickness}, std::move(rows));
}

} // namespace grenol
