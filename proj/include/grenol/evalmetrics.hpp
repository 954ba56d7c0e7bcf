#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grenol/braingraph.hpp"
#include "grenol/csv.hpp"
#include "grenol/denoiser.hpp"
#include "grenol/error.hpp"
#include "grenol/sampler.hpp"
#include "grenol/schedule.hpp"

namespace grenol {

struct GraphDistance {
    double mse = 0.0;
    double frobenius = 0.0;
};

inline GraphDistance graph_distance(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("graph_distance: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    if (a.size() == 0) throw ShapeError("graph_distance: empty matrices");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        total += d * d;
    }
    return {total / static_cast<double>(a.size()), std::sqrt(total)};
}

/// Element-wise mean of the training target adjacencies.
inline Tensor baseline_mean_predictor(std::span<const Tensor> train_targets) {
    if (train_targets.empty()) throw std::invalid_argument("baseline_mean_predictor: no training targets");
    Tensor mean(train_targets.front().shape());
    for (const auto& t : train_targets) {
        if (t.shape() != mean.shape()) throw ShapeError("baseline_mean_predictor: inconsistent adjacency shapes");
        for (std::size_t i = 0; i < t.size(); ++i) mean[i] += t[i];
    }
    const double inv = 1.0 / static_cast<double>(train_targets.size());
    for (double& v : mean.data()) v *= inv;
    return mean;
}

struct SubjectScore {
    std::string subject_id;
    Hemisphere hemisphere = Hemisphere::lh;
    std::size_t fold = 0;
    double mse = 0.0;
    double frobenius = 0.0;
    double baseline_mse = 0.0;
    double baseline_frobenius = 0.0;
};

struct ScoreSummary {
    std::size_t count = 0;
    double mean_mse = 0.0;
    double std_mse = 0.0;
    double mean_frobenius = 0.0;
    double std_frobenius = 0.0;
    double mean_baseline_mse = 0.0;
    double mean_baseline_frobenius = 0.0;
};

inline ScoreSummary summarize(std::span<const SubjectScore> scores) {
    ScoreSummary s;
    s.count = scores.size();
    if (scores.empty()) return s;
    const double n = static_cast<double>(scores.size());
    for (const auto& r : scores) {
        s.mean_mse += r.mse;
        s.mean_frobenius += r.frobenius;
        s.mean_baseline_mse += r.baseline_mse;
        s.mean_baseline_frobenius += r.baseline_frobenius;
    }
    s.mean_mse /= n;
    s.mean_frobenius /= n;
    s.mean_baseline_mse /= n;
    s.mean_baseline_frobenius /= n;
    for (const auto& r : scores) {
        s.std_mse += (r.mse - s.mean_mse) * (r.mse - s.mean_mse);
        s.std_frobenius += (r.frobenius - s.mean_frobenius) * (r.frobenius - s.mean_frobenius);
    }
    s.std_mse = std::sqrt(s.std_mse / n);
    s.std_frobenius = std::sqrt(s.std_frobenius / n);
    return s;
}

struct EvalReport {
    std::vector<SubjectScore> scores;
    std::vector<BrainGraph> predictions; // aligned with scores
    std::uint64_t seed = 0;
    bool cross_cohort = false;
    std::string config_echo;

    ScoreSummary overall() const { return summarize(scores); }

    std::vector<std::pair<std::size_t, ScoreSummary>> per_fold() const {
        std::vector<std::pair<std::size_t, ScoreSummary>> out;
        std::vector<std::size_t> folds;
        for (const auto& s : scores)
            if (std::find(folds.begin(), folds.end(), s.fold) == folds.end()) folds.push_back(s.fold);
        for (std::size_t f : folds) {
            std::vector<SubjectScore> subset;
            for (const auto& s : scores)
                if (s.fold == f) subset.push_back(s);
            out.emplace_back(f, summarize(subset));
        }
        return out;
    }

    void append(const EvalReport& other) {
        scores.insert(scores.end(), other.scores.begin(), other.scores.end());
        predictions.insert(predictions.end(), other.predictions.begin(), other.predictions.end());
        cross_cohort = cross_cohort || other.cross_cohort;
    }
};

/// RNG stream for one subject; independent of evaluation order.
inline std::mt19937_64 subject_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

/// Samples one prediction per test subject (stream id = position in `test_pairs`) and
/// scores it, together with `baseline`, against the true target adjacency.
inline EvalReport evaluate_model(ModelParams& params, std::span<const GraphPair> test_pairs,
                                 const NoiseSchedule& schedule, const FeatureScaler& scaler, const Tensor& baseline,
                                 std::uint64_t seed, std::size_t fold = 0, bool cross_cohort = false) {
    if (test_pairs.empty()) throw std::invalid_argument("evaluate_model: empty test set");
    EvalReport report;
    report.seed = seed;
    report.cross_cohort = cross_cohort;
    for (std::size_t i = 0; i < test_pairs.size(); ++i) {
        const GraphPair& pair = test_pairs[i];
        auto rng = subject_rng(seed, i);
        BrainGraph prediction =
            sample_target(params, pair.source, schedule, scaler, pair.target.metric_name, rng);
        const auto model = graph_distance(prediction.adjacency, pair.target.adjacency);
        const auto base = graph_distance(baseline, pair.target.adjacency);
        report.scores.push_back({pair.source.subject_id, pair.source.hemisphere, fold, model.mse, model.frobenius,
                                 base.mse, base.frobenius});
        report.predictions.push_back(std::move(prediction));
    }
    return report;
}

inline void write_eval_csv(const EvalReport& report, std::ostream& out) {
    out << "subject_id,hemisphere,mse,frobenius,baseline_mse,baseline_frobenius\n";
    for (const auto& s : report.scores) {
        out << csv::quote(s.subject_id) << ',' << to_string(s.hemisphere) << ',' << csv::format_double(s.mse) << ','
            << csv::format_double(s.frobenius) << ',' << csv::format_double(s.baseline_mse) << ','
            << csv::format_double(s.baseline_frobenius) << '\n';
    }
}

inline void write_eval_summary(const EvalReport& report, std::ostream& out) {
    auto line = [&](const std::string& label, const ScoreSummary& s) {
        out << label << ": n=" << s.count << " mse=" << s.mean_mse << " (sd " << s.std_mse
            << ") frobenius=" << s.mean_frobenius << " (sd " << s.std_frobenius
            << ") baseline_mse=" << s.mean_baseline_mse << " baseline_frobenius=" << s.mean_baseline_frobenius << '\n';
    };
    out << "seed: " << report.seed << '\n';
    out << "cross_cohort: " << (report.cross_cohort ? "yes" : "no") << '\n';
    for (const auto& [fold, s] : report.per_fold()) line("fold " + std::to_string(fold), s);
    line("overall", report.overall());
    if (!report.config_echo.empty()) out << report.config_echo;
}

/// 34×34 adjacency as CSV, no header.
inline void write_adjacency_csv(const Tensor& adjacency, std::ostream& out) {
    for (std::size_t i = 0; i < adjacency.rows(); ++i) {
        for (std::size_t j = 0; j < adjacency.cols(); ++j) {
            if (j) out << ',';
            out << csv::format_double(adjacency.at(i, j));
        }
        out << '\n';
    }
}

inline void write_nodes_csv(const BrainGraph& graph, std::ostream& out) {
    out << "roi_index,roi_name," << graph.metric_name << ",scaled\n";
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        out << i << ',' << (i < kRoiCount ? kDesikanRoiNames[i] : "") << ',' << csv::format_double(graph.nodes[i])
            << ',' << csv::format_double(i < graph.scaled_nodes.size() ? graph.scaled_nodes[i] : 0.0) << '\n';
    }
}

} // namespace grenol
