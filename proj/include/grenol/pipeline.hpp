#pragma once

// Cross-validated train/evaluate runs tying the modules together.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grenol/braingraph.hpp"
#include "grenol/checkpoint.hpp"
#include "grenol/denoiser.hpp"
#include "grenol/evalmetrics.hpp"
#include "grenol/schedule.hpp"
#include "grenol/trainer.hpp"

namespace grenol {

struct ExperimentConfig {
    Hemisphere hemisphere = Hemisphere::lh;
    std::string source_metric = kMeanCurvature;
    std::string target_metric = kCorticalThickness;
    ModelConfig model;
    TrainConfig train;
};

struct ExperimentHooks {
    std::function<void(std::size_t fold, std::span<const std::string> subjects)> on_scaler_fit;
    std::function<void(std::size_t fold, std::span<const std::string> subjects)> on_batch;
};

inline std::vector<GraphPair> build_pairs(const CorticalTable& table, const std::vector<std::string>& subjects,
                                          const ExperimentConfig& exp, const FeatureScaler& scaler) {
    std::vector<GraphPair> pairs;
    pairs.reserve(subjects.size());
    for (const auto& id : subjects) {
        pairs.push_back(build_graph_pair(table, id, exp.hemisphere, exp.source_metric, exp.target_metric, scaler));
    }
    return pairs;
}

inline std::vector<Tensor> target_adjacencies(std::span<const GraphPair> pairs) {
    std::vector<Tensor> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.target.adjacency);
    return out;
}

struct FoldOutcome {
    std::size_t fold = 0;
    FoldSplit split;
    FeatureScaler scaler;
    TrainResult trained;
    Tensor baseline;
    EvalReport eval;
    std::optional<EvalReport> untrained_eval;

    CheckpointMeta checkpoint_meta(const ExperimentConfig& exp) const {
        return {exp.train.schedule, scaler, exp.hemisphere, exp.source_metric, exp.target_metric, split.train};
    }
};

/// Trains on `split.train` and scores `split.test`; the scaler, baseline and batch-norm
/// statistics are derived from training subjects only.
inline FoldOutcome run_fold(const CorticalTable& table, const FoldSplit& split, std::size_t fold,
                            const ExperimentConfig& exp, bool evaluate_untrained, const ExperimentHooks& hooks = {}) {
    FoldOutcome out;
    out.fold = fold;
    out.split = split;
    if (hooks.on_scaler_fit) hooks.on_scaler_fit(fold, split.train);
    out.scaler = fit_scaler(table, exp.hemisphere, split.train, {exp.source_metric, exp.target_metric});
    const auto train_pairs = build_pairs(table, split.train, exp, out.scaler);
    const auto test_pairs = build_pairs(table, split.test, exp, out.scaler);

    TrainConfig cfg = exp.train;
    cfg.seed = exp.train.seed + fold;
    TrainHooks train_hooks;
    if (hooks.on_batch) train_hooks.on_batch = [&](std::span<const std::string> ids) { hooks.on_batch(fold, ids); };
    out.trained = train_model(train_pairs, exp.model, cfg, train_hooks);

    const auto targets = target_adjacencies(train_pairs);
    out.baseline = baseline_mean_predictor(targets);
    const NoiseSchedule schedule(exp.train.schedule);
    out.eval = evaluate_model(out.trained.params, test_pairs, schedule, out.scaler, out.baseline, exp.train.seed, fold);
    if (evaluate_untrained) {
        ModelParams fresh = init_params(exp.model, cfg.seed);
        out.untrained_eval = evaluate_model(fresh, test_pairs, schedule, out.scaler, out.baseline, exp.train.seed, fold);
    }
    return out;
}

inline std::vector<FoldOutcome> cross_validate(const CorticalTable& table, const ExperimentConfig& exp,
                                               bool evaluate_untrained = false, const ExperimentHooks& hooks = {},
                                               const std::function<void(const FoldOutcome&)>& on_fold = {}) {
    exp.train.validate();
    const auto subjects = table.subjects(exp.hemisphere);
    const auto splits = kfold_split(subjects, exp.train.folds, exp.train.seed);
    std::vector<FoldOutcome> outcomes;
    for (std::size_t f = 0; f < splits.size(); ++f) {
        outcomes.push_back(run_fold(table, splits[f], f, exp, evaluate_untrained, hooks));
        if (on_fold) on_fold(outcomes.back());
    }
    return outcomes;
}

} // namespace grenol
