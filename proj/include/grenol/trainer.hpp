#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "grenol/adamw.hpp"
#include "grenol/autodiff.hpp"
#include "grenol/braingraph.hpp"
#include "grenol/csv.hpp"
#include "grenol/denoiser.hpp"
#include "grenol/error.hpp"
#include "grenol/schedule.hpp"

namespace grenol {

struct TrainConfig {
    std::size_t epochs = 500;
    double lr = 1e-3;
    double weight_decay = 1e-3;
    std::size_t batch_size = 0; // 0: the whole training fold
    std::size_t folds = 5;
    std::uint64_t seed = 0;
    ScheduleParams schedule;
    std::size_t patience = 0; // 0: early stopping off

    void validate() const {
        if (folds < 2) throw std::invalid_argument("train config: folds must be at least 2");
        if (epochs < 1) throw std::invalid_argument("train config: epochs must be at least 1");
        if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("train config: negative lr/weight decay");
        if (batch_size == 1) throw std::invalid_argument("train config: batch norm needs batch_size >= 2");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::uint64_t seed = 0;
    TrainConfig config;
    std::vector<std::string> train_subjects;
};

/// Mean over all elements of (ε − ε̂)².
inline Var mse_loss(const Var& target, const Var& prediction) { return mean(square(sub(target, prediction))); }

inline double mse_loss(std::span<const double> target, std::span<const double> prediction) {
    if (target.size() != prediction.size()) throw ShapeError("mse_loss: shape mismatch");
    if (target.empty()) throw ShapeError("mse_loss: empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = target[i] - prediction[i];
        total += d * d;
    }
    return total / static_cast<double>(target.size());
}

struct FoldSplit {
    std::vector<std::string> train;
    std::vector<std::string> test;
};

/// Seeded shuffle, then contiguous folds whose sizes differ by at most one.
inline std::vector<FoldSplit> kfold_split(const std::vector<std::string>& subjects, std::size_t folds,
                                          std::uint64_t seed) {
    if (folds < 2) throw std::invalid_argument("kfold_split: need at least 2 folds");
    if (folds > subjects.size()) {
        throw std::invalid_argument("kfold_split: " + std::to_string(folds) + " folds requested for " +
                                    std::to_string(subjects.size()) + " subjects");
    }
    std::vector<std::size_t> order(subjects.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
    }
    std::vector<FoldSplit> out(folds);
    const std::size_t base = subjects.size() / folds;
    const std::size_t extra = subjects.size() % folds;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < folds; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        std::vector<bool> in_test(subjects.size(), false);
        for (std::size_t k = pos; k < pos + len; ++k) in_test[order[k]] = true;
        for (std::size_t k = pos; k < pos + len; ++k) out[f].test.push_back(subjects[order[k]]);
        for (std::size_t i = 0; i < subjects.size(); ++i)
            if (!in_test[i]) out[f].train.push_back(subjects[i]);
        pos += len;
    }
    return out;
}

inline SourceGraph to_source(const BrainGraph& g) { return {g.scaled_nodes, g.adjacency}; }

/// Observation points for tests and audits: which subjects reach batch-norm statistics.
struct TrainHooks {
    std::function<void(std::span<const std::string> subjects)> on_batch;
};

struct TrainResult {
    ModelParams params;
    TrainReport report;
};

/// Minimizes the noise-regression loss with AdamW. Each epoch draws one uniform
/// timestep and one noise vector per subject.
inline TrainResult train_model(std::span<const GraphPair> dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
                               const TrainHooks& hooks = {}) {
    cfg.validate();
    if (dataset.size() < 2) throw std::invalid_argument("train_model: need at least 2 training subjects");
    const NoiseSchedule schedule(cfg.schedule);

    TrainResult result{init_params(model_cfg, cfg.seed), {}};
    result.report.seed = cfg.seed;
    result.report.config = cfg;
    for (const auto& pair : dataset) result.report.train_subjects.push_back(pair.source.subject_id);

    ModelParams& params = result.params;
    AdamW optimizer({cfg.lr, cfg.weight_decay});
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick_t(1, schedule.steps());

    const std::size_t n = dataset.size();
    const std::size_t batch = (cfg.batch_size == 0 || cfg.batch_size >= n) ? n : cfg.batch_size;
    const std::size_t N = model_cfg.node_count;

    std::vector<SourceGraph> sources;
    for (const auto& pair : dataset) sources.push_back(to_source(pair.source));
    SourceBatch full_batch;
    if (batch == n) full_batch = make_source_batch(sources);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        if (batch < n) {
            for (std::size_t i = n; i > 1; --i) {
                std::uniform_int_distribution<std::size_t> pick(0, i - 1);
                std::swap(order[i - 1], order[pick(rng)]);
            }
        }
        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t pos = 0; pos < n; ++batch_index) {
            std::size_t len = std::min(batch, n - pos);
            if (n - pos - len == 1) ++len; // never leave a single-subject batch
            const std::span<const std::size_t> idx(order.data() + pos, len);
            pos += len;

            Tensor noisy({len, N});
            Tensor noise({len, N});
            std::vector<std::size_t> ts(len);
            std::vector<std::string> ids;
            for (std::size_t b = 0; b < len; ++b) {
                const GraphPair& pair = dataset[idx[b]];
                if (pair.target.scaled_nodes.size() != N) throw ShapeError("train_model: target node count mismatch");
                ts[b] = pick_t(rng);
                const auto eps = sample_noise(rng, N, schedule.noise_std());
                const auto diffused = forward_diffuse(pair.target.scaled_nodes, ts[b], eps, schedule);
                std::copy(diffused.values.begin(), diffused.values.end(), noisy.data().begin() + b * N);
                std::copy(eps.begin(), eps.end(), noise.data().begin() + b * N);
                ids.push_back(pair.source.subject_id);
            }
            if (hooks.on_batch) hooks.on_batch(ids);

            SourceBatch local;
            if (len != n) {
                std::vector<SourceGraph> picked;
                for (std::size_t i : idx) picked.push_back(sources[i]);
                local = make_source_batch(picked);
            }
            const SourceBatch& src = len == n ? full_batch : local;

            Tape tape;
            Var prediction = predict_noise(tape, params, noisy, ts, src, TrainState::training());
            Var loss = mse_loss(tape.constant(std::move(noise)), prediction);
            const double value = loss.value()[0];
            if (!std::isfinite(value)) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", batch " << batch_index << ", t = [";
                for (std::size_t b = 0; b < ts.size(); ++b) msg << (b ? ", " : "") << ts[b];
                msg << ']';
                throw NumericError(msg.str());
            }
            params.zero_grad();
            tape.backward(loss);
            optimizer.step(params.learnable());
            loss_sum += value * static_cast<double>(len);
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const double mean_loss = loss_sum / static_cast<double>(n);
        result.report.epochs.push_back({epoch, mean_loss, seconds});

        if (cfg.patience > 0) {
            if (mean_loss < best) {
                best = mean_loss;
                since_best = 0;
            } else if (++since_best >= cfg.patience) {
                break;
            }
        }
    }
    return result;
}

/// Writes `epoch,mean_loss,seconds`, preceded by `#` lines describing the sampling choices.
inline void write_train_report(const TrainReport& report, std::ostream& out) {
    out << "# timestep sampling: one uniform t in [1," << report.config.schedule.steps << "] per subject per epoch\n";
    out << "# batch: " << (report.config.batch_size == 0 ? std::string("whole training fold")
                                                         : std::to_string(report.config.batch_size) + " subjects")
        << "; seed " << report.seed << '\n';
    out << "epoch,mean_loss,seconds\n";
    for (const auto& e : report.epochs) {
        out << e.epoch << ',' << csv::format_double(e.mean_loss) << ',' << csv::format_double(e.seconds) << '\n';
    }
}

} // namespace grenol
