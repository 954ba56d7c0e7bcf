#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grenol/adamw.hpp"
#include "grenol/autodiff.hpp"
#include "grenol/tensor.hpp"

namespace grenol {

struct ModelConfig {
    std::size_t conv_layers = 3;
    std::size_t conv_dim = 48;
    std::size_t fc_layers = 3;
    std::size_t fc_dim = 128;
    std::size_t node_count = 34;
    std::size_t pe_dim = 128;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    void validate() const {
        if (conv_layers == 0 || conv_dim == 0 || fc_layers == 0 || fc_dim == 0 || node_count == 0 || pe_dim == 0) {
            throw std::invalid_argument("model config: all sizes must be positive");
        }
        if (pe_dim != fc_dim) throw std::invalid_argument("model config: pe_dim must equal fc_dim");
        if (pe_dim % 2 != 0) throw std::invalid_argument("model config: pe_dim must be even");
        if (!(bn_momentum > 0.0 && bn_momentum <= 1.0) || !(bn_eps > 0.0)) {
            throw std::invalid_argument("model config: invalid batch-norm constants");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Edge-conditioned convolution: the edge network maps a scalar edge e to the
/// d_in×d_out matrix e·edge_weight + edge_bias.
struct NNConvParams {
    Tensor node_weight; // d_in×d_out
    Tensor bias;        // 1×d_out
    Tensor edge_weight; // d_in×d_out
    Tensor edge_bias;   // d_in×d_out
};

struct LinearParams {
    Tensor weight; // in×out
    Tensor bias;   // 1×out
};

struct BatchNormParams {
    Tensor gamma;        // 1×N
    Tensor beta;         // 1×N
    Tensor running_mean; // 1×N, not learnable
    Tensor running_var;  // 1×N, not learnable
};

struct ModelParams {
    ModelConfig config;
    std::vector<NNConvParams> conv;
    std::vector<LinearParams> fc;
    LinearParams head;
    BatchNormParams norm;

    /// Every tensor, learnable or not, in a fixed order. Names are stable and used by
    /// the checkpoint format.
    std::vector<NamedTensor> tensors() {
        std::vector<NamedTensor> out;
        for (std::size_t l = 0; l < conv.size(); ++l) {
            const std::string p = "conv." + std::to_string(l) + ".";
            out.push_back({p + "node_weight", &conv[l].node_weight});
            out.push_back({p + "bias", &conv[l].bias});
            out.push_back({p + "edge_weight", &conv[l].edge_weight});
            out.push_back({p + "edge_bias", &conv[l].edge_bias});
        }
        for (std::size_t l = 0; l < fc.size(); ++l) {
            const std::string p = "fc." + std::to_string(l) + ".";
            out.push_back({p + "weight", &fc[l].weight});
            out.push_back({p + "bias", &fc[l].bias});
        }
        out.push_back({"head.weight", &head.weight});
        out.push_back({"head.bias", &head.bias});
        out.push_back({"norm.gamma", &norm.gamma});
        out.push_back({"norm.beta", &norm.beta});
        out.push_back({"norm.running_mean", &norm.running_mean});
        out.push_back({"norm.running_var", &norm.running_var});
        return out;
    }

    /// The tensors the optimizer updates (running statistics excluded).
    std::vector<NamedTensor> learnable() {
        std::vector<NamedTensor> out;
        for (auto& t : tensors())
            if (t.tensor->requires_grad()) out.push_back(t);
        return out;
    }

    void zero_grad() {
        for (auto& t : learnable()) t.tensor->zero_grad();
    }
};

namespace detail {

inline Tensor glorot(std::mt19937_64& rng, std::size_t fan_in, std::size_t fan_out, Shape shape) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-a, a);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = uniform(rng);
    t.set_requires_grad(true);
    return t;
}

inline Tensor learnable_fill(Shape shape, double value) {
    Tensor t(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

} // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    ModelParams p;
    p.config = cfg;
    std::size_t d_in = 1;
    for (std::size_t l = 0; l < cfg.conv_layers; ++l) {
        const std::size_t d_out = cfg.conv_dim;
        NNConvParams layer;
        layer.node_weight = detail::glorot(rng, d_in, d_out, {d_in, d_out});
        layer.bias = detail::learnable_fill({1, d_out}, 0.0);
        layer.edge_weight = detail::glorot(rng, 1, d_in * d_out, {d_in, d_out});
        layer.edge_bias = detail::learnable_fill({d_in, d_out}, 0.0);
        p.conv.push_back(std::move(layer));
        d_in = d_out;
    }
    for (std::size_t l = 0; l < cfg.fc_layers; ++l) {
        const std::size_t d_out = cfg.fc_dim;
        p.fc.push_back({detail::glorot(rng, d_in, d_out, {d_in, d_out}), detail::learnable_fill({1, d_out}, 0.0)});
        d_in = d_out;
    }
    p.head = {detail::glorot(rng, d_in, 1, {d_in, 1}), detail::learnable_fill({1, 1}, 0.0)};
    p.norm.gamma = detail::learnable_fill({1, cfg.node_count}, 1.0);
    p.norm.beta = detail::learnable_fill({1, cfg.node_count}, 0.0);
    p.norm.running_mean = Tensor({1, cfg.node_count}, 0.0);
    p.norm.running_var = Tensor({1, cfg.node_count}, 1.0);
    return p;
}

/// Transformer sinusoidal embedding: [sin(t·w_0), cos(t·w_0), sin(t·w_1), ...] with
/// w_i = 10000^(−2i/dim).
inline std::vector<double> positional_embedding(double t, std::size_t dim) {
    if (dim % 2 != 0) throw std::invalid_argument("positional_embedding: dimension must be even");
    std::vector<double> pe(dim);
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(dim));
        pe[2 * i] = std::sin(t * freq);
        pe[2 * i + 1] = std::cos(t * freq);
    }
    return pe;
}

/// Source graph as seen by the network: scaled node features and the adjacency
/// built from raw values.
struct SourceGraph {
    std::vector<double> nodes;
    Tensor adjacency;
};

/// A batch of source graphs laid out for the encoder: nodes stacked to (B·N)×1,
/// adjacencies as B×N×N blocks, plus the matching "all other nodes" blocks.
struct SourceBatch {
    std::size_t batch = 0;
    std::size_t nodes_per_graph = 0;
    Tensor nodes;
    Tensor edges;
    Tensor others;
};

inline SourceBatch make_source_batch(std::span<const SourceGraph> graphs) {
    if (graphs.empty()) throw std::invalid_argument("make_source_batch: empty batch");
    const std::size_t n = graphs.front().nodes.size();
    SourceBatch out;
    out.batch = graphs.size();
    out.nodes_per_graph = n;
    out.nodes = Tensor::matrix(out.batch * n, 1);
    out.edges = Tensor({out.batch, n, n});
    out.others = Tensor({out.batch, n, n}, 1.0);
    for (std::size_t b = 0; b < out.batch; ++b) {
        const auto& g = graphs[b];
        if (g.nodes.size() != n || g.adjacency.shape() != Shape{n, n}) {
            throw ShapeError("make_source_batch: graph " + std::to_string(b) + " has shape " +
                             shape_string(g.adjacency.shape()) + " with " + std::to_string(g.nodes.size()) +
                             " nodes, expected " + std::to_string(n));
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.nodes[b * n + i] = g.nodes[i];
            out.others[b * n * n + i * n + i] = 0.0;
            for (std::size_t j = 0; j < n; ++j) out.edges[b * n * n + i * n + j] = i == j ? 0.0 : g.adjacency.at(i, j);
        }
    }
    return out;
}

/// One edge-conditioned convolution over a batch of fully connected graphs:
/// n'_i = Θ·n_i + Σ_{j≠i} M(e_ij)·n_j + bias with M(e) = e·A + B. Because M is affine in
/// e, the sum factors into (E·H)·A + ((J − I)·H)·B.
inline Var nnconv_forward(const Var& h, const Var& edges, const Var& others, NNConvParams& layer) {
    Tape& tape = h.tape();
    Var self = matmul(h, tape.parameter(layer.node_weight));
    Var edge_msg = matmul(block_matmul(edges, h), tape.parameter(layer.edge_weight));
    Var bias_msg = matmul(block_matmul(others, h), tape.parameter(layer.edge_bias));
    return add_row(add(add(self, edge_msg), bias_msg), tape.parameter(layer.bias));
}

/// Runs the NNConv stack over the source batch; ReLU between layers, none after the last.
inline Var encode_source(Tape& tape, ModelParams& params, const SourceBatch& src) {
    Var h = tape.constant(src.nodes);
    Var edges = tape.constant(src.edges);
    Var others = tape.constant(src.others);
    for (std::size_t l = 0; l < params.conv.size(); ++l) {
        h = nnconv_forward(h, edges, others, params.conv[l]);
        if (l + 1 < params.conv.size()) h = relu(h);
    }
    return h;
}

struct TrainState {
    enum class Mode { train, eval };
    Mode mode = Mode::eval;
    bool update_running_stats = true;

    static TrainState training() { return {Mode::train, true}; }
    static TrainState evaluation() { return {Mode::eval, true}; }
};

/// ε̂ = BN(noisy) − m(source, t).
///
/// `noisy` is B×N, one row per subject; `timesteps` holds one t per row. In train mode
/// batch norm uses the batch statistics and (optionally) folds them into the running
/// estimates; in eval mode it uses the running estimates.
inline Var predict_noise(Tape& tape, ModelParams& params, const Tensor& noisy, std::span<const std::size_t> timesteps,
                         const SourceBatch& src, const TrainState& state) {
    const ModelConfig& cfg = params.config;
    const std::size_t B = src.batch;
    const std::size_t N = src.nodes_per_graph;
    if (noisy.shape() != Shape{B, N} || timesteps.size() != B || N != cfg.node_count) {
        throw ShapeError("predict_noise: noisy " + shape_string(noisy.shape()) + " with " +
                         std::to_string(timesteps.size()) + " timesteps does not match source batch [" +
                         std::to_string(B) + ", " + std::to_string(N) + "] / node_count " +
                         std::to_string(cfg.node_count));
    }

    Var h = encode_source(tape, params, src);

    Tensor pe = Tensor::matrix(B * N, cfg.pe_dim);
    for (std::size_t b = 0; b < B; ++b) {
        const auto row = positional_embedding(static_cast<double>(timesteps[b]), cfg.pe_dim);
        for (std::size_t i = 0; i < N; ++i) std::copy(row.begin(), row.end(), pe.data().begin() + (b * N + i) * cfg.pe_dim);
    }
    Var z = add_row(matmul(h, tape.parameter(params.fc[0].weight)), tape.parameter(params.fc[0].bias));
    z = relu(add(z, tape.constant(std::move(pe))));
    for (std::size_t l = 1; l < params.fc.size(); ++l) {
        z = relu(add_row(matmul(z, tape.parameter(params.fc[l].weight)), tape.parameter(params.fc[l].bias)));
    }
    Var m = add_row(matmul(z, tape.parameter(params.head.weight)), tape.parameter(params.head.bias));
    m = reshape(m, {B, N});

    // The noisy input carries no gradient, so normalization is plain arithmetic and
    // only the affine part is recorded.
    BatchNormParams& bn = params.norm;
    Tensor normalized({B, N});
    if (state.mode == TrainState::Mode::train) {
        if (B < 2) throw std::invalid_argument("predict_noise: train-mode batch norm needs at least 2 subjects");
        for (std::size_t i = 0; i < N; ++i) {
            double mean = 0.0;
            for (std::size_t b = 0; b < B; ++b) mean += noisy[b * N + i];
            mean /= static_cast<double>(B);
            double var = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double d = noisy[b * N + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(B);
            const double inv = 1.0 / std::sqrt(var + cfg.bn_eps);
            for (std::size_t b = 0; b < B; ++b) normalized[b * N + i] = (noisy[b * N + i] - mean) * inv;
            if (state.update_running_stats) {
                const double unbiased = var * static_cast<double>(B) / static_cast<double>(B - 1);
                bn.running_mean[i] = (1.0 - cfg.bn_momentum) * bn.running_mean[i] + cfg.bn_momentum * mean;
                bn.running_var[i] = (1.0 - cfg.bn_momentum) * bn.running_var[i] + cfg.bn_momentum * unbiased;
            }
        }
    } else {
        for (std::size_t i = 0; i < N; ++i) {
            const double inv = 1.0 / std::sqrt(bn.running_var[i] + cfg.bn_eps);
            for (std::size_t b = 0; b < B; ++b) normalized[b * N + i] = (noisy[b * N + i] - bn.running_mean[i]) * inv;
        }
    }
    Var b = add_row(mul_row(tape.constant(std::move(normalized)), tape.parameter(bn.gamma)), tape.parameter(bn.beta));
    return sub(b, m);
}

/// Convenience wrapper returning the B×N prediction without keeping the tape.
inline Tensor predict_noise(ModelParams& params, const Tensor& noisy, std::span<const std::size_t> timesteps,
                            const SourceBatch& src, const TrainState& state) {
    Tape tape;
    return predict_noise(tape, params, noisy, timesteps, src, state).value();
}

} // namespace grenol
