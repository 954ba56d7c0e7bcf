#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "grenol/braingraph.hpp"
#include "grenol/denoiser.hpp"
#include "grenol/grad_check.hpp"
#include "test_support.hpp"

using namespace grenol;
using grenol::test::random_tensor;

namespace {

ModelConfig reduced_config() {
    ModelConfig cfg;
    cfg.node_count = 4;
    cfg.conv_dim = 8;
    cfg.fc_dim = 16;
    cfg.pe_dim = 16;
    return cfg;
}

SourceGraph random_source(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> raw(n);
    for (double& v : raw) v = u(rng);
    return {raw, pairing_edges(raw)};
}

std::vector<SourceGraph> random_sources(std::size_t batch, std::size_t n, std::mt19937_64& rng) {
    std::vector<SourceGraph> out;
    for (std::size_t b = 0; b < batch; ++b) out.push_back(random_source(n, rng));
    return out;
}

Tensor encode(ModelParams& params, const SourceGraph& g) {
    Tape tape;
    const auto src = make_source_batch(std::span<const SourceGraph>(&g, 1));
    return encode_source(tape, params, src).value();
}

} // namespace

TEST(Init, DeterministicShapesAndZeroBiases) {
    ModelParams a = init_params(ModelConfig{}, 5);
    ModelParams b = init_params(ModelConfig{}, 5);
    ModelParams c = init_params(ModelConfig{}, 6);
    auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
    ASSERT_EQ(ta.size(), tb.size());
    bool differs = false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        EXPECT_EQ(ta[i].name, tb[i].name);
        EXPECT_EQ(*ta[i].tensor, *tb[i].tensor) << ta[i].name;
        differs = differs || !(*ta[i].tensor == *tc[i].tensor);
    }
    EXPECT_TRUE(differs);
    EXPECT_EQ(a.fc[0].weight.shape(), (Shape{48, 128}));
    EXPECT_EQ(a.conv[0].node_weight.shape(), (Shape{1, 48}));
    EXPECT_EQ(a.conv[2].edge_weight.shape(), (Shape{48, 48}));
    EXPECT_EQ(a.head.weight.shape(), (Shape{128, 1}));
    for (const auto& [name, t] : a.tensors()) {
        if (name.ends_with("bias") || name == "norm.beta" || name == "norm.running_mean") {
            for (double v : t->data()) EXPECT_EQ(v, 0.0) << name;
        }
        if (name == "norm.gamma" || name == "norm.running_var") {
            for (double v : t->data()) EXPECT_EQ(v, 1.0) << name;
        }
    }
}

TEST(Init, GlorotBounds) {
    ModelParams p = init_params(ModelConfig{}, 1);
    const double a = std::sqrt(6.0 / (48.0 + 128.0));
    double max_seen = 0.0;
    for (double v : p.fc[0].weight.data()) {
        EXPECT_LE(std::abs(v), a);
        max_seen = std::max(max_seen, std::abs(v));
    }
    EXPECT_GT(max_seen, 0.9 * a);
}

TEST(Init, LearnableExcludesRunningStats) {
    ModelParams p = init_params(reduced_config(), 1);
    const auto all = p.tensors();
    const auto learn = p.learnable();
    EXPECT_EQ(all.size(), learn.size() + 2);
    std::set<std::string> names;
    for (const auto& t : learn) {
        EXPECT_TRUE(names.insert(t.name).second) << t.name;
        EXPECT_EQ(t.name.find("running"), std::string::npos);
    }
}

TEST(Config, RejectsInvalid) {
    ModelConfig c;
    c.pe_dim = 64;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.conv_dim = 0;
    EXPECT_THROW(init_params(c, 1), std::invalid_argument);
}

TEST(NNConv, TwoNodeToy) {
    NNConvParams layer;
    layer.node_weight = Tensor({1, 1}, 1.0);
    layer.bias = Tensor({1, 1}, 0.0);
    layer.edge_weight = Tensor({1, 1}, 1.0);
    layer.edge_bias = Tensor({1, 1}, 0.0);
    Tensor adj = Tensor::matrix(2, 2);
    adj.at(0, 1) = adj.at(1, 0) = 0.5;
    const SourceGraph g{{1.0, 0.0}, adj};
    const auto src = make_source_batch(std::span<const SourceGraph>(&g, 1));
    Tape tape;
    const Tensor out =
        nnconv_forward(tape.constant(src.nodes), tape.constant(src.edges), tape.constant(src.others), layer).value();
    EXPECT_DOUBLE_EQ(out[0], 1.0);
    EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(NNConv, ZeroEdgesIsPureNodeTransform) {
    std::mt19937_64 rng(2);
    NNConvParams layer{random_tensor({3, 5}, rng), random_tensor({1, 5}, rng), random_tensor({3, 5}, rng),
                       Tensor({3, 5}, 0.0)};
    const std::size_t n = 6;
    Tape tape;
    const Tensor h = random_tensor({n, 3}, rng);
    const Tensor out = nnconv_forward(tape.constant(h), tape.constant(Tensor({1, n, n}, 0.0)),
                                      tape.constant(Tensor({1, n, n}, 1.0)), layer)
                           .value();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 5; ++c) {
            double expected = layer.bias[c];
            for (std::size_t k = 0; k < 3; ++k) expected += h.at(i, k) * layer.node_weight.at(k, c);
            EXPECT_NEAR(out.at(i, c), expected, 1e-14);
        }
    }
}

TEST(NNConv, MatchesExplicitNeighbourSum) {
    // Direct evaluation of n'_i = Θᵀn_i + Σ_{j≠i} (e_ij·A + B)ᵀ n_j + bias.
    std::mt19937_64 rng(3);
    const std::size_t n = 5, din = 2, dout = 3;
    NNConvParams layer{random_tensor({din, dout}, rng), random_tensor({1, dout}, rng), random_tensor({din, dout}, rng),
                       random_tensor({din, dout}, rng)};
    const Tensor h = random_tensor({n, din}, rng);
    std::vector<double> raw(n);
    for (double& v : raw) v = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
    const Tensor adj = pairing_edges(raw);
    Tensor edges({1, n, n});
    for (std::size_t k = 0; k < n * n; ++k) edges[k] = adj[k];
    Tensor others({1, n, n}, 1.0);
    for (std::size_t i = 0; i < n; ++i) others[i * n + i] = 0.0;
    Tape tape;
    const Tensor out = nnconv_forward(tape.constant(h), tape.constant(edges), tape.constant(others), layer).value();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dout; ++c) {
            double v = layer.bias[c];
            for (std::size_t k = 0; k < din; ++k) v += h.at(i, k) * layer.node_weight.at(k, c);
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                for (std::size_t k = 0; k < din; ++k) {
                    v += h.at(j, k) * (adj.at(i, j) * layer.edge_weight.at(k, c) + layer.edge_bias.at(k, c));
                }
            }
            EXPECT_NEAR(out.at(i, c), v, 1e-13);
        }
    }
}

TEST(NNConv, PermutationEquivariance) {
    std::mt19937_64 rng(4);
    ModelParams params = init_params(ModelConfig{}, 9);
    for (int trial = 0; trial < 5; ++trial) {
        const SourceGraph g = random_source(34, rng);
        std::vector<std::size_t> perm(34);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        SourceGraph pg{std::vector<double>(34), Tensor::matrix(34, 34)};
        for (std::size_t i = 0; i < 34; ++i) {
            pg.nodes[i] = g.nodes[perm[i]];
            for (std::size_t j = 0; j < 34; ++j) pg.adjacency.at(i, j) = g.adjacency.at(perm[i], perm[j]);
        }
        const Tensor out = encode(params, g);
        const Tensor pout = encode(params, pg);
        for (std::size_t i = 0; i < 34; ++i)
            for (std::size_t c = 0; c < 48; ++c) ASSERT_NEAR(pout.at(i, c), out.at(perm[i], c), 1e-10);
    }
}

TEST(PositionalEmbedding, Identities) {
    const auto zero = positional_embedding(0.0, 8);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(zero[i], i % 2 == 0 ? 0.0 : 1.0);
    const auto pe = positional_embedding(37.0, 128);
    EXPECT_DOUBLE_EQ(pe[0], std::sin(37.0));
    EXPECT_DOUBLE_EQ(pe[1], std::cos(37.0));
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(pe[2 * i] * pe[2 * i] + pe[2 * i + 1] * pe[2 * i + 1], 1.0, 1e-15);
    EXPECT_NEAR(pe[2 * 10], std::sin(37.0 / std::pow(10000.0, 20.0 / 128.0)), 1e-14);
    EXPECT_THROW(positional_embedding(1.0, 7), std::invalid_argument);
}

TEST(PositionalEmbedding, DistinctOverAllSteps) {
    std::vector<std::vector<double>> rows;
    for (int t = 1; t <= 100; ++t) rows.push_back(positional_embedding(t, 128));
    double closest = 1e9;
    for (std::size_t a = 0; a < rows.size(); ++a) {
        for (std::size_t b = a + 1; b < rows.size(); ++b) {
            double d = 0.0;
            for (std::size_t i = 0; i < 128; ++i) d += (rows[a][i] - rows[b][i]) * (rows[a][i] - rows[b][i]);
            closest = std::min(closest, std::sqrt(d));
        }
    }
    EXPECT_GT(closest, 1e-3);
}

TEST(PredictNoise, ShapeAndEvalDeterminism) {
    std::mt19937_64 rng(5);
    ModelParams params = init_params(ModelConfig{}, 2);
    const auto graphs = random_sources(3, 34, rng);
    const auto src = make_source_batch(graphs);
    const Tensor noisy = random_tensor({3, 34}, rng, 0.0, 1.0);
    const std::vector<std::size_t> ts = {1, 50, 100};
    const Tensor a = predict_noise(params, noisy, ts, src, TrainState::evaluation());
    const Tensor b = predict_noise(params, noisy, ts, src, TrainState::evaluation());
    EXPECT_EQ(a.shape(), noisy.shape());
    EXPECT_EQ(a, b);
    const std::vector<std::size_t> short_ts = {1, 2};
    EXPECT_THROW(predict_noise(params, noisy, short_ts, src, TrainState::evaluation()), ShapeError);
}

TEST(PredictNoise, ZeroHeadLeavesNormalizedInput) {
    std::mt19937_64 rng(6);
    ModelParams params = init_params(ModelConfig{}, 3);
    params.head.weight = Tensor(params.head.weight.shape(), 0.0);
    params.head.bias = Tensor(params.head.bias.shape(), 0.0);
    const auto graphs = random_sources(4, 34, rng);
    const auto src = make_source_batch(graphs);
    const Tensor noisy = random_tensor({4, 34}, rng, 0.0, 1.0);
    const std::vector<std::size_t> ts = {3, 3, 80, 12};

    const Tensor eval = predict_noise(params, noisy, ts, src, TrainState::evaluation());
    for (std::size_t k = 0; k < noisy.size(); ++k) EXPECT_NEAR(eval[k], noisy[k] / std::sqrt(1.0 + 1e-5), 1e-14);

    TrainState frozen = TrainState::training();
    frozen.update_running_stats = false;
    const Tensor train = predict_noise(params, noisy, ts, src, frozen);
    for (std::size_t i = 0; i < 34; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t b = 0; b < 4; ++b) mean += noisy.at(b, i) / 4.0;
        for (std::size_t b = 0; b < 4; ++b) var += (noisy.at(b, i) - mean) * (noisy.at(b, i) - mean) / 4.0;
        for (std::size_t b = 0; b < 4; ++b) {
            EXPECT_NEAR(train.at(b, i), (noisy.at(b, i) - mean) / std::sqrt(var + 1e-5), 1e-12);
        }
    }
}

TEST(PredictNoise, RunningStatsUpdate) {
    std::mt19937_64 rng(7);
    ModelParams params = init_params(reduced_config(), 3);
    const auto graphs = random_sources(3, 4, rng);
    const auto src = make_source_batch(graphs);
    const Tensor noisy = random_tensor({3, 4}, rng);
    const std::vector<std::size_t> ts = {1, 2, 3};
    predict_noise(params, noisy, ts, src, TrainState::training());
    for (std::size_t i = 0; i < 4; ++i) {
        const double mean = (noisy.at(0, i) + noisy.at(1, i) + noisy.at(2, i)) / 3.0;
        double ss = 0.0;
        for (std::size_t b = 0; b < 3; ++b) ss += (noisy.at(b, i) - mean) * (noisy.at(b, i) - mean);
        EXPECT_NEAR(params.norm.running_mean[i], 0.1 * mean, 1e-15);
        EXPECT_NEAR(params.norm.running_var[i], 0.9 + 0.1 * ss / 2.0, 1e-15);
    }
    const Tensor before = params.norm.running_mean;
    predict_noise(params, noisy, ts, src, TrainState::evaluation());
    EXPECT_EQ(params.norm.running_mean, before);
}

TEST(PredictNoise, TrainModeNeedsTwoSubjects) {
    std::mt19937_64 rng(8);
    ModelParams params = init_params(reduced_config(), 3);
    const auto graphs = random_sources(1, 4, rng);
    const std::vector<std::size_t> ts = {4};
    EXPECT_THROW(predict_noise(params, random_tensor({1, 4}, rng), ts, make_source_batch(graphs), TrainState::training()),
                 std::invalid_argument);
}

TEST(PredictNoise, DuplicatedBatchKeepsStatistics) {
    std::mt19937_64 rng(9);
    ModelParams params = init_params(ModelConfig{}, 4);
    auto graphs = random_sources(3, 34, rng);
    const Tensor noisy = random_tensor({3, 34}, rng, 0.0, 1.0);
    const std::vector<std::size_t> ts = {5, 60, 99};

    std::vector<SourceGraph> doubled = graphs;
    doubled.insert(doubled.end(), graphs.begin(), graphs.end());
    Tensor noisy2({6, 34});
    for (std::size_t k = 0; k < noisy.size(); ++k) noisy2[k] = noisy2[noisy.size() + k] = noisy[k];
    std::vector<std::size_t> ts2 = ts;
    ts2.insert(ts2.end(), ts.begin(), ts.end());

    ModelParams single = params, twice = params;
    const Tensor a = predict_noise(single, noisy, ts, make_source_batch(graphs), TrainState::training());
    const Tensor b = predict_noise(twice, noisy2, ts2, make_source_batch(doubled), TrainState::training());
    for (std::size_t k = 0; k < noisy.size(); ++k) {
        EXPECT_EQ(b[k], b[noisy.size() + k]);
        EXPECT_NEAR(b[k], a[k], 1e-12);
    }
    for (std::size_t i = 0; i < 34; ++i) EXPECT_NEAR(twice.norm.running_mean[i], single.norm.running_mean[i], 1e-15);
}

TEST(PredictNoise, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(10);
    ModelParams params = init_params(reduced_config(), 11);
    // Nonzero biases and batch-norm affine so every path is exercised away from init.
    for (auto& [name, t] : params.learnable())
        for (double& v : t->data()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
    const auto graphs = random_sources(3, 4, rng);
    const auto src = make_source_batch(graphs);
    const Tensor noisy = random_tensor({3, 4}, rng, 0.0, 1.0);
    const Tensor eps = random_tensor({3, 4}, rng, -0.02, 0.02);
    const std::vector<std::size_t> ts = {1, 40, 100};
    TrainState frozen = TrainState::training();
    frozen.update_running_stats = false;
    const auto report = grad_check(
        [&](Tape& tape) {
            Var pred = predict_noise(tape, params, noisy, ts, src, frozen);
            return mean(square(sub(tape.constant(eps), pred)));
        },
        params.learnable(), 1e-5, 1e-4);
    for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
    EXPECT_TRUE(report.passed());
}

TEST(PredictNoise, NoDeadParameters) {
    std::mt19937_64 rng(12);
    ModelParams params = init_params(ModelConfig{}, 13);
    const auto graphs = random_sources(4, 34, rng);
    const auto src = make_source_batch(graphs);
    const Tensor noisy = random_tensor({4, 34}, rng, 0.0, 1.0);
    const std::vector<std::size_t> ts = {1, 30, 60, 100};
    params.zero_grad();
    Tape tape;
    Var loss = mean(square(predict_noise(tape, params, noisy, ts, src, TrainState::training())));
    tape.backward(loss);
    for (const auto& [name, t] : params.learnable()) {
        ASSERT_TRUE(t->has_grad()) << name;
        const bool any = std::any_of(t->grad().begin(), t->grad().end(), [](double g) { return g != 0.0; });
        EXPECT_TRUE(any) << name;
    }
}
