#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "grenol/evalmetrics.hpp"
#include "grenol/pipeline.hpp"
#include "test_support.hpp"

using namespace grenol;
using grenol::test::random_tensor;

TEST(GraphDistance, WorkedExample) {
    const Tensor a({2, 2}, std::vector<double>{0, 1, 1, 0});
    const Tensor b({2, 2}, 0.0);
    const auto d = graph_distance(a, b);
    EXPECT_DOUBLE_EQ(d.frobenius, std::sqrt(2.0));
    EXPECT_DOUBLE_EQ(d.mse, 0.5);
    EXPECT_EQ(graph_distance(a, a).frobenius, 0.0);
    EXPECT_THROW(graph_distance(a, Tensor({3, 3}, 0.0)), ShapeError);
}

TEST(GraphDistance, MetricProperties) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor a = random_tensor({34, 34}, rng, 0, 1);
        const Tensor b = random_tensor({34, 34}, rng, 0, 1);
        const Tensor c = random_tensor({34, 34}, rng, 0, 1);
        const auto ab = graph_distance(a, b);
        EXPECT_EQ(ab.frobenius, graph_distance(b, a).frobenius);
        EXPECT_NEAR(ab.frobenius * ab.frobenius, ab.mse * 1156.0, 1e-12);
        EXPECT_LE(ab.frobenius, graph_distance(a, c).frobenius + graph_distance(c, b).frobenius + 1e-12);
    }
}

TEST(Baseline, ElementwiseMean) {
    const std::vector<Tensor> targets = {Tensor({2, 2}, std::vector<double>{0, 1, 1, 0}),
                                         Tensor({2, 2}, std::vector<double>{0, 0.5, 0.5, 0})};
    const Tensor m = baseline_mean_predictor(targets);
    EXPECT_EQ(m.data(), (std::vector<double>{0, 0.75, 0.75, 0}));
    EXPECT_THROW(baseline_mean_predictor(std::vector<Tensor>{}), std::invalid_argument);
}

TEST(Summary, MatchesRecomputedAggregates) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    EvalReport report;
    for (int i = 0; i < 17; ++i)
        report.scores.push_back({"s" + std::to_string(i), Hemisphere::lh, std::size_t(i % 3), u(rng), u(rng), u(rng), u(rng)});
    const auto s = report.overall();
    double mse = 0, frob = 0, bm = 0, bf = 0;
    for (const auto& r : report.scores) {
        mse += r.mse;
        frob += r.frobenius;
        bm += r.baseline_mse;
        bf += r.baseline_frobenius;
    }
    EXPECT_NEAR(s.mean_mse, mse / 17, 1e-12);
    EXPECT_NEAR(s.mean_frobenius, frob / 17, 1e-12);
    EXPECT_NEAR(s.mean_baseline_mse, bm / 17, 1e-12);
    EXPECT_NEAR(s.mean_baseline_frobenius, bf / 17, 1e-12);
    double var = 0;
    for (const auto& r : report.scores) var += (r.frobenius - frob / 17) * (r.frobenius - frob / 17);
    EXPECT_NEAR(s.std_frobenius, std::sqrt(var / 17), 1e-12);

    const auto folds = report.per_fold();
    ASSERT_EQ(folds.size(), 3u);
    std::size_t total = 0;
    for (const auto& [f, sum] : folds) total += sum.count;
    EXPECT_EQ(total, 17u);
}

TEST(Report, CsvColumnsAndRows) {
    EvalReport report;
    report.scores.push_back({"a", Hemisphere::rh, 0, 0.25, 0.5, 0.125, 0.75});
    std::ostringstream out;
    write_eval_csv(report, out);
    EXPECT_EQ(out.str(), "subject_id,hemisphere,mse,frobenius,baseline_mse,baseline_frobenius\na,rh,0.25,0.5,0.125,0.75\n");
}

TEST(SubjectRng, StreamsAreIndependentOfOrder) {
    auto a = subject_rng(5, 3);
    auto b = subject_rng(5, 3);
    auto c = subject_rng(5, 4);
    EXPECT_EQ(a(), b());
    EXPECT_NE(subject_rng(5, 3)(), c());
}

class EvaluateModel : public ::testing::Test {
protected:
    void SetUp() override {
        table = generate_synthetic_dataset(40, 31);
        exp.model.conv_dim = 16;
        exp.model.fc_dim = 32;
        exp.model.pe_dim = 32;
        exp.train.epochs = 60;
        exp.train.seed = 2;
        const auto ids = table.subjects(exp.hemisphere);
        split.train.assign(ids.begin(), ids.begin() + 20);
        split.test.assign(ids.begin() + 20, ids.end());
    }
    CorticalTable table;
    ExperimentConfig exp;
    FoldSplit split;
};

TEST_F(EvaluateModel, TrainedBeatsUntrainedAndIsReproducible) {
    const auto outcome = run_fold(table, split, 0, exp, true);
    ASSERT_EQ(outcome.eval.scores.size(), 20u);
    ASSERT_TRUE(outcome.untrained_eval.has_value());
    EXPECT_LT(outcome.eval.overall().mean_frobenius, outcome.untrained_eval->overall().mean_frobenius);

    // Same params, seed and pairs: identical scores on a second pass.
    FoldOutcome copy = outcome;
    const auto pairs = build_pairs(table, split.test, exp, outcome.scaler);
    const auto again = evaluate_model(copy.trained.params, pairs, NoiseSchedule(exp.train.schedule), outcome.scaler,
                                      outcome.baseline, exp.train.seed, 0);
    for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_EQ(again.scores[i].frobenius, outcome.eval.scores[i].frobenius);
        EXPECT_EQ(again.scores[i].baseline_mse, outcome.eval.scores[i].baseline_mse);
    }

    // Evaluating a subset keeps each subject's score (one stream per subject position).
    const auto first = evaluate_model(copy.trained.params, std::span<const GraphPair>(pairs.data(), 1),
                                      NoiseSchedule(exp.train.schedule), outcome.scaler, outcome.baseline, exp.train.seed);
    EXPECT_EQ(first.scores[0].frobenius, outcome.eval.scores[0].frobenius);

    std::ostringstream out;
    write_eval_summary(outcome.eval, out);
    EXPECT_NE(out.str().find("overall: n=20"), std::string::npos);
}
