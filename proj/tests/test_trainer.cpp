#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grenol/adamw.hpp"
#include "grenol/checkpoint.hpp"
#include "grenol/pipeline.hpp"
#include "grenol/trainer.hpp"

using namespace grenol;

namespace {

std::vector<GraphPair> synthetic_pairs(std::size_t n, std::uint64_t seed, FeatureScaler* scaler_out = nullptr) {
    const auto table = generate_synthetic_dataset(n, seed);
    const auto subjects = table.subjects(Hemisphere::lh);
    const auto scaler = fit_scaler(table, Hemisphere::lh, subjects, {kMeanCurvature, kCorticalThickness});
    if (scaler_out) *scaler_out = scaler;
    ExperimentConfig exp;
    return build_pairs(table, subjects, exp, scaler);
}

TrainConfig smoke_config(std::size_t epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.seed = 3;
    cfg.schedule.steps = 20;
    return cfg;
}

ModelConfig small_model() {
    ModelConfig m;
    m.conv_dim = 8;
    m.fc_dim = 16;
    m.pe_dim = 16;
    return m;
}

std::string serialize(ModelParams& params, const CheckpointMeta& meta) {
    std::ostringstream out(std::ios::binary);
    write_checkpoint(out, params, meta);
    return out.str();
}

} // namespace

TEST(MseLoss, WorkedExamples) {
    const std::vector<double> e = {0.3, -0.1};
    EXPECT_EQ(mse_loss(e, e), 0.0);
    const std::vector<double> zero = {0.0, 0.0}, one = {1.0, 1.0};
    EXPECT_EQ(mse_loss(zero, one), 1.0);
    const std::vector<double> a = {1.0, 2.0, 3.0}, b = {0.5, 2.5, 4.0};
    const std::vector<double> pa = {3.0, 1.0, 2.0}, pb = {4.0, 0.5, 2.5};
    EXPECT_DOUBLE_EQ(mse_loss(a, b), mse_loss(pa, pb));
    EXPECT_THROW(mse_loss(a, zero), ShapeError);
}

TEST(MseLoss, TapeMatchesPlain) {
    Tape tape;
    const std::vector<double> a = {1.0, 2.0, 3.0, 4.0}, b = {0.0, 2.5, 3.5, 1.0};
    Var l = mse_loss(tape.constant(Tensor({2, 2}, a)), tape.constant(Tensor({2, 2}, b)));
    EXPECT_DOUBLE_EQ(l.value()[0], mse_loss(a, b));
}

TEST(KFold, PartitionProperties) {
    std::vector<std::string> ids;
    for (int i = 0; i < 10; ++i) ids.push_back("s" + std::to_string(i));
    const auto splits = kfold_split(ids, 5, 42);
    ASSERT_EQ(splits.size(), 5u);
    std::multiset<std::string> all_test;
    for (const auto& s : splits) {
        EXPECT_EQ(s.test.size(), 2u);
        EXPECT_EQ(s.train.size(), 8u);
        for (const auto& id : s.test) {
            all_test.insert(id);
            EXPECT_EQ(std::count(s.train.begin(), s.train.end(), id), 0);
        }
    }
    EXPECT_EQ(all_test, std::multiset<std::string>(ids.begin(), ids.end()));
    const auto again = kfold_split(ids, 5, 42);
    for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(again[f].test, splits[f].test);
    const auto other = kfold_split(ids, 5, 43);
    bool differs = false;
    for (std::size_t f = 0; f < 5; ++f) differs = differs || other[f].test != splits[f].test;
    EXPECT_TRUE(differs);
}

TEST(KFold, UnevenSizesAndErrors) {
    std::vector<std::string> ids;
    for (int i = 0; i < 11; ++i) ids.push_back(std::to_string(i));
    std::size_t lo = 100, hi = 0;
    for (const auto& s : kfold_split(ids, 3, 1)) {
        lo = std::min(lo, s.test.size());
        hi = std::max(hi, s.test.size());
    }
    EXPECT_LE(hi - lo, 1u);
    EXPECT_THROW(kfold_split(ids, 12, 1), std::invalid_argument);
    EXPECT_THROW(kfold_split(ids, 1, 1), std::invalid_argument);
}

TEST(Train, SmokeRunRecordsFiniteLosses) {
    const auto pairs = synthetic_pairs(8, 1);
    const auto result = train_model(pairs, small_model(), smoke_config(2));
    ASSERT_EQ(result.report.epochs.size(), 2u);
    for (const auto& e : result.report.epochs) {
        EXPECT_TRUE(std::isfinite(e.mean_loss));
        EXPECT_GE(e.seconds, 0.0);
    }
    EXPECT_EQ(result.report.train_subjects.size(), 8u);
    std::ostringstream out;
    write_train_report(result.report, out);
    EXPECT_NE(out.str().find("epoch,mean_loss,seconds\n1,"), std::string::npos);
}

TEST(Train, ZeroLearningRateLeavesParamsUntouched) {
    const auto pairs = synthetic_pairs(6, 2);
    TrainConfig cfg = smoke_config(3);
    cfg.lr = 0.0;
    auto result = train_model(pairs, small_model(), cfg);
    ModelParams fresh = init_params(small_model(), cfg.seed);
    auto trained = result.params.learnable();
    auto initial = fresh.learnable();
    for (std::size_t i = 0; i < trained.size(); ++i)
        EXPECT_EQ(trained[i].tensor->data(), initial[i].tensor->data()) << trained[i].name;
    // running statistics still track the batches
    EXPECT_NE(result.params.norm.running_mean, fresh.norm.running_mean);
}

TEST(Train, DeterministicGivenSeed) {
    const auto pairs = synthetic_pairs(6, 4);
    TrainConfig cfg = smoke_config(3);
    cfg.batch_size = 4;
    auto a = train_model(pairs, small_model(), cfg);
    auto b = train_model(pairs, small_model(), cfg);
    const CheckpointMeta meta;
    EXPECT_EQ(serialize(a.params, meta), serialize(b.params, meta));
    for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(a.report.epochs[e].mean_loss, b.report.epochs[e].mean_loss);
}

TEST(Train, MinibatchesNeverSingleSubject) {
    const auto pairs = synthetic_pairs(7, 5);
    TrainConfig cfg = smoke_config(2);
    cfg.batch_size = 3;
    std::vector<std::size_t> sizes;
    TrainHooks hooks;
    hooks.on_batch = [&](std::span<const std::string> ids) { sizes.push_back(ids.size()); };
    train_model(pairs, small_model(), cfg, hooks);
    EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 4, 3, 4}));
}

TEST(Train, EarlyStoppingCapsEpochs) {
    const auto pairs = synthetic_pairs(6, 6);
    TrainConfig cfg = smoke_config(60);
    cfg.patience = 1;
    const auto result = train_model(pairs, small_model(), cfg);
    EXPECT_LT(result.report.epochs.size(), 60u);
}

TEST(Train, LossDecreasesOnLearnableTask) {
    const auto pairs = synthetic_pairs(16, 7);
    TrainConfig cfg = smoke_config(80);
    cfg.schedule.steps = 100;
    const auto result = train_model(pairs, small_model(), cfg);
    double first = 0.0, last = 0.0;
    for (std::size_t e = 0; e < 10; ++e) {
        first += result.report.epochs[e].mean_loss;
        last += result.report.epochs[70 + e].mean_loss;
    }
    EXPECT_LT(last, first);
}

TEST(Train, RejectsInvalidConfig) {
    const auto pairs = synthetic_pairs(4, 8);
    TrainConfig cfg = smoke_config(1);
    cfg.batch_size = 1;
    EXPECT_THROW(train_model(pairs, small_model(), cfg), std::invalid_argument);
    cfg = smoke_config(0);
    EXPECT_THROW(train_model(pairs, small_model(), cfg), std::invalid_argument);
    cfg = smoke_config(1);
    EXPECT_THROW(train_model(std::span<const GraphPair>(pairs.data(), 1), small_model(), cfg), std::invalid_argument);
}

TEST(Train, NonFiniteLossReportsContext) {
    auto pairs = synthetic_pairs(4, 9);
    ModelConfig m = small_model();
    TrainConfig cfg = smoke_config(1);
    pairs[0].target.scaled_nodes[3] = std::numeric_limits<double>::infinity();
    try {
        train_model(pairs, m, cfg);
        FAIL();
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epoch 1"), std::string::npos);
        EXPECT_NE(msg.find("t = ["), std::string::npos);
    }
}

TEST(AdamWDirection, ScalarCasesMoveAgainstMoment) {
    for (double g : {2.0, -0.5, 1e-4, -30.0}) {
        Tensor p({}, 1.0);
        p.set_requires_grad(true);
        p.grad()[0] = g;
        AdamW opt({0.01, 0.0});
        opt.step({{"p", &p}});
        EXPECT_EQ(std::signbit(p[0] - 1.0), !std::signbit(g)) << g;
    }
}

TEST(Isolation, ScalerAndBatchesSeeOnlyTrainingSubjects) {
    const auto table = generate_synthetic_dataset(10, 10);
    ExperimentConfig exp;
    exp.model = small_model();
    exp.train = smoke_config(2);
    const auto splits = kfold_split(table.subjects(exp.hemisphere), 5, exp.train.seed);
    std::set<std::string> fitted, batched;
    ExperimentHooks hooks;
    hooks.on_scaler_fit = [&](std::size_t, std::span<const std::string> ids) { fitted.insert(ids.begin(), ids.end()); };
    hooks.on_batch = [&](std::size_t, std::span<const std::string> ids) { batched.insert(ids.begin(), ids.end()); };
    const auto outcome = run_fold(table, splits[1], 1, exp, false, hooks);
    const std::set<std::string> train(splits[1].train.begin(), splits[1].train.end());
    EXPECT_EQ(fitted, train);
    EXPECT_EQ(batched, train);
    for (const auto& id : splits[1].test) EXPECT_FALSE(batched.count(id));
    EXPECT_EQ(outcome.eval.scores.size(), splits[1].test.size());
}

TEST(Checkpoint, RoundTripIsBitExact) {
    FeatureScaler scaler;
    const auto pairs = synthetic_pairs(6, 11, &scaler);
    auto trained = train_model(pairs, small_model(), smoke_config(2));
    CheckpointMeta meta;
    meta.scaler = scaler;
    meta.train_subjects = trained.report.train_subjects;
    meta.schedule.mode = DiffusionMode::standard;
    const std::string bytes = serialize(trained.params, meta);
    std::istringstream in(bytes, std::ios::binary);
    Checkpoint back = read_checkpoint(in);
    auto a = trained.params.tensors();
    auto b = back.params.tensors();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].tensor->shape(), b[i].tensor->shape());
        EXPECT_EQ(std::memcmp(a[i].tensor->data().data(), b[i].tensor->data().data(),
                              a[i].tensor->size() * sizeof(double)),
                  0)
            << a[i].name;
    }
    EXPECT_EQ(back.params.config, trained.params.config);
    EXPECT_EQ(back.meta.schedule.mode, DiffusionMode::standard);
    EXPECT_EQ(back.meta.train_subjects, meta.train_subjects);
    EXPECT_EQ(back.meta.scaler.range(kCorticalThickness).max, scaler.range(kCorticalThickness).max);
    EXPECT_EQ(serialize(back.params, back.meta), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
    ModelParams p = init_params(small_model(), 1);
    const auto path = (std::filesystem::temp_directory_path() / "grenol_test_ckpt.grnl").string();
    save_checkpoint(p, CheckpointMeta{}, path);
    Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.params.fc[1].weight, p.fc[1].weight);
    std::remove(path.c_str());
    EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(Checkpoint, CorruptionIsDetected) {
    ModelParams p = init_params(small_model(), 1);
    const std::string bytes = serialize(p, CheckpointMeta{});

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream in1(bad_magic);
    EXPECT_THROW(read_checkpoint(in1), FormatError);

    std::string bad_version = bytes;
    bad_version[4] = 9;
    std::istringstream in2(bad_version);
    try {
        read_checkpoint(in2);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }

    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 3}) {
        std::istringstream in(bytes.substr(0, cut));
        EXPECT_THROW(read_checkpoint(in), FormatError) << cut;
    }
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
    ModelConfig wide;
    ModelParams p = init_params(wide, 1);
    const std::string bytes = serialize(p, CheckpointMeta{});
    ModelConfig narrow;
    narrow.conv_dim = 32;
    std::istringstream in(bytes);
    try {
        read_checkpoint(in, &narrow);
        FAIL();
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("conv.0.node_weight"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[1, 48]"), std::string::npos) << msg;
    }
}
