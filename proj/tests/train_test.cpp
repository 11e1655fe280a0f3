#include <gtest/gtest.h>

#include "layerswap/train.hpp"
#include "oracles.hpp"

using namespace layerswap;

namespace {

ArchSpec tiny_arch() {
    ArchSpec a;
    a.depth = 2;
    a.base_channels = 4;
    return a;
}

Checkpoint<float> tiny_ckpt(std::uint64_t seed = 1) {
    CheckpointMeta meta;
    meta.seed = seed;
    return make_checkpoint(build_model<float>(tiny_arch(), seed), meta);
}

Dataset<float> tiny_data(int n = 6, int size = 16) {
    auto s = DatasetSpec::defaults(Domain::A);
    s.n_samples = n;
    s.image_size = size;
    return generate<float>(s);
}

Hyper quick_hyper() {
    Hyper h;
    h.epochs = 2;
    h.batch_size = 4;
    h.seed = 9;
    return h;
}

}  // namespace

TEST(Dice, PerfectPrediction) {
    std::vector<std::int32_t> t{0, 1, 2, 3, 3, 2};
    auto d = dice(t, t, 4);
    EXPECT_EQ(d.per_class, (std::vector<double>{1, 1, 1, 1}));
}

TEST(Dice, DisjointIsZero) {
    std::vector<std::int32_t> p{1, 1, 0, 0}, t{0, 0, 1, 1};
    auto d = dice(p, t, 2);
    EXPECT_EQ(d.per_class[1], 0.0);
}

TEST(Dice, HalfOverlap) {
    std::vector<std::int32_t> p{1, 1, 1, 1, 0, 0, 0, 0}, t{0, 0, 1, 1, 1, 1, 0, 0};
    EXPECT_EQ(dice(p, t, 2).per_class[1], 0.5);
}

TEST(Dice, BothEmptyIsOne) {
    std::vector<std::int32_t> p{0, 0, 1}, t{0, 0, 1};
    auto d = dice(p, t, 4);
    EXPECT_EQ(d.per_class[2], 1.0);
    EXPECT_EQ(d.per_class[3], 1.0);
}

TEST(Dice, AggregatesAcrossImages) {
    DiceAccumulator acc(2);
    std::vector<std::int32_t> p1{1, 1, 0, 0}, t1{1, 1, 0, 0};
    std::vector<std::int32_t> p2{1, 0, 0, 0}, t2{0, 0, 0, 1};
    acc.add(p1, t1);
    acc.add(p2, t2);
    // Global: 2*2 / (3 + 3); the per-image average would be 0.5.
    EXPECT_DOUBLE_EQ(acc.table().per_class[1], 4.0 / 6.0);
}

TEST(Argmax, TiesGoToLowestClass) {
    Tensor<float> logits({1, 3, 1, 2}, {1, 0, 1, 5, 0.5f, 5});
    EXPECT_EQ(argmax_channels(logits), (std::vector<std::int32_t>{0, 1}));
}

TEST(Sgd, SingleStepPlain) {
    Hyper h;
    h.optimizer = Optimizer::Sgd;
    h.lr = 0.1;
    TensorMap<double> p;
    p.insert("w", Tensor<double>({2}, {1.0, -2.0}));
    Sgd<double> opt(h);
    opt.step(p, {{"w", Tensor<double>({2}, {0.5, 4.0})}});
    EXPECT_EQ(p.at("w").vec(), (std::vector<double>{1.0 - 0.1 * 0.5, -2.0 - 0.1 * 4.0}));
}

TEST(Sgd, MomentumAccumulates) {
    Hyper h;
    h.lr = 0.5;
    h.momentum = 0.9;
    TensorMap<double> p;
    p.insert("w", Tensor<double>({1}, {0.0}));
    Sgd<double> opt(h);
    opt.step(p, {{"w", Tensor<double>({1}, {1.0})}});
    opt.step(p, {{"w", Tensor<double>({1}, {1.0})}});
    const double v1 = 1.0, v2 = 0.9 * v1 + 1.0;
    EXPECT_EQ(p.at("w").item(), -0.5 * v1 - 0.5 * v2);
}

TEST(Sgd, NonFiniteUpdateRejected) {
    Hyper h;
    TensorMap<double> p;
    p.insert("w", Tensor<double>({1}, {std::numeric_limits<double>::max()}));
    Sgd<double> opt(h);
    EXPECT_THROW(opt.step(p, {{"w", Tensor<double>({1}, {-std::numeric_limits<double>::max()})}}), NumericError);
}

TEST(Train, TotalFreezeIsNoOp) {
    auto c = tiny_ckpt();
    auto data = tiny_data();
    auto r = train(c, data, Task::Segmentation, quick_hyper(), FreezeMask::all(c.graph()));
    EXPECT_TRUE(r.checkpoint.entries == c.entries);
    EXPECT_EQ(evaluate_dice(r.checkpoint, data).per_class, evaluate_dice(c, data).per_class);
}

TEST(Train, UnknownFreezeEntryRejected) {
    FreezeMask m;
    m.add("nope.W");
    EXPECT_THROW(train(tiny_ckpt(), tiny_data(), Task::Segmentation, quick_hyper(), m), ContractError);
}

TEST(Train, RandomFreezeMasksKeepFrozenEntries) {
    auto c = tiny_ckpt(4);
    auto data = tiny_data();
    const auto entries = c.graph().entries();
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
        Rng rng(mix_seed(77, trial));
        FreezeMask m;
        for (const auto& e : entries)
            if (rng.uniform() < 0.4) m.add(e.name);
        auto r = train(c, data, Task::Segmentation, quick_hyper(), m);
        std::size_t changed = 0;
        for (const auto& e : entries) {
            const bool same = bit_identical(r.checkpoint.entries.at(e.name), c.entries.at(e.name));
            if (m.contains(e.name))
                EXPECT_TRUE(same) << e.name;
            else
                changed += !same;
        }
        EXPECT_GT(changed, 0u);
    }
}

TEST(Train, FrozenRunningStatsKeepLayerInEvalMode) {
    auto c = tiny_ckpt(5);
    const auto g = c.graph();
    auto r = train(c, tiny_data(), Task::Segmentation, quick_hyper(), FreezeMask::of(g, {{ParamKind::RM, 1}}));
    EXPECT_TRUE(bit_identical(r.checkpoint.entries.at(g.entry_name(ParamKind::RV, 1)),
                              c.entries.at(g.entry_name(ParamKind::RV, 1))));
    EXPECT_FALSE(bit_identical(r.checkpoint.entries.at(g.entry_name(ParamKind::RV, 2)),
                               c.entries.at(g.entry_name(ParamKind::RV, 2))));
}

TEST(Train, DeterministicAndRecordsMeta) {
    auto c = tiny_ckpt();
    auto data = tiny_data();
    auto a = train(c, data, Task::Autoencoder, quick_hyper()), b = train(c, data, Task::Autoencoder, quick_hyper());
    EXPECT_TRUE(a.checkpoint == b.checkpoint);
    EXPECT_EQ(a.history.csv(), b.history.csv());
    EXPECT_EQ(a.checkpoint.meta.task, Task::Autoencoder);
    EXPECT_EQ(a.checkpoint.meta.train_samples, data.size());
    ASSERT_TRUE(a.checkpoint.meta.hyper.has_value());
    EXPECT_EQ(a.checkpoint.meta.hyper->seed, 9u);
    EXPECT_EQ(a.history.epochs.size(), 2u);
}

TEST(Train, AutoencoderLossDecreases) {
    auto h = quick_hyper();
    h.epochs = 8;
    h.lr = 0.01;
    auto data = tiny_data(8);
    auto r = train(tiny_ckpt(), data, Task::Autoencoder, h);
    EXPECT_LT(r.history.epochs.back().train_loss, r.history.epochs.front().train_loss);
}

TEST(Evaluate, MseProperties) {
    auto data = tiny_data(3);
    auto c = tiny_ckpt();
    EXPECT_EQ(evaluate_mse(c, data), evaluate_mse(c, data));
    // All-zero network output: zero the final conv so the output is exactly 0.
    const auto g = c.graph();
    const auto last = g.layer_count(ParamKind::W);
    auto z = replace_param(c, ParamKind::W, last, Tensor<float>::zeros(c.entries.at(g.entry_name(ParamKind::W, last)).shape()));
    z = replace_param(z, ParamKind::B, last, Tensor<float>::zeros({4}));
    double ex2 = 0, n = 0;
    for (const auto& s : data)
        for (float v : s.image.data()) {
            ex2 += static_cast<double>(v) * v;
            ++n;
        }
    EXPECT_NEAR(evaluate_mse(z, data), ex2 / n, 1e-9);
}

TEST(Evaluate, DiceIsPure) {
    auto data = tiny_data(3);
    auto c = tiny_ckpt();
    EXPECT_EQ(evaluate_dice(c, data).per_class, evaluate_dice(c, data).per_class);
}

// Regression bound for the default recipe: depth-3 MiniUNet, 50 samples of
// domain A, default Hyper. Measured 0.996 at seed 1.
TEST(TrainRegression, DefaultRecipeReachesBound) {
    auto spec = DatasetSpec::defaults(Domain::A);
    auto all = generate<float>(spec);
    auto [tr, va] = split(all, 50, 7);
    CheckpointMeta meta;
    meta.seed = 1;
    auto init = make_checkpoint(build_model<float>(ArchSpec{}, 1), meta);
    Hyper h;
    h.seed = 1;
    auto r = train(init, tr, Task::Segmentation, h);
    const auto d = evaluate_dice(r.checkpoint, va);
    EXPECT_GT(d.mean_foreground(), 0.85);
    EXPECT_GE(d.per_class[0], 0.98);

    const auto head = init.graph().entry_name(ParamKind::W, 12);
    auto constant = replace_param(init, ParamKind::W, 12, Tensor<float>::zeros(init.entries.at(head).shape()));
    EXPECT_LT(evaluate_dice(constant, va).mean_foreground(), d.mean_foreground());
}
