#include <gtest/gtest.h>

#include <algorithm>

#include "layerswap/swap.hpp"

using namespace layerswap;

namespace {

struct Pair {
    Checkpoint<float> seg, autoenc;
    Dataset<float> val;
};

// A small trained seg/auto pair on 16x16 images, shared by the tests below.
const Pair& trained_pair() {
    static const Pair p = [] {
        ArchSpec a;
        a.depth = 2;
        a.base_channels = 4;
        auto spec = DatasetSpec::defaults(Domain::A);
        spec.n_samples = 24;
        spec.image_size = 16;
        auto [tr, va] = split(generate<float>(spec), 16, 1);
        Hyper h;
        h.epochs = 6;
        h.seed = 3;
        CheckpointMeta m;
        auto init = make_checkpoint(build_model<float>(a, 1), m);
        auto seg = train(init, tr, Task::Segmentation, h).checkpoint;
        seg.meta.label = "seg";
        auto ae = train(make_checkpoint(build_model<float>(a, 2), m), tr, Task::Autoencoder, h).checkpoint;
        ae.meta.label = "auto";
        return Pair{seg, ae, va};
    }();
    return p;
}

}  // namespace

TEST(SwapOne, SelfSwapIsNoOp) {
    const auto& p = trained_pair();
    auto s = swap_one(p.seg, p.seg, ParamKind::RM, 1);
    EXPECT_TRUE(s == p.seg);
    EXPECT_EQ(evaluate_dice(s, p.val).per_class, evaluate_dice(p.seg, p.val).per_class);
}

TEST(SwapOne, ReplacesExactlyOneEntry) {
    const auto& p = trained_pair();
    auto s = swap_one(p.seg, p.autoenc, ParamKind::RM, 1);
    const auto name = p.seg.graph().entry_name(ParamKind::RM, 1);
    for (const auto& [n, t] : s.entries)
        EXPECT_TRUE(bit_identical(t, (n == name ? p.autoenc : p.seg).entries.at(n))) << n;
    EXPECT_NE(evaluate_dice(s, p.val).per_class, evaluate_dice(p.seg, p.val).per_class);
}

TEST(SwapOne, SwapBackRestoresBitIdentical) {
    const auto& p = trained_pair();
    for (auto k : kAllKinds) {
        auto s = swap_one(p.seg, p.autoenc, k, 2);
        auto back = swap_one(s, p.seg, k, 2);
        EXPECT_TRUE(back == p.seg) << to_string(k);
    }
}

TEST(SwapOne, ArchMismatchNamesEntry) {
    const auto& p = trained_pair();
    ArchSpec deeper = p.seg.meta.arch;
    deeper.depth = 3;
    auto other = make_checkpoint(build_model<float>(deeper, 1), CheckpointMeta{});
    try {
        swap_one(p.seg, other, ParamKind::W, 1);
        FAIL() << "mismatch accepted";
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("architecture mismatch at entry"), std::string::npos) << e.what();
    }
}

TEST(SwapBulk, FullAndEmptyMasks) {
    const auto& p = trained_pair();
    const auto g = p.seg.graph();
    std::vector<std::pair<ParamKind, std::size_t>> all;
    for (const auto& e : g.entries()) all.emplace_back(e.kind, e.layer);
    EXPECT_TRUE(swap_bulk(p.seg, p.autoenc, all).entries == p.autoenc.entries);
    EXPECT_TRUE(swap_bulk(p.seg, p.autoenc, {}) == p.seg);
}

TEST(SwapBulk, PartialMaskLeavesComplementFromRecipient) {
    const auto& p = trained_pair();
    const auto entries = p.seg.graph().entries();
    // Hold back roughly 8% of the entries.
    std::vector<std::pair<ParamKind, std::size_t>> items;
    std::set<std::string> held;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i % 12 == 5)
            held.insert(entries[i].name);
        else
            items.emplace_back(entries[i].kind, entries[i].layer);
    }
    auto s = swap_bulk(p.seg, p.autoenc, items);
    for (const auto& e : entries) {
        const bool from_donor = bit_identical(s.entries.at(e.name), p.autoenc.entries.at(e.name));
        EXPECT_EQ(from_donor, !held.count(e.name)) << e.name;
    }
}

TEST(Scan, RowCountAndOrder) {
    const auto& p = trained_pair();
    SwapPlan plan;
    plan.kinds = {ParamKind::RV, ParamKind::RM, ParamKind::RW, ParamKind::RB};
    auto r = scan(p.seg, p.autoenc, plan, p.val);
    const auto bn = p.seg.meta.arch.bn_layer_count();
    ASSERT_EQ(r.rows.size(), 4 * bn);
    EXPECT_EQ(r.rows.front().kind, ParamKind::RM);
    EXPECT_EQ(r.rows[bn].kind, ParamKind::RV);
    EXPECT_EQ(r.rows[bn - 1].layer, bn);
}

TEST(Scan, SelfScanHasZeroDeltas) {
    const auto& p = trained_pair();
    auto r = scan(p.seg, p.seg, SwapPlan{}, p.val);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.dice.per_class, r.baseline.per_class);
        EXPECT_EQ(r.drop(row), 0.0);
    }
}

TEST(Scan, RowsIndependentOfOrderAndThreads) {
    const auto& p = trained_pair();
    SwapPlan fwd;
    fwd.kinds = {ParamKind::W, ParamKind::RM};
    fwd.layers = std::vector<std::size_t>{1, 2, 3};
    SwapPlan rev = fwd;
    rev.layers = std::vector<std::size_t>{3, 2, 1};
    auto a = scan(p.seg, p.autoenc, fwd, p.val, {false, 1});
    auto b = scan(p.seg, p.autoenc, rev, p.val, {false, 3});
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (const auto& ra : a.rows) {
        auto it = std::find_if(b.rows.begin(), b.rows.end(),
                               [&](const ScanRow& rb) { return rb.kind == ra.kind && rb.layer == ra.layer; });
        ASSERT_NE(it, b.rows.end());
        EXPECT_EQ(it->dice.per_class, ra.dice.per_class);
    }
    EXPECT_EQ(a.csv(), scan(p.seg, p.autoenc, fwd, p.val, {false, 2}).csv());
}

TEST(Scan, BadLayerAbortsUnlessKeepGoing) {
    const auto& p = trained_pair();
    SwapPlan plan;
    plan.kinds = {ParamKind::RB};
    plan.layers = std::vector<std::size_t>{1, 99};
    EXPECT_THROW(scan(p.seg, p.autoenc, plan, p.val), IndexError);
    auto r = scan(p.seg, p.autoenc, plan, p.val, {true, 1});
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_TRUE(r.rows[0].error.empty());
    EXPECT_FALSE(r.rows[1].error.empty());
    EXPECT_TRUE(std::isnan(r.mean_drop({ParamKind::RM})));
}

TEST(Scan, CumulativeMode) {
    const auto& p = trained_pair();
    SwapPlan plan;
    plan.kinds = {ParamKind::RW};
    plan.mode = ScanMode::Cumulative;
    auto r = scan(p.seg, p.autoenc, plan, p.val);
    const auto last = r.rows.back().layer;
    std::vector<std::pair<ParamKind, std::size_t>> items;
    for (std::size_t l = 1; l <= last; ++l) items.emplace_back(ParamKind::RW, l);
    EXPECT_EQ(r.rows.back().dice.per_class, evaluate_dice(swap_bulk(p.seg, p.autoenc, items), p.val).per_class);
}

TEST(Scan, CsvLayout) {
    const auto& p = trained_pair();
    SwapPlan plan;
    plan.kinds = {ParamKind::B};
    plan.layers = std::vector<std::size_t>{1};
    const auto csv = scan(p.seg, p.autoenc, plan, p.val).csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "kind,layer,dice_c0,dice_c1,dice_c2,dice_c3,error");
    EXPECT_NE(csv.find("\nBASELINE,0,"), std::string::npos);
    EXPECT_NE(csv.find("\nB,1,"), std::string::npos);
}
