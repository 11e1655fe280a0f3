#include <gtest/gtest.h>

#include <filesystem>

#include "layerswap/experiment.hpp"

using namespace layerswap;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.arch.depth = 2;
    c.arch.base_channels = 4;
    for (auto* d : {&c.domain_a, &c.domain_b}) {
        d->n_samples = 16;
        d->image_size = 16;
    }
    c.train_count = 10;
    c.hyper.epochs = 2;
    c.seeds = {1, 2};
    c.sample_counts = {4};
    c.threads = 1;
    return c;
}

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("layerswap_exp_" + name);
    fs::remove_all(d);
    return d;
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST(Config, JsonRoundTrip) {
    auto c = tiny_config();
    c.tau = 3.5;
    c.part3_arms = {"random", "seg2seg_freeze"};
    auto back = config_from_json(to_json(c));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Config, MissingKeysKeepDefaults) {
    auto c = config_from_json(nlohmann::json::parse(R"({"seeds": [4]})"));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4}));
    EXPECT_EQ(c.train_count, 50u);
    EXPECT_EQ(c.arch.depth, 3);
}

TEST(Config, InvalidRejected) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"sedes": [1]})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"seeds": []})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"train_count": 100})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"part3_arms": ["magic"]})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"tau": "high"})")), ContractError);
    EXPECT_THROW(config_from_json(nlohmann::json::parse("[1]")), ContractError);
}

TEST(Context, SubsetsAreSeededAndNested) {
    ExperimentContext ctx(tiny_config(), fresh_dir("subset"));
    auto a = ctx.subset(Domain::A, 4), b = ctx.subset(Domain::A, 4);
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a[i].index, b[i].index);
    EXPECT_EQ(ctx.subset(Domain::A, 10).size(), 10u);
    for (const auto& s : ctx.data(Domain::A).val)
        for (const auto& t : a) EXPECT_NE(s.index, t.index);
}

TEST(Runner, Part1LayoutAndDeterminism) {
    const auto d1 = fresh_dir("p1a"), d2 = fresh_dir("p1b");
    Part1Result r1;
    {
        ExperimentContext ctx(tiny_config(), d1);
        r1 = run_part1(ctx);
        ctx.out().commit();
    }
    {
        ExperimentContext ctx(tiny_config(), d2);
        run_part1(ctx);
        ctx.out().commit();
    }
    ASSERT_EQ(r1.seeds.size(), 2u);
    for (const char* f : {"summary.csv", "scans/part1_s1.csv", "scans/part1_s2.json", "diffs/part1_s1_rmse.csv",
                          "diffs/part1_s1_bn.csv", "diffs/part1_s2.json", "checkpoints/seg_A_s1.rpck",
                          "checkpoints/auto_A_s2.rpck", "checkpoints/seg_A_s1.history.csv"}) {
        ASSERT_TRUE(fs::exists(d1 / f)) << f;
        if (std::string(f).ends_with(".csv")) {
            EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
        }
    }
    EXPECT_EQ(slurp(d1 / "checkpoints/seg_A_s1.rpck"), slurp(d2 / "checkpoints/seg_A_s1.rpck"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Runner, CachedCheckpointsAreReused) {
    const auto d = fresh_dir("cache");
    std::vector<std::string> log;
    {
        ExperimentContext ctx(tiny_config(), d);
        ctx.base_model(Task::Segmentation, Domain::A, 1);
        ctx.out().commit();
    }
    const auto before = fs::last_write_time(d / "checkpoints/seg_A_s1.rpck");
    {
        ExperimentContext ctx(tiny_config(), d, [&](const std::string& m) { log.push_back(m); });
        ctx.base_model(Task::Segmentation, Domain::A, 1);
        ctx.out().commit();
    }
    EXPECT_EQ(fs::last_write_time(d / "checkpoints/seg_A_s1.rpck"), before);
    ASSERT_FALSE(log.empty());
    EXPECT_EQ(log.front().rfind("reusing", 0), 0u);

    auto other = tiny_config();
    other.hyper.lr = 0.01;
    {
        ExperimentContext ctx(other, d, [&](const std::string& m) { log.push_back(m); });
        ctx.base_model(Task::Segmentation, Domain::A, 1);
        ctx.out().commit();
    }
    EXPECT_NE(log.back().find("training"), std::string::npos);
    fs::remove_all(d);
}

TEST(Runner, UncommittedOutputsRemoved) {
    const auto d = fresh_dir("rollback");
    {
        ExperimentContext ctx(tiny_config(), d);
        ctx.out().write("summary.csv", "x\n");
    }
    EXPECT_FALSE(fs::exists(d / "summary.csv"));
    fs::remove_all(d);
}

TEST(Runner, Part2SixPairs) {
    const auto d = fresh_dir("p2");
    ExperimentContext ctx(tiny_config(), d);
    auto r = run_part2(ctx);
    ctx.out().commit();
    EXPECT_EQ(r.models.size(), 4u);
    ASSERT_EQ(r.pairs.size(), 6u);
    EXPECT_TRUE(fs::exists(d / "diffs/part2_rmse_long.csv"));
    EXPECT_TRUE(fs::exists(d / "diffs/part2.json"));
    auto total = [](const DiffReport& p) {
        double s = 0;
        for (const auto& row : p.rows) s += row.rmse;
        return s;
    };
    // seg_A vs auto_A (cross-task) and seg_A vs seg_B (cross-domain).
    EXPECT_EQ(r.pairs[0].a_id, "seg_A_s1");
    EXPECT_EQ(r.pairs[0].b_id, "auto_A_s1");
    EXPECT_EQ(r.pairs[1].b_id, "seg_B_s1");
    EXPECT_NE(total(r.pairs[0]), total(r.pairs[1]));
    fs::remove_all(d);
}

TEST(Runner, Part3ArmsAndCounts) {
    const auto d = fresh_dir("p3");
    ExperimentContext ctx(tiny_config(), d);
    auto r = run_part3(ctx);
    ctx.out().commit();
    EXPECT_EQ(r.runs.size(), 5u * 2u);
    EXPECT_EQ(r.masks.size(), 2u);
    for (const char* f : {"transfer/mask_auto.csv", "transfer/mask_seg.json", "transfer/part3_runs.csv",
                          "transfer/part3_table.csv", "transfer/part3.json"})
        EXPECT_TRUE(fs::exists(d / f)) << f;
    const auto fz = r.select(4, "auto2seg_freeze"), ft = r.select(4, "auto2seg_finetune");
    ASSERT_EQ(fz.size(), 2u);
    EXPECT_LT(fz[0]->trainable_scalars, ft[0]->trainable_scalars);
    EXPECT_EQ(r.select(4, "random")[0]->trainable_scalars, ft[0]->trainable_scalars);
    EXPECT_TRUE(std::isfinite(r.mean_fg(4, "seg2seg_finetune")));
    fs::remove_all(d);
}
