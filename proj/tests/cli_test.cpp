#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "layerswap/checkpoint.hpp"
#include "layerswap/format.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = layerswap::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

const char* kTiny = R"({
  "arch": {"family": "MiniUNet", "depth": 2, "base_channels": 4, "in_channels": 1, "out_channels": 4, "conv_bias": true},
  "hyper": {"epochs": 2, "batch_size": 4, "lr": 0.05, "optimizer": "sgd_momentum", "momentum": 0.9, "seed": 0},
  "domain_a": {"domain": "A", "n_samples": 16, "image_size": 16},
  "domain_b": {"domain": "B", "n_samples": 16, "image_size": 16},
  "train_count": 10, "seeds": [1], "sample_counts": [4], "threads": 1
})";

// Shared fixture directory with a config and two trained checkpoints.
class CliTest : public ::testing::Test {
protected:
    static fs::path dir;

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / "layerswap_cli_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
        layerswap::write_text(dir / "tiny.json", kTiny);
        std::string deeper = kTiny;
        deeper.replace(deeper.find("\"depth\": 2"), 10, "\"depth\": 3");
        layerswap::write_text(dir / "deep.json", deeper);
        ASSERT_EQ(run({"train", "--config", cfg(), "--task", "seg", "--out", (dir / "seg.rpck").string()}).code, 0);
        ASSERT_EQ(run({"train", "--config", cfg(), "--task", "auto", "--out", (dir / "auto.rpck").string()}).code, 0);
        ASSERT_EQ(run({"train", "--config", (dir / "deep.json").string(), "--out", (dir / "deep.rpck").string()}).code, 0);
    }
    static void TearDownTestSuite() { fs::remove_all(dir); }

    static std::string cfg() { return (dir / "tiny.json").string(); }
    static std::string ck(const char* name) { return (dir / name).string(); }
};
fs::path CliTest::dir;

}  // namespace

TEST(Cli, HelpAndUsage) {
    EXPECT_EQ(run({"--help"}).code, 0);
    EXPECT_EQ(run({}).code, 1);
    EXPECT_EQ(run({"no-such-command"}).code, 1);
    EXPECT_EQ(run({"swap-scan", "--format", "xml"}).code, 1);
    EXPECT_EQ(run({"eval"}).code, 1);
}

TEST_F(CliTest, SelfSwapScanHasZeroDeltas) {
    auto r = run({"swap-scan", "--config", cfg(), "--donor", ck("seg.rpck"), "--recipient", ck("seg.rpck"), "--kinds", "RM"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(r.out);
    std::string header, baseline, line;
    std::getline(in, header);
    std::getline(in, baseline);
    ASSERT_EQ(baseline.rfind("BASELINE,0,", 0), 0u);
    const auto tail = baseline.substr(std::string("BASELINE,0").size());
    int rows = 0;
    while (std::getline(in, line)) {
        ASSERT_EQ(line.rfind("RM,", 0), 0u) << line;
        EXPECT_EQ(line.substr(line.find(',', 3)), tail) << line;
        ++rows;
    }
    EXPECT_EQ(rows, 3 * 2 + 2);
}

TEST_F(CliTest, SwapScanJson) {
    auto r = run({"swap-scan", "--config", cfg(), "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck"), "--kinds",
                  "W,B", "--layers", "1,2", "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["rows"].size(), 4u);
}

TEST_F(CliTest, DiffArchMismatchNamesEntry) {
    auto r = run({"diff", "--donor", ck("deep.rpck"), "--recipient", ck("seg.rpck")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("mismatch at entry '"), std::string::npos) << r.err;
}

TEST_F(CliTest, DiffAndMetrics) {
    auto d = run({"diff", "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck"), "--kinds", "RM"});
    ASSERT_EQ(d.code, 0) << d.err;
    EXPECT_EQ(d.out.rfind("kind,layer,rmse\nRM,1,", 0), 0u);
    auto b = run({"bn-metrics", "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck")});
    ASSERT_EQ(b.code, 0);
    EXPECT_EQ(b.out.rfind("layer,rm_shift", 0), 0u);
    auto m = run({"infer-mask", "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck"), "--tau", "1e9", "--format", "json"});
    ASSERT_EQ(m.code, 0);
    for (const auto& c : nlohmann::json::parse(m.out)["cells"]) EXPECT_TRUE(c["reusable"].get<bool>());
}

TEST_F(CliTest, LoadErrorsExitTwo) {
    auto missing = run({"eval", "--config", cfg(), "--ckpt", ck("missing.rpck")});
    EXPECT_EQ(missing.code, 2);
    layerswap::write_text(dir / "bad.rpck", "NOPE and some bytes");
    auto bad = run({"eval", "--config", cfg(), "--ckpt", ck("bad.rpck")});
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.err.find("bad magic"), std::string::npos);
}

TEST_F(CliTest, EvalBothTasks) {
    auto s = run({"eval", "--config", cfg(), "--ckpt", ck("seg.rpck")});
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_EQ(s.out.rfind("dice_c0,dice_c1,dice_c2,dice_c3,mean_fg_dice\n", 0), 0u);
    auto a = run({"eval", "--config", cfg(), "--ckpt", ck("auto.rpck")});
    EXPECT_EQ(a.out.rfind("val_mse\n", 0), 0u);
}

TEST_F(CliTest, TransferFreezeTrainsFewerScalars) {
    auto base = std::vector<std::string>{"transfer", "--config", cfg(), "--donor", ck("auto.rpck"), "--recipient",
                                         ck("seg.rpck"), "--format", "json"};
    auto fz = base, ft = base;
    fz.push_back("--freeze");
    ft.push_back("--no-freeze");
    auto a = run(fz), b = run(ft);
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_LT(nlohmann::json::parse(a.out)["trainable_scalars"].get<std::size_t>(),
              nlohmann::json::parse(b.out)["trainable_scalars"].get<std::size_t>());
    EXPECT_EQ(run({"transfer", "--config", cfg(), "--freeze"}).code, 1);
}

TEST_F(CliTest, RunPart1LayoutAndReport) {
    const auto out = dir / "p1";
    auto r = run({"run-part1", "--config", cfg(), "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"summary.csv", "scans/part1_s1.csv", "scans/part1_s1.json", "diffs/part1_s1_rmse.csv",
                          "checkpoints/seg_A_s1.rpck", "checkpoints/auto_A_s1.rpck"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    auto rep = run({"report", "--out", out.string()});
    EXPECT_EQ(rep.code, 0);
    EXPECT_NE(rep.out.find("swap-scan summary"), std::string::npos);
    EXPECT_EQ(run({"report", "--out", (dir / "nothing").string()}).code, 2);
}

TEST_F(CliTest, GenDataWritesDump) {
    auto r = run({"gen-data", "--config", cfg(), "--domain", "B", "-n", "3", "--out", (dir / "data").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(fs::file_size(dir / "data" / "images.f32"), 3u * 16 * 16 * 4);
}

TEST_F(CliTest, InputsAreNotModified) {
    const auto seg = layerswap::read_file(ck("seg.rpck")), aut = layerswap::read_file(ck("auto.rpck"));
    const auto conf = layerswap::read_file(cfg());
    run({"swap-scan", "--config", cfg(), "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck"), "--kinds", "RB"});
    run({"diff", "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck")});
    run({"infer-mask", "--donor", ck("auto.rpck"), "--recipient", ck("seg.rpck")});
    run({"eval", "--config", cfg(), "--ckpt", ck("seg.rpck")});
    EXPECT_EQ(layerswap::read_file(ck("seg.rpck")), seg);
    EXPECT_EQ(layerswap::read_file(ck("auto.rpck")), aut);
    EXPECT_EQ(layerswap::read_file(cfg()), conf);
}
