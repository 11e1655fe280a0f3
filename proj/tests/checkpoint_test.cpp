#include <gtest/gtest.h>

#include <filesystem>

#include "layerswap/checkpoint.hpp"

using namespace layerswap;
namespace fs = std::filesystem;

namespace {

template <class T>
Checkpoint<T> sample_ckpt(std::uint64_t seed = 3) {
    ArchSpec a;
    a.depth = 2;
    auto m = build_model<T>(a, seed);
    CheckpointMeta meta;
    meta.task = Task::Autoencoder;
    meta.dataset_tag = "synth-A-n100-s64-seed11";
    meta.seed = seed;
    meta.train_samples = 42;
    meta.hyper = Hyper{};
    meta.label = "unit";
    return make_checkpoint(m, meta);
}

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / ("layerswap_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                          ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(d);
    return d;
}

LoadError decode_error(const std::string& bytes) {
    try {
        decode<float>(bytes);
    } catch (const LoadError& e) {
        return e;
    }
    ADD_FAILURE() << "decode accepted invalid bytes";
    return LoadError("", "");
}

}  // namespace

TEST(CheckpointStore, RoundTripIsExact) {
    const auto dir = temp_dir();
    auto c = sample_ckpt<float>();
    save(c, dir / "a.rpck");
    auto back = load<float>(dir / "a.rpck");
    EXPECT_TRUE(back == c);
    save(back, dir / "b.rpck");
    EXPECT_EQ(read_file(dir / "a.rpck"), read_file(dir / "b.rpck"));
    fs::remove_all(dir);
}

TEST(CheckpointStore, RoundTripDouble) {
    auto c = sample_ckpt<double>();
    EXPECT_TRUE(decode<double>(encode(c)) == c);
}

TEST(CheckpointStore, DtypeMismatchRejected) {
    auto bytes = encode(sample_ckpt<double>());
    EXPECT_EQ(decode_error(bytes).field(), "dtype");
}

TEST(CheckpointStore, BadMagic) {
    auto bytes = encode(sample_ckpt<float>());
    bytes[0] = 'X';
    auto e = decode_error(bytes);
    EXPECT_EQ(e.field(), "magic");
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
}

TEST(CheckpointStore, UnknownVersion) {
    auto bytes = encode(sample_ckpt<float>());
    bytes[4] = 9;
    EXPECT_EQ(decode_error(bytes).field(), "version");
}

TEST(CheckpointStore, Truncation) {
    const auto bytes = encode(sample_ckpt<float>());
    EXPECT_EQ(decode_error(bytes.substr(0, bytes.size() - 1)).field(), "payload");
    EXPECT_EQ(decode_error(bytes.substr(0, 20)).field(), "header");
    EXPECT_EQ(decode_error(bytes.substr(0, 6)).field(), "header");
    EXPECT_EQ(decode_error(bytes + "x").field(), "payload");
}

TEST(CheckpointStore, ChecksumMismatch) {
    auto bytes = encode(sample_ckpt<float>());
    bytes[bytes.size() - 3] ^= 0x01;
    EXPECT_EQ(decode_error(bytes).field(), "crc32");
}

TEST(CheckpointStore, DeletedEntryNamed) {
    auto c = sample_ckpt<float>();
    TensorMap<float> fewer;
    for (const auto& [name, t] : c.entries)
        if (name != "enc1.block2.bn.RV") fewer.insert(name, t);
    c.entries = fewer;
    try {
        validate(c);
        FAIL() << "validation accepted a missing entry";
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("enc1.block2.bn.RV"), std::string::npos) << e.what();
    }
    auto e = decode_error(encode(c));
    EXPECT_EQ(e.field(), "entries");
    EXPECT_NE(std::string(e.what()).find("enc1.block2.bn.RV"), std::string::npos);
}

TEST(CheckpointStore, MissingFileIsIoError) {
    EXPECT_THROW(load<float>("/nonexistent/dir/x.rpck"), IoError);
}

TEST(CheckpointStore, KindLayersFrontToBack) {
    auto c = sample_ckpt<float>();
    const auto g = c.graph();
    for (auto k : kAllKinds) {
        auto layers = get_kind_layers(c, k);
        ASSERT_EQ(layers.size(), g.layer_count(k));
        for (std::size_t i = 0; i < layers.size(); ++i) {
            EXPECT_EQ(layers[i].layer, i + 1);
            EXPECT_EQ(layers[i].name, g.entry_name(k, i + 1));
        }
    }
}

TEST(CheckpointStore, ReplaceParamLeavesSourceAlone) {
    const auto c = sample_ckpt<float>();
    const auto copy = c;
    auto v = Tensor<float>::filled(c.entries.at(c.graph().entry_name(ParamKind::RW, 2)).shape(), 7.0f);
    auto r = replace_param(c, ParamKind::RW, 2, v);
    EXPECT_TRUE(c == copy);
    EXPECT_TRUE(bit_identical(r.entries.at(c.graph().entry_name(ParamKind::RW, 2)), v));
    std::size_t changed = 0;
    for (const auto& [name, t] : c.entries) changed += !bit_identical(t, r.entries.at(name));
    EXPECT_EQ(changed, 1u);
    EXPECT_THROW(replace_param(c, ParamKind::RW, 2, Tensor<float>::zeros({3})), DimensionError);
    EXPECT_THROW(replace_param(c, ParamKind::RV, 1, Tensor<float>::filled(v.shape(), -1.0f)), ContractError);
    EXPECT_THROW(replace_param(c, ParamKind::W, 999, v), IndexError);
}
