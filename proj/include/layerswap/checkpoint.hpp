#pragma once

// Checkpoint container and its on-disk format.
//
//   bytes 0..3   magic "RPCK"
//   bytes 4..5   format version, u16 little-endian (currently 1)
//   bytes 6..9   header length L, u32 little-endian
//   next L bytes UTF-8 JSON header
//   remainder    payload: raw little-endian scalars, entries back to back
//
// The header lists every entry (name, shape, dtype, byte offset into the
// payload, byte count), the experiment metadata, the payload size and the
// CRC-32 of the payload. See docs/FORMAT.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>
#include "layerswap/hyper.hpp"
#include "layerswap/nn.hpp"
#include "layerswap/tensor_map.hpp"

namespace layerswap {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[4] = {'R', 'P', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
    ArchSpec arch;
    Task task = Task::Segmentation;
    std::string dataset_tag;
    std::uint64_t seed = 0;
    BnConfig bn;
    std::size_t train_samples = 0;
    std::optional<Hyper> hyper;
    std::string label;  // free-form identifier used in reports

    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

inline void to_json(json& j, const ArchSpec& a) {
    j = json{{"family", std::string(to_string(a.family))}, {"depth", a.depth},
             {"base_channels", a.base_channels}, {"in_channels", a.in_channels},
             {"out_channels", a.out_channels}, {"conv_bias", a.conv_bias}};
}

inline void from_json(const json& j, ArchSpec& a) {
    auto fam = parse_family(j.at("family").get<std::string>());
    if (!fam) throw ContractError("arch: unknown family '" + j.at("family").get<std::string>() + "'");
    a.family = *fam;
    a.depth = j.at("depth").get<int>();
    a.base_channels = j.at("base_channels").get<int>();
    a.in_channels = j.value("in_channels", 1);
    a.out_channels = j.value("out_channels", 4);
    a.conv_bias = j.value("conv_bias", true);
}

inline void to_json(json& j, const BnConfig& b) {
    j = json{{"eps", b.eps}, {"momentum", b.momentum}, {"unbiased_running_var", b.unbiased_running_var}};
}

inline void from_json(const json& j, BnConfig& b) {
    b.eps = j.value("eps", 1e-5);
    b.momentum = j.value("momentum", 0.1);
    b.unbiased_running_var = j.value("unbiased_running_var", false);
}

inline void to_json(json& j, const Hyper& h) {
    j = json{{"epochs", h.epochs}, {"batch_size", h.batch_size}, {"lr", h.lr},
             {"optimizer", std::string(to_string(h.optimizer))}, {"momentum", h.momentum}, {"seed", h.seed}};
}

inline void from_json(const json& j, Hyper& h) {
    Hyper d;
    h.epochs = j.value("epochs", d.epochs);
    h.batch_size = j.value("batch_size", d.batch_size);
    h.lr = j.value("lr", d.lr);
    const auto opt = parse_optimizer(j.value("optimizer", std::string(to_string(d.optimizer))));
    if (!opt) throw ContractError("hyper: unknown optimizer");
    h.optimizer = *opt;
    h.momentum = j.value("momentum", d.momentum);
    h.seed = j.value("seed", d.seed);
}

inline void to_json(json& j, const CheckpointMeta& m) {
    j = json{{"arch", m.arch},
             {"task", std::string(to_string(m.task))},
             {"dataset_tag", m.dataset_tag},
             {"seed", m.seed},
             {"bn", m.bn},
             {"train_samples", m.train_samples},
             {"label", m.label}};
    j["hyper"] = m.hyper ? json(*m.hyper) : json(nullptr);
}

inline void from_json(const json& j, CheckpointMeta& m) {
    m.arch = j.at("arch").get<ArchSpec>();
    auto task = parse_task(j.at("task").get<std::string>());
    if (!task) throw ContractError("unknown task '" + j.at("task").get<std::string>() + "'");
    m.task = *task;
    m.dataset_tag = j.at("dataset_tag").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.bn = j.at("bn").get<BnConfig>();
    m.train_samples = j.at("train_samples").get<std::size_t>();
    m.label = j.value("label", std::string());
    if (j.contains("hyper") && !j["hyper"].is_null()) m.hyper = j["hyper"].get<Hyper>();
    else m.hyper.reset();
}

/// Ordered named tensors plus experiment metadata. Treated as immutable: every
/// edit goes through functions that return a modified copy.
template <std::floating_point T>
struct Checkpoint {
    TensorMap<T> entries;
    CheckpointMeta meta;

    ModelGraph graph() const { return ModelGraph(meta.arch); }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Checks that the entries are exactly those of the declared architecture, in
/// canonical order and with the expected shapes, and that every RV is >= 0.
/// The message names the first offending entry.
template <std::floating_point T>
void validate(const Checkpoint<T>& ckpt) {
    const auto expected = ModelGraph(ckpt.meta.arch).entries();
    std::size_t i = 0;
    for (const auto& [name, tensor] : ckpt.entries) {
        if (i >= expected.size()) throw ContractError("validation error: unexpected entry '" + name + "'");
        const auto& e = expected[i];
        if (name != e.name) {
            const bool known = std::any_of(expected.begin(), expected.end(), [&](const auto& x) { return x.name == name; });
            throw ContractError("validation error: " +
                                (known ? "missing or misplaced entry '" + e.name + "'" : "unexpected entry '" + name + "'"));
        }
        if (tensor.shape() != e.shape)
            throw ContractError("validation error: entry '" + name + "' has shape " + shape_str(tensor.shape()) +
                                ", architecture expects " + shape_str(e.shape));
        if (e.kind == ParamKind::RV)
            for (T v : tensor.data())
                if (v < T(0)) throw ContractError("validation error: entry '" + name + "' has negative variance");
        ++i;
    }
    if (i < expected.size()) throw ContractError("validation error: missing entry '" + expected[i].name + "'");
}

template <std::floating_point T>
Checkpoint<T> make_checkpoint(const Model<T>& model, CheckpointMeta meta) {
    meta.arch = model.graph.arch();
    meta.bn = model.bn;
    Checkpoint<T> c{model.params, std::move(meta)};
    validate(c);
    return c;
}

template <std::floating_point T>
Model<T> to_model(const Checkpoint<T>& ckpt) {
    return Model<T>{ckpt.graph(), ckpt.entries, ckpt.meta.bn};
}

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(const char* p) {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, p, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
}

inline std::uint32_t crc32_of(std::string_view data) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t pos = 0;
    while (pos < data.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(data.size() - pos, 1u << 30));
        crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data.data() + pos), n);
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// Serializes to the byte layout documented at the top of this file.
template <std::floating_point T>
std::string encode(const Checkpoint<T>& ckpt) {
    std::string payload;
    json entries = json::array();
    for (const auto& [name, tensor] : ckpt.entries) {
        const std::size_t offset = payload.size();
        for (T v : tensor.data()) detail::put_le(payload, v);
        entries.push_back({{"name", name},
                           {"shape", tensor.shape()},
                           {"dtype", std::string(dtype_name<T>())},
                           {"offset", offset},
                           {"nbytes", payload.size() - offset}});
    }
    json header{{"entries", entries},
                {"meta", ckpt.meta},
                {"payload_bytes", payload.size()},
                {"payload_crc32", detail::crc32_of(payload)}};
    const std::string hdr = header.dump();

    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint16_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(hdr.size()));
    out += hdr;
    out += payload;
    return out;
}

/// Parses and validates bytes produced by encode(). Failures raise LoadError
/// whose field() names the offending part.
template <std::floating_point T>
Checkpoint<T> decode(std::string_view bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw LoadError("magic", "bad magic");
    if (bytes.size() < 10) throw LoadError("header", "truncated header");
    const auto version = detail::get_le<std::uint16_t>(bytes.data() + 4);
    if (version != kCheckpointVersion)
        throw LoadError("version", "unknown version " + std::to_string(version));
    const auto hlen = detail::get_le<std::uint32_t>(bytes.data() + 6);
    if (bytes.size() < 10 + static_cast<std::size_t>(hlen)) throw LoadError("header", "truncated header");

    json header;
    try {
        header = json::parse(bytes.substr(10, hlen));
    } catch (const json::exception& e) {
        throw LoadError("header", std::string("header is not valid JSON: ") + e.what());
    }
    const auto payload = bytes.substr(10 + hlen);

    Checkpoint<T> ckpt;
    try {
        const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
        if (payload.size() < payload_bytes) throw LoadError("payload", "truncated payload");
        if (payload.size() > payload_bytes) throw LoadError("payload", "trailing bytes after payload");
        if (detail::crc32_of(payload) != header.at("payload_crc32").get<std::uint32_t>())
            throw LoadError("crc32", "checksum mismatch");
        ckpt.meta = header.at("meta").get<CheckpointMeta>();
        for (const auto& e : header.at("entries")) {
            const auto name = e.at("name").get<std::string>();
            const auto dtype = e.at("dtype").get<std::string>();
            if (dtype != dtype_name<T>())
                throw LoadError("dtype", "entry '" + name + "' has dtype " + dtype + ", expected " +
                                             std::string(dtype_name<T>()));
            const auto shape = e.at("shape").get<Shape>();
            const auto offset = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            const auto count = shape_size(shape);
            if (nbytes != count * sizeof(T) || offset + nbytes > payload.size())
                throw LoadError("entries", "entry '" + name + "' has inconsistent extent");
            std::vector<T> values(count);
            for (std::size_t i = 0; i < count; ++i) values[i] = detail::get_le<T>(payload.data() + offset + i * sizeof(T));
            ckpt.entries.insert(name, Tensor<T>(shape, std::move(values)));
        }
    } catch (const json::exception& e) {
        throw LoadError("header", std::string("malformed header: ") + e.what());
    } catch (const ContractError& e) {
        throw LoadError("meta", e.what());
    }
    try {
        validate(ckpt);
    } catch (const ContractError& e) {
        throw LoadError("entries", e.what());
    }
    return ckpt;
}

template <std::floating_point T>
void save(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
    const auto bytes = encode(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <std::floating_point T>
Checkpoint<T> load(const std::filesystem::path& path) {
    return decode<T>(read_file(path));
}

template <std::floating_point T>
struct KindLayer {
    std::size_t layer;  // 1-based
    std::string name;
    Tensor<T> value;
};

/// Entries of one kind, front to back. Empty for B on a bias-free model.
template <std::floating_point T>
std::vector<KindLayer<T>> get_kind_layers(const Checkpoint<T>& ckpt, ParamKind kind) {
    const auto graph = ckpt.graph();
    std::vector<KindLayer<T>> out;
    for (std::size_t l = 1; l <= graph.layer_count(kind); ++l) {
        auto name = graph.entry_name(kind, l);
        out.push_back({l, name, ckpt.entries.at(name)});
    }
    return out;
}

/// Copy of `ckpt` with one entry replaced; the source is left untouched.
template <std::floating_point T>
Checkpoint<T> replace_param(const Checkpoint<T>& ckpt, ParamKind kind, std::size_t layer, Tensor<T> value) {
    const auto name = ckpt.graph().entry_name(kind, layer);
    if (kind == ParamKind::RV)
        for (T v : value.data())
            if (v < T(0)) throw ContractError("replace_param: running variance must be nonnegative");
    Checkpoint<T> out = ckpt;
    out.entries.set(name, std::move(value));
    return out;
}

}  // namespace layerswap
