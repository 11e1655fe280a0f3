#pragma once

// Synthetic cardiac-like images with 4-class masks.
//
// Each image has an inner elliptical disk (label 1), a ring around it (label
// 2) and a separate elliptical blob to the right (label 3) on background
// (label 0). All lengths are fractions of the image size H:
//
//   disk center     x ~ U[0.35, 0.50] H, y ~ U[0.35, 0.65] H
//   disk radius     r ~ U[0.08, 0.15] H, per-axis factor U[0.9, 1.1]
//   ring thickness  t ~ U[0.04, 0.08] H
//   blob            gap ~ U[0.01, 0.04] H right of the ring,
//                   half-axes U[0.05, 0.09] H (x) and U[0.08, 0.14] H (y),
//                   vertical offset U[-0.10, 0.10] H
//
// Domain A: dark background with a faint diagonal sinusoidal texture.
// Domain B: brighter background, lower disk/blob contrast, stronger noise, a
// vertical-stripe background texture and low-frequency multiplicative shading
// (gain 0.7 to 1.0 along a random direction). Class intensity order is the
// same in both domains.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include "layerswap/errors.hpp"
#include "layerswap/rng.hpp"
#include "layerswap/tensor.hpp"

namespace layerswap {

enum class Domain { A, B };

constexpr std::string_view to_string(Domain d) { return d == Domain::A ? "A" : "B"; }

inline std::optional<Domain> parse_domain(std::string_view s) {
    if (s == "A") return Domain::A;
    if (s == "B") return Domain::B;
    return std::nullopt;
}

inline constexpr int kNumClasses = 4;

struct DatasetSpec {
    Domain domain = Domain::A;
    int n_samples = 100;
    int image_size = 64;
    std::uint64_t seed = 0;
    double noise_sigma = 0.05;

    static DatasetSpec defaults(Domain d) {
        DatasetSpec s;
        s.domain = d;
        s.seed = d == Domain::A ? 11 : 23;
        s.noise_sigma = d == Domain::A ? 0.05 : 0.07;
        return s;
    }

    void validate(std::size_t spatial_divisor = 1) const {
        if (n_samples < 1) throw ContractError("dataset: n_samples must be >= 1");
        if (image_size < 8) throw ContractError("dataset: image_size must be >= 8");
        if (static_cast<std::size_t>(image_size) % spatial_divisor)
            throw ContractError("dataset: image_size " + std::to_string(image_size) + " not divisible by " +
                                std::to_string(spatial_divisor));
        if (!(noise_sigma >= 0.0)) throw ContractError("dataset: noise_sigma must be >= 0");
    }

    std::string tag() const {
        return "synth-" + std::string(to_string(domain)) + "-n" + std::to_string(n_samples) + "-s" +
               std::to_string(image_size) + "-seed" + std::to_string(seed);
    }

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

template <std::floating_point T>
struct Sample {
    Tensor<T> image;                  // [1,H,W], values in [0,1]
    std::vector<std::int32_t> mask;   // [H,W], labels 0..3
    std::size_t index = 0;            // position in the generated dataset

    std::size_t height() const { return image.dim(1); }
    std::size_t width() const { return image.dim(2); }
};

template <std::floating_point T>
using Dataset = std::vector<Sample<T>>;

namespace detail {

struct Geometry {
    double cx, cy, rx, ry, t;
    double bx, by, bax, bay;
};

inline Geometry draw_geometry(Rng& rng, double H) {
    Geometry g{};
    g.cx = rng.uniform(0.35, 0.50) * H;
    g.cy = rng.uniform(0.35, 0.65) * H;
    const double r = rng.uniform(0.08, 0.15) * H;
    g.rx = r * rng.uniform(0.9, 1.1);
    g.ry = r * rng.uniform(0.9, 1.1);
    g.t = rng.uniform(0.04, 0.08) * H;
    const double gap = rng.uniform(0.01, 0.04) * H;
    g.bax = rng.uniform(0.05, 0.09) * H;
    g.bay = rng.uniform(0.08, 0.14) * H;
    g.bx = g.cx + g.rx + g.t + gap + g.bax;
    g.by = g.cy + rng.uniform(-0.10, 0.10) * H;
    return g;
}

inline std::int32_t label_at(const Geometry& g, double x, double y) {
    const double dx = x - g.cx, dy = y - g.cy;
    const double inner = (dx * dx) / (g.rx * g.rx) + (dy * dy) / (g.ry * g.ry);
    if (inner <= 1.0) return 1;
    const double ox = g.rx + g.t, oy = g.ry + g.t;
    if ((dx * dx) / (ox * ox) + (dy * dy) / (oy * oy) <= 1.0) return 2;
    const double bx = x - g.bx, by = y - g.by;
    if ((bx * bx) / (g.bax * g.bax) + (by * by) / (g.bay * g.bay) <= 1.0) return 3;
    return 0;
}

struct Palette {
    std::array<double, kNumClasses> level;
};

inline Palette palette(Domain d) {
    if (d == Domain::A) return {{0.15, 0.85, 0.45, 0.65}};
    return {{0.25, 0.80, 0.50, 0.70}};
}

}  // namespace detail

/// One sample; a pure function of (spec, index).
template <std::floating_point T>
Sample<T> generate_sample(const DatasetSpec& spec, std::size_t index) {
    const std::size_t H = static_cast<std::size_t>(spec.image_size);
    const double Hd = static_cast<double>(H);
    Rng rng(mix_seed(spec.seed ^ (spec.domain == Domain::A ? 0xA11CEull : 0xB0Bull), index));

    // Redraw until every foreground class is visible.
    detail::Geometry g{};
    std::vector<std::int32_t> mask(H * H);
    for (int attempt = 0;; ++attempt) {
        g = detail::draw_geometry(rng, Hd);
        std::array<std::size_t, kNumClasses> counts{};
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < H; ++x) {
                const auto l = detail::label_at(g, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
                mask[y * H + x] = l;
                ++counts[static_cast<std::size_t>(l)];
            }
        if (counts[1] && counts[2] && counts[3]) break;
        if (attempt > 1000) throw ContractError("dataset: could not place all classes; image_size too small");
    }

    auto pal = detail::palette(spec.domain);
    for (auto& v : pal.level) v += rng.uniform(-0.04, 0.04);

    // Background texture / shading parameters.
    const double fx = rng.uniform(2.0, 4.0), fy = rng.uniform(2.0, 4.0), phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double shade_dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double shade_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    std::vector<T> img(H * H);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < H; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / Hd, v = (static_cast<double>(y) + 0.5) / Hd;
            const auto l = mask[y * H + x];
            double val = pal.level[static_cast<std::size_t>(l)];
            if (spec.domain == Domain::A) {
                if (l == 0) val += 0.05 * std::sin(2.0 * std::numbers::pi * (fx * u + fy * v) + phase);
            } else {
                const double s = u * std::cos(shade_dir) + v * std::sin(shade_dir);
                val *= 0.85 + 0.15 * std::cos(std::numbers::pi * s + shade_phase);
                if (l == 0) val += 0.04 * std::sin(2.0 * std::numbers::pi * (2.0 * fx * u) + phase);
            }
            val += spec.noise_sigma * rng.normal();
            img[y * H + x] = static_cast<T>(std::clamp(val, 0.0, 1.0));
        }
    return Sample<T>{Tensor<T>({1, H, H}, std::move(img)), std::move(mask), index};
}

/// Deterministic in spec.seed.
template <std::floating_point T>
Dataset<T> generate(const DatasetSpec& spec) {
    spec.validate();
    Dataset<T> out;
    out.reserve(static_cast<std::size_t>(spec.n_samples));
    for (std::size_t i = 0; i < static_cast<std::size_t>(spec.n_samples); ++i) out.push_back(generate_sample<T>(spec, i));
    return out;
}

/// The image replicated `channels` times: [channels,H,W].
template <std::floating_point T>
Tensor<T> autoencoder_target(const Sample<T>& s, int channels) {
    if (channels < 1) throw ContractError("autoencoder_target: channels must be >= 1");
    const auto img = s.image.data();
    std::vector<T> out;
    out.reserve(img.size() * static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) out.insert(out.end(), img.begin(), img.end());
    return Tensor<T>({static_cast<std::size_t>(channels), s.height(), s.width()}, std::move(out));
}

/// Seeded shuffle of the indices 0..n-1, then prefix split.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, std::size_t train_count,
                                                                                 std::uint64_t seed) {
    if (train_count >= n)
        throw ContractError("split: train_count " + std::to_string(train_count) + " must be < n_samples " +
                            std::to_string(n));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    shuffle(idx, rng);
    return {std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(train_count)),
            std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(train_count), idx.end())};
}

template <std::floating_point T>
Dataset<T> select(const Dataset<T>& data, const std::vector<std::size_t>& indices) {
    Dataset<T> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(data.at(i));
    return out;
}

template <std::floating_point T>
std::pair<Dataset<T>, Dataset<T>> split(const Dataset<T>& data, std::size_t train_count, std::uint64_t seed) {
    auto [tr, va] = split_indices(data.size(), train_count, seed);
    return {select(data, tr), select(data, va)};
}

/// Stacks images of the given samples into [n,1,H,W].
template <std::floating_point T>
Tensor<T> stack_images(const Dataset<T>& data, std::span<const std::size_t> which) {
    if (which.empty()) throw ContractError("stack_images: empty batch");
    const auto& first = data.at(which[0]).image;
    std::vector<T> out;
    out.reserve(which.size() * first.size());
    for (auto i : which) {
        const auto& img = data.at(i).image;
        if (img.shape() != first.shape()) throw DimensionError("stack_images: samples differ in shape");
        out.insert(out.end(), img.data().begin(), img.data().end());
    }
    return Tensor<T>({which.size(), first.dim(0), first.dim(1), first.dim(2)}, std::move(out));
}

template <std::floating_point T>
std::vector<std::int32_t> stack_masks(const Dataset<T>& data, std::span<const std::size_t> which) {
    std::vector<std::int32_t> out;
    for (auto i : which) out.insert(out.end(), data.at(i).mask.begin(), data.at(i).mask.end());
    return out;
}

template <std::floating_point T>
Tensor<T> stack_targets(const Dataset<T>& data, std::span<const std::size_t> which, int channels) {
    std::vector<T> out;
    Shape one;
    for (auto i : which) {
        auto t = autoencoder_target(data.at(i), channels);
        one = t.shape();
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    return Tensor<T>({which.size(), one.at(0), one.at(1), one.at(2)}, std::move(out));
}

/// Writes images.f32 ([N,1,H,W] little-endian float32), masks.i32 ([N,H,W]
/// little-endian int32) and index.json describing both.
template <std::floating_point T>
void dump_dataset(const Dataset<T>& data, const DatasetSpec& spec, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    auto write = [&](const std::string& name, auto&& fill) {
        std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + (dir / name).string() + "'");
        fill(out);
    };
    static_assert(std::endian::native == std::endian::little, "dataset dump assumes a little-endian host");
    write("images.f32", [&](std::ofstream& out) {
        for (const auto& s : data)
            for (T v : s.image.data()) {
                const float f = static_cast<float>(v);
                out.write(reinterpret_cast<const char*>(&f), sizeof f);
            }
    });
    write("masks.i32", [&](std::ofstream& out) {
        for (const auto& s : data) out.write(reinterpret_cast<const char*>(s.mask.data()),
                                             static_cast<std::streamsize>(s.mask.size() * sizeof(std::int32_t)));
    });
    nlohmann::json index{{"domain", std::string(to_string(spec.domain))},
                         {"n_samples", data.size()},
                         {"image_size", spec.image_size},
                         {"seed", spec.seed},
                         {"noise_sigma", spec.noise_sigma},
                         {"images", {{"file", "images.f32"}, {"dtype", "f32"}, {"shape", {data.size(), 1, spec.image_size, spec.image_size}}}},
                         {"masks", {{"file", "masks.i32"}, {"dtype", "i32"}, {"shape", {data.size(), spec.image_size, spec.image_size}}}}};
    write("index.json", [&](std::ofstream& out) { out << index.dump(2) << '\n'; });
}

}  // namespace layerswap
