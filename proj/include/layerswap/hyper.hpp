#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "layerswap/errors.hpp"

namespace layerswap {

enum class Task { Segmentation, Autoencoder };

constexpr std::string_view to_string(Task t) { return t == Task::Segmentation ? "segmentation" : "autoencoder"; }

inline std::optional<Task> parse_task(std::string_view s) {
    if (s == "segmentation" || s == "seg") return Task::Segmentation;
    if (s == "autoencoder" || s == "auto") return Task::Autoencoder;
    return std::nullopt;
}

enum class Optimizer { Sgd, SgdMomentum };

constexpr std::string_view to_string(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "sgd_momentum"; }

inline std::optional<Optimizer> parse_optimizer(std::string_view s) {
    if (s == "sgd") return Optimizer::Sgd;
    if (s == "sgd_momentum") return Optimizer::SgdMomentum;
    return std::nullopt;
}

/// Training hyperparameters. Defaults target a few minutes of single-core CPU
/// time for a depth-3 model on 64x64 images.
struct Hyper {
    int epochs = 40;
    int batch_size = 8;
    double lr = 0.05;
    Optimizer optimizer = Optimizer::SgdMomentum;
    double momentum = 0.9;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ContractError("hyper: epochs must be positive");
        if (batch_size < 1) throw ContractError("hyper: batch_size must be positive");
        if (!(lr > 0.0)) throw ContractError("hyper: lr must be positive");
        if (optimizer == Optimizer::SgdMomentum && !(momentum > 0.0 && momentum < 1.0))
            throw ContractError("hyper: momentum must be in (0,1)");
    }

    friend bool operator==(const Hyper&, const Hyper&) = default;
};

}  // namespace layerswap
