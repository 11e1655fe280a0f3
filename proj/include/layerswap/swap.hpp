#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "layerswap/format.hpp"
#include "layerswap/parallel.hpp"
#include "layerswap/train.hpp"

namespace layerswap {

/// Both checkpoints must share the architecture and every entry shape. The
/// error names the first entry that differs.
template <std::floating_point T>
void check_compatible(const Checkpoint<T>& a, const Checkpoint<T>& b) {
    auto ia = a.entries.begin(), ib = b.entries.begin();
    for (; ia != a.entries.end() && ib != b.entries.end(); ++ia, ++ib) {
        if (ia->first != ib->first)
            throw ContractError("architecture mismatch at entry '" + ia->first + "' (other has '" + ib->first + "')");
        if (ia->second.shape() != ib->second.shape())
            throw ContractError("architecture mismatch at entry '" + ia->first + "': " + shape_str(ia->second.shape()) +
                                " vs " + shape_str(ib->second.shape()));
    }
    if (ia != a.entries.end()) throw ContractError("architecture mismatch at entry '" + ia->first + "' (missing in other)");
    if (ib != b.entries.end()) throw ContractError("architecture mismatch at entry '" + ib->first + "' (missing in other)");
    if (!(a.meta.arch == b.meta.arch)) throw ContractError("architecture mismatch: declared architectures differ");
}

/// Recipient with entry (kind, layer) replaced by the donor's.
template <std::floating_point T>
Checkpoint<T> swap_one(const Checkpoint<T>& recipient, const Checkpoint<T>& donor, ParamKind kind, std::size_t layer) {
    check_compatible(recipient, donor);
    const auto name = recipient.graph().entry_name(kind, layer);
    return replace_param(recipient, kind, layer, donor.entries.at(name));
}

/// Recipient with every listed (kind, layer) entry replaced by the donor's.
template <std::floating_point T>
Checkpoint<T> swap_bulk(const Checkpoint<T>& recipient, const Checkpoint<T>& donor,
                        const std::vector<std::pair<ParamKind, std::size_t>>& items) {
    check_compatible(recipient, donor);
    const auto g = recipient.graph();
    Checkpoint<T> out = recipient;
    for (auto [k, l] : items) {
        const auto name = g.entry_name(k, l);
        out.entries.set(name, donor.entries.at(name));
    }
    return out;
}

enum class ScanMode { Single, Cumulative };

struct SwapPlan {
    std::vector<ParamKind> kinds{kAllKinds.begin(), kAllKinds.end()};
    std::optional<std::vector<std::size_t>> layers;  // nullopt: every layer of each kind
    ScanMode mode = ScanMode::Single;
};

struct ScanOptions {
    bool keep_going = false;  // record failing rows instead of aborting
    unsigned threads = 0;
};

struct ScanRow {
    ParamKind kind = ParamKind::RM;
    std::size_t layer = 0;
    DiceTable dice;
    std::string error;  // non-empty when the row failed under keep_going
};

struct SwapScanResult {
    DiceTable baseline;
    std::vector<ScanRow> rows;
    std::string donor_id, recipient_id, val_id;

    double drop(const ScanRow& r) const { return baseline.mean_foreground() - r.dice.mean_foreground(); }

    /// Mean foreground Dice drop over the successful rows of the given kinds.
    double mean_drop(std::initializer_list<ParamKind> kinds) const {
        double s = 0;
        std::size_t n = 0;
        for (const auto& r : rows) {
            if (!r.error.empty() || std::find(kinds.begin(), kinds.end(), r.kind) == kinds.end()) continue;
            s += drop(r);
            ++n;
        }
        return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    }

    std::string csv() const {
        const auto C = baseline.per_class.size();
        std::vector<std::string> header{"kind", "layer"};
        for (std::size_t c = 0; c < C; ++c) header.push_back("dice_c" + std::to_string(c));
        header.push_back("error");
        CsvWriter w(header);
        auto emit = [&](std::string kind, std::size_t layer, const DiceTable& d, const std::string& err) {
            std::vector<std::string> f{std::move(kind), std::to_string(layer)};
            for (std::size_t c = 0; c < C; ++c) f.push_back(c < d.per_class.size() ? fmt(d.per_class[c]) : "");
            f.push_back(err);
            w.row(f);
        };
        emit("BASELINE", 0, baseline, "");
        for (const auto& r : rows) emit(std::string(to_string(r.kind)), r.layer, r.dice, r.error);
        return w.str();
    }

    nlohmann::json json() const {
        nlohmann::json rs = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json j{{"kind", std::string(to_string(r.kind))}, {"layer", r.layer}, {"dice", r.dice.per_class}};
            if (!r.error.empty()) j["error"] = r.error;
            rs.push_back(std::move(j));
        }
        return {{"donor", donor_id}, {"recipient", recipient_id}, {"val", val_id},
                {"baseline", baseline.per_class}, {"rows", std::move(rs)}};
    }
};

/// One row per (kind, layer) in canonical kind order, ascending layer. Every
/// row starts from the untouched recipient. In cumulative mode row (k, l)
/// swaps layers 1..l of kind k together.
template <std::floating_point T>
SwapScanResult scan(const Checkpoint<T>& recipient, const Checkpoint<T>& donor, const SwapPlan& plan,
                    const Dataset<T>& val, const ScanOptions& options = {}) {
    check_compatible(recipient, donor);
    const auto g = recipient.graph();

    std::vector<std::pair<ParamKind, std::size_t>> cells;
    for (auto k : kAllKinds) {
        if (std::find(plan.kinds.begin(), plan.kinds.end(), k) == plan.kinds.end()) continue;
        const auto count = g.layer_count(k);
        if (count == 0) continue;
        if (plan.layers) {
            for (auto l : *plan.layers) cells.emplace_back(k, l);
        } else {
            for (std::size_t l = 1; l <= count; ++l) cells.emplace_back(k, l);
        }
    }

    SwapScanResult res;
    res.donor_id = donor.meta.label;
    res.recipient_id = recipient.meta.label;
    res.baseline = evaluate_dice(recipient, val);
    res.rows.resize(cells.size());
    parallel_for(
        cells.size(),
        [&](std::size_t i) {
            auto [k, l] = cells[i];
            auto& row = res.rows[i];
            row.kind = k;
            row.layer = l;
            try {
                if (l == 0 || l > g.layer_count(k))
                    throw IndexError("layer " + std::to_string(l) + " out of range for kind " + std::string(to_string(k)) +
                                     " (1.." + std::to_string(g.layer_count(k)) + ")");
                std::vector<std::pair<ParamKind, std::size_t>> items;
                if (plan.mode == ScanMode::Cumulative)
                    for (std::size_t j = 1; j <= l; ++j) items.emplace_back(k, j);
                else
                    items.emplace_back(k, l);
                row.dice = evaluate_dice(swap_bulk(recipient, donor, items), val);
            } catch (const Error& e) {
                if (!options.keep_going) throw;
                row.error = e.what();
            }
        },
        options.threads);
    return res;
}

}  // namespace layerswap
