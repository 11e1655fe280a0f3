#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "layerswap/format.hpp"
#include "layerswap/swap.hpp"

namespace layerswap {

/// sqrt(mean((a-b)^2)) accumulated in double.
template <std::floating_point T>
double rmse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("rmse: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.size() == 0) throw ContractError("rmse: empty tensor");
    const auto x = a.data(), y = b.data();
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(x.size()));
}

struct LayerValue {
    std::size_t layer = 0;
    double value = 0;
};

template <std::floating_point T>
std::vector<LayerValue> rmse_per_layer(const Checkpoint<T>& a, const Checkpoint<T>& b, ParamKind kind) {
    check_compatible(a, b);
    const auto g = a.graph();
    std::vector<LayerValue> out;
    for (std::size_t l = 1; l <= g.layer_count(kind); ++l) {
        const auto name = g.entry_name(kind, l);
        out.push_back({l, rmse(a.entries.at(name), b.entries.at(name))});
    }
    return out;
}

inline constexpr double kRwZeroThreshold = 1e-8;

/// Closed-form effect of swapping one BN vector, per layer, averaged over
/// channels. base = recipient values, primed = donor values.
///   rm_shift  mean |RW (RM - RM') / sqrt(RV + eps)|
///   rb_shift  mean |RB - RB'|
///   rv_scale  mean sqrt(RV + eps) / sqrt(RV' + eps)
///   rw_scale  mean RW' / RW over channels with |RW| >= 1e-8
struct BnShiftRow {
    std::size_t layer = 0;
    double rm_shift = 0, rb_shift = 0, rv_scale = 0, rw_scale = 0;
    std::size_t rw_excluded = 0;  // channels left out of rw_scale
};

template <std::floating_point T>
std::vector<BnShiftRow> bn_shift_metrics(const Checkpoint<T>& base, const Checkpoint<T>& donor) {
    check_compatible(base, donor);
    const auto g = base.graph();
    const double eps = base.meta.bn.eps;
    std::vector<BnShiftRow> out;
    for (std::size_t l = 1; l <= g.layer_count(ParamKind::RM); ++l) {
        auto get = [&](const Checkpoint<T>& c, ParamKind k) { return c.entries.at(g.entry_name(k, l)).data(); };
        const auto rm = get(base, ParamKind::RM), rv = get(base, ParamKind::RV), rw = get(base, ParamKind::RW),
                   rb = get(base, ParamKind::RB);
        const auto rm2 = get(donor, ParamKind::RM), rv2 = get(donor, ParamKind::RV), rw2 = get(donor, ParamKind::RW),
                   rb2 = get(donor, ParamKind::RB);
        BnShiftRow row;
        row.layer = l;
        const auto C = rm.size();
        std::size_t kept = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const double sd = std::sqrt(static_cast<double>(rv[c]) + eps);
            const double sd2 = std::sqrt(static_cast<double>(rv2[c]) + eps);
            row.rm_shift += std::abs(static_cast<double>(rw[c]) * (static_cast<double>(rm[c]) - rm2[c]) / sd);
            row.rb_shift += std::abs(static_cast<double>(rb[c]) - rb2[c]);
            row.rv_scale += sd / sd2;
            if (std::abs(static_cast<double>(rw[c])) < kRwZeroThreshold) {
                ++row.rw_excluded;
            } else {
                row.rw_scale += static_cast<double>(rw2[c]) / static_cast<double>(rw[c]);
                ++kept;
            }
        }
        const double n = static_cast<double>(C);
        row.rm_shift /= n;
        row.rb_shift /= n;
        row.rv_scale /= n;
        row.rw_scale = kept ? row.rw_scale / static_cast<double>(kept) : std::numeric_limits<double>::quiet_NaN();
        out.push_back(row);
    }
    return out;
}

/// Same check with the BN input supplied directly ([N,C,H,W]).
template <std::floating_point T>
double perturbation_identity_check_at(const Checkpoint<T>& base, const Checkpoint<T>& donor, ParamKind kind,
                                      std::size_t layer, const Tensor<T>& x) {
    if (!is_bn_kind(kind))
        throw ContractError("perturbation_identity_check: kind " + std::string(to_string(kind)) + " is not a BN kind");
    const auto g = base.graph();
    auto get = [&](const Checkpoint<T>& c, ParamKind k) { return c.entries.at(g.entry_name(k, layer)); };
    const auto rm = get(base, ParamKind::RM), rv = get(base, ParamKind::RV), rw = get(base, ParamKind::RW),
               rb = get(base, ParamKind::RB);
    const auto swapped = get(donor, kind);
    const T eps = static_cast<T>(base.meta.bn.eps);

    const auto y = kernels::batchnorm_apply(x, rm.data(), rv.data(), rw.data(), rb.data(), eps);
    const auto sel = [&](ParamKind k, const Tensor<T>& own) { return k == kind ? swapped : own; };
    const auto y_direct = kernels::batchnorm_apply(x, sel(ParamKind::RM, rm).data(), sel(ParamKind::RV, rv).data(),
                                                   sel(ParamKind::RW, rw).data(), sel(ParamKind::RB, rb).data(), eps);

    const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    const double e = static_cast<double>(eps);
    double worst = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double mu = rm[c], var = rv[c], w = rw[c], b = rb[c], s = swapped[c];
            const double sd = std::sqrt(var + e);
            for (std::size_t p = 0; p < P; ++p) {
                const std::size_t i = (n * C + c) * P + p;
                const double xhat = (static_cast<double>(x[i]) - mu) / sd;
                double pred = 0;
                switch (kind) {
                    case ParamKind::RM: pred = static_cast<double>(y[i]) + w * (mu - s) / sd; break;
                    case ParamKind::RV: pred = w * xhat * (sd / std::sqrt(s + e)) + b; break;
                    case ParamKind::RW:
                        pred = std::abs(w) < kRwZeroThreshold ? s * xhat + b : (s / w) * w * xhat + b;
                        break;
                    case ParamKind::RB: pred = static_cast<double>(y[i]) - (b - s); break;
                    default: break;
                }
                worst = std::max(worst, std::abs(static_cast<double>(y_direct[i]) - pred));
            }
        }
    return worst;
}

/// Max |direct - predicted| over the probe batch, where "direct" is the BN
/// output after swapping one vector and "predicted" is the original output
/// corrected in closed form (in double).
template <std::floating_point T>
double perturbation_identity_check(const Checkpoint<T>& base, const Checkpoint<T>& donor, ParamKind kind,
                                   std::size_t layer, const Tensor<T>& probe) {
    if (!is_bn_kind(kind))
        throw ContractError("perturbation_identity_check: kind " + std::string(to_string(kind)) + " is not a BN kind");
    check_compatible(base, donor);
    const auto g = base.graph();
    if (layer == 0 || layer > g.layer_count(kind))
        throw IndexError("perturbation_identity_check: BN layer " + std::to_string(layer) + " out of range");
    const auto x = bn_input_eval(g, base.entries, base.meta.bn, probe, layer);
    return perturbation_identity_check_at(base, donor, kind, layer, x);
}

struct DiffRow {
    ParamKind kind = ParamKind::RM;
    std::size_t layer = 0;
    double rmse = 0;
};

struct DiffReport {
    std::string a_id, b_id;
    std::vector<DiffRow> rows;      // canonical kind order, ascending layer
    std::vector<BnShiftRow> bn;

    std::string rmse_csv() const {
        CsvWriter w({"kind", "layer", "rmse"});
        for (const auto& r : rows) w.row({std::string(to_string(r.kind)), std::to_string(r.layer), fmt(r.rmse)});
        return w.str();
    }

    std::string bn_csv() const {
        CsvWriter w({"layer", "rm_shift", "rb_shift", "rv_scale", "rw_scale", "rw_excluded"});
        for (const auto& r : bn)
            w.row({std::to_string(r.layer), fmt(r.rm_shift), fmt(r.rb_shift), fmt(r.rv_scale), fmt(r.rw_scale),
                   std::to_string(r.rw_excluded)});
        return w.str();
    }

    nlohmann::json json() const {
        nlohmann::json rs = nlohmann::json::array(), bs = nlohmann::json::array();
        for (const auto& r : rows) rs.push_back({{"kind", std::string(to_string(r.kind))}, {"layer", r.layer}, {"rmse", r.rmse}});
        for (const auto& r : bn)
            bs.push_back({{"layer", r.layer}, {"rm_shift", r.rm_shift}, {"rb_shift", r.rb_shift}, {"rv_scale", r.rv_scale},
                          {"rw_scale", std::isnan(r.rw_scale) ? nlohmann::json(nullptr) : nlohmann::json(r.rw_scale)},
                          {"rw_excluded", r.rw_excluded}});
        return {{"a", a_id}, {"b", b_id}, {"rmse", std::move(rs)}, {"bn", std::move(bs)}};
    }
};

template <std::floating_point T>
DiffReport diff_report(const Checkpoint<T>& a, const Checkpoint<T>& b) {
    DiffReport r;
    r.a_id = a.meta.label;
    r.b_id = b.meta.label;
    for (auto k : kAllKinds)
        for (const auto& lv : rmse_per_layer(a, b, k)) r.rows.push_back({k, lv.layer, lv.value});
    r.bn = bn_shift_metrics(a, b);
    return r;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Layers whose RMSE is an outlier within their kind are not reusable.
/// Outlier: modified z-score 0.6745 (x - median) / MAD > tau. Only unusually
/// large differences are flagged. A kind with MAD = 0 is all reusable.
struct ReuseMask {
    double tau = 2.5;
    struct Cell {
        ParamKind kind;
        std::size_t layer;
        double rmse;
        double score;
        bool reusable;
    };
    std::vector<Cell> cells;
    std::vector<std::string> warnings;

    bool reusable(ParamKind k, std::size_t layer) const {
        for (const auto& c : cells)
            if (c.kind == k && c.layer == layer) return c.reusable;
        throw IndexError("reuse mask: no cell for " + std::string(to_string(k)) + " layer " + std::to_string(layer));
    }

    std::vector<std::pair<ParamKind, std::size_t>> reusable_items() const {
        std::vector<std::pair<ParamKind, std::size_t>> out;
        for (const auto& c : cells)
            if (c.reusable) out.emplace_back(c.kind, c.layer);
        return out;
    }

    double reusable_fraction() const {
        if (cells.empty()) return 0;
        return static_cast<double>(reusable_items().size()) / static_cast<double>(cells.size());
    }

    std::string csv() const {
        CsvWriter w({"kind", "layer", "rmse", "score", "reusable"});
        for (const auto& c : cells)
            w.row({std::string(to_string(c.kind)), std::to_string(c.layer), fmt(c.rmse), fmt(c.score), c.reusable ? "1" : "0"});
        return w.str();
    }

    nlohmann::json json() const {
        nlohmann::json cs = nlohmann::json::array();
        for (const auto& c : cells)
            cs.push_back({{"kind", std::string(to_string(c.kind))}, {"layer", c.layer}, {"rmse", c.rmse},
                          {"score", std::isfinite(c.score) ? nlohmann::json(c.score) : nlohmann::json(nullptr)},
                          {"reusable", c.reusable}});
        return {{"tau", std::isfinite(tau) ? nlohmann::json(tau) : nlohmann::json("inf")},
                {"rule", "modified_z_score"}, {"cells", std::move(cs)}, {"warnings", warnings}};
    }
};

inline ReuseMask infer_reuse_mask(const DiffReport& report, double tau = 2.5) {
    if (std::isnan(tau)) throw ContractError("infer_reuse_mask: tau is NaN");
    ReuseMask m;
    m.tau = tau;
    for (auto k : kAllKinds) {
        std::vector<double> xs;
        std::vector<std::size_t> layers;
        for (const auto& r : report.rows)
            if (r.kind == k) xs.push_back(r.rmse), layers.push_back(r.layer);
        if (xs.empty()) continue;
        const double med = median(xs);
        std::vector<double> dev;
        for (double x : xs) dev.push_back(std::abs(x - med));
        const double mad = median(dev);
        if (mad == 0.0)
            m.warnings.push_back("kind " + std::string(to_string(k)) + ": MAD is zero, all layers marked reusable");
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double score = mad == 0.0 ? 0.0 : 0.6745 * (xs[i] - med) / mad;
            m.cells.push_back({k, layers[i], xs[i], score, !(score > tau)});
        }
    }
    return m;
}

}  // namespace layerswap
