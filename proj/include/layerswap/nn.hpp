#pragma once

// Layers and the two toy encoder-decoder families.
//
// Layout for depth D, base channels c (c_s = c * 2^(s-1)):
//
//   enc1..encD   conv3x3 -> BN -> relu, conv3x3 -> BN -> relu, then 2x2 maxpool
//   mid          conv3x3 -> BN -> relu, conv3x3 -> BN -> relu   (c * 2^D channels)
//   decD..dec1   nearest upsample x2, [concat encoder skip], conv3x3 -> BN -> relu
//   head         conv1x1 to out_channels
//
// MiniUNet concatenates the encoder feature of the same resolution after the
// upsample (upsampled channels first); MiniSegNet does not. Both families
// therefore have 3D + 2 BN layers and 3D + 3 conv layers, numbered 1.. front to
// back in execution order.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "layerswap/errors.hpp"
#include "layerswap/kernels.hpp"
#include "layerswap/ops.hpp"
#include "layerswap/rng.hpp"
#include "layerswap/tape.hpp"
#include "layerswap/tensor_map.hpp"

namespace layerswap {

/// RM/RV/RW/RB: BN running mean, running variance, weight, bias.
/// W/B: convolution kernel and bias.
enum class ParamKind { RM, RV, RW, RB, W, B };

inline constexpr std::array<ParamKind, 6> kAllKinds{ParamKind::RM, ParamKind::RV, ParamKind::RW,
                                                    ParamKind::RB, ParamKind::W,  ParamKind::B};
inline constexpr std::array<ParamKind, 4> kBnKinds{ParamKind::RM, ParamKind::RV, ParamKind::RW, ParamKind::RB};

constexpr bool is_bn_kind(ParamKind k) { return k != ParamKind::W && k != ParamKind::B; }

constexpr std::string_view to_string(ParamKind k) {
    switch (k) {
        case ParamKind::RM: return "RM";
        case ParamKind::RV: return "RV";
        case ParamKind::RW: return "RW";
        case ParamKind::RB: return "RB";
        case ParamKind::W: return "W";
        case ParamKind::B: return "B";
    }
    return "?";
}

inline std::optional<ParamKind> parse_kind(std::string_view s) {
    for (auto k : kAllKinds)
        if (to_string(k) == s) return k;
    return std::nullopt;
}

enum class Family { MiniUNet, MiniSegNet };

constexpr std::string_view to_string(Family f) { return f == Family::MiniUNet ? "MiniUNet" : "MiniSegNet"; }

inline std::optional<Family> parse_family(std::string_view s) {
    if (s == "MiniUNet") return Family::MiniUNet;
    if (s == "MiniSegNet") return Family::MiniSegNet;
    return std::nullopt;
}

struct ArchSpec {
    Family family = Family::MiniUNet;
    int depth = 3;
    int base_channels = 8;
    int in_channels = 1;
    int out_channels = 4;
    bool conv_bias = true;

    void validate() const {
        if (depth < 1) throw ContractError("arch: depth must be >= 1");
        if (base_channels < 1) throw ContractError("arch: base_channels must be >= 1");
        if (in_channels < 1 || out_channels < 1) throw ContractError("arch: channel counts must be >= 1");
        if (depth > 12) throw ContractError("arch: depth too large");
    }

    /// Required divisor of the input height and width.
    std::size_t spatial_divisor() const { return std::size_t{1} << depth; }

    std::size_t bn_layer_count() const { return static_cast<std::size_t>(3 * depth + 2); }
    std::size_t conv_layer_count() const { return static_cast<std::size_t>(3 * depth + 3); }

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

enum class Mode { Train, Eval };

/// Epsilon, running-average momentum, and the variance estimator used for the
/// running variance (biased 1/n by default).
struct BnConfig {
    double eps = 1e-5;
    double momentum = 0.1;
    bool unbiased_running_var = false;

    friend bool operator==(const BnConfig&, const BnConfig&) = default;
};

struct ConvLayerSpec {
    std::string prefix;  // e.g. "enc1.block2.conv"
    std::size_t cin, cout, kernel, padding;
    bool bias;
    Shape weight_shape() const { return {cout, cin, kernel, kernel}; }
};

struct BnLayerSpec {
    std::string prefix;  // e.g. "enc1.block2.bn"
    std::size_t channels;
};

struct EntrySpec {
    std::string name;
    Shape shape;
    ParamKind kind;
    std::size_t layer;  // 1-based within kind
};

/// Executable layer sequence built from an ArchSpec. Holds structure only;
/// parameter values live in a TensorMap keyed by entry name.
class ModelGraph {
public:
    enum class Op { Conv, BatchNorm, Relu, MaxPool, Upsample, PushSkip, ConcatSkip };

    struct Node {
        Op op;
        std::size_t layer = 0;  // 0-based index into convs()/bns() for Conv/BatchNorm
    };

    explicit ModelGraph(const ArchSpec& spec) : arch_(spec) {
        spec.validate();
        const auto ch = [&](int s) { return static_cast<std::size_t>(spec.base_channels) << (s - 1); };
        std::size_t cur = static_cast<std::size_t>(spec.in_channels);
        auto conv_bn_relu = [&](const std::string& stage, int block, std::size_t cin, std::size_t cout) {
            const std::string pre = stage + ".block" + std::to_string(block);
            add_conv(pre + ".conv", cin, cout, 3, 1, spec.conv_bias);
            nodes_.push_back({Op::BatchNorm, bns_.size()});
            bns_.push_back({pre + ".bn", cout});
            nodes_.push_back({Op::Relu});
        };
        for (int s = 1; s <= spec.depth; ++s) {
            const std::string stage = "enc" + std::to_string(s);
            conv_bn_relu(stage, 1, cur, ch(s));
            conv_bn_relu(stage, 2, ch(s), ch(s));
            cur = ch(s);
            if (spec.family == Family::MiniUNet) nodes_.push_back({Op::PushSkip});
            nodes_.push_back({Op::MaxPool});
        }
        conv_bn_relu("mid", 1, cur, ch(spec.depth + 1));
        conv_bn_relu("mid", 2, ch(spec.depth + 1), ch(spec.depth + 1));
        cur = ch(spec.depth + 1);
        for (int s = spec.depth; s >= 1; --s) {
            nodes_.push_back({Op::Upsample});
            std::size_t cin = cur;
            if (spec.family == Family::MiniUNet) {
                nodes_.push_back({Op::ConcatSkip});
                cin += ch(s);
            }
            conv_bn_relu("dec" + std::to_string(s), 1, cin, ch(s));
            cur = ch(s);
        }
        add_conv("head.block1.conv", cur, static_cast<std::size_t>(spec.out_channels), 1, 0, spec.conv_bias);

        for (const auto& e : entries()) lookup_.emplace(e.name, std::pair{e.kind, e.layer});
    }

    const ArchSpec& arch() const noexcept { return arch_; }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    const std::vector<ConvLayerSpec>& convs() const noexcept { return convs_; }
    const std::vector<BnLayerSpec>& bns() const noexcept { return bns_; }

    std::size_t layer_count(ParamKind k) const {
        if (is_bn_kind(k)) return bns_.size();
        if (k == ParamKind::B) return arch_.conv_bias ? convs_.size() : 0;
        return convs_.size();
    }

    /// Entry name for (kind, 1-based layer).
    std::string entry_name(ParamKind k, std::size_t layer) const {
        if (layer < 1 || layer > layer_count(k))
            throw IndexError("layer " + std::to_string(layer) + " out of range for kind " + std::string(to_string(k)) +
                             " (1.." + std::to_string(layer_count(k)) + ")");
        const auto& prefix = is_bn_kind(k) ? bns_[layer - 1].prefix : convs_[layer - 1].prefix;
        return prefix + "." + std::string(to_string(k));
    }

    /// Inverse of entry_name.
    std::optional<std::pair<ParamKind, std::size_t>> locate(const std::string& name) const {
        auto it = lookup_.find(name);
        if (it == lookup_.end()) return std::nullopt;
        return it->second;
    }

    /// Every parameter entry in canonical checkpoint order: layers in execution
    /// order, W,B for conv and RM,RV,RW,RB for BN.
    std::vector<EntrySpec> entries() const {
        std::vector<EntrySpec> out;
        for (const auto& node : nodes_) {
            if (node.op == Op::Conv) {
                const auto& c = convs_[node.layer];
                out.push_back({c.prefix + ".W", c.weight_shape(), ParamKind::W, node.layer + 1});
                if (c.bias) out.push_back({c.prefix + ".B", {c.cout}, ParamKind::B, node.layer + 1});
            } else if (node.op == Op::BatchNorm) {
                const auto& b = bns_[node.layer];
                for (auto k : kBnKinds) out.push_back({b.prefix + "." + std::string(to_string(k)), {b.channels}, k, node.layer + 1});
            }
        }
        return out;
    }

private:
    void add_conv(std::string prefix, std::size_t cin, std::size_t cout, std::size_t k, std::size_t pad, bool bias) {
        nodes_.push_back({Op::Conv, convs_.size()});
        convs_.push_back({std::move(prefix), cin, cout, k, pad, bias});
    }

    ArchSpec arch_;
    std::vector<Node> nodes_;
    std::vector<ConvLayerSpec> convs_;
    std::vector<BnLayerSpec> bns_;
    std::unordered_map<std::string, std::pair<ParamKind, std::size_t>> lookup_;
};

/// Standalone BN layer.
template <std::floating_point T>
struct BnLayer {
    Tensor<T> running_mean, running_var, weight, bias;
    BnConfig config;

    explicit BnLayer(std::size_t channels, BnConfig cfg = {})
        : running_mean(Tensor<T>::zeros({channels})),
          running_var(Tensor<T>::filled({channels}, T(1))),
          weight(Tensor<T>::filled({channels}, T(1))),
          bias(Tensor<T>::zeros({channels})),
          config(cfg) {}

    BnLayer(Tensor<T> rm, Tensor<T> rv, Tensor<T> rw, Tensor<T> rb, BnConfig cfg = {})
        : running_mean(std::move(rm)), running_var(std::move(rv)), weight(std::move(rw)), bias(std::move(rb)), config(cfg) {
        const auto c = running_mean.size();
        if (running_var.size() != c || weight.size() != c || bias.size() != c)
            throw DimensionError("BN layer vectors must have identical length");
        for (T v : running_var.data())
            if (v < T(0)) throw ContractError("BN running variance must be nonnegative");
    }

    std::size_t channels() const { return running_mean.size(); }
};

/// New running statistic: (1 - momentum) * old + momentum * batch.
template <std::floating_point T>
Tensor<T> running_update(const Tensor<T>& old, std::span<const T> batch, T momentum) {
    std::vector<T> out(old.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (T(1) - momentum) * old[c] + momentum * batch[c];
    return Tensor<T>(old.shape(), std::move(out));
}

template <std::floating_point T>
std::vector<T> running_var_sample(const kernels::BatchNormStats<T>& st, bool unbiased) {
    if (!unbiased || st.count < 2) return st.var;
    std::vector<T> v = st.var;
    const T f = static_cast<T>(st.count) / static_cast<T>(st.count - 1);
    for (auto& x : v) x *= f;
    return v;
}

/// Train mode normalizes with batch statistics and updates the layer's running
/// statistics; eval mode uses the running statistics and changes nothing.
template <std::floating_point T>
Tensor<T> bn_forward(BnLayer<T>& layer, const Tensor<T>& x, Mode mode) {
    kernels::require_4d(x.shape(), "bn_forward");
    if (x.dim(1) != layer.channels())
        throw DimensionError("bn_forward: layer has " + std::to_string(layer.channels()) + " channels, input has " +
                             std::to_string(x.dim(1)));
    const T eps = static_cast<T>(layer.config.eps);
    if (mode == Mode::Eval)
        return kernels::batchnorm_apply<T>(x, layer.running_mean.data(), layer.running_var.data(), layer.weight.data(),
                                           layer.bias.data(), eps);
    const auto st = kernels::batch_stats(x);
    auto y = kernels::batchnorm_apply<T>(x, st.mean, st.var, layer.weight.data(), layer.bias.data(), eps);
    const T m = static_cast<T>(layer.config.momentum);
    const auto var_sample = running_var_sample(st, layer.config.unbiased_running_var);
    layer.running_mean = running_update<T>(layer.running_mean, st.mean, m);
    layer.running_var = running_update<T>(layer.running_var, var_sample, m);
    return y;
}

/// Fresh parameters for a graph: Kaiming-uniform conv weights (bound
/// sqrt(6 / fan_in)), uniform conv biases (bound 1 / sqrt(fan_in)), and BN
/// RM = 0, RV = 1, RW = 1, RB = 0. Draws happen in entry order from one stream.
template <std::floating_point T>
TensorMap<T> init_params(const ModelGraph& graph, std::uint64_t seed) {
    Rng rng(seed);
    TensorMap<T> params;
    for (const auto& e : graph.entries()) {
        const auto n = shape_size(e.shape);
        std::vector<T> v(n);
        switch (e.kind) {
            case ParamKind::W:
            case ParamKind::B: {
                const auto& c = graph.convs()[e.layer - 1];
                const double fan_in = static_cast<double>(c.cin * c.kernel * c.kernel);
                const double bound = e.kind == ParamKind::W ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
                for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
            case ParamKind::RM:
            case ParamKind::RB: std::fill(v.begin(), v.end(), T(0)); break;
            case ParamKind::RV:
            case ParamKind::RW: std::fill(v.begin(), v.end(), T(1)); break;
        }
        params.insert(e.name, Tensor<T>(e.shape, std::move(v)));
    }
    return params;
}

/// A graph together with its parameter values.
template <std::floating_point T>
struct Model {
    ModelGraph graph;
    TensorMap<T> params;
    BnConfig bn;
};

template <std::floating_point T>
Model<T> build_model(const ArchSpec& spec, std::uint64_t seed, BnConfig bn = {}) {
    ModelGraph graph(spec);
    auto params = init_params<T>(graph, seed);
    return Model<T>{std::move(graph), std::move(params), bn};
}

/// Per-run knobs for forward_on_tape.
template <std::floating_point T>
struct ForwardOptions {
    Mode mode = Mode::Eval;
    /// BN layers (0-based) forced into eval mode even when mode == Train.
    const std::vector<bool>* bn_eval_override = nullptr;
    /// Stop and return the input of this BN layer (1-based) instead of the output.
    std::optional<std::size_t> stop_before_bn;
    /// Receives batch statistics per BN layer that ran in train mode.
    std::vector<std::optional<kernels::BatchNormStats<T>>>* batch_stats = nullptr;
};

template <std::floating_point T>
void check_input(const ModelGraph& graph, const Tensor<T>& batch) {
    const auto& a = graph.arch();
    if (batch.rank() != 4) throw DimensionError("forward: batch must be [N,C,H,W], got " + shape_str(batch.shape()));
    if (batch.dim(1) != static_cast<std::size_t>(a.in_channels))
        throw DimensionError("forward: model expects " + std::to_string(a.in_channels) + " input channels, batch has " +
                             std::to_string(batch.dim(1)));
    const auto d = a.spatial_divisor();
    if (batch.dim(2) % d || batch.dim(3) % d)
        throw DimensionError("forward: spatial dims " + shape_str(batch.shape()) + " not divisible by " + std::to_string(d));
}

/// Runs the graph on `tape`. `vars` must hold a Var for every W, B, RW and RB
/// entry; RM and RV are read from `params` as constants.
template <std::floating_point T>
Var<T> forward_on_tape(const ModelGraph& graph, const TensorMap<T>& params,
                       const std::unordered_map<std::string, Var<T>>& vars, const BnConfig& bn, Var<T> input,
                       const ForwardOptions<T>& opts) {
    check_input(graph, input.value());
    const T eps = static_cast<T>(bn.eps);
    auto var = [&](const std::string& name) -> Var<T> {
        auto it = vars.find(name);
        if (it == vars.end()) throw ContractError("forward: no variable for entry '" + name + "'");
        return it->second;
    };
    if (opts.batch_stats) opts.batch_stats->assign(graph.bns().size(), std::nullopt);

    Var<T> x = input;
    std::vector<Var<T>> skips;
    for (const auto& node : graph.nodes()) {
        switch (node.op) {
            case ModelGraph::Op::Conv: {
                const auto& c = graph.convs()[node.layer];
                std::optional<Var<T>> b;
                if (c.bias) b = var(c.prefix + ".B");
                x = ops::conv2d(x, var(c.prefix + ".W"), b, 1, c.padding);
                break;
            }
            case ModelGraph::Op::BatchNorm: {
                if (opts.stop_before_bn && *opts.stop_before_bn == node.layer + 1) return x;
                const auto& b = graph.bns()[node.layer];
                const bool eval = opts.mode == Mode::Eval ||
                                  (opts.bn_eval_override && (*opts.bn_eval_override)[node.layer]);
                if (eval) {
                    x = ops::batchnorm_eval(x, params.at(b.prefix + ".RM"), params.at(b.prefix + ".RV"),
                                            var(b.prefix + ".RW"), var(b.prefix + ".RB"), eps);
                } else {
                    kernels::BatchNormStats<T> st;
                    x = ops::batchnorm_train(x, var(b.prefix + ".RW"), var(b.prefix + ".RB"), eps, &st);
                    if (opts.batch_stats) (*opts.batch_stats)[node.layer] = std::move(st);
                }
                break;
            }
            case ModelGraph::Op::Relu: x = ops::relu(x); break;
            case ModelGraph::Op::MaxPool: x = ops::maxpool2x2(x); break;
            case ModelGraph::Op::Upsample: x = ops::upsample2x(x); break;
            case ModelGraph::Op::PushSkip: skips.push_back(x); break;
            case ModelGraph::Op::ConcatSkip:
                x = ops::concat(x, skips.back());
                skips.pop_back();
                break;
        }
    }
    if (opts.stop_before_bn) throw IndexError("forward: BN layer " + std::to_string(*opts.stop_before_bn) + " does not exist");
    return x;
}

/// Leaf vars for every trainable-shaped entry (W, B, RW, RB) on `tape`.
/// Entries in `trainable` get requires_grad = true.
template <std::floating_point T>
std::unordered_map<std::string, Var<T>> make_param_vars(Tape<T>& tape, const ModelGraph& graph,
                                                        const TensorMap<T>& params,
                                                        const std::vector<bool>* trainable = nullptr) {
    std::unordered_map<std::string, Var<T>> vars;
    const auto entries = graph.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.kind == ParamKind::RM || e.kind == ParamKind::RV) continue;
        vars.emplace(e.name, tape.leaf(params.at(e.name), trainable && (*trainable)[i]));
    }
    return vars;
}

/// Eval-mode forward: a pure function of (params, batch).
template <std::floating_point T>
Tensor<T> forward_eval(const ModelGraph& graph, const TensorMap<T>& params, const BnConfig& bn, const Tensor<T>& batch) {
    Tape<T> tape;
    auto vars = make_param_vars(tape, graph, params);
    auto out = forward_on_tape(graph, params, vars, bn, tape.leaf(batch), ForwardOptions<T>{});
    return out.value();
}

/// Input tensor reaching BN layer `layer` (1-based) in eval mode.
template <std::floating_point T>
Tensor<T> bn_input_eval(const ModelGraph& graph, const TensorMap<T>& params, const BnConfig& bn, const Tensor<T>& batch,
                        std::size_t layer) {
    Tape<T> tape;
    auto vars = make_param_vars(tape, graph, params);
    ForwardOptions<T> opts;
    opts.stop_before_bn = layer;
    return forward_on_tape(graph, params, vars, bn, tape.leaf(batch), opts).value();
}

/// Folds recorded batch statistics into RM/RV of the BN layers that ran in
/// train mode.
template <std::floating_point T>
void apply_running_updates(const ModelGraph& graph, const BnConfig& bn,
                           const std::vector<std::optional<kernels::BatchNormStats<T>>>& stats, TensorMap<T>& params) {
    const T m = static_cast<T>(bn.momentum);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        if (!stats[i]) continue;
        const auto& prefix = graph.bns()[i].prefix;
        params.set(prefix + ".RM", running_update<T>(params.at(prefix + ".RM"), stats[i]->mean, m));
        params.set(prefix + ".RV", running_update<T>(params.at(prefix + ".RV"),
                                                     running_var_sample(*stats[i], bn.unbiased_running_var), m));
    }
}

/// Forward over a model. Train mode additionally folds the batch statistics
/// into the running mean/variance of every BN layer; weights are not touched.
template <std::floating_point T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch, Mode mode) {
    if (mode == Mode::Eval) return forward_eval(model.graph, model.params, model.bn, batch);
    Tape<T> tape;
    auto vars = make_param_vars(tape, model.graph, model.params);
    std::vector<std::optional<kernels::BatchNormStats<T>>> stats;
    ForwardOptions<T> opts;
    opts.mode = Mode::Train;
    opts.batch_stats = &stats;
    auto out = forward_on_tape(model.graph, model.params, vars, model.bn, tape.leaf(batch), opts).value();
    apply_running_updates(model.graph, model.bn, stats, model.params);
    return out;
}

}  // namespace layerswap
