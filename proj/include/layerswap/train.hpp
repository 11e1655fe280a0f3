#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "layerswap/checkpoint.hpp"
#include "layerswap/data.hpp"
#include "layerswap/format.hpp"
#include "layerswap/ops.hpp"

namespace layerswap {

/// Set of entry names held fixed during training.
class FreezeMask {
public:
    FreezeMask() = default;
    explicit FreezeMask(std::set<std::string> names) : names_(std::move(names)) {}

    static FreezeMask all(const ModelGraph& g) {
        FreezeMask m;
        for (const auto& e : g.entries()) m.names_.insert(e.name);
        return m;
    }

    static FreezeMask of(const ModelGraph& g, const std::vector<std::pair<ParamKind, std::size_t>>& items) {
        FreezeMask m;
        for (auto [k, l] : items) m.names_.insert(g.entry_name(k, l));
        return m;
    }

    void add(std::string name) { names_.insert(std::move(name)); }
    bool contains(const std::string& name) const { return names_.count(name) != 0; }
    bool empty() const noexcept { return names_.empty(); }
    std::size_t size() const noexcept { return names_.size(); }
    const std::set<std::string>& names() const noexcept { return names_; }

    void validate(const ModelGraph& g) const {
        for (const auto& n : names_)
            if (!g.locate(n)) throw ContractError("freeze mask: unknown entry '" + n + "'");
    }

private:
    std::set<std::string> names_;
};

/// Per-class Dice on one evaluation set.
struct DiceTable {
    std::vector<double> per_class;

    double mean_foreground() const {
        if (per_class.size() < 2) return std::numeric_limits<double>::quiet_NaN();
        double s = 0;
        for (std::size_t c = 1; c < per_class.size(); ++c) s += per_class[c];
        return s / static_cast<double>(per_class.size() - 1);
    }

    friend bool operator==(const DiceTable&, const DiceTable&) = default;
};

/// Accumulates |P∩G|, |P| and |G| per class over any number of images.
class DiceAccumulator {
public:
    explicit DiceAccumulator(std::size_t classes) : inter_(classes), pred_(classes), truth_(classes) {}

    void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth) {
        if (pred.size() != truth.size()) throw DimensionError("dice: prediction and truth sizes differ");
        const auto C = inter_.size();
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const auto p = static_cast<std::size_t>(pred[i]), t = static_cast<std::size_t>(truth[i]);
            if (p >= C || t >= C) throw IndexError("dice: label out of range");
            ++pred_[p];
            ++truth_[t];
            if (p == t) ++inter_[p];
        }
    }

    /// Classes absent from both prediction and truth score 1.
    DiceTable table() const {
        DiceTable d;
        for (std::size_t c = 0; c < inter_.size(); ++c) {
            const auto den = pred_[c] + truth_[c];
            d.per_class.push_back(den == 0 ? 1.0 : 2.0 * static_cast<double>(inter_[c]) / static_cast<double>(den));
        }
        return d;
    }

private:
    std::vector<std::uint64_t> inter_, pred_, truth_;
};

inline DiceTable dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::size_t classes) {
    DiceAccumulator acc(classes);
    acc.add(pred, truth);
    return acc.table();
}

/// Channel argmax of [N,C,H,W] logits; ties resolve to the lowest class.
template <std::floating_point T>
std::vector<std::int32_t> argmax_channels(const Tensor<T>& logits) {
    kernels::require_4d(logits.shape(), "argmax_channels");
    const std::size_t N = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
    const auto d = logits.data();
    std::vector<std::int32_t> out(N * P);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
            std::size_t best = 0;
            T bv = d[(n * C) * P + p];
            for (std::size_t c = 1; c < C; ++c) {
                const T v = d[(n * C + c) * P + p];
                if (v > bv) bv = v, best = c;
            }
            out[n * P + p] = static_cast<std::int32_t>(best);
        }
    return out;
}

inline constexpr std::size_t kEvalChunk = 8;

/// Global per-class Dice of an eval-mode forward over the dataset.
template <std::floating_point T>
DiceTable evaluate_dice(const Checkpoint<T>& ckpt, const Dataset<T>& data) {
    if (data.empty()) throw ContractError("evaluate_dice: empty dataset");
    const auto graph = ckpt.graph();
    DiceAccumulator acc(static_cast<std::size_t>(ckpt.meta.arch.out_channels));
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + kEvalChunk); ++i) idx.push_back(i);
        const auto logits = forward_eval(graph, ckpt.entries, ckpt.meta.bn, stack_images(data, idx));
        acc.add(argmax_channels(logits), stack_masks(data, idx));
    }
    return acc.table();
}

/// Mean squared reconstruction error against autoencoder_target.
template <std::floating_point T>
double evaluate_mse(const Checkpoint<T>& ckpt, const Dataset<T>& data) {
    if (data.empty()) throw ContractError("evaluate_mse: empty dataset");
    const auto graph = ckpt.graph();
    const int C = ckpt.meta.arch.out_channels;
    double sum = 0;
    std::size_t count = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + kEvalChunk); ++i) idx.push_back(i);
        const auto out = forward_eval(graph, ckpt.entries, ckpt.meta.bn, stack_images(data, idx));
        const auto tgt = stack_targets(data, idx, C);
        const auto a = out.data(), b = tgt.data();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
            sum += d * d;
        }
        count += a.size();
    }
    return sum / static_cast<double>(count);
}

/// Plain SGD (w -= lr g) or heavy-ball momentum (v = mu v + g; w -= lr v).
template <std::floating_point T>
class Sgd {
public:
    explicit Sgd(const Hyper& h) : hyper_(h) {}

    /// Updates every entry named in `grads`. Entries not named are untouched.
    void step(TensorMap<T>& params, const std::map<std::string, Tensor<T>>& grads) {
        const T lr = static_cast<T>(hyper_.lr), mu = static_cast<T>(hyper_.momentum);
        for (const auto& [name, g] : grads) {
            const auto& w = params.at(name);
            if (g.shape() != w.shape()) throw DimensionError("sgd: gradient shape mismatch for '" + name + "'");
            auto wv = w.vec();
            const auto gv = g.data();
            if (hyper_.optimizer == Optimizer::Sgd) {
                for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= lr * gv[i];
            } else {
                auto& v = velocity_[name];
                if (v.empty()) v.assign(wv.size(), T(0));
                for (std::size_t i = 0; i < wv.size(); ++i) {
                    v[i] = mu * v[i] + gv[i];
                    wv[i] -= lr * v[i];
                }
            }
            Tensor<T> updated(w.shape(), std::move(wv));
            check_finite(updated, "sgd step on '" + name + "'");
            params.set(name, std::move(updated));
        }
    }

private:
    Hyper hyper_;
    std::map<std::string, std::vector<T>> velocity_;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0;
    std::optional<double> val_metric;  // mean foreground Dice or MSE
};

struct History {
    std::vector<EpochRecord> epochs;

    std::string csv() const {
        CsvWriter w({"epoch", "train_loss", "val_metric"});
        for (const auto& e : epochs)
            w.row({std::to_string(e.epoch), fmt(e.train_loss), e.val_metric ? fmt(*e.val_metric) : ""});
        return w.str();
    }
};

template <std::floating_point T>
struct TrainOptions {
    const Dataset<T>* val = nullptr;
    int val_every = 0;          // 0: only after the last epoch
    std::string dataset_tag;    // recorded in the output metadata when non-empty
};

template <std::floating_point T>
struct TrainResult {
    Checkpoint<T> checkpoint;
    History history;
};

/// Loss of one batch on a fresh tape plus gradients of the trainable entries.
template <std::floating_point T>
struct StepOutput {
    double loss = 0;
    std::map<std::string, Tensor<T>> grads;
    std::vector<std::optional<kernels::BatchNormStats<T>>> stats;
};

template <std::floating_point T>
StepOutput<T> loss_and_grads(const ModelGraph& graph, const TensorMap<T>& params, const BnConfig& bn, Task task,
                             const Dataset<T>& data, std::span<const std::size_t> batch,
                             const std::vector<bool>& trainable, const std::vector<bool>& bn_eval) {
    Tape<T> tape;
    auto vars = make_param_vars(tape, graph, params, &trainable);
    ForwardOptions<T> opts;
    opts.mode = Mode::Train;
    opts.bn_eval_override = &bn_eval;
    StepOutput<T> out;
    opts.batch_stats = &out.stats;
    auto logits = forward_on_tape(graph, params, vars, bn, tape.leaf(stack_images(data, batch)), opts);
    Var<T> loss = task == Task::Segmentation
                      ? ops::softmax_cross_entropy(logits, std::make_shared<const std::vector<std::int32_t>>(stack_masks(data, batch)))
                      : ops::mse(logits, tape.leaf(stack_targets(data, batch, graph.arch().out_channels)));
    out.loss = static_cast<double>(loss.value().item());
    const auto grads = tape.backward(loss);
    const auto entries = graph.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!trainable[i]) continue;
        out.grads.emplace(entries[i].name, grads.at(vars.at(entries[i].name).id));
    }
    return out;
}

/// Trains a copy of `init`. Frozen entries come back bit-identical; a BN layer
/// with a frozen RM or RV runs in eval mode and keeps its running statistics.
/// The result is a pure function of the arguments.
template <std::floating_point T>
TrainResult<T> train(const Checkpoint<T>& init, const Dataset<T>& data, Task task, const Hyper& hyper,
                     const FreezeMask& freeze = {}, const TrainOptions<T>& options = {}) {
    hyper.validate();
    validate(init);
    if (data.empty()) throw ContractError("train: empty dataset");
    const auto graph = init.graph();
    freeze.validate(graph);

    const auto entries = graph.entries();
    std::vector<bool> trainable(entries.size());
    std::vector<bool> bn_eval(graph.bns().size(), false);
    bool any_trainable = false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const bool frozen = freeze.contains(e.name);
        trainable[i] = !frozen && e.kind != ParamKind::RM && e.kind != ParamKind::RV;
        any_trainable = any_trainable || trainable[i];
        if (frozen && (e.kind == ParamKind::RM || e.kind == ParamKind::RV)) bn_eval[e.layer - 1] = true;
    }
    const bool any_bn_train = std::find(bn_eval.begin(), bn_eval.end(), false) != bn_eval.end();

    TrainResult<T> result{init, {}};
    auto& params = result.checkpoint.entries;
    result.checkpoint.meta.task = task;
    result.checkpoint.meta.hyper = hyper;
    result.checkpoint.meta.train_samples = data.size();
    if (!options.dataset_tag.empty()) result.checkpoint.meta.dataset_tag = options.dataset_tag;

    const auto eval_metric = [&]() -> double {
        return task == Task::Segmentation ? evaluate_dice(result.checkpoint, *options.val).mean_foreground()
                                          : evaluate_mse(result.checkpoint, *options.val);
    };

    Sgd<T> opt(hyper);
    const auto bs = static_cast<std::size_t>(hyper.batch_size);
    std::vector<std::size_t> order(data.size());
    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(hyper.seed, static_cast<std::uint64_t>(epoch)));
        shuffle(order, rng);

        double loss_sum = 0;
        std::size_t batches = 0;
        if (any_trainable || any_bn_train) {
            for (std::size_t start = 0; start < order.size(); start += bs) {
                const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
                auto step = loss_and_grads(graph, params, init.meta.bn, task, data, batch, trainable, bn_eval);
                opt.step(params, step.grads);
                apply_running_updates(graph, init.meta.bn, step.stats, params);
                loss_sum += step.loss;
                ++batches;
            }
        }
        EpochRecord rec{epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, std::nullopt};
        const bool last = epoch == hyper.epochs;
        if (options.val && (last || (options.val_every > 0 && epoch % options.val_every == 0))) rec.val_metric = eval_metric();
        result.history.epochs.push_back(rec);
    }
    validate(result.checkpoint);
    return result;
}

}  // namespace layerswap
