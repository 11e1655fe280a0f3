#pragma once

// Experiment drivers. Output layout under the output directory:
//
//   checkpoints/<task>_<domain>_s<seed>.rpck   (+ .history.csv)
//   scans/part1_s<seed>.csv|json
//   diffs/part1_s<seed>_rmse.csv, part1_s<seed>_bn.csv, part1_s<seed>.json
//   diffs/part2_rmse_long.csv, part2_bn_long.csv, part2.json
//   transfer/mask_<donor>.csv|json, part3_runs.csv, part3_table.csv, part3.json
//   summary.csv                                 (part 1)
//
// Existing checkpoints whose metadata matches what would be trained are
// loaded instead of retrained. Files written by a run that then fails are
// removed.

#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "layerswap/diagnostics.hpp"

namespace layerswap {

using Real = float;

struct ExperimentConfig {
    ArchSpec arch;
    BnConfig bn;
    Hyper hyper;
    DatasetSpec domain_a = DatasetSpec::defaults(Domain::A);
    DatasetSpec domain_b = DatasetSpec::defaults(Domain::B);
    std::size_t train_count = 50;
    std::uint64_t split_seed = 7;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<std::size_t> sample_counts{10, 50};
    std::vector<std::string> part3_arms{"random", "auto2seg_freeze", "auto2seg_finetune", "seg2seg_freeze",
                                        "seg2seg_finetune"};
    double tau = 2.5;
    int val_every = 0;
    unsigned threads = 0;

    const DatasetSpec& domain(Domain d) const { return d == Domain::A ? domain_a : domain_b; }

    void validate() const {
        arch.validate();
        hyper.validate();
        domain_a.validate(arch.spatial_divisor());
        domain_b.validate(arch.spatial_divisor());
        if (domain_a.domain != Domain::A || domain_b.domain != Domain::B)
            throw ContractError("config: domain_a/domain_b must declare domains A and B");
        for (const auto* d : {&domain_a, &domain_b})
            if (train_count >= static_cast<std::size_t>(d->n_samples))
                throw ContractError("config: train_count must be smaller than n_samples of every domain");
        if (seeds.empty()) throw ContractError("config: seeds must not be empty");
        for (auto n : sample_counts)
            if (n < 1 || n > train_count) throw ContractError("config: sample_counts must lie in [1, train_count]");
        static const std::set<std::string> arms{"random", "auto2seg_freeze", "auto2seg_finetune", "seg2seg_freeze",
                                                "seg2seg_finetune"};
        for (const auto& a : part3_arms)
            if (!arms.count(a)) throw ContractError("config: unknown part3 arm '" + a + "'");
        if (!(tau > 0)) throw ContractError("config: tau must be positive");
    }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
    j = {{"domain", std::string(to_string(d.domain))}, {"n_samples", d.n_samples}, {"image_size", d.image_size},
         {"seed", d.seed}, {"noise_sigma", d.noise_sigma}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
    const auto dom = parse_domain(j.at("domain").get<std::string>());
    if (!dom) throw ContractError("config: unknown domain '" + j.at("domain").get<std::string>() + "'");
    const auto def = DatasetSpec::defaults(*dom);
    d.domain = *dom;
    d.n_samples = j.value("n_samples", def.n_samples);
    d.image_size = j.value("image_size", def.image_size);
    d.seed = j.value("seed", def.seed);
    d.noise_sigma = j.value("noise_sigma", def.noise_sigma);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"arch", c.arch},           {"bn", c.bn},
            {"hyper", c.hyper},         {"domain_a", c.domain_a},
            {"domain_b", c.domain_b},   {"train_count", c.train_count},
            {"split_seed", c.split_seed}, {"seeds", c.seeds},
            {"sample_counts", c.sample_counts}, {"part3_arms", c.part3_arms},
            {"tau", c.tau},             {"val_every", c.val_every},
            {"threads", c.threads}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"arch", "bn", "hyper", "domain_a", "domain_b", "train_count",
                                             "split_seed", "seeds", "sample_counts", "part3_arms", "tau",
                                             "val_every", "threads"};
    if (!j.is_object()) throw ContractError("config: top level must be an object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ContractError("config: unknown key '" + k + "'");
    ExperimentConfig c;
    try {
        if (j.contains("arch")) c.arch = j["arch"].get<ArchSpec>();
        if (j.contains("bn")) c.bn = j["bn"].get<BnConfig>();
        if (j.contains("hyper")) c.hyper = j["hyper"].get<Hyper>();
        if (j.contains("domain_a")) c.domain_a = j["domain_a"].get<DatasetSpec>();
        if (j.contains("domain_b")) c.domain_b = j["domain_b"].get<DatasetSpec>();
        c.train_count = j.value("train_count", c.train_count);
        c.split_seed = j.value("split_seed", c.split_seed);
        c.seeds = j.value("seeds", c.seeds);
        c.sample_counts = j.value("sample_counts", c.sample_counts);
        c.part3_arms = j.value("part3_arms", c.part3_arms);
        c.tau = j.value("tau", c.tau);
        c.val_every = j.value("val_every", c.val_every);
        c.threads = j.value("threads", c.threads);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    const auto text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("config '" + path.string() + "': " + e.what());
    }
    return config_from_json(j);
}

using LogFn = std::function<void(const std::string&)>;

/// Files created by one run; removed again unless commit() is called.
class OutputTracker {
public:
    explicit OutputTracker(std::filesystem::path root) : root_(std::move(root)) {}
    OutputTracker(const OutputTracker&) = delete;
    OutputTracker& operator=(const OutputTracker&) = delete;
    ~OutputTracker() {
        if (committed_) return;
        std::error_code ec;
        for (auto it = files_.rbegin(); it != files_.rend(); ++it) std::filesystem::remove(*it, ec);
    }

    const std::filesystem::path& root() const { return root_; }

    void write(const std::filesystem::path& rel, std::string_view text) {
        const auto p = root_ / rel;
        files_.push_back(p);
        write_text(p, text);
    }

    void save(const std::filesystem::path& rel, const Checkpoint<Real>& c) {
        const auto p = root_ / rel;
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
        if (ec) throw IoError("cannot create '" + p.parent_path().string() + "': " + ec.message());
        files_.push_back(p);
        layerswap::save(c, p);
    }

    void commit() { committed_ = true; }

private:
    std::filesystem::path root_;
    std::vector<std::filesystem::path> files_;
    bool committed_ = false;
};

/// Shared state of one experiment run: config, datasets, checkpoint cache.
class ExperimentContext {
public:
    ExperimentContext(ExperimentConfig cfg, std::filesystem::path out, LogFn log = {})
        : cfg_(std::move(cfg)), tracker_(std::move(out)), log_(std::move(log)) {
        cfg_.validate();
    }

    const ExperimentConfig& config() const { return cfg_; }
    OutputTracker& out() { return tracker_; }
    void log(const std::string& m) const {
        if (log_) log_(m);
    }

    struct Split {
        Dataset<Real> train, val;
    };

    const Split& data(Domain d) {
        auto& slot = d == Domain::A ? a_ : b_;
        if (!slot) {
            const auto all = generate<Real>(cfg_.domain(d));
            auto [tr, va] = split(all, cfg_.train_count, cfg_.split_seed);
            slot = Split{std::move(tr), std::move(va)};
        }
        return *slot;
    }

    /// Seeded subset of the training split with n samples.
    Dataset<Real> subset(Domain d, std::size_t n) {
        const auto& tr = data(d).train;
        if (n == tr.size()) return tr;
        std::vector<std::size_t> idx(tr.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Rng rng(mix_seed(cfg_.split_seed, 0x5B5E7000ull + n));
        shuffle(idx, rng);
        idx.resize(n);
        return select(tr, idx);
    }

    static std::string model_name(Task t, Domain d, std::uint64_t seed) {
        return std::string(t == Task::Segmentation ? "seg" : "auto") + "_" + std::string(to_string(d)) + "_s" +
               std::to_string(seed);
    }

    /// Random initialization. Every (stream, seed) pair draws independently:
    /// base models use one stream per task and domain, transfer runs their own.
    Checkpoint<Real> initial(Task task, std::uint64_t stream, std::uint64_t seed, const std::string& label) const {
        CheckpointMeta meta;
        meta.task = task;
        meta.seed = seed;
        meta.label = label;
        return make_checkpoint(build_model<Real>(cfg_.arch, mix_seed(seed, stream), cfg_.bn), meta);
    }

    static std::uint64_t base_stream(Task t, Domain d) {
        return 1 + (t == Task::Segmentation ? 0 : 1) + (d == Domain::A ? 0 : 2);
    }
    static constexpr std::uint64_t kTransferStream = 16;

    /// A fully trained base model on the whole training split of domain d.
    Checkpoint<Real> base_model(Task task, Domain d, std::uint64_t seed) {
        const auto name = model_name(task, d, seed);
        if (auto it = cache_.find(name); it != cache_.end()) return it->second;
        const auto rel = std::filesystem::path("checkpoints") / (name + ".rpck");
        const auto path = tracker_.root() / rel;

        auto init = initial(task, base_stream(task, d), seed, name);
        Hyper h = cfg_.hyper;
        h.seed = seed;
        CheckpointMeta expect = init.meta;
        expect.hyper = h;
        expect.dataset_tag = cfg_.domain(d).tag() + "-train" + std::to_string(cfg_.train_count) + "-split" +
                             std::to_string(cfg_.split_seed);
        expect.train_samples = cfg_.train_count;

        if (std::filesystem::exists(path)) {
            try {
                auto c = load<Real>(path);
                if (c.meta == expect) {
                    log("reusing " + path.string());
                    return cache_.emplace(name, std::move(c)).first->second;
                }
                log("existing " + path.string() + " has different metadata; retraining");
            } catch (const Error& e) {
                log("cannot reuse " + path.string() + " (" + e.what() + "); retraining");
            }
        }
        log("training " + name);
        const auto& sp = data(d);
        TrainOptions<Real> opts{&sp.val, cfg_.val_every, expect.dataset_tag};
        auto res = train(init, sp.train, task, h, FreezeMask{}, opts);
        tracker_.save(rel, res.checkpoint);
        tracker_.write(std::filesystem::path("checkpoints") / (name + ".history.csv"), res.history.csv());
        return cache_.emplace(name, std::move(res.checkpoint)).first->second;
    }

private:
    ExperimentConfig cfg_;
    OutputTracker tracker_;
    LogFn log_;
    std::optional<Split> a_, b_;
    std::map<std::string, Checkpoint<Real>> cache_;
};

// ---------------------------------------------------------------- part 1

struct Part1Seed {
    std::uint64_t seed = 0;
    SwapScanResult scan;
    DiffReport diff;
};

struct Part1Result {
    std::vector<Part1Seed> seeds;

    std::string summary_csv() const {
        CsvWriter w({"seed", "kind", "rows", "baseline_mean_fg_dice", "mean_fg_dice_drop", "max_fg_dice_drop"});
        for (const auto& s : seeds)
            for (auto k : kAllKinds) {
                std::size_t n = 0;
                double sum = 0, mx = -std::numeric_limits<double>::infinity();
                for (const auto& r : s.scan.rows)
                    if (r.kind == k && r.error.empty()) {
                        const double d = s.scan.drop(r);
                        sum += d, mx = std::max(mx, d), ++n;
                    }
                if (!n) continue;
                w.row({std::to_string(s.seed), std::string(to_string(k)), std::to_string(n),
                       fmt(s.scan.baseline.mean_foreground()), fmt(sum / static_cast<double>(n)), fmt(mx)});
            }
        return w.str();
    }
};

/// Per seed: train seg and auto on domain A, scan every swap of the auto
/// parameters into the seg model, and compare the two parameter sets.
inline Part1Result run_part1(ExperimentContext& ctx) {
    Part1Result res;
    const auto& cfg = ctx.config();
    for (auto seed : cfg.seeds) {
        auto seg = ctx.base_model(Task::Segmentation, Domain::A, seed);
        auto aut = ctx.base_model(Task::Autoencoder, Domain::A, seed);
        ctx.log("scanning seed " + std::to_string(seed));
        Part1Seed ps;
        ps.seed = seed;
        ps.scan = scan(seg, aut, SwapPlan{}, ctx.data(Domain::A).val, ScanOptions{false, cfg.threads});
        ps.scan.val_id = cfg.domain_a.tag() + "-val";
        ps.diff = diff_report(seg, aut);
        const auto tag = "part1_s" + std::to_string(seed);
        ctx.out().write(std::filesystem::path("scans") / (tag + ".csv"), ps.scan.csv());
        ctx.out().write(std::filesystem::path("scans") / (tag + ".json"), ps.scan.json().dump(2) + "\n");
        ctx.out().write(std::filesystem::path("diffs") / (tag + "_rmse.csv"), ps.diff.rmse_csv());
        ctx.out().write(std::filesystem::path("diffs") / (tag + "_bn.csv"), ps.diff.bn_csv());
        ctx.out().write(std::filesystem::path("diffs") / (tag + ".json"), ps.diff.json().dump(2) + "\n");
        res.seeds.push_back(std::move(ps));
    }
    ctx.out().write("summary.csv", res.summary_csv());
    return res;
}

// ---------------------------------------------------------------- part 2

struct Part2Result {
    std::vector<std::string> models;
    std::vector<DiffReport> pairs;

    std::string rmse_long_csv() const {
        CsvWriter w({"a", "b", "kind", "layer", "rmse"});
        for (const auto& p : pairs)
            for (const auto& r : p.rows)
                w.row({p.a_id, p.b_id, std::string(to_string(r.kind)), std::to_string(r.layer), fmt(r.rmse)});
        return w.str();
    }

    std::string bn_long_csv() const {
        CsvWriter w({"a", "b", "layer", "rm_shift", "rb_shift", "rv_scale", "rw_scale", "rw_excluded"});
        for (const auto& p : pairs)
            for (const auto& r : p.bn)
                w.row({p.a_id, p.b_id, std::to_string(r.layer), fmt(r.rm_shift), fmt(r.rb_shift), fmt(r.rv_scale),
                       fmt(r.rw_scale), std::to_string(r.rw_excluded)});
        return w.str();
    }
};

/// Every pairing of {seg, auto} x {A, B} at the first seed.
inline Part2Result run_part2(ExperimentContext& ctx) {
    const auto seed = ctx.config().seeds.front();
    std::vector<Checkpoint<Real>> ms;
    for (auto d : {Domain::A, Domain::B})
        for (auto t : {Task::Segmentation, Task::Autoencoder}) ms.push_back(ctx.base_model(t, d, seed));
    Part2Result res;
    for (const auto& m : ms) res.models.push_back(m.meta.label);
    for (std::size_t i = 0; i < ms.size(); ++i)
        for (std::size_t j = i + 1; j < ms.size(); ++j) res.pairs.push_back(diff_report(ms[i], ms[j]));
    nlohmann::json js = nlohmann::json::array();
    for (const auto& p : res.pairs) js.push_back(p.json());
    ctx.out().write("diffs/part2_rmse_long.csv", res.rmse_long_csv());
    ctx.out().write("diffs/part2_bn_long.csv", res.bn_long_csv());
    ctx.out().write("diffs/part2.json", nlohmann::json{{"models", res.models}, {"pairs", js}}.dump(2) + "\n");
    return res;
}

// ---------------------------------------------------------------- part 3

struct TransferRun {
    std::size_t samples = 0;
    std::string arm;
    std::uint64_t seed = 0;
    DiceTable dice;
    std::size_t trainable_scalars = 0;
};

struct Part3Result {
    std::vector<TransferRun> runs;
    std::map<std::string, ReuseMask> masks;  // keyed by donor ("auto", "seg")

    std::vector<const TransferRun*> select(std::size_t samples, const std::string& arm) const {
        std::vector<const TransferRun*> out;
        for (const auto& r : runs)
            if (r.samples == samples && r.arm == arm) out.push_back(&r);
        return out;
    }

    double mean_fg(std::size_t samples, const std::string& arm) const {
        const auto rs = select(samples, arm);
        if (rs.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0;
        for (const auto* r : rs) s += r->dice.mean_foreground();
        return s / static_cast<double>(rs.size());
    }

    std::string runs_csv() const {
        CsvWriter w({"samples", "arm", "seed", "dice_c0", "dice_c1", "dice_c2", "dice_c3", "mean_fg_dice",
                     "trainable_scalars"});
        for (const auto& r : runs) {
            std::vector<std::string> f{std::to_string(r.samples), r.arm, std::to_string(r.seed)};
            for (std::size_t c = 0; c < 4; ++c) f.push_back(c < r.dice.per_class.size() ? fmt(r.dice.per_class[c]) : "");
            f.push_back(fmt(r.dice.mean_foreground()));
            f.push_back(std::to_string(r.trainable_scalars));
            w.row(f);
        }
        return w.str();
    }

    /// Mean, min and max over seeds per class, one row per (samples, arm).
    std::string table_csv() const {
        std::vector<std::string> h{"samples", "arm", "seeds"};
        for (int c = 0; c < 4; ++c)
            for (const char* s : {"mean", "min", "max"}) h.push_back("c" + std::to_string(c) + "_" + s);
        h.push_back("mean_fg_dice");
        h.push_back("trainable_scalars");
        CsvWriter w(h);
        std::vector<std::pair<std::size_t, std::string>> keys;
        for (const auto& r : runs)
            if (std::find(keys.begin(), keys.end(), std::pair{r.samples, r.arm}) == keys.end())
                keys.emplace_back(r.samples, r.arm);
        for (const auto& [n, arm] : keys) {
            const auto rs = select(n, arm);
            std::vector<std::string> f{std::to_string(n), arm, std::to_string(rs.size())};
            for (std::size_t c = 0; c < 4; ++c) {
                double s = 0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
                for (const auto* r : rs) {
                    const double v = r->dice.per_class.at(c);
                    s += v, lo = std::min(lo, v), hi = std::max(hi, v);
                }
                f.push_back(fmt(s / static_cast<double>(rs.size())));
                f.push_back(fmt(lo));
                f.push_back(fmt(hi));
            }
            f.push_back(fmt(mean_fg(n, arm)));
            f.push_back(std::to_string(rs.front()->trainable_scalars));
            w.row(f);
        }
        return w.str();
    }
};

/// Scalars that training may change: W, B, RW and RB entries not frozen.
inline std::size_t trainable_scalars(const Checkpoint<Real>& c, const FreezeMask& f) {
    std::size_t n = 0;
    for (const auto& e : c.graph().entries())
        if (e.kind != ParamKind::RM && e.kind != ParamKind::RV && !f.contains(e.name)) n += shape_size(e.shape);
    return n;
}

/// Transfer from domain-B donors into a domain-A segmentation model trained on
/// few samples. The reuse mask comes from comparing each donor with the
/// fully trained domain-A segmentation model.
inline Part3Result run_part3(ExperimentContext& ctx) {
    const auto& cfg = ctx.config();
    const auto seed0 = cfg.seeds.front();
    Part3Result res;

    std::map<std::string, Checkpoint<Real>> donors;
    auto need = [&](const std::string& prefix) {
        return std::any_of(cfg.part3_arms.begin(), cfg.part3_arms.end(),
                           [&](const std::string& a) { return a.rfind(prefix, 0) == 0; });
    };
    std::optional<Checkpoint<Real>> reference;
    for (const auto& [key, task] : {std::pair{std::string("auto"), Task::Autoencoder},
                                    std::pair{std::string("seg"), Task::Segmentation}}) {
        if (!need(key + "2seg")) continue;
        if (!reference) reference = ctx.base_model(Task::Segmentation, Domain::A, seed0);
        donors.emplace(key, ctx.base_model(task, Domain::B, seed0));
        auto mask = infer_reuse_mask(diff_report(donors.at(key), *reference), cfg.tau);
        ctx.out().write("transfer/mask_" + key + ".csv", mask.csv());
        ctx.out().write("transfer/mask_" + key + ".json", mask.json().dump(2) + "\n");
        for (const auto& w : mask.warnings) ctx.log("mask " + key + ": " + w);
        res.masks.emplace(key, std::move(mask));
    }

    const auto& val = ctx.data(Domain::A).val;
    for (auto n : cfg.sample_counts) {
        const auto subset = ctx.subset(Domain::A, n);
        for (const auto& arm : cfg.part3_arms)
            for (auto seed : cfg.seeds) {
                const auto name = "part3_n" + std::to_string(n) + "_" + arm + "_s" + std::to_string(seed);
                auto start = ctx.initial(Task::Segmentation, ExperimentContext::kTransferStream, seed, name);
                FreezeMask freeze;
                if (arm != "random") {
                    const auto key = arm.substr(0, arm.find('2'));
                    const auto items = res.masks.at(key).reusable_items();
                    start = swap_bulk(start, donors.at(key), items);
                    if (arm.ends_with("_freeze")) freeze = FreezeMask::of(start.graph(), items);
                }
                Hyper h = cfg.hyper;
                h.seed = seed;
                ctx.log("transfer " + name);
                TrainOptions<Real> opts{nullptr, 0, cfg.domain_a.tag() + "-subset" + std::to_string(n)};
                auto trained = train(start, subset, Task::Segmentation, h, freeze, opts).checkpoint;
                res.runs.push_back({n, arm, seed, evaluate_dice(trained, val), trainable_scalars(start, freeze)});
            }
    }

    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : res.runs)
        runs.push_back({{"samples", r.samples}, {"arm", r.arm}, {"seed", r.seed}, {"dice", r.dice.per_class},
                        {"mean_fg_dice", r.dice.mean_foreground()}, {"trainable_scalars", r.trainable_scalars}});
    ctx.out().write("transfer/part3_runs.csv", res.runs_csv());
    ctx.out().write("transfer/part3_table.csv", res.table_csv());
    ctx.out().write("transfer/part3.json", nlohmann::json{{"runs", runs}}.dump(2) + "\n");
    return res;
}

}  // namespace layerswap
