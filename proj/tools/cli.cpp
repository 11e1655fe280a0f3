#include "cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <optional>
#include <sstream>

#include "layerswap/experiment.hpp"

namespace layerswap::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format = "csv";
    std::string donor, recipient, ckpt, init;
    std::string kinds, layers;
    bool freeze = false;
    bool keep_going = false;
    bool cumulative = false;
    std::optional<double> tau;
    std::string task = "seg";
    std::string domain = "A";
    std::optional<std::size_t> samples;
    std::optional<int> n;
    std::string freeze_entries;
};

ExperimentConfig config_of(const Options& o) {
    auto cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (o.seed) cfg.seeds = {*o.seed};
    if (o.tau) cfg.tau = *o.tau;
    cfg.validate();
    return cfg;
}

Domain domain_of(const std::string& s) {
    auto d = parse_domain(s);
    if (!d) throw ContractError("unknown domain '" + s + "' (expected A or B)");
    return *d;
}

Task task_of(const std::string& s) {
    auto t = parse_task(s);
    if (!t) throw ContractError("unknown task '" + s + "' (expected seg or auto)");
    return *t;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<ParamKind> kinds_of(const std::string& s) {
    if (s.empty()) return {kAllKinds.begin(), kAllKinds.end()};
    std::vector<ParamKind> out;
    for (const auto& k : split_list(s)) {
        auto pk = parse_kind(k);
        if (!pk) throw ContractError("unknown kind '" + k + "' (expected RM, RV, RW, RB, W or B)");
        out.push_back(*pk);
    }
    return out;
}

std::optional<std::vector<std::size_t>> layers_of(const std::string& s) {
    if (s.empty() || s == "all") return std::nullopt;
    std::vector<std::size_t> out;
    for (const auto& l : split_list(s)) {
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(l, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != l.size()) throw ContractError("bad layer index '" + l + "'");
        out.push_back(v);
    }
    return out;
}

Checkpoint<Real> load_ckpt(const std::string& path, const char* what) {
    if (path.empty()) throw ContractError(std::string("--") + what + " is required");
    return load<Real>(path);
}

void emit(std::ostream& out, const Options& o, const std::string& csv, const json& j) {
    const std::string text = o.format == "json" ? j.dump(2) + "\n" : csv;
    if (o.out.empty()) out << text;
    else write_text(o.out, text);
}

std::string dice_csv(const DiceTable& d) {
    std::vector<std::string> h, v;
    for (std::size_t c = 0; c < d.per_class.size(); ++c) {
        h.push_back("dice_c" + std::to_string(c));
        v.push_back(fmt(d.per_class[c]));
    }
    h.push_back("mean_fg_dice");
    v.push_back(fmt(d.mean_foreground()));
    CsvWriter w(h);
    w.row(v);
    return w.str();
}

int cmd_gen_data(const Options& o, std::ostream& out) {
    auto cfg = config_of(o);
    auto spec = cfg.domain(domain_of(o.domain));
    if (o.seed) spec.seed = *o.seed;
    if (o.n) spec.n_samples = *o.n;
    if (o.out.empty()) throw ContractError("--out DIR is required");
    spec.validate(cfg.arch.spatial_divisor());
    dump_dataset(generate<Real>(spec), spec, o.out);
    out << "wrote " << spec.n_samples << " samples to " << o.out << "\n";
    return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
    auto cfg = config_of(o);
    if (o.out.empty()) throw ContractError("--out CKPT is required");
    const auto task = task_of(o.task);
    const auto dom = domain_of(o.domain);
    const auto seed = cfg.seeds.front();
    ExperimentContext ctx(cfg, fs::path(o.out).parent_path(), [&](const std::string& m) { err << m << "\n"; });
    const auto n = o.samples.value_or(cfg.train_count);
    if (n < 1 || n > cfg.train_count) throw ContractError("--samples must lie in [1, train_count]");
    const auto label = fs::path(o.out).stem().string();
    auto init = o.init.empty() ? ctx.initial(task, ExperimentContext::base_stream(task, dom), seed, label)
                               : load_ckpt(o.init, "init");
    if (!(init.meta.arch == cfg.arch)) throw ContractError("--init architecture differs from the configured one");
    FreezeMask freeze;
    const auto g = init.graph();
    for (const auto& e : split_list(o.freeze_entries)) {
        if (g.locate(e)) {
            freeze.add(e);
            continue;
        }
        const auto colon = e.find(':');
        const auto k = colon == std::string::npos ? std::nullopt : parse_kind(e.substr(0, colon));
        if (!k) throw ContractError("bad freeze entry '" + e + "' (use an entry name or KIND:LAYER)");
        freeze.add(g.entry_name(*k, layers_of(e.substr(colon + 1)).value().at(0)));
    }
    Hyper h = cfg.hyper;
    h.seed = seed;
    const auto& sp = ctx.data(dom);
    TrainOptions<Real> topts{&sp.val, cfg.val_every, cfg.domain(dom).tag() + "-n" + std::to_string(n)};
    auto res = train(init, ctx.subset(dom, n), task, h, freeze, topts);
    res.checkpoint.meta.label = label;
    save(res.checkpoint, o.out);
    write_text(o.out + ".history.csv", res.history.csv());
    const auto& last = res.history.epochs.back();
    out << (task == Task::Segmentation ? "val_mean_fg_dice," : "val_mse,") << fmt(last.val_metric.value_or(NAN)) << "\n";
    return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
    auto cfg = config_of(o);
    const auto path = o.ckpt.empty() ? o.recipient : o.ckpt;
    const auto c = load_ckpt(path, "ckpt");
    ExperimentContext ctx(cfg, ".");
    const auto& val = ctx.data(domain_of(o.domain)).val;
    Options fo = o;
    fo.out.clear();
    if (c.meta.task == Task::Autoencoder) {
        const double m = evaluate_mse(c, val);
        emit(out, fo, "val_mse\n" + fmt(m) + "\n", json{{"val_mse", m}});
    } else {
        const auto d = evaluate_dice(c, val);
        emit(out, fo, dice_csv(d), json{{"dice", d.per_class}, {"mean_fg_dice", d.mean_foreground()}});
    }
    return 0;
}

int cmd_swap_scan(const Options& o, std::ostream& out) {
    auto cfg = config_of(o);
    const auto donor = load_ckpt(o.donor, "donor");
    const auto recipient = load_ckpt(o.recipient, "recipient");
    SwapPlan plan{kinds_of(o.kinds), layers_of(o.layers), o.cumulative ? ScanMode::Cumulative : ScanMode::Single};
    ExperimentContext ctx(cfg, ".");
    auto res = scan(recipient, donor, plan, ctx.data(domain_of(o.domain)).val, ScanOptions{o.keep_going, cfg.threads});
    res.val_id = cfg.domain(domain_of(o.domain)).tag() + "-val";
    emit(out, o, res.csv(), res.json());
    return 0;
}

int cmd_diff(const Options& o, std::ostream& out) {
    const auto a = load_ckpt(o.recipient, "recipient");
    const auto b = load_ckpt(o.donor, "donor");
    auto rep = diff_report(a, b);
    const auto ks = kinds_of(o.kinds);
    std::erase_if(rep.rows, [&](const DiffRow& r) { return std::find(ks.begin(), ks.end(), r.kind) == ks.end(); });
    auto j = rep.json();
    j.erase("bn");
    emit(out, o, rep.rmse_csv(), j);
    return 0;
}

int cmd_bn_metrics(const Options& o, std::ostream& out) {
    const auto a = load_ckpt(o.recipient, "recipient");
    const auto b = load_ckpt(o.donor, "donor");
    auto rep = diff_report(a, b);
    auto j = rep.json();
    j.erase("rmse");
    emit(out, o, rep.bn_csv(), j);
    return 0;
}

int cmd_infer_mask(const Options& o, std::ostream& out) {
    const auto a = load_ckpt(o.recipient, "recipient");
    const auto b = load_ckpt(o.donor, "donor");
    const double tau = o.tau.value_or(o.config.empty() ? 2.5 : load_config(o.config).tau);
    const auto mask = infer_reuse_mask(diff_report(b, a), tau);
    emit(out, o, mask.csv(), mask.json());
    return 0;
}

int cmd_transfer(const Options& o, std::ostream& out, std::ostream& err) {
    auto cfg = config_of(o);
    const auto n = o.samples.value_or(cfg.sample_counts.front());
    if (n < 1 || n > cfg.train_count) throw ContractError("--samples must lie in [1, train_count]");
    std::optional<Checkpoint<Real>> donor, reference;
    if (!o.donor.empty()) {
        donor = load_ckpt(o.donor, "donor");
        reference = load_ckpt(o.recipient, "recipient");
        check_compatible(*donor, *reference);
    } else if (o.freeze) {
        throw ContractError("--freeze needs --donor and --recipient");
    }
    const auto seed = cfg.seeds.front();
    ExperimentContext ctx(cfg, ".", [&](const std::string& m) { err << m << "\n"; });
    auto start = ctx.initial(Task::Segmentation, ExperimentContext::kTransferStream, seed, "transfer");
    FreezeMask freeze;
    std::size_t reused = 0;
    if (donor) {
        check_compatible(start, *donor);
        const auto mask = infer_reuse_mask(diff_report(*donor, *reference), cfg.tau);
        const auto items = mask.reusable_items();
        reused = items.size();
        start = swap_bulk(start, *donor, items);
        if (o.freeze) freeze = FreezeMask::of(start.graph(), items);
    }
    Hyper h = cfg.hyper;
    h.seed = seed;
    auto trained = train(start, ctx.subset(Domain::A, n), Task::Segmentation, h, freeze,
                         TrainOptions<Real>{nullptr, 0, cfg.domain_a.tag() + "-subset" + std::to_string(n)})
                       .checkpoint;
    const auto d = evaluate_dice(trained, ctx.data(Domain::A).val);
    if (!o.out.empty()) save(trained, o.out);
    Options fo = o;
    fo.out.clear();
    emit(out, fo, dice_csv(d),
         json{{"dice", d.per_class}, {"mean_fg_dice", d.mean_foreground()}, {"samples", n}, {"seed", seed},
              {"reused_entries", reused}, {"trainable_scalars", trainable_scalars(start, freeze)}});
    return 0;
}

template <class Fn>
int cmd_part(const Options& o, std::ostream& err, Fn&& fn) {
    auto cfg = config_of(o);
    if (o.out.empty()) throw ContractError("--out DIR is required");
    ExperimentContext ctx(cfg, o.out, [&](const std::string& m) { err << m << "\n"; });
    fn(ctx);
    ctx.out().commit();
    return 0;
}

std::string read_if(const fs::path& p) { return fs::exists(p) ? read_file(p) : std::string(); }

int cmd_report(const Options& o, std::ostream& out) {
    if (o.out.empty()) throw ContractError("--out DIR (experiment directory) is required");
    const fs::path dir = o.out;
    if (!fs::is_directory(dir)) throw IoError("no experiment directory at '" + dir.string() + "'");
    const auto summary = read_if(dir / "summary.csv");
    const auto table = read_if(dir / "transfer" / "part3_table.csv");
    const auto rmse = read_if(dir / "diffs" / "part2_rmse_long.csv");
    if (summary.empty() && table.empty() && rmse.empty()) throw IoError("nothing to report in '" + dir.string() + "'");
    if (o.format == "json") {
        out << json{{"summary_csv", summary}, {"part2_rmse_long_csv", rmse}, {"part3_table_csv", table}}.dump(2) << "\n";
        return 0;
    }
    if (!summary.empty()) out << "# part 1: swap-scan summary\n" << summary << "\n";
    if (!rmse.empty()) out << "# part 2: RMSE between models\n" << rmse << "\n";
    if (!table.empty()) out << "# part 3: transfer\n" << table;
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"layerswap: layer-wise parameter reusability toolkit"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
        s->add_option("--seed", o.seed, "Seed (overrides the config seed list)");
        s->add_option("--out", o.out, "Output file or directory");
        s->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"csv", "json"}));
    };
    auto add_pair = [&](CLI::App* s) {
        s->add_option("--donor", o.donor, "Donor checkpoint");
        s->add_option("--recipient", o.recipient, "Recipient checkpoint");
    };

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    add_common(gen);
    gen->add_option("--domain", o.domain, "A or B");
    gen->add_option("-n,--n-samples", o.n, "Number of samples");

    auto* tr = app.add_subcommand("train", "Train one model");
    add_common(tr);
    tr->add_option("--task", o.task, "seg or auto");
    tr->add_option("--domain", o.domain, "A or B");
    tr->add_option("--samples", o.samples, "Training samples drawn from the training split");
    tr->add_option("--init", o.init, "Start from this checkpoint instead of a random init");
    tr->add_option("--freeze-entries", o.freeze_entries, "Comma list of entry names or KIND:LAYER to hold fixed");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
    add_common(ev);
    ev->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
    ev->add_option("--domain", o.domain, "A or B");

    auto* sc = app.add_subcommand("swap-scan", "Swap donor entries into the recipient one at a time");
    add_common(sc);
    add_pair(sc);
    sc->add_option("--kinds", o.kinds, "Comma list of RM,RV,RW,RB,W,B (default all)");
    sc->add_option("--layers", o.layers, "Comma list of 1-based layers (default all)");
    sc->add_flag("--keep-going", o.keep_going, "Record failing rows instead of aborting");
    sc->add_flag("--cumulative", o.cumulative, "Row (kind, l) swaps layers 1..l");
    sc->add_option("--domain", o.domain, "Validation domain");

    auto* df = app.add_subcommand("diff", "Per-layer RMSE between two checkpoints");
    add_common(df);
    add_pair(df);
    df->add_option("--kinds", o.kinds, "Comma list of kinds (default all)");

    auto* bm = app.add_subcommand("bn-metrics", "BN shift/scale metrics between two checkpoints");
    add_common(bm);
    add_pair(bm);

    auto* im = app.add_subcommand("infer-mask", "Reuse mask from per-layer RMSE outliers");
    add_common(im);
    add_pair(im);
    im->add_option("--tau", o.tau, "Outlier threshold on the modified z-score");

    auto* tf = app.add_subcommand("transfer", "Train a domain-A segmentation model from a donor's reusable entries");
    add_common(tf);
    add_pair(tf);
    tf->add_option("--samples", o.samples, "Training samples");
    tf->add_flag("--freeze,!--no-freeze", o.freeze, "Hold the loaded entries fixed");
    tf->add_option("--tau", o.tau, "Outlier threshold on the modified z-score");

    auto* p1 = app.add_subcommand("run-part1", "Seg/auto swap scans and diagnostics on domain A");
    auto* p2 = app.add_subcommand("run-part2", "RMSE between seg/auto models of both domains");
    auto* p3 = app.add_subcommand("run-part3", "Transfer experiments");
    for (auto* p : {p1, p2, p3}) add_common(p);
    p3->add_option("--tau", o.tau, "Outlier threshold on the modified z-score");

    auto* rp = app.add_subcommand("report", "Print the tables of an experiment directory");
    add_common(rp);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(o, out);
        if (tr->parsed()) return cmd_train(o, out, err);
        if (ev->parsed()) return cmd_eval(o, out);
        if (sc->parsed()) return cmd_swap_scan(o, out);
        if (df->parsed()) return cmd_diff(o, out);
        if (bm->parsed()) return cmd_bn_metrics(o, out);
        if (im->parsed()) return cmd_infer_mask(o, out);
        if (tf->parsed()) return cmd_transfer(o, out, err);
        if (p1->parsed()) return cmd_part(o, err, [](ExperimentContext& c) { run_part1(c); });
        if (p2->parsed()) return cmd_part(o, err, [](ExperimentContext& c) { run_part2(c); });
        if (p3->parsed()) return cmd_part(o, err, [](ExperimentContext& c) { run_part3(c); });
        if (rp->parsed()) return cmd_report(o, out);
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const LoadError& e) {
        err << "error: " << e.what() << " [" << e.field() << "]\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace layerswap::cli
