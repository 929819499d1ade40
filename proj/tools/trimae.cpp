// Command-line pipeline driver: synthetic data generation, masked-autoencoder
// pretraining, linear probing, segmentation tuning, evaluation, statistics,
// and report emission. All runs are deterministic for a fixed config + seed.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trimae/adapt.hpp"
#include "trimae/common.hpp"
#include "trimae/data.hpp"
#include "trimae/masking.hpp"
#include "trimae/metrics.hpp"
#include "trimae/model.hpp"
#include "trimae/objective.hpp"
#include "trimae/pretrain.hpp"

namespace fs = std::filesystem;
using namespace trimae;

// ---- flat key=value run configuration ----

struct RunConfig {
    std::map<std::string, std::string> kv;

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"model.variant", "tiny"},
            {"model.depth", "2"},
            {"model.width", "16"},
            {"model.heads", "2"},
            {"model.patch", "16"},
            {"model.input", "128"},
            {"model.decoder_width", "32"},
            {"model.decoder_depth", "2"},
            {"model.decoder_heads", "4"},
            {"model.num_layer_classes", "5"},
            {"model.mlp_ratio", "4"},
            {"model.seg_head_width", "64"},
            {"model.in_channels", "1"},
            {"masking.alpha", "1.0"},
            {"masking.budget_single", "49"},
            {"masking.budget_multi", "98"},
            {"masking.scale_rule", "proportional"},
            {"schedule.base_lr", "0.0001"},
            {"schedule.warmup_start", "0.000001"},
            {"schedule.warmup_epochs", "40"},
            {"schedule.total_epochs", "1600"},
            {"schedule.batch", "8"},
            {"schedule.weight_decay", "0.05"},
            {"probe.max_epochs", "1000"},
            {"probe.lr", "0.001"},
            {"probe.weight_decay", "0.01"},
            {"probe.label_smoothing", "0.1"},
            {"probe.early_stop_from", "20"},
            {"probe.patience", "20"},
            {"probe.min_improvement", "0.001"},
            {"probe.seeds", "5"},
            {"seg.epochs", "200"},
            {"seg.lr", "0.0001"},
            {"seg.batch", "4"},
            {"seg.crop", "1024"},
            {"seg.mode", "decoder_only"},
            {"seg.head", "convnext"},
            {"seg.weight_decay", "0.05"},
            {"augment.flip_prob", "0.5"},
            {"augment.rot_deg", "10"},
            {"augment.trans_frac", "0.05"},
            {"augment.scale_min", "0.9"},
            {"augment.scale_max", "1.1"},
            {"augment.intensity_shift", "0.1"},
            {"phantom.size", "128"},
            {"phantom.classes", "5"},
            {"phantom.control_points", "5"},
            {"phantom.speckle", "0.05"},
            {"phantom.lesion_prob", "0.5"},
            {"phantom.lesion_r_min", "6"},
            {"phantom.lesion_r_max", "14"},
            {"phantom.patients", "10"},
            {"phantom.samples_per_patient", "2"},
            {"split.train", "0.6"},
            {"split.val", "0.2"},
            {"split.test", "0.2"},
            {"data.root", "data"},
            {"data.num_classes", "2"},
            {"checkpoint", ""},
            {"seed", "1"},
            {"out", "out"},
        };
        return d;
    }

    static RunConfig load(const std::string& path) {
        RunConfig rc;
        rc.kv = defaults();
        if (path.empty()) return rc;
        std::ifstream f(path);
        if (!f) throw ConfigError("cli", "config file not found: " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("cli", "malformed config line " + std::to_string(lineno));
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            if (!rc.kv.count(key)) throw ConfigError("cli", "unknown config key: " + key);
            rc.kv[key] = val;
        }
        return rc;
    }

    const std::string& str(const std::string& key) const { return kv.at(key); }
    double num(const std::string& key) const {
        try {
            return std::stod(kv.at(key));
        } catch (const std::exception&) {
            throw ConfigError("cli", "non-numeric value for " + key);
        }
    }
    std::size_t count(const std::string& key) const {
        const double v = num(key);
        if (v < 0 || v != std::floor(v))
            throw ConfigError("cli", "expected a non-negative integer for " + key);
        return static_cast<std::size_t>(v);
    }

    // output directory, overridable by environment
    std::string out_dir() const {
        if (const char* env = std::getenv("TRIMAE_OUT")) return env;
        return str("out");
    }

    void echo_resolved(const std::string& dir) const {
        fs::create_directories(dir);
        std::ofstream f(fs::path(dir) / "resolved.cfg");
        for (const auto& [k, v] : kv) f << k << "=" << v << "\n";
    }

    ModelConfig model() const {
        ModelConfig c;
        const std::string v = str("model.variant");
        if (v == "tiny")
            c = ModelConfig::tiny();
        else if (v == "base")
            c = ModelConfig::base();
        else if (v == "large")
            c = ModelConfig::large();
        else if (v != "custom")
            throw ConfigError("cli", "unknown model.variant: " + v);
        if (v == "custom" || v == "tiny") {
            c.depth = count("model.depth");
            c.width = count("model.width");
            c.heads = count("model.heads");
            c.patch = count("model.patch");
            c.input = count("model.input");
            c.decoder_width = count("model.decoder_width");
            c.decoder_depth = count("model.decoder_depth");
            c.decoder_heads = count("model.decoder_heads");
            c.num_layer_classes = count("model.num_layer_classes");
            c.mlp_ratio = count("model.mlp_ratio");
            c.seg_head_width = count("model.seg_head_width");
            c.in_channels = count("model.in_channels");
            c.variant = v == "tiny" ? Variant::Tiny : Variant::Custom;
        }
        c.validate();
        return c;
    }

    MaskingConfig masking() const {
        MaskingConfig m;
        m.alpha = num("masking.alpha");
        m.budget_single = count("masking.budget_single");
        m.budget_multi = count("masking.budget_multi");
        const std::string r = str("masking.scale_rule");
        if (r == "absolute")
            m.scale_rule = MaskingConfig::ScaleRule::Absolute;
        else if (r == "proportional")
            m.scale_rule = MaskingConfig::ScaleRule::Proportional;
        else
            throw ConfigError("cli", "unknown masking.scale_rule: " + r);
        m.validate();
        return m;
    }

    ScheduleConfig schedule() const {
        ScheduleConfig s;
        s.base_lr = num("schedule.base_lr");
        s.warmup_start = num("schedule.warmup_start");
        s.warmup_epochs = count("schedule.warmup_epochs");
        s.total_epochs = count("schedule.total_epochs");
        s.batch = count("schedule.batch");
        s.weight_decay = num("schedule.weight_decay");
        s.validate();
        return s;
    }

    ProbeProtocol probe() const {
        ProbeProtocol p;
        p.max_epochs = count("probe.max_epochs");
        p.lr = num("probe.lr");
        p.weight_decay = num("probe.weight_decay");
        p.label_smoothing = num("probe.label_smoothing");
        p.early_stop_from = count("probe.early_stop_from");
        p.patience = count("probe.patience");
        p.min_improvement = num("probe.min_improvement");
        p.seeds = count("probe.seeds");
        p.validate();
        return p;
    }

    SegProtocol seg() const {
        SegProtocol s;
        s.epochs = count("seg.epochs");
        s.lr = num("seg.lr");
        s.batch = count("seg.batch");
        s.crop = count("seg.crop");
        s.weight_decay = num("seg.weight_decay");
        const std::string m = str("seg.mode");
        if (m == "decoder_only")
            s.mode = SegMode::DecoderOnly;
        else if (m == "full_fine_tune")
            s.mode = SegMode::FullFineTune;
        else
            throw ConfigError("cli", "unknown seg.mode: " + m);
        s.validate();
        return s;
    }

    SegHeadKind seg_head() const {
        const std::string h = str("seg.head");
        if (h == "convnext") return SegHeadKind::ConvNeXt;
        if (h == "linear") return SegHeadKind::Linear;
        throw ConfigError("cli", "unknown seg.head: " + h);
    }

    AugmentPolicy augmentation() const {
        AugmentPolicy a;
        a.flip_prob = num("augment.flip_prob");
        a.rot_deg = num("augment.rot_deg");
        a.trans_frac = num("augment.trans_frac");
        a.scale_min = num("augment.scale_min");
        a.scale_max = num("augment.scale_max");
        a.intensity_shift = num("augment.intensity_shift");
        return a;
    }

    PhantomConfig phantom() const {
        PhantomConfig p;
        p.size = count("phantom.size");
        p.num_layer_classes = count("phantom.classes");
        p.control_points = count("phantom.control_points");
        p.speckle = num("phantom.speckle");
        p.lesion_prob = num("phantom.lesion_prob");
        p.lesion_r_min = num("phantom.lesion_r_min");
        p.lesion_r_max = num("phantom.lesion_r_max");
        p.seed = count("seed");
        return p;
    }
};

// split the loaded dataset by the manifest's split column
struct Splits {
    std::vector<Sample> train, val, test;
};

static Splits split_samples(const LoadedDataset& ds) {
    Splits sp;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const std::string& s = ds.manifest[i].split;
        if (s == "train")
            sp.train.push_back(ds.samples[i]);
        else if (s == "val")
            sp.val.push_back(ds.samples[i]);
        else if (s == "test")
            sp.test.push_back(ds.samples[i]);
        else
            throw DataError("cli", "unknown split name: " + s);
    }
    return sp;
}

// ---- SVG loss curves ----

static void write_loss_svg(const std::string& path, const std::vector<EpochLoss>& hist) {
    std::ofstream f(path);
    if (!f) throw DataError("cli", "cannot write " + path);
    const double W = 640, H = 400, ml = 50, mb = 30;
    double ymax = 1e-9;
    for (const auto& e : hist)
        ymax = std::max({ymax, e.l_oct, e.l_slo, e.l_layers, e.total});
    const double xmax = static_cast<double>(std::max<std::size_t>(hist.size() - 1, 1));
    auto px = [&](double e) { return ml + (W - ml - 10) * e / xmax; };
    auto py = [&](double v) { return H - mb - (H - mb - 10) * v / ymax; };
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - 10 << "\" y2=\""
      << H - mb << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"10\" x2=\"" << ml << "\" y2=\"" << H - mb
      << "\" stroke=\"black\"/>\n";
    const char* colors[4] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#000000"};
    const char* names[4] = {"l_oct", "l_slo", "l_layers", "total"};
    for (int c = 0; c < 4; ++c) {
        f << "<polyline fill=\"none\" stroke=\"" << colors[c] << "\" points=\"";
        for (std::size_t i = 0; i < hist.size(); ++i) {
            const auto& e = hist[i];
            const double v = c == 0 ? e.l_oct : c == 1 ? e.l_slo : c == 2 ? e.l_layers : e.total;
            f << px(static_cast<double>(i)) << "," << py(v) << " ";
        }
        f << "\"/>\n<text x=\"" << W - 120 << "\" y=\"" << 20 + 16 * c << "\" fill=\""
          << colors[c] << "\">" << names[c] << "</text>\n";
    }
    f << "</svg>\n";
}

// ---- subcommands ----

static int cmd_synth(const RunConfig& rc) {
    const std::string root = rc.str("data.root");
    PhantomDataset ds = synth_generate(rc.phantom(), rc.count("phantom.patients"),
                                       rc.count("phantom.samples_per_patient"));
    const auto splits = split_stratified(
        ds.manifest, {rc.num("split.train"), rc.num("split.val"), rc.num("split.test")},
        rc.count("seed"));
    for (std::size_t i = 0; i < ds.manifest.size(); ++i) ds.manifest[i].split = splits[i];
    write_dataset(root, ds);
    rc.echo_resolved(root);
    std::cout << "wrote " << ds.samples.size() << " samples to " << root << "\n";
    return 0;
}

static int cmd_pretrain(const RunConfig& rc) {
    const std::string out = rc.out_dir();
    fs::create_directories(out);
    const ModelConfig cfg = rc.model();
    const ScheduleConfig sched = rc.schedule();
    const MaskingConfig masking = rc.masking();
    const AugmentPolicy aug = rc.augmentation();
    LoadedDataset ds = load_dataset(rc.str("data.root"), cfg.num_layer_classes);
    Splits sp = split_samples(ds);
    if (sp.train.empty()) throw DataError("cli", "no training samples in dataset");
    Rng init_rng = Rng::derive(rc.count("seed"), 0, 0);
    ParameterSet ps = ParameterSet::init(cfg, TaskMode::Pretrain, 2, init_rng);
    PretrainResult res =
        pretrain_run(ps, sp.train, sched, masking, aug, rc.count("seed"),
                     [&](std::size_t epoch, const ParameterSet& state) {
                         Checkpoint ck;
                         state.to_checkpoint(ck);
                         ck.manifest["epoch"] = std::to_string(epoch);
                         ck.save((fs::path(out) / "model.ckpt").string());
                     });
    write_loss_csv((fs::path(out) / "loss.csv").string(), res.history);
    write_loss_svg((fs::path(out) / "loss.svg").string(), res.history);
    rc.echo_resolved(out);
    std::cout << "pretrained " << sched.total_epochs << " epochs, final total loss "
              << res.history.back().total << "\n";
    return 0;
}

static int cmd_probe(const RunConfig& rc) {
    const std::string out = rc.out_dir();
    fs::create_directories(out);
    const ModelConfig cfg = rc.model();
    const ProbeProtocol proto = rc.probe();
    const std::size_t num_classes = rc.count("data.num_classes");
    LoadedDataset ds = load_dataset(rc.str("data.root"), cfg.num_layer_classes);
    Splits sp = split_samples(ds);
    Checkpoint ck = Checkpoint::load(rc.str("checkpoint"));

    std::ofstream rep((fs::path(out) / "replicas.csv").string());
    rep << "seed,metric,value\n";
    rep.precision(12);
    std::vector<double> baccs, aurocs, aps;
    for (std::size_t k = 0; k < proto.seeds; ++k) {
        const std::uint64_t seed = rc.count("seed") + k;
        ProbeResult res = probe_train(sp.train, sp.val, ck, cfg, num_classes, proto, seed,
                                      rc.augmentation());
        const auto& eval = sp.test.empty() ? sp.val : sp.test;
        auto probs = probe_predict(eval, res.best);
        std::vector<int> pred, truth;
        for (std::size_t i = 0; i < eval.size(); ++i) {
            truth.push_back(eval[i].label.value());
            std::size_t arg = 0;
            for (std::size_t c = 1; c < num_classes; ++c)
                if (probs[i][c] > probs[i][arg]) arg = c;
            pred.push_back(static_cast<int>(arg));
        }
        const double bacc = balanced_accuracy(pred, truth);
        const double auc = auroc_weighted_ovr(probs, truth);
        const double ap = average_precision_weighted(probs, truth);
        baccs.push_back(bacc);
        aurocs.push_back(auc);
        aps.push_back(ap);
        rep << seed << ",bacc," << bacc << "\n";
        rep << seed << ",auroc," << auc << "\n";
        rep << seed << ",ap," << ap << "\n";
        Checkpoint hck;
        res.best.to_checkpoint(hck);
        hck.save((fs::path(out) / ("probe_seed" + std::to_string(seed) + ".ckpt")).string());
    }
    auto [mb, sb] = mean_std(baccs);
    auto [ma, sa] = mean_std(aurocs);
    auto [mp, spd] = mean_std(aps);
    rep << "mean,bacc," << mb << "\nstd,bacc," << sb << "\n";
    rep << "mean,auroc," << ma << "\nstd,auroc," << sa << "\n";
    rep << "mean,ap," << mp << "\nstd,ap," << spd << "\n";
    rc.echo_resolved(out);
    std::cout << "probe bacc " << mb << " +/- " << sb << " over " << proto.seeds
              << " seeds\n";
    return 0;
}

static int cmd_segment_tune(const RunConfig& rc) {
    const std::string out = rc.out_dir();
    fs::create_directories(out);
    const ModelConfig cfg = rc.model();
    const SegProtocol proto = rc.seg();
    const SegHeadKind head = rc.seg_head();
    LoadedDataset ds = load_dataset(rc.str("data.root"), cfg.num_layer_classes);
    Splits sp = split_samples(ds);
    Checkpoint ck = Checkpoint::load(rc.str("checkpoint"));
    const std::size_t num_classes = cfg.num_layer_classes;
    SegResult res = seg_tune(sp.train, sp.val, ck, cfg, num_classes, proto, head,
                             rc.count("seed"));
    Checkpoint sck;
    res.best.to_checkpoint(sck);
    sck.save((fs::path(out) / "seg.ckpt").string());
    std::ofstream tf((fs::path(out) / "dice_trace.csv").string());
    tf << "epoch,metric,loss\n";
    tf.precision(12);
    for (const auto& e : res.trace)
        tf << e.epoch << "," << e.val_dice << "," << e.train_loss << "\n";
    rc.echo_resolved(out);
    std::cout << "best val dice " << res.best_dice << " at epoch " << res.best_epoch << "\n";
    return 0;
}

static int cmd_evaluate(const RunConfig& rc) {
    const std::string out = rc.out_dir();
    fs::create_directories(out);
    Checkpoint ck = Checkpoint::load(rc.str("checkpoint"));
    ParameterSet ps = ParameterSet::from_checkpoint(ck);
    if (ps.mode != TaskMode::Segment && ps.mode != TaskMode::SegmentLinear)
        throw ConfigError("cli", "evaluate expects a segmentation checkpoint");
    LoadedDataset ds = load_dataset(rc.str("data.root"), ps.num_classes);
    Splits sp = split_samples(ds);
    const auto& eval = sp.test.empty() ? sp.val : sp.test;
    if (eval.empty()) throw DataError("cli", "no evaluation samples");

    std::map<std::string, std::string> patient_of;
    std::vector<BScanValue> dvals, ivals, hvals, avals;
    for (const auto& s : eval) {
        if (!s.mask) throw DataError("cli", "sample " + s.sample_id + " lacks a mask");
        if (s.oct.height != ps.cfg.input || s.oct.width != ps.cfg.input)
            throw DataError("cli", "sample size does not match model input");
        patient_of[s.sample_id] = s.patient_id;
        const auto pred = seg_predict_one(s, ps);
        const std::size_t h = s.mask->height, w = s.mask->width;
        for (std::size_t c = 1; c < ps.num_classes; ++c) {
            Mask mp(h * w), mt(h * w);
            std::size_t np = 0, nt = 0;
            for (std::size_t i = 0; i < h * w; ++i) {
                mp[i] = pred[i] == static_cast<int>(c);
                mt[i] = s.mask->values[i] == static_cast<int>(c);
                np += mp[i] ? 1 : 0;
                nt += mt[i] ? 1 : 0;
            }
            const int cls = static_cast<int>(c);
            if (np + nt == 0) {
                // undefined: excluded from averages
                dvals.push_back({s.sample_id, cls, std::nullopt});
                ivals.push_back({s.sample_id, cls, std::nullopt});
                hvals.push_back({s.sample_id, cls, std::nullopt});
            } else {
                dvals.push_back({s.sample_id, cls, dice(mp, mt, h, w)});
                ivals.push_back({s.sample_id, cls, iou(mp, mt, h, w)});
                if (np == 0 || nt == 0)
                    hvals.push_back({s.sample_id, cls, std::nullopt});
                else
                    hvals.push_back({s.sample_id, cls, hd95(mp, mt, h, w, s.spacing)});
            }
            avals.push_back({s.sample_id, cls, avd(mp, mt, s.spacing)});
        }
    }
    write_metric_csv((fs::path(out) / "dice.csv").string(), "dice",
                     aggregate_patient(dvals, patient_of));
    write_metric_csv((fs::path(out) / "iou.csv").string(), "iou",
                     aggregate_patient(ivals, patient_of));
    try {
        write_metric_csv((fs::path(out) / "hd95.csv").string(), "hd95",
                         aggregate_patient(hvals, patient_of));
    } catch (const UndefinedMetricError&) {
        // every pair had an empty boundary; skip the table
    }
    write_metric_csv((fs::path(out) / "avd.csv").string(), "avd",
                     aggregate_patient(avals, patient_of));
    rc.echo_resolved(out);
    std::cout << "evaluated " << eval.size() << " samples\n";
    return 0;
}

// replica CSV: rows seed,metric,value (aggregate mean/std rows ignored here)
static std::map<std::string, std::vector<double>> read_replicas(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cli", "replica file not found: " + path);
    std::string line;
    if (!std::getline(f, line) || line != "seed,metric,value")
        throw DataError("cli", "replica header malformed in " + path);
    std::map<std::string, std::vector<double>> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string seed, metric, value;
        std::getline(ss, seed, ',');
        std::getline(ss, metric, ',');
        std::getline(ss, value, ',');
        if (seed == "mean" || seed == "std") continue;
        out[metric].push_back(std::stod(value));
    }
    return out;
}

static int cmd_stats(const RunConfig& rc, const std::string& file_a,
                     const std::string& file_b) {
    const std::string out = rc.out_dir();
    fs::create_directories(out);
    auto a = read_replicas(file_a);
    auto b = read_replicas(file_b);
    std::ofstream f((fs::path(out) / "stats.csv").string());
    f << "metric,mean_a,mean_b,t_p,wilcoxon_p,degenerate\n";
    f.precision(12);
    for (const auto& [metric, va] : a) {
        if (!b.count(metric)) continue;
        const auto& vb = b.at(metric);
        TTestResult t = t_test_one_tailed(va, vb);
        std::string wp = "nan";
        try {
            std::ostringstream os;
            os.precision(12);
            os << wilcoxon_signed_rank(va, vb);
            wp = os.str();
        } catch (const Error&) {
            wp = "undefined";
        }
        auto [ma, sa_] = mean_std(va);
        auto [mb, sb_] = mean_std(vb);
        f << metric << "," << ma << "," << mb << "," << t.p << "," << wp << ","
          << (t.degenerate ? 1 : 0) << "\n";
    }
    rc.echo_resolved(out);
    std::cout << "wrote " << (fs::path(out) / "stats.csv").string() << "\n";
    return 0;
}

// reconstruction grid: original, masked input, reconstruction side by side
static void write_reconstruction(const std::string& path, const Sample& s,
                                 const ParameterSet& ps, Modality target, double ratio,
                                 std::uint64_t seed) {
    const std::size_t P = ps.cfg.patches(), p = ps.cfg.patch, S = ps.cfg.input;
    const std::size_t n_masked =
        static_cast<std::size_t>(std::llround(ratio * static_cast<double>(P)));
    Rng rng = Rng::derive(seed, 99, 0);
    const auto modalities = active_modalities(ps.mode);
    std::vector<std::size_t> counts;
    for (Modality m : modalities) counts.push_back(m == target ? P - n_masked : P);
    TokenAllocation alloc = select_tokens(counts, std::vector<std::size_t>(3, P), rng);
    TokenSequence enc = encode(project_tokens(s, alloc, ps), ps);
    ad::Var predv = decode_modality(enc, target, alloc, ps);

    std::size_t mi = 0;
    for (std::size_t i = 0; i < modalities.size(); ++i)
        if (modalities[i] == target) mi = i;
    std::vector<bool> visible(P, false);
    for (std::size_t i : alloc.indices[mi]) visible[i] = true;

    // per-patch scalar image of the prediction
    Tensor pred = predv->val;
    std::vector<double> recon;
    if (is_categorical(target)) {
        const std::size_t C = ps.cfg.num_layer_classes;
        Tensor cls({P, p * p});
        for (std::size_t t = 0; t < P; ++t)
            for (std::size_t j = 0; j < p * p; ++j) {
                std::size_t arg = 0;
                for (std::size_t c = 1; c < C; ++c)
                    if (pred(t, c * p * p + j) > pred(t, arg * p * p + j)) arg = c;
                cls(t, j) = static_cast<double>(arg) / static_cast<double>(C - 1);
            }
        recon = unpatchify(cls, p, S, S);
    } else {
        recon = unpatchify(pred, p, S, S);
    }

    std::vector<double> orig;
    if (target == Modality::OCT)
        orig = s.oct.values;
    else if (target == Modality::SLO)
        orig = s.slo->values;
    else {
        orig.resize(S * S);
        const double denom = static_cast<double>(ps.cfg.num_layer_classes - 1);
        for (std::size_t i = 0; i < orig.size(); ++i)
            orig[i] = static_cast<double>(s.layers->values[i]) / denom;
    }
    const std::size_t g = ps.cfg.grid();
    ImagePlane panel(S, 3 * S);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            panel.at(y, x) = orig[y * S + x];
            const std::size_t patch = (y / p) * g + (x / p);
            panel.at(y, S + x) = visible[patch] ? orig[y * S + x] : 0.0;
            panel.at(y, 2 * S + x) = std::clamp(recon[y * S + x], 0.0, 1.0);
        }
    write_pgm16(path, panel);
}

static int cmd_report(const RunConfig& rc) {
    const std::string out = rc.out_dir();
    fs::create_directories(out);
    Checkpoint ck = Checkpoint::load(rc.str("checkpoint"));
    ParameterSet ps = ParameterSet::from_checkpoint(ck);
    if (ps.mode != TaskMode::Pretrain)
        throw ConfigError("cli", "report expects a pretraining checkpoint");
    LoadedDataset ds = load_dataset(rc.str("data.root"), ps.cfg.num_layer_classes);
    Splits sp = split_samples(ds);
    const auto& pool = !sp.test.empty() ? sp.test : (!sp.val.empty() ? sp.val : sp.train);
    if (pool.empty()) throw DataError("cli", "dataset has no samples");
    const Sample& s = pool.front();

    std::ofstream md((fs::path(out) / "report.md").string());
    md << "# Run report\n\n";
    md << "Model: depth " << ps.cfg.depth << ", width " << ps.cfg.width << ", heads "
       << ps.cfg.heads << ", patch " << ps.cfg.patch << ", input " << ps.cfg.input << "\n\n";
    md << "Parameters: " << count_params(ps.cfg, ps.mode, ps.num_classes) << "\n\n";

    md << "## Reconstruction grids\n\n";
    md << "Panels: original | masked input | reconstruction\n\n";
    for (Modality m : {Modality::OCT, Modality::SLO, Modality::LAYERS}) {
        for (double ratio : {0.0, 0.5, 1.0}) {
            std::ostringstream name;
            name << "recon_" << modality_name(m) << "_" << static_cast<int>(ratio * 100)
                 << ".pgm";
            write_reconstruction((fs::path(out) / name.str()).string(), s, ps, m, ratio,
                                 rc.count("seed"));
            md << "- " << name.str() << "\n";
        }
    }
    md << "\n";

    // fold in any replica / stats tables already present in the output dir
    if (fs::exists(fs::path(out) / "replicas.csv")) {
        auto reps = read_replicas((fs::path(out) / "replicas.csv").string());
        md << "## Probe replicas (mean +/- std)\n\n| metric | mean | std |\n|---|---|---|\n";
        md.precision(6);
        for (const auto& [metric, vals] : reps) {
            auto [m, sd] = mean_std(vals);
            md << "| " << metric << " | " << m << " | " << sd << " |\n";
        }
        md << "\n";
    }
    if (fs::exists(fs::path(out) / "stats.csv")) {
        std::ifstream sf((fs::path(out) / "stats.csv").string());
        std::string line;
        std::getline(sf, line);
        md << "## Pairwise statistics\n\n| metric | mean A | mean B | t p | Wilcoxon p |\n"
           << "|---|---|---|---|---|\n";
        while (std::getline(sf, line)) {
            std::stringstream ss(line);
            std::string metric, ma, mb, tp, wp;
            std::getline(ss, metric, ',');
            std::getline(ss, ma, ',');
            std::getline(ss, mb, ',');
            std::getline(ss, tp, ',');
            std::getline(ss, wp, ',');
            md << "| " << metric << " | " << ma << " | " << mb << " | " << tp << " | " << wp
               << " |\n";
        }
        md << "\n";
    }
    rc.echo_resolved(out);
    std::cout << "wrote " << (fs::path(out) / "report.md").string() << "\n";
    return 0;
}

int main(int argc, char** argv) {
    CLI::App app{"multimodal masked-autoencoder pipeline"};
    app.require_subcommand(1);
    std::string config_path, stats_a, stats_b, override_out, override_ckpt;
    long override_seed = -1;
    app.add_option("-c,--config", config_path, "run configuration file (key=value)");
    app.add_option("--out", override_out, "output directory override");
    app.add_option("--checkpoint", override_ckpt, "checkpoint path override");
    app.add_option("--seed", override_seed, "seed override");

    auto* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
    auto* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
    auto* probe = app.add_subcommand("probe", "linear-probe classification tuning");
    auto* segtune = app.add_subcommand("segment-tune", "segmentation head tuning");
    auto* evaluate = app.add_subcommand("evaluate", "segmentation metric evaluation");
    auto* stats = app.add_subcommand("stats", "pairwise significance tests");
    stats->add_option("--a", stats_a, "replica CSV A")->required();
    stats->add_option("--b", stats_b, "replica CSV B")->required();
    auto* report = app.add_subcommand("report", "markdown report + reconstruction grids");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        RunConfig rc = RunConfig::load(config_path);
        if (!override_out.empty()) rc.kv["out"] = override_out;
        if (!override_ckpt.empty()) rc.kv["checkpoint"] = override_ckpt;
        if (override_seed >= 0) rc.kv["seed"] = std::to_string(override_seed);
        if (synth->parsed()) return cmd_synth(rc);
        if (pretrain->parsed()) return cmd_pretrain(rc);
        if (probe->parsed()) return cmd_probe(rc);
        if (segtune->parsed()) return cmd_segment_tune(rc);
        if (evaluate->parsed()) return cmd_evaluate(rc);
        if (stats->parsed()) return cmd_stats(rc, stats_a, stats_b);
        if (report->parsed()) return cmd_report(rc);
    } catch (const Error& e) {
        std::cerr << "error code=" << e.exit_code << " module=" << e.module
                  << " message=" << e.what() << "\n";
        return e.exit_code;
    } catch (const std::exception& e) {
        std::cerr << "error code=4 module=cli message=" << e.what() << "\n";
        return 4;
    }
    return 0;
}
