#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "trimae/common.hpp"
#include "trimae/data.hpp"
#include "trimae/metrics.hpp"
#include "trimae/model.hpp"
#include "trimae/pretrain.hpp"

namespace trimae {

// ---- probing protocol ----

struct ProbeProtocol {
    std::size_t max_epochs = 1000;
    double lr = 1e-3;
    double weight_decay = 1e-2;
    double label_smoothing = 0.1;
    std::size_t early_stop_from = 20;
    std::size_t patience = 20;
    double min_improvement = 0.001;  // 0.1 percentage points of BAcc on [0,1]
    std::size_t seeds = 5;

    void validate() const {
        if (max_epochs == 0 || lr <= 0.0 || weight_decay < 0.0 || patience == 0 ||
            min_improvement <= 0.0 || seeds == 0)
            throw ConfigError("adapt", "invalid probing protocol");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ConfigError("adapt", "label smoothing must be in [0,1)");
    }
};

inline std::size_t probe_batch_size(std::size_t train_size) {
    const std::size_t quarter = (train_size + 3) / 4;  // ceil(0.25 N)
    return std::min<std::size_t>(64, quarter);
}

// target row for smoothed CE: (1-eps) on the true class plus eps/C everywhere
inline Tensor smoothed_targets(const std::vector<std::size_t>& labels, std::size_t C,
                               double eps) {
    Tensor t({labels.size(), C});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t c = 0; c < C; ++c) t(i, c) = eps / static_cast<double>(C);
        t(i, labels[i]) += 1.0 - eps;
    }
    return t;
}

// Pure early-stopping rule: active from `from` (1-based epochs), triggers
// after `patience` consecutive epochs without a >= min_improvement BAcc gain.
class EarlyStopper {
  public:
    EarlyStopper(std::size_t from, std::size_t patience, double min_improvement)
        : from_(from), patience_(patience), min_improvement_(min_improvement) {}

    // returns true when training should stop after this epoch
    bool observe(std::size_t epoch, double bacc) {
        if (bacc >= best_ + min_improvement_ || stale_ == npos) {
            best_ = std::max(best_, bacc);
            stale_ = 0;
        } else {
            ++stale_;
        }
        return epoch >= from_ && stale_ >= patience_;
    }

  private:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t from_, patience_;
    double min_improvement_;
    double best_ = 0.0;
    std::size_t stale_ = npos;  // npos = no observation yet
};

struct ProbeEpoch {
    std::size_t epoch = 0;
    double val_bacc = 0.0;
    double val_loss = 0.0;
    double train_loss = 0.0;
};

struct ProbeResult {
    ParameterSet best;  // encoder + best-selected head
    std::vector<ProbeEpoch> trace;
    double best_bacc = 0.0;
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
};

namespace detail {

inline std::vector<double> predict_probs(const Sample& s, const ParameterSet& ps) {
    TokenAllocation alloc = full_allocation(ps);
    TokenSequence enc = encode(project_tokens(s, alloc, ps), ps);
    return classify_head(enc, ps);
}

inline std::size_t num_label_classes(const std::vector<Sample>& samples) {
    int max_label = 0;
    for (const auto& s : samples)
        if (s.label) max_label = std::max(max_label, *s.label);
    return static_cast<std::size_t>(max_label) + 1;
}

}  // namespace detail

// Linear probing: encoder frozen, softmax head trained with smoothed CE.
// Model selection: best validation BAcc, ties broken by lower validation loss.
inline ProbeResult probe_train(const std::vector<Sample>& train,
                               const std::vector<Sample>& val, const Checkpoint& pretrained,
                               const ModelConfig& cfg, std::size_t num_classes,
                               const ProbeProtocol& proto, std::uint64_t seed,
                               const AugmentPolicy& aug = AugmentPolicy::identity()) {
    proto.validate();
    if (train.empty() || val.empty()) throw DataError("adapt", "empty probing split");
    std::set<int> train_classes;
    for (const auto& s : train) {
        if (!s.label) throw DataError("adapt", "unlabeled sample " + s.sample_id);
        train_classes.insert(*s.label);
    }
    for (std::size_t c = 0; c < num_classes; ++c)
        if (!train_classes.count(static_cast<int>(c)))
            throw StratificationError("adapt", "class " + std::to_string(c) +
                                                   " absent from the training split");

    Rng init_rng = Rng::derive(seed, 0, 0);
    ParameterSet ps = ParameterSet::init(cfg, TaskMode::Classify, num_classes, init_rng);
    import_encoder(pretrained, ps);
    ps.set_trainable([](const std::string& n) { return n.starts_with("head."); });

    const std::size_t batch = probe_batch_size(train.size());
    auto trainable = ps.trainable();
    AdamWState opt;
    EarlyStopper stopper(proto.early_stop_from, proto.patience, proto.min_improvement);

    ProbeResult res;
    res.best = ps.clone();
    const std::size_t n = train.size();
    const std::size_t steps = (n + batch - 1) / batch;

    for (std::size_t epoch = 1; epoch <= proto.max_epochs; ++epoch) {
        Rng order_rng = Rng::derive(seed, epoch, 0);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[order_rng.uniform_int(i)]);

        ProbeEpoch ep;
        ep.epoch = epoch;
        for (std::size_t step = 0; step < steps; ++step) {
            Rng rng = Rng::derive(seed, epoch, step + 1);
            const std::size_t lo = step * batch, hi = std::min(lo + batch, n);
            zero_grads(ps);
            std::vector<ad::Var> logit_rows;
            std::vector<std::size_t> labels;
            for (std::size_t bi = lo; bi < hi; ++bi) {
                const Sample& raw = train[order[bi]];
                Sample s = augment(raw, rng, aug);
                TokenAllocation alloc = full_allocation(ps);
                TokenSequence enc = encode(project_tokens(s, alloc, ps), ps);
                logit_rows.push_back(classify_logits(enc, ps));
                labels.push_back(static_cast<std::size_t>(*raw.label));
            }
            ad::Var logits = ad::concat_rows(logit_rows);
            ad::Var loss = ad::ce_soft_rows_mean(
                logits, smoothed_targets(labels, num_classes, proto.label_smoothing));
            ep.train_loss += loss->val[0] / static_cast<double>(steps);
            ad::backward(loss);
            optimizer_step(trainable, opt, proto.lr, proto.weight_decay);
        }

        // validation pass
        std::vector<int> pred, truth;
        std::vector<ad::Var> vrows;
        std::vector<std::size_t> vlabels;
        for (const auto& s : val) {
            if (!s.label) throw DataError("adapt", "unlabeled sample " + s.sample_id);
            TokenAllocation alloc = full_allocation(ps);
            TokenSequence enc = encode(project_tokens(s, alloc, ps), ps);
            ad::Var lg = classify_logits(enc, ps);
            vrows.push_back(lg);
            vlabels.push_back(static_cast<std::size_t>(*s.label));
            std::size_t arg = 0;
            for (std::size_t c = 1; c < num_classes; ++c)
                if (lg->val[c] > lg->val[arg]) arg = c;
            pred.push_back(static_cast<int>(arg));
            truth.push_back(*s.label);
        }
        ep.val_loss = ad::ce_soft_rows_mean(
                          ad::concat_rows(vrows),
                          smoothed_targets(vlabels, num_classes, proto.label_smoothing))
                          ->val[0];
        ep.val_bacc = balanced_accuracy(pred, truth);
        res.trace.push_back(ep);

        if (ep.val_bacc > res.best_bacc ||
            (ep.val_bacc == res.best_bacc && ep.val_loss < res.best_loss)) {
            res.best_bacc = ep.val_bacc;
            res.best_loss = ep.val_loss;
            res.best_epoch = epoch;
            res.best = ps.clone();
        }
        if (stopper.observe(epoch, ep.val_bacc)) break;
    }
    return res;
}

inline std::vector<std::vector<double>> probe_predict(const std::vector<Sample>& samples,
                                                      const ParameterSet& ps) {
    if (ps.mode != TaskMode::Classify)
        throw ConfigError("adapt", "probe_predict needs a classification model");
    std::vector<std::vector<double>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(detail::predict_probs(s, ps));
    return out;
}

// ---- segmentation tuning ----

enum class SegHeadKind { ConvNeXt, Linear };
enum class SegMode { DecoderOnly, FullFineTune };

struct SegProtocol {
    std::size_t epochs = 200;
    double lr = 1e-4;
    std::size_t batch = 4;
    std::size_t crop = 1024;  // clamped to the input size at desk scale
    SegMode mode = SegMode::DecoderOnly;
    double weight_decay = 0.05;

    void validate() const {
        if (epochs == 0 || lr <= 0.0 || batch == 0 || crop == 0)
            throw ConfigError("adapt", "invalid segmentation protocol");
    }
};

struct SegEpoch {
    std::size_t epoch = 0;
    double val_dice = 0.0;
    double train_loss = 0.0;
};

struct SegResult {
    ParameterSet best;
    std::vector<SegEpoch> trace;
    double best_dice = 0.0;
    std::size_t best_epoch = 0;
};

namespace detail {

// random crop to size x size plus horizontal flip, applied to OCT + mask
inline Sample crop_flip(const Sample& in, std::size_t size, Rng& rng) {
    const std::size_t H = in.oct.height, W = in.oct.width;
    if (H < size || W < size)
        throw DataError("adapt", "sample smaller than crop in " + in.sample_id);
    const std::size_t oy = H == size ? 0 : rng.uniform_int(H - size + 1);
    const std::size_t ox = W == size ? 0 : rng.uniform_int(W - size + 1);
    const bool flip = rng.uniform() < 0.5;
    Sample out = in;
    out.oct = ImagePlane(size, size);
    out.mask = LayerMap(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t sx = flip ? ox + size - 1 - x : ox + x;
            out.oct.at(y, x) = in.oct.at(oy + y, sx);
            out.mask->at(y, x) = in.mask->at(oy + y, sx);
        }
    return out;
}

inline ad::Var seg_logits(const Sample& s, const ParameterSet& ps) {
    TokenAllocation alloc = full_allocation(ps);
    TokenSequence enc = encode(project_tokens(s, alloc, ps), ps);
    return ps.mode == TaskMode::Segment ? segment_head_convnext(enc, ps)
                                        : segment_head_linear(enc, ps);
}

}  // namespace detail

inline std::vector<int> seg_predict_one(const Sample& s, const ParameterSet& ps) {
    ad::Var logits = detail::seg_logits(s, ps);
    const std::size_t C = logits->val.cols();
    std::vector<int> map(logits->val.rows());
    for (std::size_t i = 0; i < map.size(); ++i) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (logits->val(i, c) > logits->val(i, arg)) arg = c;
        map[i] = static_cast<int>(arg);
    }
    return map;
}

inline std::vector<std::vector<int>> seg_predict(const std::vector<Sample>& samples,
                                                 const ParameterSet& ps) {
    std::vector<std::vector<int>> out;
    for (const auto& s : samples) out.push_back(seg_predict_one(s, ps));
    return out;
}

// mean foreground Dice of a predicted map against the sample mask;
// both-empty classes are skipped, empty-truth/nonempty-pred scores 0
inline double mean_foreground_dice(const std::vector<int>& pred, const LayerMap& truth,
                                   std::size_t num_classes) {
    double sum = 0.0;
    std::size_t defined = 0;
    const std::size_t n = truth.values.size();
    for (std::size_t c = 1; c < num_classes; ++c) {
        Mask mp(n), mt(n);
        std::size_t np = 0, nt = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mp[i] = pred[i] == static_cast<int>(c);
            mt[i] = truth.values[i] == static_cast<int>(c);
            np += mp[i] ? 1 : 0;
            nt += mt[i] ? 1 : 0;
        }
        if (np + nt == 0) continue;
        sum += dice(mp, mt, truth.height, truth.width);
        ++defined;
    }
    return defined == 0 ? 0.0 : sum / static_cast<double>(defined);
}

// Segmentation tuning with per-pixel CE over all classes including background.
// DecoderOnly trains the input projection, modality embedding, and head; full
// fine-tuning also trains the encoder stack and global token.
inline SegResult seg_tune(const std::vector<Sample>& train, const std::vector<Sample>& val,
                          const Checkpoint& pretrained, const ModelConfig& cfg,
                          std::size_t num_classes, const SegProtocol& proto,
                          SegHeadKind head, std::uint64_t seed) {
    proto.validate();
    if (train.empty() || val.empty()) throw DataError("adapt", "empty segmentation split");
    for (const auto& s : train)
        if (!s.mask) throw DataError("adapt", "sample " + s.sample_id + " lacks a mask");
    for (const auto& s : val)
        if (!s.mask) throw DataError("adapt", "sample " + s.sample_id + " lacks a mask");
    for (const auto& s : train)
        for (int v : s.mask->values)
            if (v < 0 || v >= static_cast<int>(num_classes))
                throw DataError("adapt", "mask class out of range in " + s.sample_id);

    ModelConfig mc = cfg;
    const std::size_t crop = std::min(proto.crop, cfg.input);
    mc.input = crop;  // model runs at the crop resolution
    Rng init_rng = Rng::derive(seed, 0, 0);
    const TaskMode mode =
        head == SegHeadKind::ConvNeXt ? TaskMode::Segment : TaskMode::SegmentLinear;
    ParameterSet ps = ParameterSet::init(mc, mode, num_classes, init_rng);
    import_encoder(pretrained, ps);
    if (proto.mode == SegMode::DecoderOnly) {
        ps.set_trainable([](const std::string& n) {
            return n.starts_with("proj.") || n.starts_with("mod_embed.") ||
                   n.starts_with("seg.") || n.starts_with("seglin.");
        });
    }  // FullFineTune keeps the default: everything except positional tables

    auto trainable = ps.trainable();
    AdamWState opt;
    SegResult res;
    res.best = ps.clone();
    const std::size_t n = train.size();
    const std::size_t steps = (n + proto.batch - 1) / proto.batch;

    for (std::size_t epoch = 1; epoch <= proto.epochs; ++epoch) {
        Rng order_rng = Rng::derive(seed, epoch, 0);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[order_rng.uniform_int(i)]);

        SegEpoch ep;
        ep.epoch = epoch;
        for (std::size_t step = 0; step < steps; ++step) {
            Rng rng = Rng::derive(seed, epoch, step + 1);
            const std::size_t lo = step * proto.batch, hi = std::min(lo + proto.batch, n);
            zero_grads(ps);
            std::vector<ad::Var> losses;
            for (std::size_t bi = lo; bi < hi; ++bi) {
                Sample s = detail::crop_flip(train[order[bi]], crop, rng);
                ad::Var logits = detail::seg_logits(s, ps);
                std::vector<std::size_t> targets(s.mask->values.size());
                for (std::size_t i = 0; i < targets.size(); ++i)
                    targets[i] = static_cast<std::size_t>(s.mask->values[i]);
                losses.push_back(ad::ce_rows_mean(logits, targets));
            }
            ad::Var loss = losses[0];
            for (std::size_t i = 1; i < losses.size(); ++i) loss = ad::add(loss, losses[i]);
            loss = ad::scale(loss, 1.0 / static_cast<double>(losses.size()));
            ep.train_loss += loss->val[0] / static_cast<double>(steps);
            ad::backward(loss);
            optimizer_step(trainable, opt, proto.lr, proto.weight_decay);
        }

        double dsum = 0.0;
        Rng vrng = Rng::derive(seed ^ 0x5eedul, epoch, 0);
        for (const auto& s : val) {
            Sample sc = detail::crop_flip(s, crop, vrng);
            dsum += mean_foreground_dice(seg_predict_one(sc, ps), *sc.mask, num_classes);
        }
        ep.val_dice = dsum / static_cast<double>(val.size());
        res.trace.push_back(ep);
        if (ep.val_dice > res.best_dice || res.trace.size() == 1) {
            res.best_dice = ep.val_dice;
            res.best_epoch = epoch;
            res.best = ps.clone();
        }
    }
    return res;
}

// ---- replica runner ----

struct ReplicaStats {
    std::vector<double> values;
    double mean = 0.0, std_dev = 0.0;
};

inline ReplicaStats replica_stats(std::vector<double> values) {
    ReplicaStats st;
    st.values = std::move(values);
    auto [m, s] = mean_std(st.values);
    st.mean = m;
    st.std_dev = s;
    return st;
}

}  // namespace trimae
