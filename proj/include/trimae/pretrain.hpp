#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "trimae/common.hpp"
#include "trimae/data.hpp"
#include "trimae/masking.hpp"
#include "trimae/model.hpp"
#include "trimae/objective.hpp"

namespace trimae {

struct ScheduleConfig {
    double base_lr = 1e-4;       // at reference batch 256
    double warmup_start = 1e-6;
    std::size_t warmup_epochs = 40;
    std::size_t total_epochs = 1600;
    std::size_t batch = 256;
    double weight_decay = 0.05;

    void validate() const {
        if (base_lr <= 0.0 || warmup_start < 0.0)
            throw ConfigError("pretrain", "learning rates must be positive");
        if (total_epochs == 0 || batch == 0)
            throw ConfigError("pretrain", "epochs and batch must be positive");
        if (warmup_epochs > total_epochs)
            throw ConfigError("pretrain", "warmup cannot exceed total epochs");
        if (weight_decay < 0.0) throw ConfigError("pretrain", "weight decay must be >= 0");
    }
};

// Linear batch-size scaling of the peak rate against the reference batch 256.
inline double effective_lr(const ScheduleConfig& s) {
    return s.base_lr * static_cast<double>(s.batch) / 256.0;
}

// Learning rate at fractional epoch t: linear warmup from warmup_start to the
// effective peak over warmup_epochs, then cosine decay to 0 at total_epochs.
inline double lr_at(const ScheduleConfig& s, double t) {
    if (t < 0.0 || t > static_cast<double>(s.total_epochs))
        throw DomainError("pretrain", "schedule time out of range");
    const double peak = effective_lr(s);
    const double w = static_cast<double>(s.warmup_epochs);
    if (t < w) return s.warmup_start + (peak - s.warmup_start) * (t / w);
    const double span = static_cast<double>(s.total_epochs) - w;
    if (span <= 0.0) return peak;
    return peak * 0.5 * (1.0 + std::cos(M_PI * (t - w) / span));
}

// ---- AdamW ----

struct AdamWConfig {
    double beta1 = 0.9, beta2 = 0.95;
    double eps = 1e-8;
};

struct AdamWState {
    std::vector<Tensor> m, v;
    std::size_t step = 0;
};

inline void zero_grads(ParameterSet& ps) {
    for (auto& [name, var] : ps.named) {
        if (var->grad_alloc) std::fill(var->grad.data(), var->grad.data() + var->grad.size(), 0.0);
    }
}

// Decoupled weight decay applied multiplicatively before the Adam update;
// tensors with a single row (biases, norms, embeddings, tokens) are exempt.
inline void optimizer_step(std::vector<std::pair<std::string, ad::Var>>& params,
                           AdamWState& state, double lr, double weight_decay,
                           const AdamWConfig& cfg = {}) {
    if (state.m.empty()) {
        for (auto& [name, var] : params) {
            state.m.push_back(Tensor::zeros(var->val.shape()));
            state.v.push_back(Tensor::zeros(var->val.shape()));
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("pretrain", "optimizer state does not match parameter list");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, var] = params[pi];
        Tensor& p = var->val;
        Tensor& m = state.m[pi];
        Tensor& v = state.v[pi];
        const bool decay = weight_decay > 0.0 && p.rows() > 1;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = var->grad_alloc ? var->grad[i] : 0.0;
            if (!std::isfinite(g))
                throw NumericError("pretrain", "non-finite gradient in tensor " + name);
            if (decay) p[i] *= 1.0 - lr * weight_decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
        }
    }
}

// ---- training loop ----

struct EpochLoss {
    std::size_t epoch = 0;
    double l_oct = 0.0, l_slo = 0.0, l_layers = 0.0, total = 0.0, lr = 0.0;
};

struct PretrainResult {
    std::vector<EpochLoss> history;
};

using CheckpointHook = std::function<void(std::size_t epoch, const ParameterSet&)>;

// Deterministic masked-autoencoding loop. Sample order, masking, and
// augmentation derive from (seed, epoch, step) only; the final model state
// lives in ps after return.
inline PretrainResult pretrain_run(ParameterSet& ps, const std::vector<Sample>& samples,
                                   const ScheduleConfig& sched, const MaskingConfig& masking,
                                   const AugmentPolicy& aug, std::uint64_t seed,
                                   const CheckpointHook& hook = nullptr) {
    sched.validate();
    masking.validate();
    if (ps.mode != TaskMode::Pretrain)
        throw ConfigError("pretrain", "parameter set is not in pretraining mode");
    if (samples.empty()) throw DataError("pretrain", "empty training set");
    for (const auto& s : samples) {
        if (!s.slo || !s.layers)
            throw DataError("pretrain", "sample " + s.sample_id + " lacks a pretraining modality");
    }
    const std::size_t P = ps.cfg.patches();
    const std::vector<std::size_t> caps(3, P);
    const std::size_t n = samples.size();
    const std::size_t steps_per_epoch = (n + sched.batch - 1) / sched.batch;
    const std::size_t cadence = std::max<std::size_t>(1, sched.total_epochs / 20);

    auto trainable = ps.trainable();
    AdamWState opt;
    PretrainResult res;
    for (std::size_t epoch = 0; epoch < sched.total_epochs; ++epoch) {
        // epoch-level shuffle
        Rng order_rng = Rng::derive(seed, epoch, 0);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[order_rng.uniform_int(i)]);

        EpochLoss ep;
        ep.epoch = epoch;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            Rng rng = Rng::derive(seed, epoch, step + 1);
            const std::size_t lo = step * sched.batch;
            const std::size_t hi = std::min(lo + sched.batch, n);
            const double inv = 1.0 / static_cast<double>(hi - lo);
            zero_grads(ps);
            std::vector<ad::Var> totals;
            for (std::size_t bi = lo; bi < hi; ++bi) {
                Sample s = augment(samples[order[bi]], rng, aug);
                TokenAllocation alloc = sample_allocation(masking, caps, rng);
                TokenSequence enc = encode(project_tokens(s, alloc, ps), ps);
                ad::Var po = decode_modality(enc, Modality::OCT, alloc, ps);
                ad::Var pn = decode_modality(enc, Modality::SLO, alloc, ps);
                ad::Var pl = decode_modality(enc, Modality::LAYERS, alloc, ps);
                LossBreakdown lb = total_loss(s, alloc, po, pn, pl, ps.cfg);
                ep.l_oct += lb.l_oct->val[0] * inv;
                ep.l_slo += lb.l_slo->val[0] * inv;
                ep.l_layers += lb.l_layers->val[0] * inv;
                totals.push_back(lb.total);
            }
            ad::Var batch_loss = totals[0];
            for (std::size_t i = 1; i < totals.size(); ++i)
                batch_loss = ad::add(batch_loss, totals[i]);
            batch_loss = ad::scale(batch_loss, inv);
            ep.total += batch_loss->val[0];
            if (!std::isfinite(batch_loss->val[0]))
                throw NumericError("pretrain", "non-finite loss at epoch " +
                                                   std::to_string(epoch));
            ad::backward(batch_loss);
            const double t = static_cast<double>(epoch) +
                             static_cast<double>(step) / static_cast<double>(steps_per_epoch);
            const double lr = lr_at(sched, t);
            ep.lr = lr;
            optimizer_step(trainable, opt, lr, sched.weight_decay);
        }
        const double steps = static_cast<double>(steps_per_epoch);
        ep.l_oct /= steps;
        ep.l_slo /= steps;
        ep.l_layers /= steps;
        ep.total /= steps;
        res.history.push_back(ep);
        if (hook && ((epoch + 1) % cadence == 0 || epoch + 1 == sched.total_epochs))
            hook(epoch + 1, ps);
    }
    return res;
}

inline void write_loss_csv(const std::string& path, const std::vector<EpochLoss>& history) {
    std::ofstream f(path);
    if (!f) throw DataError("pretrain", "cannot write " + path);
    f << "epoch,l_oct,l_slo,l_layers,total,lr\n";
    f.precision(12);
    for (const auto& e : history)
        f << e.epoch << "," << e.l_oct << "," << e.l_slo << "," << e.l_layers << "," << e.total
          << "," << e.lr << "\n";
}

}  // namespace trimae
