#pragma once

#include <vector>

#include "trimae/autodiff.hpp"
#include "trimae/core.hpp"

namespace trimae {

struct LossBreakdown {
    ad::Var l_oct, l_slo, l_layers, total;
};

inline Tensor tensor_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), t.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) out(i, j) = t(rows[i], j);
    return out;
}

// Mean over masked patches of the mean per-patch squared error.
inline ad::Var masked_l2(const ad::Var& pred, const Tensor& target,
                         const std::vector<std::size_t>& masked) {
    using namespace ad;
    if (!target.same_shape(pred->val))
        throw ShapeError("objective", "prediction/target grid shape mismatch");
    if (masked.empty()) return constant(Tensor::scalar(0.0));
    for (std::size_t i : masked)
        if (i >= pred->val.rows())
            throw ShapeError("objective", "masked index out of range");
    Var diff = sub(select_rows(pred, masked), constant(tensor_rows(target, masked)));
    return mean_all(mul(diff, diff));
}

// Mean over masked patches' pixels of -log softmax probability of the true
// class. Logits are (P, p^2*C) with one p^2 block per class (same layout as
// the one-hot input expansion); targets hold class indices per pixel.
inline ad::Var masked_ce(const ad::Var& logits, const Tensor& target_classes, std::size_t C,
                         const std::vector<std::size_t>& masked) {
    using namespace ad;
    const std::size_t P = logits->val.rows();
    const std::size_t px = logits->val.cols() / C;
    if (target_classes.rows() != P || target_classes.cols() != px)
        throw ShapeError("objective", "layer target grid shape mismatch");
    if (masked.empty()) return constant(Tensor::scalar(0.0));
    for (std::size_t i : masked)
        if (i >= P) throw ShapeError("objective", "masked index out of range");
    // rearrange masked patches to (n_masked*px, C) rows
    Var sel = select_rows(logits, masked);
    auto idx = std::make_shared<std::vector<std::size_t>>(masked.size() * px * C);
    for (std::size_t i = 0; i < masked.size(); ++i)
        for (std::size_t j = 0; j < px; ++j)
            for (std::size_t c = 0; c < C; ++c)
                (*idx)[(i * px + j) * C + c] = i * (px * C) + c * px + j;
    Var rows = permute_reshape(sel, {masked.size() * px, C}, idx);
    std::vector<std::size_t> targets(masked.size() * px);
    for (std::size_t i = 0; i < masked.size(); ++i)
        for (std::size_t j = 0; j < px; ++j) {
            const double cls = target_classes(masked[i], j);
            if (cls < 0 || cls >= static_cast<double>(C))
                throw DataError("objective", "target class out of range");
            targets[i * px + j] = static_cast<std::size_t>(cls);
        }
    return ce_rows_mean(rows, targets);
}

inline std::vector<std::size_t> masked_indices(const TokenAllocation& alloc, std::size_t mi,
                                               std::size_t patches) {
    std::vector<bool> visible(patches, false);
    for (std::size_t i : alloc.indices[mi]) visible[i] = true;
    std::vector<std::size_t> masked;
    for (std::size_t i = 0; i < patches; ++i)
        if (!visible[i]) masked.push_back(i);
    return masked;
}

// Eq-style composite loss: unweighted sum of the per-modality masked losses,
// fixed accumulation order OCT + SLO + LAYERS.
inline LossBreakdown total_loss(const Sample& sample, const TokenAllocation& alloc,
                                const ad::Var& pred_oct, const ad::Var& pred_slo,
                                const ad::Var& pred_layers, const ModelConfig& cfg) {
    LossBreakdown out;
    const std::size_t P = cfg.patches();
    out.l_oct = masked_l2(pred_oct, patchify(sample.oct, cfg.patch),
                          masked_indices(alloc, 0, P));
    if (!sample.slo) throw DataError("objective", "pretraining sample missing SLO");
    if (!sample.layers) throw DataError("objective", "pretraining sample missing LAYERS");
    out.l_slo = masked_l2(pred_slo, patchify(*sample.slo, cfg.patch),
                          masked_indices(alloc, 1, P));
    out.l_layers = masked_ce(pred_layers, patchify(*sample.layers, cfg.patch),
                             cfg.num_layer_classes, masked_indices(alloc, 2, P));
    out.total = ad::add(ad::add(out.l_oct, out.l_slo), out.l_layers);
    return out;
}

}  // namespace trimae
