#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "trimae/common.hpp"
#include "trimae/core.hpp"

namespace trimae {

struct MaskingConfig {
    double alpha = 1.0;
    std::size_t budget_single = 49;
    std::size_t budget_multi = 98;
    enum class ScaleRule { Absolute, Proportional } scale_rule = ScaleRule::Proportional;

    void validate() const {
        if (alpha <= 0.0) throw DomainError("masking", "alpha must be positive");
    }

    // Reference budgets are stated for 256 patches per modality; proportional
    // scaling keeps the masking ratio at other grid sizes.
    std::size_t budget(std::size_t n_modalities, std::size_t patches_per_modality) const {
        const std::size_t ref = n_modalities <= 1 ? budget_single : budget_multi;
        if (scale_rule == ScaleRule::Absolute) return ref;
        return static_cast<std::size_t>(
            std::llround(static_cast<double>(ref) * static_cast<double>(patches_per_modality) / 256.0));
    }
};

// One draw from a symmetric Dirichlet(alpha,...,alpha) via normalized Gammas.
inline std::vector<double> sample_shares(double alpha, std::size_t n_modalities, Rng& rng) {
    if (alpha <= 0.0) throw DomainError("masking", "alpha must be positive");
    if (n_modalities == 0) throw DomainError("masking", "need at least one modality");
    std::vector<double> shares(n_modalities);
    double sum = 0.0;
    for (double& s : shares) {
        s = rng.gamma(alpha);
        sum += s;
    }
    if (sum <= 0.0) {
        // all-underflow corner at very small alpha; fall back to a vertex
        std::fill(shares.begin(), shares.end(), 0.0);
        shares[rng.uniform_int(n_modalities)] = 1.0;
        return shares;
    }
    for (double& s : shares) s /= sum;
    // renormalize so the sum is exactly 1
    const double total = std::accumulate(shares.begin(), shares.end(), 0.0);
    for (double& s : shares) s /= total;
    return shares;
}

// Largest-remainder rounding of real shares into integer counts summing to B,
// with per-modality capacities; excess spills to the next-largest remainder.
inline std::vector<std::size_t> allocate_budget(const std::vector<double>& shares,
                                                std::size_t budget,
                                                const std::vector<std::size_t>& capacity) {
    const std::size_t M = shares.size();
    if (capacity.size() != M) throw ShapeError("masking", "capacity size mismatch");
    std::size_t total_cap = 0;
    for (std::size_t c : capacity) total_cap += c;
    if (budget > total_cap)
        throw CapacityError("masking", "budget " + std::to_string(budget) +
                                           " exceeds total available patches " +
                                           std::to_string(total_cap));
    std::vector<std::size_t> counts(M);
    std::vector<double> remainder(M);
    std::size_t assigned = 0;
    for (std::size_t m = 0; m < M; ++m) {
        const double want = shares[m] * static_cast<double>(budget);
        counts[m] = std::min(static_cast<std::size_t>(std::floor(want)), capacity[m]);
        remainder[m] = want - std::floor(want);
        assigned += counts[m];
    }
    // distribute the residual by largest remainder among modalities with room
    while (assigned < budget) {
        std::size_t best = M;
        for (std::size_t m = 0; m < M; ++m) {
            if (counts[m] >= capacity[m]) continue;
            if (best == M || remainder[m] > remainder[best]) best = m;
        }
        if (best == M) break;  // unreachable given the capacity check
        ++counts[best];
        remainder[best] -= 1.0;
        ++assigned;
    }
    return counts;
}

inline std::vector<std::size_t> allocate_budget(const std::vector<double>& shares,
                                                std::size_t budget) {
    return allocate_budget(shares, budget,
                           std::vector<std::size_t>(shares.size(), budget));
}

// Uniform sampling without replacement of count indices from [0, P) per
// modality (partial Fisher-Yates); indices returned sorted.
inline TokenAllocation select_tokens(const std::vector<std::size_t>& counts,
                                     const std::vector<std::size_t>& patches_per_modality,
                                     Rng& rng) {
    if (counts.size() != patches_per_modality.size())
        throw ShapeError("masking", "counts/patch-capacity size mismatch");
    TokenAllocation alloc;
    alloc.counts = counts;
    for (std::size_t m = 0; m < counts.size(); ++m) {
        const std::size_t P = patches_per_modality[m];
        if (counts[m] > P)
            throw CapacityError("masking", "count exceeds patches for modality " +
                                               std::to_string(m));
        std::vector<std::size_t> pool(P);
        std::iota(pool.begin(), pool.end(), 0);
        for (std::size_t i = 0; i < counts[m]; ++i) {
            const std::size_t j = i + rng.uniform_int(P - i);
            std::swap(pool[i], pool[j]);
        }
        std::vector<std::size_t> sel(pool.begin(), pool.begin() + static_cast<long>(counts[m]));
        std::sort(sel.begin(), sel.end());
        alloc.indices.push_back(std::move(sel));
        alloc.budget += counts[m];
    }
    return alloc;
}

// Full pipeline for one pretraining sample.
inline TokenAllocation sample_allocation(const MaskingConfig& cfg,
                                         const std::vector<std::size_t>& patches_per_modality,
                                         Rng& rng) {
    cfg.validate();
    const std::size_t M = patches_per_modality.size();
    const std::size_t B = cfg.budget(M, patches_per_modality.empty() ? 0 : patches_per_modality[0]);
    const auto shares = sample_shares(cfg.alpha, M, rng);
    const auto counts = allocate_budget(shares, B, patches_per_modality);
    return select_tokens(counts, patches_per_modality, rng);
}

}  // namespace trimae
