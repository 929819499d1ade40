#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "trimae/autodiff.hpp"

namespace trimae::testing {

// Central-difference gradient check. Rebuilds the graph via `fn` for every
// perturbed evaluation; returns the max relative error over all leaf elements
// (or a strided sample when stride > 1).
inline double grad_check(const std::vector<ad::Var>& leaves,
                         const std::function<ad::Var()>& fn, double h = 1e-6,
                         std::size_t stride = 1) {
    ad::Var out = fn();
    for (const auto& l : leaves)
        if (l->grad_alloc)
            std::fill(l->grad.data(), l->grad.data() + l->grad.size(), 0.0);
    ad::backward(out);
    double worst = 0.0;
    for (const auto& leaf : leaves) {
        for (std::size_t i = 0; i < leaf->val.size(); i += stride) {
            const double keep = leaf->val[i];
            leaf->val[i] = keep + h;
            const double up = fn()->val[0];
            leaf->val[i] = keep - h;
            const double dn = fn()->val[0];
            leaf->val[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double g = leaf->grad_alloc ? leaf->grad[i] : 0.0;
            const double scale = std::max({std::abs(g), std::abs(fd), 1e-4});
            worst = std::max(worst, std::abs(g - fd) / scale);
        }
    }
    return worst;
}

inline ad::Var random_leaf(std::vector<std::size_t> shape, Rng& rng, double s = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t) v = s * rng.normal();
    return ad::leaf(std::move(t), true);
}

}  // namespace trimae::testing
