#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "trimae/tensor.hpp"

namespace trimae::ad {

// Tape-based reverse-mode autodiff. Graphs are built per forward pass and
// discarded; nodes own their value, a lazily allocated gradient, and a
// backward closure.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<Var> parents;
    std::function<void(Node&)> back;

    Tensor& g() {
        if (!grad_alloc) {
            grad = Tensor::zeros(val.shape());
            grad_alloc = true;
        }
        return grad;
    }
};

inline Var leaf(Tensor t, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

inline Var constant(Tensor t) { return leaf(std::move(t), false); }

inline Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->back = std::move(back);
    return n;
}

inline void backward(const Var& root) {
    if (root->val.size() != 1)
        throw ShapeError("autodiff", "backward root must be scalar");
    // iterative topo sort
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    // order is parents-first; traverse in reverse
    root->g()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back && n->grad_alloc) n->back(*n);
    }
}

// ---- primitive ops ----

inline Var matmul(const Var& a, const Var& b) {
    const std::size_t m = a->val.rows(), k = a->val.cols(), n = b->val.cols();
    if (b->val.rows() != k)
        throw ShapeError("autodiff", "matmul inner dims mismatch " + a->val.shape_str() +
                                         " x " + b->val.shape_str());
    Tensor out({m, n});
    const double* A = a->val.data();
    const double* B = b->val.data();
    double* C = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = A[i * k + kk];
            if (av == 0.0) continue;
            const double* Br = B + kk * n;
            double* Cr = C + i * n;
            for (std::size_t j = 0; j < n; ++j) Cr[j] += av * Br[j];
        }
    return make_op(std::move(out), {a, b}, [m, k, n](Node& node) {
        const auto& a = node.parents[0];
        const auto& b = node.parents[1];
        const double* G = node.grad.data();
        if (a->requires_grad) {
            double* GA = a->g().data();
            const double* B = b->val.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = G[i * n + j];
                    if (gv == 0.0) continue;
                    for (std::size_t kk = 0; kk < k; ++kk)
                        GA[i * k + kk] += gv * B[kk * n + j];
                }
        }
        if (b->requires_grad) {
            double* GB = b->g().data();
            const double* A = a->val.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double av = A[i * k + kk];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j)
                        GB[kk * n + j] += av * G[i * n + j];
                }
        }
    });
}

inline Var transpose(const Var& a) {
    const std::size_t m = a->val.rows(), n = a->val.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a->val(i, j);
    return make_op(std::move(out), {a}, [m, n](Node& node) {
        auto& pg = node.parents[0]->g();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pg(i, j) += node.grad(j, i);
    });
}

// add with broadcast: b may equal a's shape, be a single row (1,n), or scalar
inline Var add(const Var& a, const Var& b) {
    const std::size_t m = a->val.rows(), n = a->val.cols();
    Tensor out = a->val;
    enum class Mode { Full, Row, Scalar } mode;
    if (b->val.same_shape(a->val)) mode = Mode::Full;
    else if (b->val.size() == 1) mode = Mode::Scalar;
    else if (b->val.rows() == 1 && b->val.cols() == n) mode = Mode::Row;
    else throw ShapeError("autodiff", "add shape mismatch " + a->val.shape_str() + " + " +
                                          b->val.shape_str());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out(i, j) += mode == Mode::Full ? b->val(i, j)
                        : mode == Mode::Row ? b->val[j]
                                            : b->val[0];
    return make_op(std::move(out), {a, b}, [m, n, mode](Node& node) {
        if (node.parents[0]->requires_grad) {
            auto& ga = node.parents[0]->g();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += node.grad[i];
        }
        if (node.parents[1]->requires_grad) {
            auto& gb = node.parents[1]->g();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double gv = node.grad(i, j);
                    if (mode == Mode::Full) gb(i, j) += gv;
                    else if (mode == Mode::Row) gb[j] += gv;
                    else gb[0] += gv;
                }
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make_op(std::move(out), {a}, [s](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * node.grad[i];
    });
}

inline Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

inline Var mul(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val))
        throw ShapeError("autodiff", "mul shape mismatch");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->val[i];
    return make_op(std::move(out), {a, b}, [](Node& node) {
        if (node.parents[0]->requires_grad) {
            auto& ga = node.parents[0]->g();
            for (std::size_t i = 0; i < ga.size(); ++i)
                ga[i] += node.grad[i] * node.parents[1]->val[i];
        }
        if (node.parents[1]->requires_grad) {
            auto& gb = node.parents[1]->g();
            for (std::size_t i = 0; i < gb.size(); ++i)
                gb[i] += node.grad[i] * node.parents[0]->val[i];
        }
    });
}

inline Var gelu(const Var& a) {
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    return make_op(std::move(out), {a}, [](Node& node) {
        auto& g = node.parents[0]->g();
        const auto& x = node.parents[0]->val;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double xi = x[i];
            const double cdf = 0.5 * (1.0 + std::erf(xi * M_SQRT1_2));
            const double pdf = std::exp(-0.5 * xi * xi) / std::sqrt(2.0 * M_PI);
            g[i] += node.grad[i] * (cdf + xi * pdf);
        }
    });
}

inline Var row_softmax(const Var& a) {
    const std::size_t m = a->val.rows(), n = a->val.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a->val(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a->val(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) = std::exp(a->val(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) out(i, j) /= sum;
    }
    return make_op(std::move(out), {a}, [m, n](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += node.grad(i, j) * node.val(i, j);
            for (std::size_t j = 0; j < n; ++j)
                g(i, j) += node.val(i, j) * (node.grad(i, j) - dot);
        }
    });
}

inline Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-6) {
    const std::size_t m = a->val.rows(), n = a->val.cols();
    if (gamma->val.size() != n || beta->val.size() != n)
        throw ShapeError("autodiff", "layer_norm affine size mismatch");
    Tensor out({m, n});
    auto xhat = std::make_shared<Tensor>(Tensor({m, n}));
    auto rstd = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += a->val(i, j);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = a->val(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double r = 1.0 / std::sqrt(var + eps);
        (*rstd)[i] = r;
        for (std::size_t j = 0; j < n; ++j) {
            (*xhat)(i, j) = (a->val(i, j) - mu) * r;
            out(i, j) = gamma->val[j] * (*xhat)(i, j) + beta->val[j];
        }
    }
    return make_op(std::move(out), {a, gamma, beta}, [m, n, xhat, rstd](Node& node) {
        const auto& gamma = node.parents[1];
        if (gamma->requires_grad) {
            auto& gg = gamma->g();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gg[j] += node.grad(i, j) * (*xhat)(i, j);
        }
        if (node.parents[2]->requires_grad) {
            auto& gb = node.parents[2]->g();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += node.grad(i, j);
        }
        if (node.parents[0]->requires_grad) {
            auto& ga = node.parents[0]->g();
            for (std::size_t i = 0; i < m; ++i) {
                double mean_dx = 0.0, mean_dxx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double dxh = node.grad(i, j) * gamma->val[j];
                    mean_dx += dxh;
                    mean_dxx += dxh * (*xhat)(i, j);
                }
                mean_dx /= static_cast<double>(n);
                mean_dxx /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double dxh = node.grad(i, j) * gamma->val[j];
                    ga(i, j) += (*rstd)[i] * (dxh - mean_dx - (*xhat)(i, j) * mean_dxx);
                }
            }
        }
    });
}

inline Var select_rows(const Var& a, std::vector<std::size_t> idx) {
    const std::size_t n = a->val.cols();
    Tensor out({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= a->val.rows())
            throw ShapeError("autodiff", "select_rows index out of range");
        for (std::size_t j = 0; j < n; ++j) out(i, j) = a->val(idx[i], j);
    }
    return make_op(std::move(out), {a}, [idx = std::move(idx), n](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) g(idx[i], j) += node.grad(i, j);
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("autodiff", "concat_rows of nothing");
    const std::size_t n = parts[0]->val.cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p->val.cols() != n) throw ShapeError("autodiff", "concat_rows col mismatch");
        m += p->val.rows();
    }
    Tensor out({m, n});
    std::size_t r = 0;
    for (const auto& p : parts)
        for (std::size_t i = 0; i < p->val.rows(); ++i, ++r)
            for (std::size_t j = 0; j < n; ++j) out(r, j) = p->val(i, j);
    return make_op(std::move(out), parts, [n](Node& node) {
        std::size_t r = 0;
        for (auto& p : node.parents) {
            const std::size_t pr = p->val.rows();
            if (p->requires_grad) {
                auto& g = p->g();
                for (std::size_t i = 0; i < pr; ++i)
                    for (std::size_t j = 0; j < n; ++j) g(i, j) += node.grad(r + i, j);
            }
            r += pr;
        }
    });
}

inline Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
    const std::size_t m = a->val.rows(), n = a->val.cols();
    if (c1 > n || c0 >= c1) throw ShapeError("autodiff", "slice_cols range invalid");
    Tensor out({m, c1 - c0});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = a->val(i, j);
    return make_op(std::move(out), {a}, [m, c0, c1](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = c0; j < c1; ++j) g(i, j) += node.grad(i, j - c0);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("autodiff", "concat_cols of nothing");
    const std::size_t m = parts[0]->val.rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p->val.rows() != m) throw ShapeError("autodiff", "concat_cols row mismatch");
        n += p->val.cols();
    }
    Tensor out({m, n});
    std::size_t c = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p->val.cols(); ++j) out(i, c + j) = p->val(i, j);
        c += p->val.cols();
    }
    return make_op(std::move(out), parts, [m](Node& node) {
        std::size_t c = 0;
        for (auto& p : node.parents) {
            const std::size_t pc = p->val.cols();
            if (p->requires_grad) {
                auto& g = p->g();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < pc; ++j) g(i, j) += node.grad(i, c + j);
            }
            c += pc;
        }
    });
}

inline Var mean_rows(const Var& a) {
    const std::size_t m = a->val.rows(), n = a->val.cols();
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a->val(i, j);
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    return make_op(std::move(out), {a}, [m, n](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                g(i, j) += node.grad[j] / static_cast<double>(m);
    });
}

inline Var mean_all(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a->val.size(); ++i) s += a->val[i];
    const double inv = 1.0 / static_cast<double>(a->val.size());
    return make_op(Tensor::scalar(s * inv), {a}, [inv](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[0] * inv;
    });
}

inline Var sum_all(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a->val.size(); ++i) s += a->val[i];
    return make_op(Tensor::scalar(s), {a}, [](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[0];
    });
}

// Mean over rows of -log softmax(logits)[target]; fused for stability.
inline Var ce_rows_mean(const Var& logits, const std::vector<std::size_t>& targets) {
    const std::size_t m = logits->val.rows(), n = logits->val.cols();
    if (targets.size() != m) throw ShapeError("autodiff", "ce target count mismatch");
    auto probs = std::make_shared<Tensor>(Tensor({m, n}));
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= n) throw DataError("autodiff", "ce target class out of range");
        double mx = logits->val(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits->val(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            (*probs)(i, j) = std::exp(logits->val(i, j) - mx);
            sum += (*probs)(i, j);
        }
        for (std::size_t j = 0; j < n; ++j) (*probs)(i, j) /= sum;
        loss -= std::log(std::max((*probs)(i, targets[i]), 1e-300));
    }
    loss /= static_cast<double>(m);
    return make_op(Tensor::scalar(loss), {logits},
                   [probs, targets, m, n](Node& node) {
                       auto& g = node.parents[0]->g();
                       const double s = node.grad[0] / static_cast<double>(m);
                       for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                               g(i, j) += s * ((*probs)(i, j) - (j == targets[i] ? 1.0 : 0.0));
                   });
}

// Soft-target cross entropy (label smoothing): mean over rows of
// -sum_j t_ij log softmax(logits)_ij.
inline Var ce_soft_rows_mean(const Var& logits, const Tensor& targets) {
    const std::size_t m = logits->val.rows(), n = logits->val.cols();
    if (!targets.same_shape(logits->val))
        throw ShapeError("autodiff", "soft ce target shape mismatch");
    auto probs = std::make_shared<Tensor>(Tensor({m, n}));
    auto tgt = std::make_shared<Tensor>(targets);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double mx = logits->val(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, logits->val(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            (*probs)(i, j) = std::exp(logits->val(i, j) - mx);
            sum += (*probs)(i, j);
        }
        double logz = std::log(sum) + mx;
        for (std::size_t j = 0; j < n; ++j) {
            (*probs)(i, j) /= sum;
            loss -= targets(i, j) * (logits->val(i, j) - logz);
        }
    }
    loss /= static_cast<double>(m);
    return make_op(Tensor::scalar(loss), {logits}, [probs, tgt, m, n](Node& node) {
        auto& g = node.parents[0]->g();
        const double s = node.grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            double tsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) tsum += (*tgt)(i, j);
            for (std::size_t j = 0; j < n; ++j)
                g(i, j) += s * (tsum * (*probs)(i, j) - (*tgt)(i, j));
        }
    });
}

// Assemble a full query grid: row g takes ctx row map[g] when map[g] >= 0,
// otherwise the (single-row) mask token.
inline Var build_grid(const Var& ctx, const Var& mask_token, std::vector<long> map) {
    const std::size_t n = ctx->val.cols();
    if (mask_token->val.cols() != n || mask_token->val.rows() != 1)
        throw ShapeError("autodiff", "mask token must be (1,d)");
    Tensor out({map.size(), n});
    for (std::size_t g = 0; g < map.size(); ++g) {
        const double* src = map[g] >= 0 ? &ctx->val(static_cast<std::size_t>(map[g]), 0)
                                        : mask_token->val.data();
        for (std::size_t j = 0; j < n; ++j) out(g, j) = src[j];
    }
    return make_op(std::move(out), {ctx, mask_token}, [map = std::move(map), n](Node& node) {
        for (std::size_t g = 0; g < map.size(); ++g) {
            if (map[g] >= 0) {
                if (node.parents[0]->requires_grad) {
                    auto& gc = node.parents[0]->g();
                    for (std::size_t j = 0; j < n; ++j)
                        gc(static_cast<std::size_t>(map[g]), j) += node.grad(g, j);
                }
            } else if (node.parents[1]->requires_grad) {
                auto& gm = node.parents[1]->g();
                for (std::size_t j = 0; j < n; ++j) gm[j] += node.grad(g, j);
            }
        }
    });
}

// Pure element permutation/reshape: out[i] = in[index_map[i]].
inline Var permute_reshape(const Var& a, std::vector<std::size_t> shape,
                           std::shared_ptr<std::vector<std::size_t>> index_map) {
    Tensor out(std::move(shape));
    if (out.size() != a->val.size() || index_map->size() != out.size())
        throw ShapeError("autodiff", "permute_reshape size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val[(*index_map)[i]];
    return make_op(std::move(out), {a}, [index_map](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            g[(*index_map)[i]] += node.grad[i];
    });
}

// Depthwise kxk convolution over a channels-last (H*W, ch) map, zero padding.
inline Var depthwise_conv(const Var& x, std::size_t H, std::size_t W, std::size_t k,
                          const Var& weight, const Var& bias) {
    const std::size_t ch = x->val.cols();
    if (x->val.rows() != H * W) throw ShapeError("autodiff", "depthwise_conv map size");
    if (weight->val.rows() != ch || weight->val.cols() != k * k)
        throw ShapeError("autodiff", "depthwise_conv weight shape");
    const long r = static_cast<long>(k) / 2;
    Tensor out({H * W, ch});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
            for (std::size_t c = 0; c < ch; ++c) {
                double s = bias->val[c];
                for (long dy = -r; dy <= r; ++dy)
                    for (long dx = -r; dx <= r; ++dx) {
                        const long sy = static_cast<long>(y) + dy;
                        const long sx = static_cast<long>(xx) + dx;
                        if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) ||
                            sx >= static_cast<long>(W))
                            continue;
                        s += weight->val(c, static_cast<std::size_t>((dy + r) * static_cast<long>(k) + (dx + r))) *
                             x->val(static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx), c);
                    }
                out(y * W + xx, c) = s;
            }
    return make_op(std::move(out), {x, weight, bias}, [H, W, k, ch, r](Node& node) {
        const auto& x = node.parents[0];
        const auto& weight = node.parents[1];
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                for (std::size_t c = 0; c < ch; ++c) {
                    const double gv = node.grad(y * W + xx, c);
                    if (gv == 0.0) continue;
                    if (node.parents[2]->requires_grad) node.parents[2]->g()[c] += gv;
                    for (long dy = -r; dy <= r; ++dy)
                        for (long dx = -r; dx <= r; ++dx) {
                            const long sy = static_cast<long>(y) + dy;
                            const long sx = static_cast<long>(xx) + dx;
                            if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) ||
                                sx >= static_cast<long>(W))
                                continue;
                            const std::size_t src =
                                static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx);
                            const std::size_t wi = static_cast<std::size_t>(
                                (dy + r) * static_cast<long>(k) + (dx + r));
                            if (weight->requires_grad)
                                weight->g()(c, wi) += gv * x->val(src, c);
                            if (x->requires_grad)
                                x->g()(src, c) += gv * weight->val(c, wi);
                        }
                }
    });
}

// Fixed sparse linear map over rows (used for bilinear/bicubic upsampling):
// out[o, c] = sum_t w_t * in[i_t, c] for the terms of output row o.
struct RowMap {
    std::size_t n_out = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> terms;  // per out row
};

inline Var apply_row_map(const Var& x, const std::shared_ptr<RowMap>& map) {
    const std::size_t ch = x->val.cols();
    Tensor out({map->n_out, ch});
    for (std::size_t o = 0; o < map->n_out; ++o)
        for (const auto& [i, w] : map->terms[o])
            for (std::size_t c = 0; c < ch; ++c) out(o, c) += w * x->val(i, c);
    return make_op(std::move(out), {x}, [map, ch](Node& node) {
        auto& g = node.parents[0]->g();
        for (std::size_t o = 0; o < map->n_out; ++o)
            for (const auto& [i, w] : map->terms[o])
                for (std::size_t c = 0; c < ch; ++c) g(i, c) += w * node.grad(o, c);
    });
}

}  // namespace trimae::ad
