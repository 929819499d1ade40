#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "trimae/common.hpp"
#include "trimae/core.hpp"

namespace trimae {

namespace detail {

// midranks of v (1-based, ties share the average rank)
inline std::vector<double> midranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

inline double binary_auroc(const std::vector<double>& scores, const std::vector<bool>& pos) {
    const auto rank = midranks(scores);
    double rsum = 0.0;
    std::size_t np = 0;
    for (std::size_t i = 0; i < pos.size(); ++i)
        if (pos[i]) {
            rsum += rank[i];
            ++np;
        }
    const std::size_t nn = pos.size() - np;
    return (rsum - 0.5 * static_cast<double>(np) * static_cast<double>(np + 1)) /
           (static_cast<double>(np) * static_cast<double>(nn));
}

// AP = sum over descending-score thresholds of (R_k - R_{k-1}) * P_k
inline double binary_ap(const std::vector<double>& scores, const std::vector<bool>& pos) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t total_pos = 0;
    for (bool p : pos) total_pos += p ? 1 : 0;
    double ap = 0.0;
    std::size_t tp = 0, seen = 0, i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        std::size_t tp_before = tp;
        for (std::size_t k = i; k <= j; ++k) {
            ++seen;
            if (pos[order[k]]) ++tp;
        }
        const double prec = static_cast<double>(tp) / static_cast<double>(seen);
        const double drecall =
            static_cast<double>(tp - tp_before) / static_cast<double>(total_pos);
        ap += drecall * prec;
        i = j + 1;
    }
    return ap;
}

}  // namespace detail

// Weighted one-vs-rest score average; classes without both positives and
// negatives are skipped; weight = positive count.
template <typename ClassScore>
inline double weighted_ovr(const std::vector<std::vector<double>>& scores,
                           const std::vector<int>& labels, ClassScore&& score_fn) {
    if (scores.size() != labels.size())
        throw ShapeError("metrics", "scores/labels length mismatch");
    if (scores.empty()) throw DomainError("metrics", "empty input");
    const std::size_t C = scores[0].size();
    for (const auto& row : scores)
        if (row.size() != C) throw ShapeError("metrics", "ragged score rows");
    double wsum = 0.0, acc = 0.0;
    bool any = false;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> s(scores.size());
        std::vector<bool> pos(scores.size());
        std::size_t np = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            s[i] = scores[i][c];
            pos[i] = labels[i] == static_cast<int>(c);
            np += pos[i] ? 1 : 0;
        }
        if (np == 0 || np == scores.size()) continue;
        any = true;
        const double w = static_cast<double>(np);
        acc += w * score_fn(s, pos);
        wsum += w;
    }
    if (!any)
        throw UndefinedMetricError("metrics", "labels contain a single class");
    return acc / wsum;
}

inline double auroc_weighted_ovr(const std::vector<std::vector<double>>& scores,
                                 const std::vector<int>& labels) {
    return weighted_ovr(scores, labels, detail::binary_auroc);
}

inline double average_precision_weighted(const std::vector<std::vector<double>>& scores,
                                         const std::vector<int>& labels) {
    return weighted_ovr(scores, labels, detail::binary_ap);
}

// Unweighted mean of per-class recall over classes present in the truth.
inline double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) throw ShapeError("metrics", "pred/true length mismatch");
    if (truth.empty()) throw DomainError("metrics", "empty input");
    std::map<int, std::pair<std::size_t, std::size_t>> hits;  // class -> (correct, total)
    for (std::size_t i = 0; i < truth.size(); ++i) {
        auto& h = hits[truth[i]];
        ++h.second;
        if (pred[i] == truth[i]) ++h.first;
    }
    double sum = 0.0;
    for (const auto& [cls, h] : hits)
        sum += static_cast<double>(h.first) / static_cast<double>(h.second);
    return sum / static_cast<double>(hits.size());
}

// ---- binary mask metrics ----

using Mask = std::vector<bool>;  // row-major, paired with (height, width)

namespace detail {

inline void check_mask(const Mask& a, const Mask& b, std::size_t h, std::size_t w) {
    if (a.size() != h * w || b.size() != h * w)
        throw ShapeError("metrics", "mask size does not match dimensions");
}

}  // namespace detail

inline double dice(const Mask& pred, const Mask& truth, std::size_t h, std::size_t w) {
    detail::check_mask(pred, truth, h, w);
    std::size_t inter = 0, np = 0, nt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        np += pred[i] ? 1 : 0;
        nt += truth[i] ? 1 : 0;
        inter += (pred[i] && truth[i]) ? 1 : 0;
    }
    if (np + nt == 0)
        throw UndefinedMetricError("metrics", "dice undefined for two empty masks");
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

inline double iou(const Mask& pred, const Mask& truth, std::size_t h, std::size_t w) {
    detail::check_mask(pred, truth, h, w);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += (pred[i] && truth[i]) ? 1 : 0;
        uni += (pred[i] || truth[i]) ? 1 : 0;
    }
    if (uni == 0)
        throw UndefinedMetricError("metrics", "iou undefined for two empty masks");
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

// mask pixels with a 4-neighbor outside the mask (image border counts as outside)
inline std::vector<std::pair<double, double>> boundary_points(const Mask& m, std::size_t h,
                                                              std::size_t w,
                                                              const Spacing& sp) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!m[y * w + x]) continue;
            const bool edge = y == 0 || y + 1 == h || x == 0 || x + 1 == w ||
                              !m[(y - 1) * w + x] || !m[(y + 1) * w + x] ||
                              !m[y * w + x - 1] || !m[y * w + x + 1];
            if (edge)
                pts.emplace_back(static_cast<double>(y) * sp.mm_y,
                                 static_cast<double>(x) * sp.mm_x);
        }
    return pts;
}

inline void directed_distances(const std::vector<std::pair<double, double>>& from,
                               const std::vector<std::pair<double, double>>& to,
                               std::vector<double>& out) {
    for (const auto& [ay, ax] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [by, bx] : to) {
            const double d = std::hypot(ay - by, ax - bx);
            best = std::min(best, d);
        }
        out.push_back(best);
    }
}

inline double percentile_linear(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double f = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - f) + v[hi] * f;
}

}  // namespace detail

// 95th percentile (linear interpolation) of the pooled directed
// boundary-to-boundary nearest distances in both directions.
inline double hd95(const Mask& pred, const Mask& truth, std::size_t h, std::size_t w,
                   const Spacing& spacing = {}) {
    detail::check_mask(pred, truth, h, w);
    const auto bp = detail::boundary_points(pred, h, w, spacing);
    const auto bt = detail::boundary_points(truth, h, w, spacing);
    if (bp.empty() || bt.empty())
        throw UndefinedMetricError("metrics", "hd95 undefined for an empty mask");
    std::vector<double> dists;
    detail::directed_distances(bp, bt, dists);
    detail::directed_distances(bt, bp, dists);
    return detail::percentile_linear(std::move(dists), 0.95);
}

inline double avd(const Mask& pred, const Mask& truth, const Spacing& spacing = {}) {
    if (pred.size() != truth.size()) throw ShapeError("metrics", "mask size mismatch");
    if (spacing.voxel_volume() <= 0.0) throw DomainError("metrics", "spacing must be positive");
    long np = 0, nt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        np += pred[i] ? 1 : 0;
        nt += truth[i] ? 1 : 0;
    }
    return std::abs(static_cast<double>(np - nt)) * spacing.voxel_volume();
}

// ---- patient aggregation ----

struct BScanValue {
    std::string bscan_id;
    int cls = 0;
    std::optional<double> value;  // empty = undefined, excluded from averages
};

struct MetricReport {
    std::map<int, double> per_class;             // over all defined B-scan entries
    std::vector<std::pair<std::string, double>> per_bscan;  // class-mean per B-scan
    std::map<std::string, double> per_patient;
    double mean = 0.0, std_dev = 0.0;
    std::size_t n = 0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double m = 0.0;
    for (double x : v) m += x;
    m /= n;
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    // sample standard deviation; 0 for a single unit
    return {m, v.size() > 1 ? std::sqrt(s2 / (n - 1.0)) : 0.0};
}

// Per patient: average per class over its B-scans (undefined excluded), then
// average over classes; mean/std reported over patients.
inline MetricReport aggregate_patient(const std::vector<BScanValue>& values,
                                      const std::map<std::string, std::string>& patient_of) {
    MetricReport rep;
    std::map<int, std::pair<double, std::size_t>> class_acc;
    std::map<std::string, std::map<int, std::pair<double, std::size_t>>> scan_acc;
    for (const auto& v : values) {
        if (!patient_of.count(v.bscan_id))
            throw DataError("metrics", "B-scan " + v.bscan_id + " maps to no patient");
        if (!v.value) continue;
        auto& c = class_acc[v.cls];
        c.first += *v.value;
        ++c.second;
        auto& s = scan_acc[v.bscan_id][v.cls];
        s.first += *v.value;
        ++s.second;
    }
    for (const auto& [cls, acc] : class_acc)
        rep.per_class[cls] = acc.first / static_cast<double>(acc.second);

    std::map<std::string, std::map<int, std::pair<double, std::size_t>>> patient_cls;
    for (const auto& [scan, per_cls] : scan_acc) {
        double sum = 0.0;
        const std::string& pat = patient_of.at(scan);
        for (const auto& [cls, acc] : per_cls) {
            const double v = acc.first / static_cast<double>(acc.second);
            sum += v;
            auto& pc = patient_cls[pat][cls];
            pc.first += v;
            ++pc.second;
        }
        rep.per_bscan.emplace_back(scan, sum / static_cast<double>(per_cls.size()));
    }
    std::vector<double> pat_vals;
    for (const auto& [pat, per_cls] : patient_cls) {
        double sum = 0.0;
        for (const auto& [cls, acc] : per_cls)
            sum += acc.first / static_cast<double>(acc.second);
        const double v = sum / static_cast<double>(per_cls.size());
        rep.per_patient[pat] = v;
        pat_vals.push_back(v);
    }
    if (pat_vals.empty()) throw UndefinedMetricError("metrics", "no defined metric values");
    auto [m, s] = mean_std(pat_vals);
    rep.mean = m;
    rep.std_dev = s;
    rep.n = pat_vals.size();
    return rep;
}

// ---- statistics ----

namespace detail {

// regularized incomplete beta I_x(a, b) via the Lentz continued fraction
inline double betacf(double a, double b, double x) {
    const double tiny = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return h;
}

inline double incbeta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace detail

struct TTestResult {
    double p = 0.5;
    double t = 0.0;
    std::size_t df = 0;
    bool degenerate = false;  // zero pooled variance
};

// Independent two-sample Student's t with pooled variance; one-tailed p for
// mean(a) > mean(b).
inline TTestResult t_test_one_tailed(const std::vector<double>& a,
                                     const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw DomainError("metrics", "t-test needs at least 2 values per group");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    auto [ma, sa] = mean_std(a);
    auto [mb, sb] = mean_std(b);
    TTestResult res;
    res.df = a.size() + b.size() - 2;
    const double sp2 = ((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) /
                       static_cast<double>(res.df);
    if (sp2 <= 0.0) {
        res.degenerate = true;
        if (ma == mb) {
            res.p = 0.5;
        } else {
            res.t = ma > mb ? std::numeric_limits<double>::infinity()
                            : -std::numeric_limits<double>::infinity();
            res.p = ma > mb ? 0.0 : 1.0;
        }
        return res;
    }
    res.t = (ma - mb) / std::sqrt(sp2 * (1.0 / na + 1.0 / nb));
    const double df = static_cast<double>(res.df);
    const double x = df / (df + res.t * res.t);
    const double two_sided = detail::incbeta(0.5 * df, 0.5, x);
    res.p = res.t >= 0.0 ? 0.5 * two_sided : 1.0 - 0.5 * two_sided;
    return res;
}

// Two-sided Wilcoxon signed-rank p-value. Zero differences are dropped,
// midranks handle ties, exact enumeration for n <= 25 (DP over doubled rank
// sums), tie-corrected normal approximation beyond.
inline double wilcoxon_signed_rank(const std::vector<double>& a,
                                   const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("metrics", "paired vectors differ in length");
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double di = a[i] - b[i];
        if (di != 0.0) d.push_back(di);
    }
    if (d.empty())
        throw UndefinedMetricError("metrics", "all paired differences are zero");
    if (d.size() < 5)
        throw DomainError("metrics", "need at least 5 non-zero differences");
    const std::size_t n = d.size();
    std::vector<double> absd(n);
    for (std::size_t i = 0; i < n; ++i) absd[i] = std::abs(d[i]);
    const auto rank = detail::midranks(absd);
    double t_plus = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += rank[i];
        if (d[i] > 0.0) t_plus += rank[i];
    }
    const double w_obs = std::min(t_plus, total - t_plus);
    if (n <= 25) {
        // doubled ranks are integers even with midrank ties
        std::vector<long> r2(n);
        long tot2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            r2[i] = static_cast<long>(std::llround(2.0 * rank[i]));
            tot2 += r2[i];
        }
        std::vector<double> count(static_cast<std::size_t>(tot2) + 1, 0.0);
        count[0] = 1.0;
        long reach = 0;
        for (std::size_t i = 0; i < n; ++i) {
            reach += r2[i];
            for (long s = reach; s >= r2[i]; --s)
                count[static_cast<std::size_t>(s)] +=
                    count[static_cast<std::size_t>(s - r2[i])];
        }
        const long w2 = static_cast<long>(std::llround(2.0 * w_obs));
        double hits = 0.0;
        for (long s = 0; s <= tot2; ++s) {
            const long w = std::min(s, tot2 - s);
            if (w <= w2) hits += count[static_cast<std::size_t>(s)];
        }
        return hits / std::pow(2.0, static_cast<double>(n));
    }
    // tie correction: subtract sum(t^3 - t)/48 from the null variance
    double tie_corr = 0.0;
    std::vector<double> sorted = absd;
    std::sort(sorted.begin(), sorted.end());
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        tie_corr += (t * t * t - t) / 48.0;
        i = j + 1;
    }
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    const double sigma = std::sqrt(nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_corr);
    const double z = (w_obs - mu) / sigma;
    return std::min(1.0, 2.0 * detail::normal_sf(-z));
}

// ---- CSV serialization ----

inline void write_metric_csv(const std::string& path, const std::string& metric,
                             const MetricReport& rep) {
    std::ofstream f(path);
    if (!f) throw DataError("metrics", "cannot write " + path);
    f << "level,unit_id,class,metric,value\n";
    f.precision(12);
    for (const auto& [cls, v] : rep.per_class)
        f << "class," << cls << "," << cls << "," << metric << "," << v << "\n";
    for (const auto& [scan, v] : rep.per_bscan)
        f << "bscan," << scan << ",," << metric << "," << v << "\n";
    for (const auto& [pat, v] : rep.per_patient)
        f << "patient," << pat << ",," << metric << "," << v << "\n";
    f << "aggregate,mean,," << metric << "," << rep.mean << "\n";
    f << "aggregate,std,," << metric << "," << rep.std_dev << "\n";
    f << "aggregate,n,," << metric << "," << rep.n << "\n";
}

}  // namespace trimae
