#pragma once

// Independent reference implementations used as test oracles. Everything
// here is written the slow, obvious way on purpose: triple-loop matmul,
// O(n^2) pair counting, exhaustive partition search. None of it shares
// code with the library under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "iflab/common.hpp"
#include "iflab/tensor.hpp"

namespace oracle {

inline iflab::Matd naive_matmul(const iflab::Matd& a, const iflab::Matd& b) {
    iflab::Matd c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0;
            for (int k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    return c;
}

inline iflab::Matd random_mat(int r, int c, iflab::Rng& rng, double scale = 1.0) {
    iflab::Matd m(r, c);
    for (auto& v : m.d) v = rng.normal(0.0, scale);
    return m;
}

// Central-difference gradient check. `build` wires a graph from the
// registered input nodes and returns any node; the harness contracts it to
// a scalar with fixed random row/column weights so every element of the
// output receives a distinct nonzero coefficient.
struct GradCheckResult {
    double max_rel_err = 0;
    double max_abs_err = 0;
    int checked = 0;
};

inline GradCheckResult fd_gradcheck(
    std::vector<iflab::Matd> inputs,
    const std::function<int(iflab::GraphT<double>&, const std::vector<int>&)>& build,
    uint64_t seed = 1234, double h = 1e-5) {
    iflab::Rng wrng(seed);

    auto run = [&](const std::vector<iflab::Matd>& vals, std::vector<iflab::ParamT<double>>* params_out,
                   bool do_backward) -> double {
        std::vector<iflab::ParamT<double>> params;
        for (size_t i = 0; i < vals.size(); ++i) {
            params.emplace_back("in" + std::to_string(i), vals[i].rows, vals[i].cols, false);
            params.back().value = vals[i];
        }
        iflab::Rng drop_rng(seed + 77);  // same masks on every evaluation
        iflab::GraphT<double> g(true, &drop_rng);
        std::vector<int> ids;
        for (auto& p : params) ids.push_back(g.param(p));
        int out = build(g, ids);
        const auto& y = g.value(out);
        iflab::Rng wr(seed + 5);  // identical weights on every evaluation
        iflab::Matd rw(1, y.rows), cw(y.cols, 1);
        for (auto& v : rw.d) v = wr.normal(0.0, 1.0);
        for (auto& v : cw.d) v = wr.normal(0.0, 1.0);
        int scalar = g.matmul(g.matmul(g.leaf(rw), out), g.leaf(cw));
        double val = g.value(scalar).d[0];
        if (do_backward) {
            g.backward(scalar);
            *params_out = std::move(params);
        }
        return val;
    };

    std::vector<iflab::ParamT<double>> params;
    run(inputs, &params, true);

    GradCheckResult res;
    for (size_t pi = 0; pi < inputs.size(); ++pi) {
        for (size_t e = 0; e < inputs[pi].d.size(); ++e) {
            double keep = inputs[pi].d[e];
            inputs[pi].d[e] = keep + h;
            double fp = run(inputs, nullptr, false);
            inputs[pi].d[e] = keep - h;
            double fm = run(inputs, nullptr, false);
            inputs[pi].d[e] = keep;
            double fd = (fp - fm) / (2 * h);
            double an = params[pi].grad.d[e];
            double abs_err = std::fabs(fd - an);
            double rel = abs_err / std::max(1.0, std::fabs(fd) + std::fabs(an));
            res.max_rel_err = std::max(res.max_rel_err, rel);
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            ++res.checked;
        }
    }
    return res;
}

// Plain full-matrix causal attention for one sequence, one head slice.
inline iflab::Matd naive_causal_attention(const iflab::Matd& q, const iflab::Matd& k,
                                          const iflab::Matd& v, int n_heads) {
    int L = q.rows, d = q.cols, hd = d / n_heads;
    iflab::Matd out(L, d);
    for (int h = 0; h < n_heads; ++h) {
        for (int t = 0; t < L; ++t) {
            std::vector<double> s(static_cast<size_t>(t) + 1);
            for (int j = 0; j <= t; ++j) {
                double acc = 0;
                for (int e = 0; e < hd; ++e) acc += q.at(t, h * hd + e) * k.at(j, h * hd + e);
                s[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(hd));
            }
            double mx = *std::max_element(s.begin(), s.end());
            double z = 0;
            for (auto& x : s) {
                x = std::exp(x - mx);
                z += x;
            }
            for (int j = 0; j <= t; ++j)
                for (int e = 0; e < hd; ++e)
                    out.at(t, h * hd + e) += (s[static_cast<size_t>(j)] / z) * v.at(j, h * hd + e);
        }
    }
    return out;
}

inline double naive_cross_entropy(const iflab::Matd& logits, const std::vector<int>& targets,
                                  const std::vector<uint8_t>& mask) {
    double total = 0;
    int count = 0;
    for (int i = 0; i < logits.rows; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        double z = 0;
        for (int j = 0; j < logits.cols; ++j) z += std::exp(logits.at(i, j));
        total += -std::log(std::exp(logits.at(i, targets[static_cast<size_t>(i)])) / z);
        ++count;
    }
    return total / count;
}

// ---- clustering metric oracles (quadratic / exhaustive) ----

// Pair-count F1 by direct enumeration of all point pairs.
inline double pair_f1(const std::vector<int>& pred, const std::vector<int>& truth) {
    size_t n = pred.size();
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            bool same_p = pred[i] == pred[j];
            bool same_t = truth[i] == truth[j];
            if (same_p && same_t) ++tp;
            else if (same_p) ++fp;
            else if (same_t) ++fn;
        }
    if (tp == 0) return 0.0;
    double prec = static_cast<double>(tp) / (tp + fp);
    double rec = static_cast<double>(tp) / (tp + fn);
    return 2 * prec * rec / (prec + rec);
}

// Adjusted Rand index from explicit pair counts.
inline double adjusted_rand(const std::vector<int>& a, const std::vector<int>& b) {
    size_t n = a.size();
    double n00 = 0, n11 = 0, n10 = 0, n01 = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            bool sa = a[i] == a[j], sb = b[i] == b[j];
            if (sa && sb) ++n11;
            else if (sa) ++n10;
            else if (sb) ++n01;
            else ++n00;
        }
    double total = n11 + n10 + n01 + n00;
    double expected = (n11 + n10) * (n11 + n01) / total;
    double maxi = 0.5 * ((n11 + n10) + (n11 + n01));
    if (maxi == expected) return 0.0;
    return (n11 - expected) / (maxi - expected);
}

// Adjusted mutual information by direct summation. Expected MI uses the
// hypergeometric model with factorial ratios carried in long double, so the
// arithmetic path shares nothing with lgamma-based implementations. Only
// meant for small n.
inline long double factorial_ld(long long x) {
    long double f = 1.0L;
    for (long long i = 2; i <= x; ++i) f *= static_cast<long double>(i);
    return f;
}

inline double adjusted_mutual_info(const std::vector<int>& a, const std::vector<int>& b) {
    const long long n = static_cast<long long>(a.size());
    std::vector<int> va, vb;  // distinct values in first-seen order
    for (int x : a)
        if (std::find(va.begin(), va.end(), x) == va.end()) va.push_back(x);
    for (int x : b)
        if (std::find(vb.begin(), vb.end(), x) == vb.end()) vb.push_back(x);
    std::vector<long long> ra(va.size(), 0), cb(vb.size(), 0);
    std::vector<std::vector<long long>> cell(va.size(), std::vector<long long>(vb.size(), 0));
    for (size_t i = 0; i < a.size(); ++i) {
        size_t ia = static_cast<size_t>(std::find(va.begin(), va.end(), a[i]) - va.begin());
        size_t ib = static_cast<size_t>(std::find(vb.begin(), vb.end(), b[i]) - vb.begin());
        ++ra[ia];
        ++cb[ib];
        ++cell[ia][ib];
    }
    long double mi = 0, hu = 0, hv = 0;
    for (size_t i = 0; i < va.size(); ++i)
        for (size_t j = 0; j < vb.size(); ++j)
            if (cell[i][j] > 0)
                mi += (static_cast<long double>(cell[i][j]) / n) *
                      std::log(static_cast<long double>(n) * cell[i][j] /
                               (static_cast<long double>(ra[i]) * cb[j]));
    for (long long v : ra) hu -= (static_cast<long double>(v) / n) * std::log(static_cast<long double>(v) / n);
    for (long long v : cb) hv -= (static_cast<long double>(v) / n) * std::log(static_cast<long double>(v) / n);

    long double emi = 0;
    for (long long ai : ra)
        for (long long bj : cb) {
            long long lo = std::max<long long>(1, ai + bj - n), hi = std::min(ai, bj);
            for (long long nij = lo; nij <= hi; ++nij) {
                long double prob = factorial_ld(ai) * factorial_ld(bj) * factorial_ld(n - ai) *
                                   factorial_ld(n - bj) /
                                   (factorial_ld(n) * factorial_ld(nij) * factorial_ld(ai - nij) *
                                    factorial_ld(bj - nij) * factorial_ld(n - ai - bj + nij));
                emi += (static_cast<long double>(nij) / n) *
                       std::log(static_cast<long double>(n) * nij /
                                (static_cast<long double>(ai) * bj)) *
                       prob;
            }
        }
    long double denom = 0.5L * (hu + hv) - emi;
    return static_cast<double>((mi - emi) / denom);
}

// Dominant eigenpairs of a small symmetric PSD matrix: power iteration with
// Hotelling deflation.
inline std::vector<std::pair<double, std::vector<double>>> psd_top_eigs(iflab::Matd m, int count,
                                                                        uint64_t seed = 7) {
    iflab::Rng rng(seed);
    std::vector<std::pair<double, std::vector<double>>> out;
    const int d = m.rows;
    for (int c = 0; c < count; ++c) {
        std::vector<double> v(static_cast<size_t>(d));
        for (auto& x : v) x = rng.normal(0.0, 1.0);
        double lambda = 0;
        for (int it = 0; it < 50000; ++it) {
            std::vector<double> w(static_cast<size_t>(d), 0.0);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) w[static_cast<size_t>(i)] += m.at(i, j) * v[static_cast<size_t>(j)];
            double norm = 0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-300) break;
            for (auto& x : w) x /= norm;
            double delta = 0;
            for (int i = 0; i < d; ++i) delta = std::max(delta, std::fabs(w[static_cast<size_t>(i)] - v[static_cast<size_t>(i)]));
            v = w;
            lambda = norm;
            if (delta < 1e-14 && it > 10) break;
        }
        out.push_back({lambda, v});
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) m.at(i, j) -= lambda * v[static_cast<size_t>(i)] * v[static_cast<size_t>(j)];
    }
    return out;
}

inline double kmeans_cost(const std::vector<std::vector<double>>& pts, const std::vector<int>& assign,
                          int k) {
    size_t dim = pts[0].size();
    std::vector<std::vector<double>> cen(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int> cnt(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < pts.size(); ++i) {
        for (size_t e = 0; e < dim; ++e) cen[static_cast<size_t>(assign[i])][e] += pts[i][e];
        ++cnt[static_cast<size_t>(assign[i])];
    }
    for (int c = 0; c < k; ++c)
        if (cnt[static_cast<size_t>(c)] > 0)
            for (size_t e = 0; e < dim; ++e) cen[static_cast<size_t>(c)][e] /= cnt[static_cast<size_t>(c)];
    double cost = 0;
    for (size_t i = 0; i < pts.size(); ++i)
        for (size_t e = 0; e < dim; ++e) {
            double dd = pts[i][e] - cen[static_cast<size_t>(assign[i])][e];
            cost += dd * dd;
        }
    return cost;
}

// Globally optimal k-means cost by exhaustive assignment enumeration.
// Only sane for tiny n (k^n assignments).
inline double optimal_kmeans_cost(const std::vector<std::vector<double>>& pts, int k) {
    size_t n = pts.size();
    std::vector<int> assign(n, 0);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(size_t)> rec = [&](size_t i) {
        if (i == n) {
            std::vector<bool> used(static_cast<size_t>(k), false);
            for (int a : assign) used[static_cast<size_t>(a)] = true;
            best = std::min(best, kmeans_cost(pts, assign, k));
            return;
        }
        for (int c = 0; c < k; ++c) {
            assign[i] = c;
            rec(i + 1);
        }
    };
    rec(0);
    return best;
}

}  // namespace oracle
