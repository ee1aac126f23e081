#pragma once

// Minimal reverse-mode autodiff over dense row-major matrices. Templated on
// the scalar type: float for training speed, double for gradient checks.
// Kernel loop orders are fixed and row-independent so results are
// bit-reproducible and batch-composition-invariant.

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"

namespace iflab {

template <typename F>
struct MatT {
    int rows = 0;
    int cols = 0;
    std::vector<F> d;

    MatT() = default;
    MatT(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * static_cast<size_t>(c), F(0)) {}

    static MatT zeros(int r, int c) { return MatT(r, c); }
    static MatT full(int r, int c, F v) {
        MatT m(r, c);
        std::fill(m.d.begin(), m.d.end(), v);
        return m;
    }

    size_t size() const { return d.size(); }
    bool same_shape(const MatT& o) const { return rows == o.rows && cols == o.cols; }

    F& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
    F at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }
    F* row(int r) { return d.data() + static_cast<size_t>(r) * cols; }
    const F* row(int r) const { return d.data() + static_cast<size_t>(r) * cols; }

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (auto& v : d) v = static_cast<F>(rng.normal(mean, stddev));
    }

    template <typename G>
    MatT<G> cast() const {
        MatT<G> m(rows, cols);
        for (size_t i = 0; i < d.size(); ++i) m.d[i] = static_cast<G>(d[i]);
        return m;
    }
};

using Mat = MatT<float>;
using Matd = MatT<double>;

namespace detail {

inline void check(bool ok, const char* what) {
    if (!ok) throw DimensionError(what);
}

}  // namespace detail

// c [m x n] (+)= a [m x k] * b [k x n]
template <typename F>
void mm_nn(const MatT<F>& a, const MatT<F>& b, MatT<F>& c, bool accumulate = false) {
    detail::check(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols, "mm_nn: shape mismatch");
    for (int i = 0; i < a.rows; ++i) {
        F* __restrict ci = c.row(i);
        if (!accumulate) std::fill(ci, ci + c.cols, F(0));
        const F* __restrict ai = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const F aik = ai[k];
            const F* __restrict bk = b.row(k);
            for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
}

// c [m x n] (+)= a [m x k] * b[n x k]^T
template <typename F>
void mm_nt(const MatT<F>& a, const MatT<F>& b, MatT<F>& c, bool accumulate = false) {
    detail::check(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows, "mm_nt: shape mismatch");
    for (int i = 0; i < a.rows; ++i) {
        const F* __restrict ai = a.row(i);
        F* __restrict ci = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const F* __restrict bj = b.row(j);
            F acc = 0;
            for (int k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// c [k x n] (+)= a [m x k]^T * b [m x n]
template <typename F>
void mm_tn(const MatT<F>& a, const MatT<F>& b, MatT<F>& c, bool accumulate = false) {
    detail::check(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, "mm_tn: shape mismatch");
    if (!accumulate) std::fill(c.d.begin(), c.d.end(), F(0));
    for (int i = 0; i < a.rows; ++i) {
        const F* __restrict ai = a.row(i);
        const F* __restrict bi = b.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const F aik = ai[k];
            F* __restrict ck = c.row(k);
            for (int j = 0; j < b.cols; ++j) ck[j] += aik * bi[j];
        }
    }
}

template <typename F>
F gelu_scalar(F x) {
    const F c = F(0.7978845608028654);  // sqrt(2/pi)
    F u = c * (x + F(0.044715) * x * x * x);
    return F(0.5) * x * (F(1) + std::tanh(u));
}

template <typename F>
F gelu_grad_scalar(F x) {
    const F c = F(0.7978845608028654);
    F u = c * (x + F(0.044715) * x * x * x);
    F t = std::tanh(u);
    F du = c * (F(1) + F(3) * F(0.044715) * x * x);
    return F(0.5) * (F(1) + t) + F(0.5) * x * (F(1) - t * t) * du;
}

// A trainable parameter: value plus accumulated gradient. `decay` marks it
// as subject to weight decay (matrices yes; biases/gains/embeddings no).
template <typename F>
struct ParamT {
    std::string name;
    MatT<F> value;
    MatT<F> grad;
    bool decay = false;

    ParamT() = default;
    ParamT(std::string n, int r, int c, bool dec) : name(std::move(n)), value(r, c), grad(r, c), decay(dec) {}

    void zero_grad() { std::fill(grad.d.begin(), grad.d.end(), F(0)); }
};

// Tape-based computation graph. Ops append nodes and backward closures;
// backward() replays the tape in reverse and flushes parameter gradients
// into their external accumulators.
template <typename F>
class GraphT {
public:
    using M = MatT<F>;

    explicit GraphT(bool train_mode = false, Rng* rng = nullptr) : train_(train_mode), rng_(rng) {
        if (train_ && rng_ == nullptr) throw ConfigError("graph in train mode needs an rng for dropout");
    }
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    bool train_mode() const { return train_; }

    const M& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const M& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

    int leaf(M v) { return push(std::move(v)); }

    int param(ParamT<F>& p) {
        int id = push(M(p.value));
        sinks_.emplace_back(id, &p.grad);
        return id;
    }

    int matmul(int a, int b) {
        const M& A = value(a);
        const M& B = value(b);
        detail::check(A.cols == B.rows, "matmul: inner dimensions differ");
        M c(A.rows, B.cols);
        mm_nn(A, B, c);
        int id = push(std::move(c));
        tape_.push_back([this, a, b, id] {
            mm_nt(nodes_[id].grad, nodes_[b].value, nodes_[a].grad, true);
            mm_tn(nodes_[a].value, nodes_[id].grad, nodes_[b].grad, true);
        });
        return id;
    }

    int add(int a, int b) {
        const M& A = value(a);
        const M& B = value(b);
        detail::check(A.same_shape(B), "add: shape mismatch");
        M c = A;
        for (size_t i = 0; i < c.d.size(); ++i) c.d[i] += B.d[i];
        int id = push(std::move(c));
        tape_.push_back([this, a, b, id] {
            const M& g = nodes_[id].grad;
            M& ga = nodes_[a].grad;
            M& gb = nodes_[b].grad;
            for (size_t i = 0; i < g.d.size(); ++i) {
                ga.d[i] += g.d[i];
                gb.d[i] += g.d[i];
            }
        });
        return id;
    }

    // x [m x n] + row [1 x n] broadcast over rows
    int add_row(int a, int b) {
        const M& A = value(a);
        const M& B = value(b);
        detail::check(B.rows == 1 && B.cols == A.cols, "add_row: expected 1 x cols row vector");
        M c = A;
        for (int i = 0; i < c.rows; ++i) {
            F* ci = c.row(i);
            const F* br = B.row(0);
            for (int j = 0; j < c.cols; ++j) ci[j] += br[j];
        }
        int id = push(std::move(c));
        tape_.push_back([this, a, b, id] {
            const M& g = nodes_[id].grad;
            M& ga = nodes_[a].grad;
            M& gb = nodes_[b].grad;
            for (int i = 0; i < g.rows; ++i) {
                const F* gi = g.row(i);
                F* gar = ga.row(i);
                F* gbr = gb.row(0);
                for (int j = 0; j < g.cols; ++j) {
                    gar[j] += gi[j];
                    gbr[j] += gi[j];
                }
            }
        });
        return id;
    }

    int scale(int a, F s) {
        M c = value(a);
        for (auto& v : c.d) v *= s;
        int id = push(std::move(c));
        tape_.push_back([this, a, id, s] {
            const M& g = nodes_[id].grad;
            M& ga = nodes_[a].grad;
            for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += s * g.d[i];
        });
        return id;
    }

    int gelu(int a) {
        M c = value(a);
        for (auto& v : c.d) v = gelu_scalar(v);
        int id = push(std::move(c));
        tape_.push_back([this, a, id] {
            const M& g = nodes_[id].grad;
            const M& x = nodes_[a].value;
            M& ga = nodes_[a].grad;
            for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += g.d[i] * gelu_grad_scalar(x.d[i]);
        });
        return id;
    }

    int softmax_rows(int a) {
        const M& A = value(a);
        M c(A.rows, A.cols);
        for (int i = 0; i < A.rows; ++i) {
            const F* xi = A.row(i);
            F* yi = c.row(i);
            F mx = xi[0];
            for (int j = 1; j < A.cols; ++j) mx = std::max(mx, xi[j]);
            F sum = 0;
            for (int j = 0; j < A.cols; ++j) {
                yi[j] = std::exp(xi[j] - mx);
                sum += yi[j];
            }
            F inv = F(1) / sum;
            for (int j = 0; j < A.cols; ++j) yi[j] *= inv;
        }
        int id = push(std::move(c));
        tape_.push_back([this, a, id] {
            const M& g = nodes_[id].grad;
            const M& y = nodes_[id].value;
            M& ga = nodes_[a].grad;
            for (int i = 0; i < g.rows; ++i) {
                const F* gi = g.row(i);
                const F* yi = y.row(i);
                F dot = 0;
                for (int j = 0; j < g.cols; ++j) dot += gi[j] * yi[j];
                F* gar = ga.row(i);
                for (int j = 0; j < g.cols; ++j) gar[j] += yi[j] * (gi[j] - dot);
            }
        });
        return id;
    }

    // Row-wise standardization (mean 0, variance 1), no affine part.
    int layer_norm(int a, F eps) {
        const M& A = value(a);
        detail::check(A.cols >= 1, "layer_norm: empty rows");
        M c(A.rows, A.cols);
        auto stats = std::make_shared<M>(A.rows, 2);  // per row: mean, inv_std
        for (int i = 0; i < A.rows; ++i) {
            const F* xi = A.row(i);
            F mean = 0;
            for (int j = 0; j < A.cols; ++j) mean += xi[j];
            mean /= F(A.cols);
            F var = 0;
            for (int j = 0; j < A.cols; ++j) {
                F dxi = xi[j] - mean;
                var += dxi * dxi;
            }
            var /= F(A.cols);
            F inv_std = F(1) / std::sqrt(var + eps);
            F* yi = c.row(i);
            for (int j = 0; j < A.cols; ++j) yi[j] = (xi[j] - mean) * inv_std;
            stats->at(i, 0) = mean;
            stats->at(i, 1) = inv_std;
        }
        int id = push(std::move(c));
        tape_.push_back([this, a, id, stats] {
            const M& g = nodes_[id].grad;
            const M& y = nodes_[id].value;  // y is exactly x-hat
            M& ga = nodes_[a].grad;
            int n = g.cols;
            for (int i = 0; i < g.rows; ++i) {
                const F* gi = g.row(i);
                const F* yi = y.row(i);
                F gmean = 0, gymean = 0;
                for (int j = 0; j < n; ++j) {
                    gmean += gi[j];
                    gymean += gi[j] * yi[j];
                }
                gmean /= F(n);
                gymean /= F(n);
                F inv_std = stats->at(i, 1);
                F* gar = ga.row(i);
                for (int j = 0; j < n; ++j) gar[j] += inv_std * (gi[j] - gmean - yi[j] * gymean);
            }
        });
        return id;
    }

    // y = x * gain_row + shift_row, broadcasting 1 x n vectors over rows.
    int rowwise_affine(int a, int gain, int shift) {
        const M& A = value(a);
        const M& G = value(gain);
        const M& S = value(shift);
        detail::check(G.rows == 1 && S.rows == 1 && G.cols == A.cols && S.cols == A.cols,
                      "rowwise_affine: gain/shift must be 1 x cols");
        M c(A.rows, A.cols);
        for (int i = 0; i < A.rows; ++i) {
            const F* xi = A.row(i);
            const F* gr = G.row(0);
            const F* sr = S.row(0);
            F* yi = c.row(i);
            for (int j = 0; j < A.cols; ++j) yi[j] = xi[j] * gr[j] + sr[j];
        }
        int id = push(std::move(c));
        tape_.push_back([this, a, gain, shift, id] {
            const M& g = nodes_[id].grad;
            const M& x = nodes_[a].value;
            const M& gn = nodes_[gain].value;
            M& ga = nodes_[a].grad;
            M& gg = nodes_[gain].grad;
            M& gs = nodes_[shift].grad;
            for (int i = 0; i < g.rows; ++i) {
                const F* gi = g.row(i);
                const F* xi = x.row(i);
                const F* gnr = gn.row(0);
                F* gar = ga.row(i);
                F* ggr = gg.row(0);
                F* gsr = gs.row(0);
                for (int j = 0; j < g.cols; ++j) {
                    gar[j] += gi[j] * gnr[j];
                    ggr[j] += gi[j] * xi[j];
                    gsr[j] += gi[j];
                }
            }
        });
        return id;
    }

    // Row gather from an embedding table node; backward scatter-adds.
    int embed(int table, std::vector<int> ids) {
        const M& T = value(table);
        for (int ix : ids)
            detail::check(ix >= 0 && ix < T.rows, "embed: id out of range");
        M c(static_cast<int>(ids.size()), T.cols);
        for (size_t i = 0; i < ids.size(); ++i)
            std::memcpy(c.row(static_cast<int>(i)), T.row(ids[i]), sizeof(F) * static_cast<size_t>(T.cols));
        int id = push(std::move(c));
        tape_.push_back([this, table, id, ids = std::move(ids)] {
            const M& g = nodes_[id].grad;
            M& gt = nodes_[table].grad;
            for (size_t i = 0; i < ids.size(); ++i) {
                const F* gi = g.row(static_cast<int>(i));
                F* tr = gt.row(ids[i]);
                for (int j = 0; j < g.cols; ++j) tr[j] += gi[j];
            }
        });
        return id;
    }

    int gather_rows(int a, std::vector<int> idx) {
        const M& A = value(a);
        for (int ix : idx)
            detail::check(ix >= 0 && ix < A.rows, "gather_rows: index out of range");
        M c(static_cast<int>(idx.size()), A.cols);
        for (size_t i = 0; i < idx.size(); ++i)
            std::memcpy(c.row(static_cast<int>(i)), A.row(idx[i]), sizeof(F) * static_cast<size_t>(A.cols));
        int id = push(std::move(c));
        tape_.push_back([this, a, id, idx = std::move(idx)] {
            const M& g = nodes_[id].grad;
            M& ga = nodes_[a].grad;
            for (size_t i = 0; i < idx.size(); ++i) {
                const F* gi = g.row(static_cast<int>(i));
                F* ar = ga.row(idx[i]);
                for (int j = 0; j < g.cols; ++j) ar[j] += gi[j];
            }
        });
        return id;
    }

    int slice_cols(int a, int c0, int c1) {
        const M& A = value(a);
        detail::check(0 <= c0 && c0 < c1 && c1 <= A.cols, "slice_cols: bad column range");
        M c(A.rows, c1 - c0);
        for (int i = 0; i < A.rows; ++i)
            std::memcpy(c.row(i), A.row(i) + c0, sizeof(F) * static_cast<size_t>(c1 - c0));
        int id = push(std::move(c));
        tape_.push_back([this, a, id, c0] {
            const M& g = nodes_[id].grad;
            M& ga = nodes_[a].grad;
            for (int i = 0; i < g.rows; ++i) {
                const F* gi = g.row(i);
                F* ar = ga.row(i) + c0;
                for (int j = 0; j < g.cols; ++j) ar[j] += gi[j];
            }
        });
        return id;
    }

    // Inverted dropout. Identity (and no rng consumption) when not training.
    int dropout(int a, F p) {
        detail::check(p >= F(0) && p < F(1), "dropout: p must be in [0, 1)");
        if (!train_ || p == F(0)) return a;
        const M& A = value(a);
        auto mask = std::make_shared<M>(A.rows, A.cols);
        F keep_scale = F(1) / (F(1) - p);
        for (auto& v : mask->d) v = rng_->bernoulli(static_cast<double>(p)) ? F(0) : keep_scale;
        M c(A.rows, A.cols);
        for (size_t i = 0; i < c.d.size(); ++i) c.d[i] = A.d[i] * mask->d[i];
        int id = push(std::move(c));
        tape_.push_back([this, a, id, mask] {
            const M& g = nodes_[id].grad;
            M& ga = nodes_[a].grad;
            for (size_t i = 0; i < g.d.size(); ++i) ga.d[i] += g.d[i] * mask->d[i];
        });
        return id;
    }

    // Multi-head causal self-attention over a packed ragged batch.
    // q, k, v: [M x d] nodes; offsets: S+1 ascending row offsets with
    // offsets.back() == M. Attention never crosses sequence boundaries.
    int causal_attention(int q, int k, int v, std::vector<int> offsets, int n_heads, F drop_p) {
        const M& Q = value(q);
        const M& K = value(k);
        const M& V = value(v);
        detail::check(Q.same_shape(K) && Q.same_shape(V), "causal_attention: q/k/v shapes differ");
        detail::check(n_heads >= 1 && Q.cols % n_heads == 0, "causal_attention: cols not divisible by heads");
        detail::check(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == Q.rows,
                      "causal_attention: bad offsets");
        for (size_t s = 0; s + 1 < offsets.size(); ++s)
            detail::check(offsets[s] < offsets[s + 1], "causal_attention: empty sequence");

        const int hd = Q.cols / n_heads;
        const F alpha = F(1) / std::sqrt(F(hd));
        const int n_seq = static_cast<int>(offsets.size()) - 1;
        const bool use_drop = train_ && drop_p > F(0);

        M out(Q.rows, Q.cols);
        // Per (sequence, head): post-softmax probs, plus dropout scales when used.
        auto probs = std::make_shared<std::vector<M>>();
        auto drops = std::make_shared<std::vector<M>>();
        probs->reserve(static_cast<size_t>(n_seq) * n_heads);
        F keep_scale = F(1) / (F(1) - drop_p);

        for (int s = 0; s < n_seq; ++s) {
            const int base = offsets[static_cast<size_t>(s)];
            const int L = offsets[static_cast<size_t>(s) + 1] - base;
            for (int h = 0; h < n_heads; ++h) {
                const int hc = h * hd;
                M P(L, L);
                for (int t = 0; t < L; ++t) {
                    F* pt = P.row(t);
                    const F* qt = Q.row(base + t) + hc;
                    F mx = -std::numeric_limits<F>::infinity();
                    for (int j = 0; j <= t; ++j) {
                        const F* kj = K.row(base + j) + hc;
                        F acc = 0;
                        for (int e = 0; e < hd; ++e) acc += qt[e] * kj[e];
                        pt[j] = acc * alpha;
                        mx = std::max(mx, pt[j]);
                    }
                    F sum = 0;
                    for (int j = 0; j <= t; ++j) {
                        pt[j] = std::exp(pt[j] - mx);
                        sum += pt[j];
                    }
                    F inv = F(1) / sum;
                    for (int j = 0; j <= t; ++j) pt[j] *= inv;
                }
                const M* pd = &P;
                if (use_drop) {
                    M Dm(L, L);
                    for (int t = 0; t < L; ++t) {
                        F* dt = Dm.row(t);
                        for (int j = 0; j <= t; ++j)
                            dt[j] = rng_->bernoulli(static_cast<double>(drop_p)) ? F(0) : keep_scale;
                    }
                    drops->push_back(std::move(Dm));
                    pd = &drops->back();  // not the product yet; applied below
                }
                for (int t = 0; t < L; ++t) {
                    F* ot = out.row(base + t) + hc;
                    std::fill(ot, ot + hd, F(0));
                    const F* pt = P.row(t);
                    const F* dt = use_drop ? pd->row(t) : nullptr;
                    for (int j = 0; j <= t; ++j) {
                        F w = use_drop ? pt[j] * dt[j] : pt[j];
                        const F* vj = V.row(base + j) + hc;
                        for (int e = 0; e < hd; ++e) ot[e] += w * vj[e];
                    }
                }
                probs->push_back(std::move(P));
            }
        }

        int id = push(std::move(out));
        tape_.push_back([this, q, k, v, id, offsets = std::move(offsets), n_heads, hd, alpha, use_drop,
                         probs, drops] {
            const M& g = nodes_[id].grad;
            const M& Qv = nodes_[q].value;
            const M& Kv = nodes_[k].value;
            const M& Vv = nodes_[v].value;
            M& gq = nodes_[q].grad;
            M& gk = nodes_[k].grad;
            M& gv = nodes_[v].grad;
            const int n_seq = static_cast<int>(offsets.size()) - 1;
            size_t cell = 0;
            for (int s = 0; s < n_seq; ++s) {
                const int base = offsets[static_cast<size_t>(s)];
                const int L = offsets[static_cast<size_t>(s) + 1] - base;
                for (int h = 0; h < n_heads; ++h, ++cell) {
                    const int hc = h * hd;
                    const M& P = (*probs)[cell];
                    const M* Dm = use_drop ? &(*drops)[cell] : nullptr;
                    M dP(L, L);
                    for (int t = 0; t < L; ++t) {
                        const F* gt = g.row(base + t) + hc;
                        const F* pt = P.row(t);
                        const F* dt = use_drop ? Dm->row(t) : nullptr;
                        F* dpt = dP.row(t);
                        // dV and d(post-dropout probs)
                        for (int j = 0; j <= t; ++j) {
                            const F w = use_drop ? pt[j] * dt[j] : pt[j];
                            const F* vj = Vv.row(base + j) + hc;
                            F* gvj = gv.row(base + j) + hc;
                            F acc = 0;
                            for (int e = 0; e < hd; ++e) {
                                gvj[e] += w * gt[e];
                                acc += gt[e] * vj[e];
                            }
                            dpt[j] = use_drop ? acc * dt[j] : acc;  // through dropout
                        }
                        // softmax backward over the causal prefix
                        F dot = 0;
                        for (int j = 0; j <= t; ++j) dot += dpt[j] * pt[j];
                        for (int j = 0; j <= t; ++j) dpt[j] = pt[j] * (dpt[j] - dot);
                        // dQ, dK
                        const F* qt = Qv.row(base + t) + hc;
                        F* gqt = gq.row(base + t) + hc;
                        for (int j = 0; j <= t; ++j) {
                            const F ds = dpt[j] * alpha;
                            const F* kj = Kv.row(base + j) + hc;
                            F* gkj = gk.row(base + j) + hc;
                            for (int e = 0; e < hd; ++e) {
                                gqt[e] += ds * kj[e];
                                gkj[e] += ds * qt[e];
                            }
                        }
                    }
                }
            }
        });
        return id;
    }

    // Mean token-level cross entropy over masked rows of [M x V] logits.
    // Numerically stable log-sum-exp; result is a 1 x 1 node.
    int cross_entropy_mean(int logits, std::vector<int> targets, std::vector<uint8_t> mask) {
        const M& X = value(logits);
        detail::check(static_cast<int>(targets.size()) == X.rows, "cross_entropy: targets size mismatch");
        detail::check(static_cast<int>(mask.size()) == X.rows, "cross_entropy: mask size mismatch");
        int count = 0;
        for (int i = 0; i < X.rows; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            detail::check(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < X.cols,
                          "cross_entropy: target id out of range");
            ++count;
        }
        if (count == 0) throw NumericError("cross_entropy: mask selects no positions");

        auto soft = std::make_shared<M>(X.rows, X.cols);
        double total = 0;
        for (int i = 0; i < X.rows; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            const F* xi = X.row(i);
            F mx = xi[0];
            for (int j = 1; j < X.cols; ++j) mx = std::max(mx, xi[j]);
            F sum = 0;
            F* si = soft->row(i);
            for (int j = 0; j < X.cols; ++j) {
                si[j] = std::exp(xi[j] - mx);
                sum += si[j];
            }
            F inv = F(1) / sum;
            for (int j = 0; j < X.cols; ++j) si[j] *= inv;
            total += static_cast<double>(mx) + std::log(static_cast<double>(sum)) -
                     static_cast<double>(xi[targets[static_cast<size_t>(i)]]);
        }
        M loss(1, 1);
        loss.d[0] = static_cast<F>(total / count);
        int id = push(std::move(loss));
        tape_.push_back([this, logits, id, targets = std::move(targets), mask = std::move(mask), soft, count] {
            const F g = nodes_[id].grad.d[0] / F(count);
            M& gx = nodes_[logits].grad;
            for (int i = 0; i < gx.rows; ++i) {
                if (!mask[static_cast<size_t>(i)]) continue;
                const F* si = soft->row(i);
                F* gi = gx.row(i);
                for (int j = 0; j < gx.cols; ++j) gi[j] += g * si[j];
                gi[targets[static_cast<size_t>(i)]] -= g;
            }
        });
        return id;
    }

    void backward(int loss_id) {
        detail::check(loss_id >= 0 && loss_id < static_cast<int>(nodes_.size()), "backward: bad node id");
        detail::check(nodes_[static_cast<size_t>(loss_id)].value.size() == 1, "backward: loss must be scalar");
        for (auto& n : nodes_) n.grad = M::zeros(n.value.rows, n.value.cols);
        nodes_[static_cast<size_t>(loss_id)].grad.d[0] = F(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
        for (auto& [id, sink] : sinks_) {
            const M& g = nodes_[static_cast<size_t>(id)].grad;
            detail::check(sink->same_shape(g), "backward: parameter grad shape mismatch");
            for (size_t i = 0; i < g.d.size(); ++i) sink->d[i] += g.d[i];
        }
    }

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        M value;
        M grad;
    };

    int push(M&& v) {
        nodes_.push_back(Node{std::move(v), M{}});
        return static_cast<int>(nodes_.size()) - 1;
    }

    bool train_;
    Rng* rng_;
    std::vector<Node> nodes_;
    std::vector<std::function<void()>> tape_;
    std::vector<std::pair<int, MatT<F>*>> sinks_;
};

using Graph = GraphT<float>;
using Graphd = GraphT<double>;

}  // namespace iflab
