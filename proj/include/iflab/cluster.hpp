#pragma once

// Hidden-state clustering analysis: KMeans (k-means++, restarts), extrinsic
// metrics (pair-counting F1, ARI, AMI with exact hypergeometric expected MI),
// PCA (cyclic Jacobi, Gram trick when D > N), exact t-SNE, the .acts dump
// format, and the (epoch x layer x label x split) sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "tensor.hpp"

namespace iflab {

// ---------------------------------------------------------------------------
// Activation dumps

struct PointLabel {
    int task_id = 0;
    int dist_id = 0;
    int mapping_id = 0;
    bool is_hard = false;
    std::string split;  // "train_subset" or "validation" for internal dumps
};

// All layers of one collection pass: layers[l] is N x D, row i described by
// labels[i]. Layer 0 is the embedding output, the last layer the final block.
struct ActivationDump {
    std::string source;
    int epoch = 0;
    std::vector<Mat> layers;
    std::vector<PointLabel> labels;

    int n_points() const { return layers.empty() ? 0 : layers[0].rows; }

    void validate() const {
        if (layers.empty()) throw IntegrityError("activation dump: no layers");
        for (const auto& m : layers) {
            if (m.rows != layers[0].rows || m.cols != layers[0].cols)
                throw IntegrityError("activation dump: inconsistent layer shapes");
            for (float v : m.d)
                if (!std::isfinite(v)) throw IntegrityError("activation dump: non-finite value");
        }
        if (static_cast<int>(labels.size()) != layers[0].rows)
            throw IntegrityError("activation dump: label count does not match point count");
    }

    void save(const std::filesystem::path& path) const {
        validate();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IntegrityError("cannot write activation dump: " + path.string());
        f.write("IFAC", 4);
        auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
        w32(1);
        w32(static_cast<uint32_t>(layers[0].rows));
        w32(static_cast<uint32_t>(layers[0].cols));
        w32(static_cast<uint32_t>(layers.size()));
        for (const auto& m : layers)
            f.write(reinterpret_cast<const char*>(m.d.data()),
                    static_cast<std::streamsize>(m.d.size() * sizeof(float)));
        nlohmann::json tasks = nlohmann::json::array(), dists = nlohmann::json::array(),
                       maps = nlohmann::json::array(), hard = nlohmann::json::array(),
                       splits = nlohmann::json::array();
        for (const auto& l : labels) {
            tasks.push_back(l.task_id);
            dists.push_back(l.dist_id);
            maps.push_back(l.mapping_id);
            hard.push_back(l.is_hard);
            splits.push_back(l.split);
        }
        nlohmann::json trailer{{"labels",
                                {{"task_id", tasks},
                                 {"distribution_id", dists},
                                 {"mapping_id", maps},
                                 {"is_hard", hard},
                                 {"split", splits}}},
                               {"provenance", {{"source", source}, {"epoch", epoch}}}};
        std::string t = trailer.dump();
        f.write(t.data(), static_cast<std::streamsize>(t.size()));
        if (!f) throw IntegrityError("short write on activation dump: " + path.string());
    }

    static ActivationDump load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IntegrityError("cannot open activation dump: " + path.string());
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "IFAC", 4) != 0)
            throw IntegrityError("bad activation dump magic: " + path.string());
        auto r32 = [&] {
            uint32_t v;
            f.read(reinterpret_cast<char*>(&v), 4);
            if (!f) throw IntegrityError("truncated activation dump: " + path.string());
            return v;
        };
        if (r32() != 1) throw IntegrityError("unsupported activation dump version");
        uint32_t n = r32(), d = r32(), nl = r32();
        if (n == 0 || d == 0 || nl == 0) throw IntegrityError("empty activation dump");
        ActivationDump dump;
        for (uint32_t l = 0; l < nl; ++l) {
            Mat m(static_cast<int>(n), static_cast<int>(d));
            f.read(reinterpret_cast<char*>(m.d.data()),
                   static_cast<std::streamsize>(m.d.size() * sizeof(float)));
            if (!f) throw IntegrityError("truncated activation dump: " + path.string());
            dump.layers.push_back(std::move(m));
        }
        std::string trailer((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(trailer);
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("activation dump label block is not valid json: ") +
                                 e.what());
        }
        try {
            const auto& lb = j.at("labels");
            auto tasks = lb.at("task_id").get<std::vector<int>>();
            auto dists = lb.at("distribution_id").get<std::vector<int>>();
            auto maps = lb.at("mapping_id").get<std::vector<int>>();
            auto hard = lb.at("is_hard").get<std::vector<bool>>();
            auto splits = lb.at("split").get<std::vector<std::string>>();
            if (tasks.size() != n || dists.size() != n || maps.size() != n || hard.size() != n ||
                splits.size() != n)
                throw IntegrityError("activation dump: label arrays do not match point count");
            for (uint32_t i = 0; i < n; ++i)
                dump.labels.push_back(PointLabel{tasks[i], dists[i], maps[i], hard[i], splits[i]});
            dump.source = j.at("provenance").at("source").get<std::string>();
            dump.epoch = j.at("provenance").at("epoch").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("activation dump label block malformed: ") + e.what());
        }
        dump.validate();
        return dump;
    }
};

// External dumps reuse the same layout; loading revalidates everything.
inline ActivationDump import_external_dump(const std::filesystem::path& path) {
    return ActivationDump::load(path);
}

// ---------------------------------------------------------------------------
// KMeans

struct ClusterAssignment {
    std::vector<int> cluster;
    int k = 0;
    double inertia = 0;
    Mat centroids;
};

namespace cluster_detail {

inline double dist2(const float* a, const float* b, int d) {
    double s = 0;
    for (int i = 0; i < d; ++i) {
        double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += diff * diff;
    }
    return s;
}

inline ClusterAssignment lloyd_once(const Mat& pts, int k, int max_iters, Rng& rng) {
    const int n = pts.rows, d = pts.cols;
    Matd centroids(k, d);

    // k-means++ seeding
    std::vector<double> best_d2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
    int first = static_cast<int>(rng.uniform_int(0, n - 1));
    for (int c = 0; c < k; ++c) {
        int pick = first;
        if (c > 0) {
            double total = 0;
            for (double v : best_d2) total += v;
            if (total > 0) {
                double r = rng.uniform() * total, acc = 0;
                pick = n - 1;
                for (int i = 0; i < n; ++i) {
                    acc += best_d2[static_cast<size_t>(i)];
                    if (acc >= r) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = static_cast<int>(rng.uniform_int(0, n - 1));
            }
        }
        for (int j = 0; j < d; ++j)
            centroids.at(c, j) = static_cast<double>(pts.at(pick, j));
        for (int i = 0; i < n; ++i) {
            double s = 0;
            for (int j = 0; j < d; ++j) {
                double diff = static_cast<double>(pts.at(i, j)) - centroids.at(c, j);
                s += diff * diff;
            }
            best_d2[static_cast<size_t>(i)] = std::min(best_d2[static_cast<size_t>(i)], s);
        }
    }

    std::vector<int> assign(static_cast<size_t>(n), -1);
    auto assign_all = [&] {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double s = 0;
                for (int j = 0; j < d; ++j) {
                    double diff = static_cast<double>(pts.at(i, j)) - centroids.at(c, j);
                    s += diff * diff;
                }
                if (s < bd) {
                    bd = s;
                    best = c;
                }
            }
            if (assign[static_cast<size_t>(i)] != best) changed = true;
            assign[static_cast<size_t>(i)] = best;
        }
        return changed;
    };

    for (int iter = 0; iter < max_iters; ++iter) {
        if (!assign_all() && iter > 0) break;
        // recompute means
        std::vector<int> count(static_cast<size_t>(k), 0);
        Matd sums = Matd::zeros(k, d);
        for (int i = 0; i < n; ++i) {
            int c = assign[static_cast<size_t>(i)];
            ++count[static_cast<size_t>(c)];
            for (int j = 0; j < d; ++j) sums.at(c, j) += static_cast<double>(pts.at(i, j));
        }
        for (int c = 0; c < k; ++c)
            if (count[static_cast<size_t>(c)] > 0)
                for (int j = 0; j < d; ++j)
                    centroids.at(c, j) = sums.at(c, j) / count[static_cast<size_t>(c)];
        // re-seed empty clusters to the farthest point from its centroid
        for (int c = 0; c < k; ++c) {
            if (count[static_cast<size_t>(c)] > 0) continue;
            int far = 0;
            double fd = -1;
            for (int i = 0; i < n; ++i) {
                int a = assign[static_cast<size_t>(i)];
                double s = 0;
                for (int j = 0; j < d; ++j) {
                    double diff = static_cast<double>(pts.at(i, j)) - centroids.at(a, j);
                    s += diff * diff;
                }
                if (s > fd) {
                    fd = s;
                    far = i;
                }
            }
            for (int j = 0; j < d; ++j) centroids.at(c, j) = static_cast<double>(pts.at(far, j));
        }
    }
    assign_all();  // points end on their nearest centroid

    ClusterAssignment out;
    out.k = k;
    out.cluster = assign;
    out.centroids = Mat(k, d);
    for (int c = 0; c < k; ++c)
        for (int j = 0; j < d; ++j) out.centroids.at(c, j) = static_cast<float>(centroids.at(c, j));
    out.inertia = 0;
    for (int i = 0; i < n; ++i) {
        int c = assign[static_cast<size_t>(i)];
        double s = 0;
        for (int j = 0; j < d; ++j) {
            double diff = static_cast<double>(pts.at(i, j)) - centroids.at(c, j);
            s += diff * diff;
        }
        out.inertia += s;
    }
    return out;
}

}  // namespace cluster_detail

inline ClusterAssignment kmeans(const Mat& pts, int k, int n_restarts = 10, int max_iters = 300,
                                uint64_t seed = 0) {
    if (k < 1) throw ConfigError("kmeans: k must be >= 1");
    if (k > pts.rows) throw ConfigError("kmeans: k exceeds the number of points");
    if (n_restarts < 1) throw ConfigError("kmeans: need at least one restart");
    ClusterAssignment best;
    for (int r = 0; r < n_restarts; ++r) {
        Rng rng(derive_seed(seed, "kmeans-restart-" + std::to_string(r)));
        ClusterAssignment cand = cluster_detail::lloyd_once(pts, k, max_iters, rng);
        if (r == 0 || cand.inertia < best.inertia) best = std::move(cand);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Extrinsic clustering metrics

namespace cluster_detail {

struct Contingency {
    std::map<std::pair<int, int>, int64_t> cells;
    std::map<int, int64_t> row, col;
    int64_t n = 0;
};

inline void check_label_pair(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw ConfigError("clustering metrics: length mismatch");
    if (a.size() < 2) throw ConfigError("clustering metrics: need at least 2 points");
}

inline Contingency contingency(const std::vector<int>& a, const std::vector<int>& b) {
    check_label_pair(a, b);
    Contingency t;
    for (size_t i = 0; i < a.size(); ++i) {
        t.cells[{a[i], b[i]}] += 1;
        t.row[a[i]] += 1;
        t.col[b[i]] += 1;
    }
    t.n = static_cast<int64_t>(a.size());
    return t;
}

inline int64_t comb2(int64_t x) { return x * (x - 1) / 2; }

// first-occurrence relabeling; equal results mean identical partitions
inline std::vector<int> normalize_labels(const std::vector<int>& v) {
    std::map<int, int> ids;
    std::vector<int> out;
    out.reserve(v.size());
    for (int x : v) {
        auto it = ids.find(x);
        if (it == ids.end()) it = ids.insert({x, static_cast<int>(ids.size())}).first;
        out.push_back(it->second);
    }
    return out;
}

}  // namespace cluster_detail

inline double pair_f1(const std::vector<int>& assignment, const std::vector<int>& labels) {
    auto t = cluster_detail::contingency(assignment, labels);
    int64_t tp = 0, pred = 0, act = 0;
    for (const auto& [k, v] : t.cells) tp += cluster_detail::comb2(v);
    for (const auto& [k, v] : t.row) pred += cluster_detail::comb2(v);
    for (const auto& [k, v] : t.col) act += cluster_detail::comb2(v);
    double p = pred > 0 ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
    double r = act > 0 ? static_cast<double>(tp) / static_cast<double>(act) : 0.0;
    return (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
}

inline double ari(const std::vector<int>& assignment, const std::vector<int>& labels) {
    cluster_detail::check_label_pair(assignment, labels);
    if (cluster_detail::normalize_labels(assignment) == cluster_detail::normalize_labels(labels))
        return 1.0;
    auto t = cluster_detail::contingency(assignment, labels);
    int64_t index = 0, sa = 0, sb = 0;
    for (const auto& [k, v] : t.cells) index += cluster_detail::comb2(v);
    for (const auto& [k, v] : t.row) sa += cluster_detail::comb2(v);
    for (const auto& [k, v] : t.col) sb += cluster_detail::comb2(v);
    int64_t c = cluster_detail::comb2(t.n);
    // all terms share denominator C(n,2); cleared to exact integers
    int64_t num = 2 * (index * c - sa * sb);
    int64_t den = c * (sa + sb) - 2 * sa * sb;
    if (den == 0) return 0.0;  // max index equals its expectation
    return static_cast<double>(num) / static_cast<double>(den);
}

inline double ami(const std::vector<int>& assignment, const std::vector<int>& labels) {
    cluster_detail::check_label_pair(assignment, labels);
    if (cluster_detail::normalize_labels(assignment) == cluster_detail::normalize_labels(labels))
        return 1.0;
    auto t = cluster_detail::contingency(assignment, labels);
    const double n = static_cast<double>(t.n);

    double mi = 0;
    for (const auto& [key, v] : t.cells) {
        double pij = static_cast<double>(v) / n;
        double ai = static_cast<double>(t.row.at(key.first));
        double bj = static_cast<double>(t.col.at(key.second));
        mi += pij * std::log(n * static_cast<double>(v) / (ai * bj));
    }
    auto entropy = [&](const std::map<int, int64_t>& sizes) {
        double h = 0;
        for (const auto& [k, v] : sizes) {
            double p = static_cast<double>(v) / n;
            h -= p * std::log(p);
        }
        return h;
    };
    double hu = entropy(t.row), hv = entropy(t.col);

    // exact expected MI under the permutation (hypergeometric) model
    double emi = 0;
    for (const auto& [ka, a] : t.row) {
        for (const auto& [kb, b] : t.col) {
            int64_t lo = std::max<int64_t>(1, a + b - t.n), hi = std::min(a, b);
            for (int64_t nij = lo; nij <= hi; ++nij) {
                double term = (static_cast<double>(nij) / n) *
                              std::log(n * static_cast<double>(nij) /
                                       (static_cast<double>(a) * static_cast<double>(b)));
                double lp = std::lgamma(static_cast<double>(a) + 1) +
                            std::lgamma(static_cast<double>(b) + 1) +
                            std::lgamma(static_cast<double>(t.n - a) + 1) +
                            std::lgamma(static_cast<double>(t.n - b) + 1) -
                            std::lgamma(n + 1) - std::lgamma(static_cast<double>(nij) + 1) -
                            std::lgamma(static_cast<double>(a - nij) + 1) -
                            std::lgamma(static_cast<double>(b - nij) + 1) -
                            std::lgamma(static_cast<double>(t.n - a - b + nij) + 1);
                emi += term * std::exp(lp);
            }
        }
    }

    double denom = 0.5 * (hu + hv) - emi;
    if (std::abs(denom) < 1e-15) return 0.0;
    return (mi - emi) / denom;
}

// ---------------------------------------------------------------------------
// PCA (cyclic Jacobi eigendecomposition)

namespace cluster_detail {

// symmetric eigendecomposition; returns eigenvalues descending with matching
// columns in `vecs`
inline void eigh(Matd a, std::vector<double>& vals, Matd& vecs) {
    const int d = a.rows;
    if (a.cols != d) throw DimensionError("eigh: matrix must be square");
    vecs = Matd::zeros(d, d);
    for (int i = 0; i < d; ++i) vecs.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) off += a.at(i, j) * a.at(i, j);
        if (off < 1e-24) break;
        for (int p = 0; p < d - 1; ++p) {
            for (int q = p + 1; q < d; ++q) {
                double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2 * apq);
                double sign = theta >= 0 ? 1.0 : -1.0;
                double tt = sign / (std::abs(theta) + std::sqrt(theta * theta + 1));
                double c = 1.0 / std::sqrt(tt * tt + 1), s = tt * c;
                for (int i = 0; i < d; ++i) {
                    double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < d; ++i) {
                    double api = a.at(p, i), aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < d; ++i) {
                    double vip = vecs.at(i, p), viq = vecs.at(i, q);
                    vecs.at(i, p) = c * vip - s * viq;
                    vecs.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    vals.assign(static_cast<size_t>(d), 0);
    for (int i = 0; i < d; ++i) vals[static_cast<size_t>(i)] = a.at(i, i);

    std::vector<int> order(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return vals[static_cast<size_t>(x)] > vals[static_cast<size_t>(y)]; });
    std::vector<double> sv(static_cast<size_t>(d));
    Matd svecs(d, d);
    for (int c = 0; c < d; ++c) {
        sv[static_cast<size_t>(c)] = vals[static_cast<size_t>(order[static_cast<size_t>(c)])];
        for (int i = 0; i < d; ++i) svecs.at(i, c) = vecs.at(i, order[static_cast<size_t>(c)]);
    }
    vals = std::move(sv);
    vecs = std::move(svecs);
}

// components come out with the largest-magnitude coordinate positive
inline void fix_sign(Matd& comps) {
    for (int c = 0; c < comps.cols; ++c) {
        int arg = 0;
        double mx = -1;
        for (int i = 0; i < comps.rows; ++i)
            if (std::abs(comps.at(i, c)) > mx) {
                mx = std::abs(comps.at(i, c));
                arg = i;
            }
        if (comps.at(arg, c) < 0)
            for (int i = 0; i < comps.rows; ++i) comps.at(i, c) = -comps.at(i, c);
    }
}

// returns N x out projections of mean-centered `pts`
inline Matd pca_project(const Matd& x_centered, int out_dims, bool use_gram) {
    const int n = x_centered.rows, d = x_centered.cols;
    const double denom = n > 1 ? n - 1 : 1;
    Matd comps(d, out_dims);
    std::vector<double> vals;
    if (!use_gram) {
        Matd cov = Matd::zeros(d, d);
        for (int i = 0; i < n; ++i)
            for (int a = 0; a < d; ++a) {
                double xa = x_centered.at(i, a);
                if (xa == 0) continue;
                for (int b = 0; b < d; ++b) cov.at(a, b) += xa * x_centered.at(i, b);
            }
        for (auto& v : cov.d) v /= denom;
        Matd vecs;
        eigh(cov, vals, vecs);
        for (int c = 0; c < out_dims; ++c)
            for (int i = 0; i < d; ++i) comps.at(i, c) = vecs.at(i, c);
    } else {
        Matd gram = Matd::zeros(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int a = 0; a < d; ++a) s += x_centered.at(i, a) * x_centered.at(j, a);
                gram.at(i, j) = s / denom;
            }
        Matd u;
        eigh(gram, vals, u);
        for (int c = 0; c < out_dims; ++c) {
            double norm = 0;
            std::vector<double> comp(static_cast<size_t>(d), 0);
            for (int i = 0; i < n; ++i) {
                double ui = u.at(i, c);
                for (int a = 0; a < d; ++a) comp[static_cast<size_t>(a)] += ui * x_centered.at(i, a);
            }
            for (double v : comp) norm += v * v;
            norm = std::sqrt(norm);
            for (int a = 0; a < d; ++a)
                comps.at(a, c) = norm > 1e-12 ? comp[static_cast<size_t>(a)] / norm : 0.0;
        }
    }
    fix_sign(comps);
    Matd out(n, out_dims);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < out_dims; ++c) {
            double s = 0;
            for (int a = 0; a < d; ++a) s += x_centered.at(i, a) * comps.at(a, c);
            out.at(i, c) = s;
        }
    return out;
}

inline Matd center(const Mat& pts) {
    Matd x(pts.rows, pts.cols);
    std::vector<double> mean(static_cast<size_t>(pts.cols), 0);
    for (int i = 0; i < pts.rows; ++i)
        for (int j = 0; j < pts.cols; ++j) mean[static_cast<size_t>(j)] += static_cast<double>(pts.at(i, j));
    for (auto& m : mean) m /= pts.rows;
    for (int i = 0; i < pts.rows; ++i)
        for (int j = 0; j < pts.cols; ++j)
            x.at(i, j) = static_cast<double>(pts.at(i, j)) - mean[static_cast<size_t>(j)];
    return x;
}

}  // namespace cluster_detail

inline Mat pca(const Mat& pts, int out_dims) {
    if (out_dims < 1) throw ConfigError("pca: out_dims must be >= 1");
    if (out_dims > pts.cols) throw ConfigError("pca: out_dims exceeds the data dimension");
    if (pts.rows < 1) throw ConfigError("pca: empty input");
    Matd x = cluster_detail::center(pts);
    Matd y = cluster_detail::pca_project(x, out_dims, pts.cols > pts.rows);
    Mat out(y.rows, y.cols);
    for (size_t i = 0; i < y.d.size(); ++i) out.d[i] = static_cast<float>(y.d[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Exact t-SNE

struct TsneConfig {
    int out_dims = 3;
    double perplexity = 10;
    int iters = 2000;
    double lr = 200;
    double early_exaggeration = 12;
    int exaggeration_iters = 250;
    double momentum_start = 0.5;
    double momentum_late = 0.8;
    int momentum_switch = 250;
    int log_every = 50;  // observer cadence
};

namespace cluster_detail {

// row-conditional affinities; every row's perplexity hits the target
inline Matd tsne_conditional_p(const Mat& pts, double perplexity) {
    const int n = pts.rows;
    Matd d2(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            d2.at(i, j) = i == j ? 0.0 : dist2(pts.row(i), pts.row(j), pts.cols);

    Matd p = Matd::zeros(n, n);
    const double target_h = std::log(perplexity);
    for (int i = 0; i < n; ++i) {
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 200; ++it) {
            double zsum = 0, dsum = 0;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                double w = std::exp(-beta * d2.at(i, j));
                zsum += w;
                dsum += w * d2.at(i, j);
            }
            double h = zsum > 0 ? std::log(zsum) + beta * dsum / zsum : 0.0;
            double diff = h - target_h;
            if (std::abs(diff) < 1e-7) break;
            if (diff > 0) {  // entropy too high -> sharpen
                lo = beta;
                beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
            } else {
                hi = beta;
                beta = (beta + lo) / 2;
            }
        }
        double zsum = 0;
        for (int j = 0; j < n; ++j)
            if (j != i) zsum += std::exp(-beta * d2.at(i, j));
        for (int j = 0; j < n; ++j)
            if (j != i && zsum > 0) p.at(i, j) = std::exp(-beta * d2.at(i, j)) / zsum;
    }
    return p;
}

inline Matd tsne_joint_p(const Mat& pts, double perplexity) {
    Matd c = tsne_conditional_p(pts, perplexity);
    const int n = c.rows;
    Matd p(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) p.at(i, j) = (c.at(i, j) + c.at(j, i)) / (2.0 * n);
    return p;
}

}  // namespace cluster_detail

// observer(iter, current embedding, KL(P||Q)) fires every log_every iterations
// and once at the end
inline Mat tsne(const Mat& pts, const TsneConfig& cfg = {},
                const std::function<void(int, const Matd&, double)>& observer = nullptr) {
    const int n = pts.rows;
    int min_n = static_cast<int>(3 * cfg.perplexity) + 1;
    if (n < min_n)
        throw ConfigError("tsne: need at least " + std::to_string(min_n) + " points for perplexity " +
                          format_double(cfg.perplexity, 6) + ", got " + std::to_string(n));
    if (cfg.out_dims < 1) throw ConfigError("tsne: out_dims must be >= 1");

    Matd p = cluster_detail::tsne_joint_p(pts, cfg.perplexity);

    // PCA init, first column rescaled to std 1e-4 (standard practice)
    int init_dims = std::min(cfg.out_dims, pts.cols);
    Matd y0 = cluster_detail::pca_project(cluster_detail::center(pts), init_dims, pts.cols > pts.rows);
    Matd y = Matd::zeros(n, cfg.out_dims);
    double var = 0;
    for (int i = 0; i < n; ++i) var += y0.at(i, 0) * y0.at(i, 0);
    double std0 = std::sqrt(var / n);
    double scale = std0 > 1e-30 ? 1e-4 / std0 : 1.0;
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < init_dims; ++c) y.at(i, c) = y0.at(i, c) * scale;

    Matd inc = Matd::zeros(n, cfg.out_dims);
    Matd gains = Matd::full(n, cfg.out_dims, 1.0);
    Matd num(n, n), grad(n, cfg.out_dims);

    auto kl_divergence = [&](const Matd& q, double zsum) {
        double kl = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                double pij = p.at(i, j);
                if (pij <= 0) continue;
                double qij = std::max(q.at(i, j) / zsum, 1e-12);
                kl += pij * std::log(pij / qij);
            }
        return kl;
    };

    for (int iter = 0; iter < cfg.iters; ++iter) {
        double exag = iter < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
        double momentum = iter < cfg.momentum_switch ? cfg.momentum_start : cfg.momentum_late;

        double zsum = 0;
        for (int i = 0; i < n; ++i) {
            num.at(i, i) = 0;
            for (int j = i + 1; j < n; ++j) {
                double s = 0;
                for (int c = 0; c < cfg.out_dims; ++c) {
                    double diff = y.at(i, c) - y.at(j, c);
                    s += diff * diff;
                }
                double w = 1.0 / (1.0 + s);
                num.at(i, j) = w;
                num.at(j, i) = w;
                zsum += 2 * w;
            }
        }

        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < cfg.out_dims; ++c) grad.at(i, c) = 0;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                double w = num.at(i, j);
                double coeff = 4.0 * (exag * p.at(i, j) - w / zsum) * w;
                for (int c = 0; c < cfg.out_dims; ++c)
                    grad.at(i, c) += coeff * (y.at(i, c) - y.at(j, c));
            }
        }

        for (int i = 0; i < n; ++i)
            for (int c = 0; c < cfg.out_dims; ++c) {
                double g = grad.at(i, c);
                bool same_dir = (g > 0) == (inc.at(i, c) > 0);
                double gain = same_dir ? gains.at(i, c) * 0.8 : gains.at(i, c) + 0.2;
                gains.at(i, c) = std::max(gain, 0.01);
                inc.at(i, c) = momentum * inc.at(i, c) - cfg.lr * gains.at(i, c) * g;
                y.at(i, c) += inc.at(i, c);
            }
        // recenter
        for (int c = 0; c < cfg.out_dims; ++c) {
            double m = 0;
            for (int i = 0; i < n; ++i) m += y.at(i, c);
            m /= n;
            for (int i = 0; i < n; ++i) y.at(i, c) -= m;
        }
        for (const auto& v : y.d)
            if (!std::isfinite(v)) throw NumericError("tsne: embedding diverged at iteration " +
                                                       std::to_string(iter));

        if (observer && ((iter + 1) % cfg.log_every == 0 || iter + 1 == cfg.iters))
            observer(iter + 1, y, kl_divergence(num, zsum));
    }

    Mat out(n, cfg.out_dims);
    for (size_t i = 0; i < y.d.size(); ++i) out.d[i] = static_cast<float>(y.d[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Analysis entry points

enum class LabelType { kTask, kDistribution, kDistributionMapping };
enum class Reduction { kNone, kTsne };
enum class ReductionPolicy { kNone, kTsne, kBoth };

inline const char* label_type_name(LabelType t) {
    switch (t) {
        case LabelType::kTask: return "task";
        case LabelType::kDistribution: return "distribution";
        case LabelType::kDistributionMapping: return "distribution_mapping";
    }
    return "?";
}

inline const char* reduction_name(Reduction r) {
    return r == Reduction::kNone ? "none" : "tsne";
}

struct ClusterScores {
    int epoch = -1;
    int layer = -1;
    LabelType label_type = LabelType::kTask;
    std::string split;
    Reduction reduction = Reduction::kNone;
    double f1 = 0, ari = 0, ami = 0;
};

// dense ids for the chosen label type; distribution_mapping pairs get their
// own id per distinct (dist, mapping)
inline std::vector<int> labels_of(const std::vector<PointLabel>& labels, LabelType t) {
    std::vector<int> out;
    out.reserve(labels.size());
    if (t == LabelType::kDistributionMapping) {
        std::map<std::pair<int, int>, int> ids;
        for (const auto& l : labels) {
            auto key = std::make_pair(l.dist_id, l.mapping_id);
            auto it = ids.find(key);
            if (it == ids.end()) it = ids.insert({key, static_cast<int>(ids.size())}).first;
            out.push_back(it->second);
        }
    } else {
        for (const auto& l : labels)
            out.push_back(t == LabelType::kTask ? l.task_id : l.dist_id);
    }
    return out;
}

struct AnalyzeOptions {
    int kmeans_restarts = 10;
    int kmeans_iters = 300;
    TsneConfig tsne;
    uint64_t seed = 0;
};

inline ClusterScores analyze(const Mat& pts, const std::vector<int>& labels, Reduction reduction,
                             const AnalyzeOptions& opt = {}) {
    if (static_cast<int>(labels.size()) != pts.rows)
        throw ConfigError("analyze: label count does not match point count");
    std::set<int> distinct(labels.begin(), labels.end());
    if (distinct.size() < 2) throw ConfigError("analyze: need at least 2 distinct label values");
    int k = static_cast<int>(distinct.size());

    Mat reduced = reduction == Reduction::kTsne ? tsne(pts, opt.tsne) : pts;
    ClusterAssignment a = kmeans(reduced, k, opt.kmeans_restarts, opt.kmeans_iters, opt.seed);

    ClusterScores s;
    s.reduction = reduction;
    s.f1 = pair_f1(a.cluster, labels);
    s.ari = ari(a.cluster, labels);
    s.ami = ami(a.cluster, labels);
    return s;
}

// the "apply t-SNE if it helps" policy: evaluate both paths, keep the better F1
inline ClusterScores analyze_best(const Mat& pts, const std::vector<int>& labels,
                                  ReductionPolicy policy, const AnalyzeOptions& opt = {}) {
    if (policy == ReductionPolicy::kNone) return analyze(pts, labels, Reduction::kNone, opt);
    if (policy == ReductionPolicy::kTsne) return analyze(pts, labels, Reduction::kTsne, opt);
    ClusterScores raw = analyze(pts, labels, Reduction::kNone, opt);
    ClusterScores red = analyze(pts, labels, Reduction::kTsne, opt);
    return red.f1 > raw.f1 ? red : raw;
}

// ---------------------------------------------------------------------------
// Sweep over dumps

struct SweepOptions {
    std::vector<LabelType> label_types{LabelType::kTask, LabelType::kDistribution,
                                       LabelType::kDistributionMapping};
    std::vector<std::string> splits{"train_subset", "validation"};
    ReductionPolicy policy = ReductionPolicy::kNone;
    int kmeans_restarts = 10;
    int kmeans_iters = 300;
    TsneConfig tsne;
    uint64_t seed = 0;
    int threads = 1;
};

inline std::vector<ClusterScores> sweep_dumps(const std::vector<ActivationDump>& dumps,
                                              const SweepOptions& opt = {}) {
    struct Cell {
        int dump_idx, layer;
        LabelType label;
        std::string split;
    };
    std::vector<Cell> cells;
    for (size_t di = 0; di < dumps.size(); ++di)
        for (int l = 0; l < static_cast<int>(dumps[di].layers.size()); ++l)
            for (LabelType t : opt.label_types)
                for (const auto& sp : opt.splits) cells.push_back(Cell{static_cast<int>(di), l, t, sp});

    std::vector<ClusterScores> out(cells.size());
    parallel_for(cells.size(), opt.threads, [&](size_t ci) {
        const Cell& c = cells[ci];
        const ActivationDump& dump = dumps[static_cast<size_t>(c.dump_idx)];
        std::vector<int> rows;
        for (size_t i = 0; i < dump.labels.size(); ++i)
            if (dump.labels[i].split == c.split) rows.push_back(static_cast<int>(i));
        Mat pts(static_cast<int>(rows.size()), dump.layers[0].cols);
        std::vector<PointLabel> sub;
        for (size_t r = 0; r < rows.size(); ++r) {
            const float* src = dump.layers[static_cast<size_t>(c.layer)].row(rows[r]);
            std::copy(src, src + pts.cols, pts.row(static_cast<int>(r)));
            sub.push_back(dump.labels[static_cast<size_t>(rows[r])]);
        }
        AnalyzeOptions ao;
        ao.kmeans_restarts = opt.kmeans_restarts;
        ao.kmeans_iters = opt.kmeans_iters;
        ao.tsne = opt.tsne;
        ao.seed = derive_seed(opt.seed, "cell-e" + std::to_string(dump.epoch) + "-l" +
                                            std::to_string(c.layer) + "-t" +
                                            std::string(label_type_name(c.label)) + "-s" + c.split);
        ClusterScores s = analyze_best(pts, labels_of(sub, c.label), opt.policy, ao);
        s.epoch = dump.epoch;
        s.layer = c.layer;
        s.label_type = c.label;
        s.split = c.split;
        out[ci] = s;
    });
    return out;
}

inline std::string scores_to_csv(const std::vector<ClusterScores>& rows) {
    std::string csv = "epoch,layer,label_type,split,reduction,f1,ari,ami\n";
    for (const auto& r : rows) {
        csv += std::to_string(r.epoch) + "," + std::to_string(r.layer) + "," +
               label_type_name(r.label_type) + "," + r.split + "," + reduction_name(r.reduction) +
               "," + format_double(r.f1) + "," + format_double(r.ari) + "," + format_double(r.ami) +
               "\n";
    }
    return csv;
}

}  // namespace iflab
