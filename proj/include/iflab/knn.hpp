#pragma once

// K-nearest-neighbor probing of hidden states: neighborhood task purity and
// majority-vote output prediction accuracy, train rows vs query rows.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace iflab {

namespace knn_detail {

// indices of the k nearest train rows, ordered by (distance, train index)
inline std::vector<int> nearest(const Mat& train, const float* q, int k) {
    std::vector<std::pair<double, int>> dist;
    dist.reserve(static_cast<size_t>(train.rows));
    for (int i = 0; i < train.rows; ++i) {
        double s = 0;
        const float* r = train.row(i);
        for (int j = 0; j < train.cols; ++j) {
            double diff = static_cast<double>(q[j]) - static_cast<double>(r[j]);
            s += diff * diff;
        }
        dist.push_back({s, i});
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());  // pair order breaks ties by index
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(dist[static_cast<size_t>(i)].second);
    return out;
}

inline void check_inputs(const Mat& train, size_t train_labels, const Mat& queries,
                         size_t query_labels, int k) {
    if (train.rows < 1 || queries.rows < 1) throw ConfigError("knn: empty point set");
    if (train.cols != queries.cols) throw DimensionError("knn: train/query dimension mismatch");
    if (static_cast<int>(train_labels) != train.rows || static_cast<int>(query_labels) != queries.rows)
        throw ConfigError("knn: label count does not match point count");
    if (k < 1) throw ConfigError("knn: k must be >= 1");
    if (k > train.rows) throw ConfigError("knn: k exceeds the number of train points");
}

}  // namespace knn_detail

// majority vote over the neighbors' values; a vote tie goes to the value of
// the nearest neighbor holding one of the tied values
inline int knn_predict(const Mat& train, const std::vector<int>& train_values, const float* query,
                       int k) {
    if (train.rows < 1) throw ConfigError("knn: empty point set");
    if (static_cast<int>(train_values.size()) != train.rows)
        throw ConfigError("knn: label count does not match point count");
    if (k < 1) throw ConfigError("knn: k must be >= 1");
    if (k > train.rows) throw ConfigError("knn: k exceeds the number of train points");
    std::vector<int> nb = knn_detail::nearest(train, query, k);
    std::map<int, int> votes;
    for (int i : nb) votes[train_values[static_cast<size_t>(i)]] += 1;
    int top = 0;
    for (const auto& [v, c] : votes) top = std::max(top, c);
    for (int i : nb)
        if (votes[train_values[static_cast<size_t>(i)]] == top) return train_values[static_cast<size_t>(i)];
    return train_values[static_cast<size_t>(nb[0])];  // unreachable
}

// mean fraction of each query's k nearest train neighbors that share the
// query's task id
inline double knn_purity(const Mat& train, const std::vector<int>& train_tasks, const Mat& queries,
                         const std::vector<int>& query_tasks, int k = 10) {
    knn_detail::check_inputs(train, train_tasks.size(), queries, query_tasks.size(), k);
    double total = 0;
    for (int qi = 0; qi < queries.rows; ++qi) {
        std::vector<int> nb = knn_detail::nearest(train, queries.row(qi), k);
        int share = 0;
        for (int i : nb)
            if (train_tasks[static_cast<size_t>(i)] == query_tasks[static_cast<size_t>(qi)]) ++share;
        total += static_cast<double>(share) / k;
    }
    return total / queries.rows;
}

// fraction of queries whose majority-vote predicted value matches their own
inline double knn_accuracy(const Mat& train, const std::vector<int>& train_values,
                           const Mat& queries, const std::vector<int>& query_values, int k = 10) {
    knn_detail::check_inputs(train, train_values.size(), queries, query_values.size(), k);
    int hits = 0;
    for (int qi = 0; qi < queries.rows; ++qi)
        if (knn_predict(train, train_values, queries.row(qi), k) == query_values[static_cast<size_t>(qi)])
            ++hits;
    return static_cast<double>(hits) / queries.rows;
}

struct KnnScores {
    int epoch = -1;
    int layer = -1;
    int k = 10;
    double purity = 0;
    double accuracy = 0;
};

struct KnnInputs {
    Mat train, queries;  // one layer each
    std::vector<int> train_tasks, query_tasks;
    std::vector<int> train_outputs, query_outputs;
};

inline KnnScores knn_scores(const KnnInputs& in, int k = 10) {
    KnnScores s;
    s.k = k;
    s.purity = knn_purity(in.train, in.train_tasks, in.queries, in.query_tasks, k);
    s.accuracy = knn_accuracy(in.train, in.train_outputs, in.queries, in.query_outputs, k);
    return s;
}

inline std::string knn_csv(const std::vector<KnnScores>& rows) {
    std::string csv = "epoch,layer,k,purity,knn_accuracy\n";
    for (const auto& r : rows)
        csv += std::to_string(r.epoch) + "," + std::to_string(r.layer) + "," + std::to_string(r.k) +
               "," + format_double(r.purity) + "," + format_double(r.accuracy) + "\n";
    return csv;
}

}  // namespace iflab
