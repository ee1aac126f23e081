#pragma once

// Hidden-state extraction. The feature vector for an instance is the model's
// activation at its last prompt token (the input symbol when one is present),
// taken from the token+position embedding (layer 0) or a block output.

#include <string>
#include <utility>
#include <vector>

#include "cluster.hpp"
#include "model.hpp"
#include "synth.hpp"

namespace iflab {

// One matrix per layer (n_layers + 1 including the embedding), row i holding
// instance i's feature at the chosen layer.
inline std::vector<Mat> hidden_features_all_layers(const CausalLM& model,
                                                   const std::vector<Instance>& xs,
                                                   int chunk = 256) {
    const int n_layers = model.config().n_layers;
    const int d = model.config().d_model;
    std::vector<Mat> feats(static_cast<size_t>(n_layers) + 1,
                           Mat(static_cast<int>(xs.size()), d));
    for (size_t base = 0; base < xs.size(); base += static_cast<size_t>(chunk)) {
        size_t end = std::min(xs.size(), base + static_cast<size_t>(chunk));
        std::vector<std::vector<int>> prompts;
        for (size_t i = base; i < end; ++i) prompts.push_back(xs[i].prompt());
        PackedBatch b = PackedBatch::pack(prompts);
        std::vector<Mat> trace;
        model.eval_logits(b, &trace);
        for (size_t i = base; i < end; ++i) {
            int row = b.offsets[i - base] + xs[i].last_input_pos();
            for (size_t l = 0; l < trace.size(); ++l)
                std::copy(trace[l].row(row), trace[l].row(row) + d,
                          feats[l].row(static_cast<int>(i)));
        }
    }
    return feats;
}

inline Mat hidden_features(const CausalLM& model, const std::vector<Instance>& xs, int layer,
                           int chunk = 256) {
    if (layer < 0 || layer > model.config().n_layers)
        throw ConfigError("features: layer out of range");
    return hidden_features_all_layers(model, xs, chunk)[static_cast<size_t>(layer)];
}

// Labeled dump over named instance groups, rows in the given group order and
// dataset order within each group.
inline ActivationDump collect_activation_dump(
    const CausalLM& model, const Dataset& ds,
    const std::vector<std::pair<std::string, const std::vector<Instance>*>>& groups,
    const std::string& source, int epoch, int chunk = 256) {
    std::vector<Instance> all;
    ActivationDump dump;
    dump.source = source;
    dump.epoch = epoch;
    for (const auto& [split, xs] : groups)
        for (const Instance& x : *xs) {
            all.push_back(x);
            bool hard = x.task_id >= 0 && x.task_id < static_cast<int>(ds.tasks.size()) &&
                        ds.task(x.task_id).is_hard;
            dump.labels.push_back(PointLabel{x.task_id, x.dist_id, x.mapping_id, hard, split});
        }
    if (all.empty()) throw ConfigError("features: no instances to dump");
    dump.layers = hidden_features_all_layers(model, all, chunk);
    return dump;
}

}  // namespace iflab
