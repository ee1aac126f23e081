#pragma once

// JSON (de)serialization for the generation / model / training configs.
// Parsing is strict: unknown keys are errors, and dumps write every field so
// a saved config records all defaults explicitly.

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "common.hpp"
#include "experiments.hpp"
#include "model.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace iflab {

using Json = nlohmann::json;

namespace cfg_detail {

class StrictObject {
public:
    StrictObject(const Json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;  // absent keeps the default
        try {
            out = it->get<T>();
        } catch (const Json::exception&) {
            throw ConfigError(ctx_ + ": bad value for \"" + key + "\"");
        }
    }

    const Json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError(ctx_ + ": unknown key \"" + key + "\"");
    }

private:
    const Json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

}  // namespace cfg_detail

inline Json load_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path.string());
    try {
        return Json::parse(f);
    } catch (const Json::exception& e) {
        throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

// ---- generation config ----

inline Json data_config_json(const DataConfig& c) {
    return Json{{"seed", c.seed},
                {"n_tasks", c.n_tasks},
                {"n_instruction_symbols", c.n_instruction_symbols},
                {"n_markers", c.n_markers},
                {"n_task_symbols", c.n_task_symbols},
                {"n_mappings", c.n_mappings},
                {"min_dists", c.min_dists},
                {"max_dists", c.max_dists},
                {"train_instructions_per_dist", c.train_instructions_per_dist},
                {"val_instructions_per_dist", c.val_instructions_per_dist},
                {"min_regex_nodes", c.min_regex_nodes},
                {"max_regex_nodes", c.max_regex_nodes},
                {"min_regex_args", c.min_regex_args},
                {"max_regex_args", c.max_regex_args},
                {"max_repeat", c.max_repeat},
                {"n_subset_tasks", c.n_subset_tasks},
                {"n_hard_tasks", c.n_hard_tasks},
                {"hard_dists_per_task", c.hard_dists_per_task},
                {"hard_instructions_per_dist", c.hard_instructions_per_dist},
                {"train_total", c.train_total},
                {"val_total", c.val_total},
                {"train_subset_total", c.train_subset_total},
                {"n_aligned_pairs", c.n_aligned_pairs},
                {"val_all_tasks", c.val_all_tasks}};
}

inline DataConfig parse_data_config(const Json& j, const std::string& ctx = "data config") {
    cfg_detail::StrictObject o(j, ctx);
    DataConfig c;
    o.get("seed", c.seed);
    o.get("n_tasks", c.n_tasks);
    o.get("n_instruction_symbols", c.n_instruction_symbols);
    o.get("n_markers", c.n_markers);
    o.get("n_task_symbols", c.n_task_symbols);
    o.get("n_mappings", c.n_mappings);
    o.get("min_dists", c.min_dists);
    o.get("max_dists", c.max_dists);
    o.get("train_instructions_per_dist", c.train_instructions_per_dist);
    o.get("val_instructions_per_dist", c.val_instructions_per_dist);
    o.get("min_regex_nodes", c.min_regex_nodes);
    o.get("max_regex_nodes", c.max_regex_nodes);
    o.get("min_regex_args", c.min_regex_args);
    o.get("max_regex_args", c.max_regex_args);
    o.get("max_repeat", c.max_repeat);
    o.get("n_subset_tasks", c.n_subset_tasks);
    o.get("n_hard_tasks", c.n_hard_tasks);
    o.get("hard_dists_per_task", c.hard_dists_per_task);
    o.get("hard_instructions_per_dist", c.hard_instructions_per_dist);
    o.get("train_total", c.train_total);
    o.get("val_total", c.val_total);
    o.get("train_subset_total", c.train_subset_total);
    o.get("n_aligned_pairs", c.n_aligned_pairs);
    o.get("val_all_tasks", c.val_all_tasks);
    o.finish();
    return c;
}

// ---- model config ----

inline Json model_config_json(const ModelConfig& c) {
    return Json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},             {"max_len", c.max_len},
                {"dropout", c.dropout},       {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig parse_model_config(const Json& j, const std::string& ctx = "model config") {
    cfg_detail::StrictObject o(j, ctx);
    ModelConfig c;
    o.get("vocab_size", c.vocab_size);
    o.get("d_model", c.d_model);
    o.get("n_layers", c.n_layers);
    o.get("n_heads", c.n_heads);
    o.get("d_ff", c.d_ff);
    o.get("max_len", c.max_len);
    o.get("dropout", c.dropout);
    o.get("layer_norm_eps", c.layer_norm_eps);
    o.finish();
    return c;
}

// ---- train config ----

inline Json train_config_json(const TrainConfig& c) {
    return Json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"lr_floor_ratio", c.lr_floor_ratio},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"weight_decay", c.weight_decay},
                {"grad_clip", c.grad_clip},
                {"snapshot_stride", c.snapshot_stride},
                {"trainable", c.trainable}};
}

inline TrainConfig parse_train_config(const Json& j, const std::string& ctx = "train config") {
    cfg_detail::StrictObject o(j, ctx);
    TrainConfig c;
    o.get("epochs", c.epochs);
    o.get("batch_size", c.batch_size);
    o.get("lr", c.lr);
    o.get("lr_floor_ratio", c.lr_floor_ratio);
    o.get("beta1", c.beta1);
    o.get("beta2", c.beta2);
    o.get("adam_eps", c.adam_eps);
    o.get("weight_decay", c.weight_decay);
    o.get("grad_clip", c.grad_clip);
    o.get("snapshot_stride", c.snapshot_stride);
    o.get("trainable", c.trainable);
    o.finish();
    return c;
}

// ---- composite command configs ----

struct TrainBundleConfig {
    ModelConfig model;
    TrainConfig train;
};

inline Json train_bundle_json(const TrainBundleConfig& c) {
    return Json{{"model", model_config_json(c.model)}, {"train", train_config_json(c.train)}};
}

inline TrainBundleConfig parse_train_bundle(const Json& j) {
    cfg_detail::StrictObject o(j, "train config");
    TrainBundleConfig c;
    if (const Json* m = o.sub("model")) c.model = parse_model_config(*m);
    if (const Json* t = o.sub("train")) c.train = parse_train_config(*t);
    o.finish();
    return c;
}

inline Json pretrain_study_json(const PretrainStudyConfig& c) {
    return Json{{"model", model_config_json(c.model)},
                {"pretrain", train_config_json(c.pretrain)},
                {"finetune", train_config_json(c.finetune)},
                {"threshold", c.threshold}};
}

inline PretrainStudyConfig parse_pretrain_study(const Json& j) {
    cfg_detail::StrictObject o(j, "pretrain config");
    PretrainStudyConfig c;
    if (const Json* m = o.sub("model")) c.model = parse_model_config(*m);
    if (const Json* p = o.sub("pretrain")) c.pretrain = parse_train_config(*p, "pretrain config");
    if (const Json* f = o.sub("finetune")) c.finetune = parse_train_config(*f, "finetune config");
    o.get("threshold", c.threshold);
    o.finish();
    return c;
}

inline Json alignment_config_json(const AlignmentConfig& c) {
    Json pairs = Json::array();
    for (const auto& p : c.pairs) pairs.push_back(Json{{"source", p.source}, {"target", p.target}});
    return Json{{"pairs", pairs},
                {"finetune", train_config_json(c.finetune)},
                {"switch_epochs", c.switch_epochs},
                {"switch_lr", c.switch_lr}};
}

// `pairs` may be omitted; the alignment command then derives them from the
// dataset's generated aligned pairs.
inline AlignmentConfig parse_alignment_config(const Json& j) {
    cfg_detail::StrictObject o(j, "alignment config");
    AlignmentConfig c;
    if (const Json* ps = o.sub("pairs")) {
        if (!ps->is_array()) throw ConfigError("alignment config: \"pairs\" must be an array");
        for (const Json& pj : *ps) {
            cfg_detail::StrictObject po(pj, "alignment pair");
            AlignmentPair p;
            po.get("source", p.source);
            po.get("target", p.target);
            po.finish();
            c.pairs.push_back(p);
        }
    }
    if (const Json* f = o.sub("finetune")) c.finetune = parse_train_config(*f, "finetune config");
    o.get("switch_epochs", c.switch_epochs);
    o.get("switch_lr", c.switch_lr);
    o.finish();
    return c;
}

}  // namespace iflab
