#pragma once

// The two application studies. (A) Pretraining comparison: task-ID
// prediction pretraining vs instruction-only causal LM pretraining vs no
// pretraining, measured by fine-tuning epochs to a validation-accuracy
// threshold. (B) Alignment: retargeting source tasks to healthier partner
// tasks by direct fine-tuning, head-only fine-tuning, or switch-network
// routing between the original head and a retrained head.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "features.hpp"
#include "model.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace iflab {

// ---------------------------------------------------------------------------
// Study A: pretraining strategies

enum class PretrainArm { kTaskId, kInstruction, kNone };

inline const char* pretrain_arm_name(PretrainArm a) {
    switch (a) {
        case PretrainArm::kTaskId: return "task_id";
        case PretrainArm::kInstruction: return "instruction";
        case PretrainArm::kNone: return "none";
    }
    return "?";
}

// [instruction; trigger; task-ID token], one sequence per distinct
// (task, instruction) pair in first-seen order. Mappings are not used.
inline std::vector<Instance> taskid_pretrain_instances(const Dataset& ds,
                                                       const std::vector<Instance>& src) {
    std::set<std::pair<int, std::vector<int>>> seen;
    std::vector<Instance> out;
    for (const Instance& x : src) {
        if (!seen.insert({x.task_id, x.instruction}).second) continue;
        Instance p;
        p.task_id = x.task_id;
        p.dist_id = x.dist_id;
        p.mapping_id = -1;
        p.instruction = x.instruction;
        p.input_symbol = ds.vocab.trigger();
        p.output_symbol = ds.vocab.task_token(x.task_id);
        out.push_back(std::move(p));
    }
    return out;
}

// bare instructions, one per distinct instruction in first-seen order
inline std::vector<Instance> instruction_pretrain_instances(const std::vector<Instance>& src) {
    std::set<std::vector<int>> seen;
    std::vector<Instance> out;
    for (const Instance& x : src) {
        if (!seen.insert(x.instruction).second) continue;
        Instance p;
        p.task_id = x.task_id;
        p.dist_id = x.dist_id;
        p.mapping_id = -1;
        p.instruction = x.instruction;
        out.push_back(std::move(p));
    }
    return out;
}

namespace exp_detail {

inline Dataset split_view(const Dataset& ds, std::vector<Instance> train,
                          std::vector<Instance> validation, std::vector<Instance> subset = {}) {
    Dataset v;
    v.cfg = ds.cfg;
    v.vocab = ds.vocab;
    v.tasks = ds.tasks;
    v.dists = ds.dists;
    v.train = std::move(train);
    v.validation = std::move(validation);
    v.train_subset = std::move(subset);
    return v;
}

}  // namespace exp_detail

// Trains and loads the best epoch's weights into `model`.
inline TrainResult train_to_best(CausalLM& model, const Dataset& data, const TrainConfig& cfg,
                                 uint64_t seed,
                                 const std::function<double(const EpochMetrics&)>& selector = nullptr,
                                 const std::function<void(const EpochMetrics&)>& on_epoch = nullptr) {
    Trainer tr(model, data, cfg, seed);
    if (selector) tr.set_selector(selector);
    if (on_epoch) tr.on_epoch = on_epoch;
    std::vector<Mat> best;
    tr.on_best = [&](int, CausalLM& m) {
        for (auto* p : m.params()) best.push_back(p->value);
    };
    TrainResult r = tr.train();
    auto params = model.params();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    return r;
}

// CLM over [instruction; trigger; task-ID]; best epoch = highest validation
// task-ID prediction accuracy.
inline TrainResult pretrain_taskid(CausalLM& model, const Dataset& ds, const TrainConfig& cfg,
                                   uint64_t seed) {
    Dataset view = exp_detail::split_view(ds, taskid_pretrain_instances(ds, ds.train),
                                          taskid_pretrain_instances(ds, ds.validation));
    return train_to_best(model, view, cfg, seed);
}

// CLM over bare instructions; best epoch = lowest validation CLM loss.
inline TrainResult pretrain_instructions(CausalLM& model, const Dataset& ds,
                                         const TrainConfig& cfg, uint64_t seed) {
    Dataset view = exp_detail::split_view(ds, instruction_pretrain_instances(ds.train),
                                          instruction_pretrain_instances(ds.validation));
    return train_to_best(model, view, cfg, seed,
                         [](const EpochMetrics& m) { return -m.val_loss; });
}

inline int epochs_to_threshold(const std::vector<EpochMetrics>& history, double threshold) {
    for (const auto& m : history)
        if (m.val_acc >= threshold) return m.epoch;
    return -1;  // never reached
}

struct PretrainStudyConfig {
    ModelConfig model;     // the study default is d_model = 256
    TrainConfig pretrain;
    TrainConfig finetune;
    double threshold = 0.9;
};

struct PretrainArmResult {
    PretrainArm arm = PretrainArm::kNone;
    TrainResult pretrain;  // empty history for the none arm
    TrainResult finetune;
    int epochs_to_threshold = -1;
};

// All arms share the model init seed, the fine-tuning data, and the
// fine-tuning schedule; they differ only in their starting weights.
inline std::vector<PretrainArmResult> compare_pretraining(const Dataset& ds,
                                                          const PretrainStudyConfig& cfg,
                                                          uint64_t seed) {
    std::vector<PretrainArmResult> out;
    for (PretrainArm arm : {PretrainArm::kTaskId, PretrainArm::kInstruction, PretrainArm::kNone}) {
        CausalLM model(cfg.model, derive_seed(seed, "init"));
        PretrainArmResult r;
        r.arm = arm;
        if (arm == PretrainArm::kTaskId)
            r.pretrain = pretrain_taskid(model, ds, cfg.pretrain, derive_seed(seed, "pretrain"));
        else if (arm == PretrainArm::kInstruction)
            r.pretrain = pretrain_instructions(model, ds, cfg.pretrain, derive_seed(seed, "pretrain"));
        r.finetune = train_to_best(model, ds, cfg.finetune, derive_seed(seed, "finetune"));
        r.epochs_to_threshold = epochs_to_threshold(r.finetune.history, cfg.threshold);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::string pretrain_curves_csv(const std::vector<PretrainArmResult>& arms) {
    std::string csv = "arm,phase,epoch,loss,val_loss,val_acc,lr\n";
    for (const auto& a : arms) {
        auto emit = [&](const char* phase, const std::vector<EpochMetrics>& h) {
            for (const auto& m : h)
                csv += std::string(pretrain_arm_name(a.arm)) + "," + phase + "," +
                       std::to_string(m.epoch) + "," + format_double(m.loss) + "," +
                       format_double(m.val_loss) + "," + format_double(m.val_acc) + "," +
                       format_double(m.lr) + "\n";
        };
        emit("pretrain", a.pretrain.history);
        emit("finetune", a.finetune.history);
    }
    return csv;
}

inline std::string pretrain_summary_csv(const std::vector<PretrainArmResult>& arms,
                                        double threshold) {
    std::string csv = "arm,threshold,epochs_to_threshold,finetune_best_epoch,finetune_best_val_acc\n";
    for (const auto& a : arms)
        csv += std::string(pretrain_arm_name(a.arm)) + "," + format_double(threshold) + "," +
               std::to_string(a.epochs_to_threshold) + "," + std::to_string(a.finetune.best_epoch) +
               "," + format_double(a.finetune.best_val_acc) + "\n";
    return csv;
}

// ---------------------------------------------------------------------------
// Study B: aligning source tasks to partner targets

enum class AlignMethod { kDirectFt, kHeadFt, kLinearSwitch, kMlpSwitch };

inline const char* align_method_name(AlignMethod m) {
    switch (m) {
        case AlignMethod::kDirectFt: return "direct_ft";
        case AlignMethod::kHeadFt: return "head_ft";
        case AlignMethod::kLinearSwitch: return "linear_switch";
        case AlignMethod::kMlpSwitch: return "mlp_switch";
    }
    return "?";
}

struct AlignmentPair {
    int source = -1;
    int target = -1;
};

struct AlignmentConfig {
    std::vector<AlignmentPair> pairs;
    TrainConfig finetune;       // direct/head fine-tuning and new-head training
    int switch_epochs = 200;
    double switch_lr = 1e-3;
};

// Each generated aligned pair (tasks 2i and 2i+1 share their input set)
// yields one source/target assignment: the member with more training
// instances becomes the source, ties to the lower task id.
inline std::vector<AlignmentPair> derive_alignment_pairs(const Dataset& ds) {
    if (ds.cfg.n_aligned_pairs < 1)
        throw ConfigError("alignment: dataset was generated without aligned task pairs");
    std::map<int, int> counts;
    for (const Instance& x : ds.train) counts[x.task_id] += 1;
    std::vector<AlignmentPair> out;
    for (int p = 0; p < ds.cfg.n_aligned_pairs; ++p) {
        int a = 2 * p, b = 2 * p + 1;
        AlignmentPair pr;
        pr.source = counts[b] > counts[a] ? b : a;
        pr.target = pr.source == a ? b : a;
        out.push_back(pr);
    }
    return out;
}

namespace exp_detail {

inline void validate_pairs(const Dataset& ds, const std::vector<AlignmentPair>& pairs) {
    if (pairs.empty()) throw ConfigError("alignment: no source/target pairs");
    std::set<int> seen;
    for (const auto& p : pairs) {
        for (int id : {p.source, p.target}) {
            if (id < 0 || id >= static_cast<int>(ds.tasks.size()))
                throw ConfigError("alignment: task id out of range");
            if (!seen.insert(id).second) throw ConfigError("alignment: pairs must be disjoint");
        }
        if (p.source == p.target) throw ConfigError("alignment: source equals target");
    }
}

}  // namespace exp_detail

// Source instance with its output replaced by the target task's output for
// the same input symbol; everything else byte-identical.
inline Instance remap_to_target(const Instance& x, const TaskSpec& target) {
    auto it = std::find(target.inputs.begin(), target.inputs.end(), x.input_symbol);
    if (it == target.inputs.end())
        throw ConfigError("alignment: input symbol not covered by the target task");
    Instance y = x;
    y.output_symbol = target.outputs[static_cast<size_t>(it - target.inputs.begin())];
    return y;
}

inline std::vector<Instance> build_alignment_dataset(const Dataset& ds,
                                                     const std::vector<AlignmentPair>& pairs,
                                                     const std::vector<Instance>& src) {
    exp_detail::validate_pairs(ds, pairs);
    std::map<int, int> target_of;
    for (const auto& p : pairs) target_of[p.source] = p.target;
    std::vector<Instance> out;
    for (const Instance& x : src) {
        auto it = target_of.find(x.task_id);
        if (it == target_of.end()) continue;
        out.push_back(remap_to_target(x, ds.task(it->second)));
    }
    return out;
}

// All source-task training instances plus exactly one training instance per
// other task (its first in dataset order); labels 1 = source, 0 = other.
inline std::pair<std::vector<Instance>, std::vector<int>> switch_training_set(
    const Dataset& ds, const std::set<int>& sources) {
    std::vector<Instance> xs;
    std::vector<int> labels;
    std::set<int> covered;
    for (const Instance& x : ds.train) {
        if (sources.count(x.task_id)) {
            xs.push_back(x);
            labels.push_back(1);
        } else if (covered.insert(x.task_id).second) {
            xs.push_back(x);
            labels.push_back(0);
        }
    }
    return {std::move(xs), std::move(labels)};
}

// Binary router over final-layer hidden states: a single linear map or a
// three-layer perceptron with intermediate width d_model. Two logits;
// index 1 = route to the new head.
class SwitchNet {
public:
    SwitchNet(int d_model, bool mlp, uint64_t seed) : mlp_(mlp) {
        Rng rng(derive_seed(seed, "switch-init"));
        auto add = [&](const std::string& name, int r, int c, bool decay, double scale) {
            params_.emplace_back(name, r, c, decay);
            if (scale > 0) params_.back().value.fill_normal(rng, 0.0, scale);
        };
        if (mlp) {
            add("switch.w0", d_model, d_model, true, 0.02);
            add("switch.b0", 1, d_model, false, 0);
            add("switch.w1", d_model, d_model, true, 0.02);
            add("switch.b1", 1, d_model, false, 0);
            add("switch.w2", d_model, 2, true, 0.02);
            add("switch.b2", 1, 2, false, 0);
        } else {
            add("switch.w0", d_model, 2, true, 0.02);
            add("switch.b0", 1, 2, false, 0);
        }
    }

    bool is_mlp() const { return mlp_; }

    std::vector<ParamT<float>*> params() {
        std::vector<ParamT<float>*> out;
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    int forward(Graph& g, int x) {
        if (!mlp_) return g.add_row(g.matmul(x, g.param(params_[0])), g.param(params_[1]));
        int h = g.gelu(g.add_row(g.matmul(x, g.param(params_[0])), g.param(params_[1])));
        h = g.gelu(g.add_row(g.matmul(h, g.param(params_[2])), g.param(params_[3])));
        return g.add_row(g.matmul(h, g.param(params_[4])), g.param(params_[5]));
    }

    // 1 = new head; an exact logit tie keeps the original head
    std::vector<int> route(const Mat& feats) {
        Graph g(false, nullptr);
        int out = forward(g, g.leaf(feats));
        const Mat& logits = g.value(out);
        std::vector<int> r;
        r.reserve(static_cast<size_t>(logits.rows));
        for (int i = 0; i < logits.rows; ++i) r.push_back(logits.at(i, 1) > logits.at(i, 0) ? 1 : 0);
        return r;
    }

private:
    bool mlp_ = false;
    std::vector<ParamT<float>> params_;
};

struct SwitchTrainResult {
    int epochs = 0;
    double loss = 0;
    double train_accuracy = 0;
};

// Full-batch cross-entropy with AdamW at a constant learning rate; stops
// early once routing is perfect on the training set and the loss is small.
inline SwitchTrainResult train_switch(SwitchNet& net, const Mat& feats,
                                      const std::vector<int>& labels, int max_epochs, double lr) {
    if (feats.rows != static_cast<int>(labels.size()))
        throw ConfigError("switch: label count does not match feature count");
    if (feats.rows == 0) throw ConfigError("switch: empty training set");
    TrainConfig oc;
    oc.lr = lr;
    AdamW opt(net.params(), oc);
    std::vector<uint8_t> mask(labels.size(), 1);
    SwitchTrainResult res;
    for (int epoch = 1; epoch <= max_epochs; ++epoch) {
        for (auto* p : net.params()) p->zero_grad();
        Graph g(false, nullptr);  // the switch has no dropout
        int loss = g.cross_entropy_mean(net.forward(g, g.leaf(feats)), labels, mask);
        res.loss = static_cast<double>(g.value(loss).d[0]);
        if (!std::isfinite(res.loss)) throw NumericError("switch training loss is not finite");
        g.backward(loss);
        opt.clip_gradients();
        opt.step(lr);
        res.epochs = epoch;

        std::vector<int> routes = net.route(feats);
        int hits = 0;
        for (size_t i = 0; i < labels.size(); ++i)
            if (routes[i] == labels[i]) ++hits;
        res.train_accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());
        if (res.train_accuracy == 1.0 && res.loss < 0.01) break;
    }
    return res;
}

// single-token greedy prediction for each instance's prompt
inline std::vector<int> predict_outputs(const CausalLM& model, const std::vector<Instance>& xs,
                                        int chunk = 512) {
    std::vector<int> out(xs.size(), -1);
    for (size_t base = 0; base < xs.size(); base += static_cast<size_t>(chunk)) {
        size_t end = std::min(xs.size(), base + static_cast<size_t>(chunk));
        std::vector<std::vector<int>> prefixes;
        std::vector<int> lens;
        for (size_t i = base; i < end; ++i) {
            prefixes.push_back(xs[i].prompt());
            lens.push_back(1);
        }
        auto decoded = model.greedy_decode(prefixes, lens);
        for (size_t i = base; i < end; ++i) out[i] = decoded[i - base].at(0);
    }
    return out;
}

inline std::map<int, std::vector<Instance>> group_by_task(const std::vector<Instance>& xs) {
    std::map<int, std::vector<Instance>> by_task;
    for (const Instance& x : xs) by_task[x.task_id].push_back(x);
    return by_task;
}

inline double mean_task_accuracy(const CausalLM& model,
                                 const std::map<int, std::vector<Instance>>& by_task) {
    if (by_task.empty()) return 0.0;
    double sum = 0;
    for (const auto& [t, v] : by_task) sum += eval_task_accuracy(model, v);
    return sum / static_cast<double>(by_task.size());
}

// ground-truth routing: 1 iff the instance belongs to a source task
inline std::vector<int> ground_truth_routes(const std::vector<Instance>& xs,
                                            const std::set<int>& sources) {
    std::vector<int> r;
    r.reserve(xs.size());
    for (const Instance& x : xs) r.push_back(sources.count(x.task_id) ? 1 : 0);
    return r;
}

// Clone of `base` fine-tuned on the retargeted instances; every method except
// direct fine-tuning updates only the unembedding head, leaving the trunk
// untouched. Best epoch = highest mean validation accuracy over the
// retargeted source tasks.
inline std::pair<CausalLM, TrainResult> finetune_aligned(const CausalLM& base, const Dataset& ds,
                                                         const AlignmentConfig& cfg,
                                                         AlignMethod method, uint64_t seed) {
    std::vector<Instance> aligned_train = build_alignment_dataset(ds, cfg.pairs, ds.train);
    std::vector<Instance> aligned_val = build_alignment_dataset(ds, cfg.pairs, ds.validation);
    if (aligned_train.empty()) throw ConfigError("alignment: source tasks have no training data");
    if (aligned_val.empty()) throw ConfigError("alignment: source tasks have no validation data");
    auto aligned_val_by_task = group_by_task(aligned_val);

    CausalLM tuned = base;
    Dataset view = exp_detail::split_view(ds, std::move(aligned_train), std::move(aligned_val));
    TrainConfig ft = cfg.finetune;
    if (method != AlignMethod::kDirectFt) ft.trainable = {"head.w"};
    Trainer tr(tuned, view, ft, derive_seed(seed, align_method_name(method)));
    double epoch_score = 0;
    tr.on_epoch = [&](const EpochMetrics&) {
        epoch_score = mean_task_accuracy(tuned, aligned_val_by_task);
    };
    tr.set_selector([&](const EpochMetrics&) { return epoch_score; });
    std::vector<Mat> best;
    tr.on_best = [&](int, CausalLM& m) {
        for (auto* p : m.params()) best.push_back(p->value);
    };
    TrainResult res = tr.train();
    auto params = tuned.params();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    return {std::move(tuned), std::move(res)};
}

// Accuracy when each instance is answered by `tuned` where routes[i] == 1 and
// by `base` otherwise. Instances routed to `base` see exactly the original
// model, so a route of all zeros reproduces the base accuracy bit for bit.
inline double routed_accuracy(const CausalLM& base, const CausalLM& tuned,
                              const std::vector<Instance>& xs, const std::vector<int>& routes) {
    if (xs.empty()) return 0.0;
    if (routes.size() != xs.size())
        throw ConfigError("alignment: route count does not match instance count");
    std::vector<int> po = predict_outputs(base, xs);
    std::vector<int> pn = predict_outputs(tuned, xs);
    int hits = 0;
    for (size_t i = 0; i < xs.size(); ++i)
        if ((routes[i] ? pn[i] : po[i]) == xs[i].output_symbol) ++hits;
    return static_cast<double>(hits) / static_cast<double>(xs.size());
}

struct TaskAccuracyRow {
    int task_id = -1;
    bool is_source = false;
    double pre = 0;
    double post = 0;
};

struct MethodResult {
    AlignMethod method = AlignMethod::kDirectFt;
    double source_accuracy = 0;  // post-alignment, updated source tasks
    double accuracy_drop = 0;    // mean (pre - post) over non-source tasks
    std::vector<TaskAccuracyRow> detail;
    TrainResult finetune;
    SwitchTrainResult switch_train;
};

inline MethodResult align(const CausalLM& base, const Dataset& ds, const AlignmentConfig& cfg,
                          AlignMethod method, uint64_t seed) {
    exp_detail::validate_pairs(ds, cfg.pairs);
    std::set<int> sources;
    for (const auto& p : cfg.pairs) sources.insert(p.source);

    auto aligned_val_by_task = group_by_task(build_alignment_dataset(ds, cfg.pairs, ds.validation));
    std::map<int, std::vector<Instance>> other_val;
    for (const auto& [t, v] : group_by_task(ds.validation))
        if (!sources.count(t)) other_val[t] = v;

    MethodResult r;
    r.method = method;

    // pre-alignment accuracies: original outputs for non-source tasks,
    // retargeted outputs for source tasks
    std::map<int, double> pre;
    for (const auto& [t, v] : other_val) pre[t] = eval_task_accuracy(base, v);
    for (const auto& [t, v] : aligned_val_by_task) pre[t] = eval_task_accuracy(base, v);

    auto [tuned, ft_result] = finetune_aligned(base, ds, cfg, method, seed);
    r.finetune = std::move(ft_result);

    std::map<int, double> post;
    if (method == AlignMethod::kDirectFt || method == AlignMethod::kHeadFt) {
        r.source_accuracy = mean_task_accuracy(tuned, aligned_val_by_task);
        for (const auto& [t, v] : other_val) post[t] = eval_task_accuracy(tuned, v);
        for (const auto& [t, v] : aligned_val_by_task) post[t] = eval_task_accuracy(tuned, v);
    } else {
        auto [sw_xs, sw_labels] = switch_training_set(ds, sources);
        Mat feats = hidden_features(base, sw_xs, base.config().n_layers);
        SwitchNet net(base.config().d_model, method == AlignMethod::kMlpSwitch,
                      derive_seed(seed, align_method_name(method)));
        r.switch_train = train_switch(net, feats, sw_labels, cfg.switch_epochs, cfg.switch_lr);

        auto eval_routed = [&](const std::vector<Instance>& v) {
            std::vector<int> routes = net.route(hidden_features(base, v, base.config().n_layers));
            return routed_accuracy(base, tuned, v, routes);
        };
        double src_sum = 0;
        for (const auto& [t, v] : aligned_val_by_task) {
            post[t] = eval_routed(v);
            src_sum += post[t];
        }
        r.source_accuracy = src_sum / static_cast<double>(aligned_val_by_task.size());
        for (const auto& [t, v] : other_val) post[t] = eval_routed(v);
    }

    double drop_sum = 0;
    for (const auto& [t, v] : other_val) drop_sum += pre[t] - post[t];
    r.accuracy_drop = other_val.empty() ? 0.0 : drop_sum / static_cast<double>(other_val.size());

    for (const auto& [t, acc] : pre) {
        TaskAccuracyRow row;
        row.task_id = t;
        row.is_source = sources.count(t) > 0;
        row.pre = acc;
        row.post = post[t];
        r.detail.push_back(row);
    }
    return r;
}

inline std::vector<MethodResult> run_alignment(const CausalLM& base, const Dataset& ds,
                                               const AlignmentConfig& cfg, uint64_t seed) {
    std::vector<MethodResult> out;
    for (AlignMethod m : {AlignMethod::kDirectFt, AlignMethod::kHeadFt, AlignMethod::kLinearSwitch,
                          AlignMethod::kMlpSwitch})
        out.push_back(align(base, ds, cfg, m, seed));
    return out;
}

inline std::string alignment_csv(const std::vector<MethodResult>& rows) {
    std::string csv = "method,task_accuracy,accuracy_drop\n";
    for (const auto& r : rows)
        csv += std::string(align_method_name(r.method)) + "," + format_double(r.source_accuracy) +
               "," + format_double(r.accuracy_drop) + "\n";
    return csv;
}

inline std::string alignment_detail_csv(const std::vector<MethodResult>& rows) {
    std::string csv = "method,task_id,is_source,pre_accuracy,post_accuracy\n";
    for (const auto& r : rows)
        for (const auto& d : r.detail)
            csv += std::string(align_method_name(r.method)) + "," + std::to_string(d.task_id) +
                   "," + (d.is_source ? "1" : "0") + "," + format_double(d.pre) + "," +
                   format_double(d.post) + "\n";
    return csv;
}

}  // namespace iflab
