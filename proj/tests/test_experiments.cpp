#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <map>
#include <set>

#include "iflab/experiments.hpp"

using namespace iflab;

namespace {

// Small generated corpus with two aligned task pairs and validation rows for
// every task, sized so tiny models can memorize it in a handful of epochs.
DataConfig tiny_data_config() {
    DataConfig dc;
    dc.seed = 77;
    dc.n_tasks = 6;
    dc.n_hard_tasks = 0;
    dc.n_aligned_pairs = 2;
    dc.n_instruction_symbols = 12;
    dc.n_markers = 2;
    dc.n_task_symbols = 10;
    dc.n_mappings = 3;
    dc.min_dists = 1;
    dc.max_dists = 2;
    dc.train_instructions_per_dist = 4;
    dc.val_instructions_per_dist = 2;
    dc.min_regex_nodes = 1;
    dc.max_regex_nodes = 2;
    dc.min_regex_args = 3;
    dc.max_regex_args = 6;
    dc.n_subset_tasks = 2;
    dc.train_total = 0;
    dc.val_total = 0;
    dc.train_subset_total = 0;
    dc.val_all_tasks = true;
    return dc;
}

ModelConfig tiny_model_config(const Dataset& ds, int d_model = 16) {
    ModelConfig mc;
    mc.vocab_size = ds.vocab.size();
    mc.d_model = d_model;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.max_len = ds.max_sequence_len() + 2;
    mc.dropout = 0.0f;
    return mc;
}

TrainConfig quick_train_config(int epochs, double lr = 3e-3) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 32;
    tc.lr = lr;
    return tc;
}

bool same_mat(const Mat& a, const Mat& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.d.data(), b.d.data(), a.d.size() * sizeof(float)) == 0;
}

bool same_params(CausalLM& a, CausalLM& b, const std::set<std::string>& except = {}) {
    auto pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        if (except.count(pa[i]->name)) continue;
        if (!same_mat(pa[i]->value, pb[i]->value)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("task-ID pretraining sequences") {
    Dataset ds = build_dataset(tiny_data_config());
    auto pre = taskid_pretrain_instances(ds, ds.train);

    SECTION("one sequence per distinct (task, instruction), first-seen order") {
        std::set<std::pair<int, std::vector<int>>> expect;
        for (const auto& x : ds.train) expect.insert({x.task_id, x.instruction});
        REQUIRE(pre.size() == expect.size());
        std::set<std::pair<int, std::vector<int>>> got;
        for (const auto& p : pre) REQUIRE(got.insert({p.task_id, p.instruction}).second);
        REQUIRE(got == expect);

        // first-seen order: the first source row with each key lines up
        size_t next = 0;
        std::set<std::pair<int, std::vector<int>>> seen;
        for (const auto& x : ds.train) {
            if (!seen.insert({x.task_id, x.instruction}).second) continue;
            REQUIRE(pre[next].task_id == x.task_id);
            REQUIRE(pre[next].instruction == x.instruction);
            ++next;
        }
    }

    SECTION("trigger and task-ID tokens sit outside the data symbols") {
        for (const auto& p : pre) {
            REQUIRE(p.input_symbol == ds.vocab.trigger());
            REQUIRE(p.output_symbol == ds.vocab.task_token(p.task_id));
            REQUIRE(p.input_symbol > ds.vocab.pad());
            REQUIRE(p.output_symbol > ds.vocab.trigger());
            REQUIRE(p.mapping_id == -1);
        }
    }

    SECTION("fine-tuning sequences never contain the trigger or task-ID tokens") {
        for (const auto* split : {&ds.train, &ds.train_subset, &ds.validation})
            for (const auto& x : *split)
                for (int t : x.tokens()) REQUIRE(t < ds.vocab.pad());
    }

    SECTION("instruction-only sequences are bare instructions") {
        auto ip = instruction_pretrain_instances(ds.train);
        std::set<std::vector<int>> expect;
        for (const auto& x : ds.train) expect.insert(x.instruction);
        REQUIRE(ip.size() == expect.size());
        for (const auto& p : ip) {
            REQUIRE(p.input_symbol == -1);
            REQUIRE(p.output_symbol == -1);
            REQUIRE(p.tokens() == p.instruction);
        }
    }
}

TEST_CASE("epochs to threshold") {
    auto hist = [](std::vector<double> accs) {
        std::vector<EpochMetrics> h;
        for (size_t i = 0; i < accs.size(); ++i) {
            EpochMetrics m;
            m.epoch = static_cast<int>(i) + 1;
            m.val_acc = accs[i];
            h.push_back(m);
        }
        return h;
    };
    REQUIRE(epochs_to_threshold(hist({0.1, 0.5, 0.9, 0.95}), 0.9) == 3);
    REQUIRE(epochs_to_threshold(hist({0.95, 0.5}), 0.9) == 1);   // first crossing wins
    REQUIRE(epochs_to_threshold(hist({0.1, 0.2}), 0.9) == -1);   // never reached
    REQUIRE(epochs_to_threshold({}, 0.9) == -1);
    REQUIRE(epochs_to_threshold(hist({0.9}), 0.9) == 1);         // >= is inclusive
}

TEST_CASE("switch network routing") {
    SECTION("linear: exact logit tie keeps the original head") {
        SwitchNet net(4, false, 1);
        auto ps = net.params();
        REQUIRE(ps.size() == 2);
        std::fill(ps[0]->value.d.begin(), ps[0]->value.d.end(), 0.0f);  // w: logits equal
        Mat x(3, 4);
        x.d = {1, 2, 3, 4, -1, -2, -3, -4, 0, 0, 0, 0};
        REQUIRE(net.route(x) == std::vector<int>{0, 0, 0});

        ps[1]->value.at(0, 1) = 0.5f;  // bias the new-head logit strictly up
        REQUIRE(net.route(x) == std::vector<int>{1, 1, 1});
        ps[1]->value.at(0, 0) = 1.0f;  // original logit strictly larger again
        REQUIRE(net.route(x) == std::vector<int>{0, 0, 0});
    }

    SECTION("mlp has three layers at trunk width") {
        SwitchNet net(6, true, 1);
        auto ps = net.params();
        REQUIRE(ps.size() == 6);
        REQUIRE(ps[0]->value.rows == 6);
        REQUIRE(ps[0]->value.cols == 6);
        REQUIRE(ps[2]->value.cols == 6);
        REQUIRE(ps[4]->value.cols == 2);
        for (int i : {1, 3, 5})  // biases start at zero
            for (float v : ps[i]->value.d) REQUIRE(v == 0.0f);
    }

    SECTION("training separates two blobs perfectly") {
        Rng rng(5);
        Mat feats(40, 8);
        std::vector<int> labels;
        for (int i = 0; i < 40; ++i) {
            int lab = i % 2;
            labels.push_back(lab);
            for (int j = 0; j < 8; ++j)
                feats.at(i, j) = static_cast<float>((lab ? 2.0 : -2.0) + rng.normal() * 0.3);
        }
        for (bool mlp : {false, true}) {
            SwitchNet net(8, mlp, 42);
            auto res = train_switch(net, feats, labels, 200, 1e-2);
            REQUIRE(res.train_accuracy == 1.0);
            REQUIRE(res.loss < 0.01);
            REQUIRE(res.epochs <= 200);
            REQUIRE(net.route(feats) == labels);
        }
    }

    SECTION("input validation") {
        SwitchNet net(4, false, 1);
        Mat feats(3, 4);
        REQUIRE_THROWS_AS(train_switch(net, feats, {0, 1}, 10, 1e-2), ConfigError);
        REQUIRE_THROWS_AS(train_switch(net, Mat(0, 4), {}, 10, 1e-2), ConfigError);
    }
}

TEST_CASE("alignment pair derivation and retargeted data") {
    Dataset ds = build_dataset(tiny_data_config());
    REQUIRE(ds.cfg.n_aligned_pairs == 2);

    SECTION("source is the pair member with more training data, ties to the lower id") {
        std::map<int, int> counts;
        for (const auto& x : ds.train) counts[x.task_id] += 1;
        auto pairs = derive_alignment_pairs(ds);
        REQUIRE(pairs.size() == 2);
        for (int p = 0; p < 2; ++p) {
            int a = 2 * p, b = 2 * p + 1;
            REQUIRE(((pairs[p].source == a && pairs[p].target == b) ||
                     (pairs[p].source == b && pairs[p].target == a)));
            if (counts[a] >= counts[b]) {
                REQUIRE(pairs[p].source == a);
            } else {
                REQUIRE(pairs[p].source == b);
            }
        }
    }

    SECTION("datasets without aligned pairs are rejected") {
        DataConfig dc = tiny_data_config();
        dc.n_aligned_pairs = 0;
        Dataset plain = build_dataset(dc);
        REQUIRE_THROWS_AS(derive_alignment_pairs(plain), ConfigError);
    }

    SECTION("paired tasks share their input set; remapping swaps only the output") {
        auto pairs = derive_alignment_pairs(ds);
        for (const auto& p : pairs) {
            const TaskSpec& s = ds.task(p.source);
            const TaskSpec& t = ds.task(p.target);
            REQUIRE(std::set<int>(s.inputs.begin(), s.inputs.end()) ==
                    std::set<int>(t.inputs.begin(), t.inputs.end()));
        }
        auto aligned = build_alignment_dataset(ds, pairs, ds.train);

        std::map<int, int> target_of;
        for (const auto& p : pairs) target_of[p.source] = p.target;
        size_t n_source = 0;
        size_t next = 0;
        for (const auto& x : ds.train) {
            auto it = target_of.find(x.task_id);
            if (it == target_of.end()) continue;
            ++n_source;
            const Instance& y = aligned[next++];
            REQUIRE(y.task_id == x.task_id);
            REQUIRE(y.instruction == x.instruction);  // instructions untouched
            REQUIRE(y.input_symbol == x.input_symbol);
            const TaskSpec& tgt = ds.task(it->second);
            auto pos = std::find(tgt.inputs.begin(), tgt.inputs.end(), x.input_symbol);
            REQUIRE(pos != tgt.inputs.end());
            REQUIRE(y.output_symbol == tgt.outputs[static_cast<size_t>(pos - tgt.inputs.begin())]);
        }
        REQUIRE(aligned.size() == n_source);
    }

    SECTION("an input the target does not cover is an error") {
        TaskSpec tgt = ds.task(1);
        Instance x = ds.train.front();
        x.input_symbol = -5;  // not a task symbol at all
        REQUIRE_THROWS_WITH(remap_to_target(x, tgt),
                            "alignment: input symbol not covered by the target task");
    }

    SECTION("pair validation") {
        auto check = [&](std::vector<AlignmentPair> pairs) {
            REQUIRE_THROWS_AS(build_alignment_dataset(ds, pairs, ds.train), ConfigError);
        };
        check({});
        check({{0, 0}});
        check({{0, 99}});
        check({{-1, 1}});
        check({{0, 1}, {1, 2}});  // overlapping ids
    }

    SECTION("switch training set: all source rows plus one row per other task") {
        auto pairs = derive_alignment_pairs(ds);
        std::set<int> sources;
        for (const auto& p : pairs) sources.insert(p.source);
        auto [xs, labels] = switch_training_set(ds, sources);

        size_t n_source = 0;
        std::set<int> train_tasks;
        for (const auto& x : ds.train) {
            train_tasks.insert(x.task_id);
            if (sources.count(x.task_id)) ++n_source;
        }
        REQUIRE(xs.size() == n_source + (train_tasks.size() - sources.size()));
        REQUIRE(labels.size() == xs.size());

        std::map<int, int> others_seen;
        for (size_t i = 0; i < xs.size(); ++i) {
            if (sources.count(xs[i].task_id)) {
                REQUIRE(labels[i] == 1);
            } else {
                REQUIRE(labels[i] == 0);
                others_seen[xs[i].task_id] += 1;
            }
        }
        for (const auto& [t, n] : others_seen) REQUIRE(n == 1);
        REQUIRE(others_seen.size() == train_tasks.size() - sources.size());
    }
}

TEST_CASE("pretraining arm without pretraining matches a plain run bit for bit") {
    Dataset ds = build_dataset(tiny_data_config());
    PretrainStudyConfig cfg;
    cfg.model = tiny_model_config(ds);
    cfg.pretrain = quick_train_config(2);
    cfg.finetune = quick_train_config(3);
    cfg.threshold = 0.9;
    uint64_t seed = 123;

    auto arms = compare_pretraining(ds, cfg, seed);
    REQUIRE(arms.size() == 3);
    REQUIRE(arms[0].arm == PretrainArm::kTaskId);
    REQUIRE(arms[1].arm == PretrainArm::kInstruction);
    REQUIRE(arms[2].arm == PretrainArm::kNone);

    // reference: fresh model, fine-tuned directly with the same derived seeds
    CausalLM plain(cfg.model, derive_seed(seed, "init"));
    TrainResult ref = train_to_best(plain, ds, cfg.finetune, derive_seed(seed, "finetune"));

    const auto& none = arms[2];
    REQUIRE(none.pretrain.history.empty());
    REQUIRE(none.finetune.history.size() == ref.history.size());
    for (size_t i = 0; i < ref.history.size(); ++i) {
        REQUIRE(none.finetune.history[i].loss == ref.history[i].loss);
        REQUIRE(none.finetune.history[i].val_loss == ref.history[i].val_loss);
        REQUIRE(none.finetune.history[i].val_acc == ref.history[i].val_acc);
    }
    REQUIRE(none.finetune.best_epoch == ref.best_epoch);

    // the pretrained arms start from the same init but different weights
    REQUIRE_FALSE(arms[0].pretrain.history.empty());
    REQUIRE_FALSE(arms[1].pretrain.history.empty());
    for (const auto& a : arms) REQUIRE(a.finetune.history.size() == 3);

    SECTION("csv outputs") {
        std::string curves = pretrain_curves_csv(arms);
        REQUIRE(curves.rfind("arm,phase,epoch,loss,val_loss,val_acc,lr\n", 0) == 0);
        REQUIRE(curves.find("none,finetune,1,") != std::string::npos);
        REQUIRE(curves.find("task_id,pretrain,1,") != std::string::npos);
        REQUIRE(curves.find("none,pretrain,") == std::string::npos);

        std::string summary = pretrain_summary_csv(arms, cfg.threshold);
        REQUIRE(summary.rfind("arm,threshold,epochs_to_threshold,", 0) == 0);
        REQUIRE(std::count(summary.begin(), summary.end(), '\n') == 4);
    }
}

TEST_CASE("task-ID pretraining learns to emit the task token") {
    Dataset ds = build_dataset(tiny_data_config());
    ModelConfig mc = tiny_model_config(ds, 32);
    CausalLM model(mc, 11);
    TrainConfig tc = quick_train_config(30, 3e-3);
    TrainResult r = pretrain_taskid(model, ds, tc, 99);

    REQUIRE(r.best_val_acc > 0.5);  // task identity is recoverable from the instruction
    REQUIRE(r.best_val_acc >= r.history.front().val_acc);

    // the loaded weights reproduce the selected epoch's accuracy
    Dataset view = ds;
    view.validation = taskid_pretrain_instances(ds, ds.validation);
    double acc = eval_task_accuracy(model, view.validation);
    REQUIRE(acc == Catch::Approx(r.best_val_acc).margin(1e-12));
}

TEST_CASE("alignment methods") {
    Dataset ds = build_dataset(tiny_data_config());
    ModelConfig mc = tiny_model_config(ds, 32);
    CausalLM base(mc, 21);
    TrainConfig pre_tc = quick_train_config(40, 3e-3);
    train_to_best(base, ds, pre_tc, 7);

    AlignmentConfig acfg;
    acfg.pairs = derive_alignment_pairs(ds);
    acfg.finetune = quick_train_config(12, 3e-3);
    std::set<int> sources;
    for (const auto& p : acfg.pairs) sources.insert(p.source);

    SECTION("head-only fine-tuning never touches the trunk") {
        auto [tuned, res] = finetune_aligned(base, ds, acfg, AlignMethod::kHeadFt, 3);
        CausalLM base_copy = base;  // same params, non-const access
        REQUIRE(same_params(base_copy, tuned, {"head.w"}));
        REQUIRE_FALSE(same_params(base_copy, tuned));  // the head itself moved
        REQUIRE(res.history.size() == 12);
    }

    SECTION("direct fine-tuning moves trunk weights") {
        auto [tuned, res] = finetune_aligned(base, ds, acfg, AlignMethod::kDirectFt, 3);
        CausalLM base_copy = base;
        REQUIRE_FALSE(same_params(base_copy, tuned, {"head.w"}));
    }

    SECTION("routing everything to the base model reproduces it bit for bit") {
        auto [tuned, res] = finetune_aligned(base, ds, acfg, AlignMethod::kHeadFt, 3);
        for (const auto& [t, v] : group_by_task(ds.validation)) {
            double via_routes = routed_accuracy(base, tuned, v, std::vector<int>(v.size(), 0));
            REQUIRE(via_routes == eval_task_accuracy(base, v));
        }
    }

    SECTION("ground-truth routing leaves non-source tasks untouched: zero drop") {
        auto [tuned, res] = finetune_aligned(base, ds, acfg, AlignMethod::kHeadFt, 3);
        for (const auto& [t, v] : group_by_task(ds.validation)) {
            if (sources.count(t)) continue;
            auto routes = ground_truth_routes(v, sources);
            for (int r : routes) REQUIRE(r == 0);
            REQUIRE(routed_accuracy(base, tuned, v, routes) == eval_task_accuracy(base, v));
        }
    }

    SECTION("full pipeline produces all four methods and consistent detail rows") {
        auto results = run_alignment(base, ds, acfg, 5);
        REQUIRE(results.size() == 4);
        REQUIRE(results[0].method == AlignMethod::kDirectFt);
        REQUIRE(results[1].method == AlignMethod::kHeadFt);
        REQUIRE(results[2].method == AlignMethod::kLinearSwitch);
        REQUIRE(results[3].method == AlignMethod::kMlpSwitch);

        std::set<int> val_tasks;
        for (const auto& x : ds.validation) val_tasks.insert(x.task_id);
        for (const auto& r : results) {
            REQUIRE(r.detail.size() == val_tasks.size());
            REQUIRE(r.source_accuracy >= 0.0);
            REQUIRE(r.source_accuracy <= 1.0);
            double drop = 0;
            size_t n_other = 0;
            for (const auto& d : r.detail) {
                REQUIRE(d.pre >= 0.0);
                REQUIRE(d.post >= 0.0);
                REQUIRE(d.is_source == (sources.count(d.task_id) > 0));
                if (!d.is_source) {
                    drop += d.pre - d.post;
                    ++n_other;
                }
            }
            REQUIRE(r.accuracy_drop ==
                    Catch::Approx(drop / static_cast<double>(n_other)).margin(1e-12));
        }

        // switch arms report their router fit; exact methods do not
        REQUIRE(results[2].switch_train.epochs > 0);
        REQUIRE(results[3].switch_train.epochs > 0);
        REQUIRE(results[0].switch_train.epochs == 0);

        std::string csv = alignment_csv(results);
        REQUIRE(csv.rfind("method,task_accuracy,accuracy_drop\n", 0) == 0);
        REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 5);
        REQUIRE(csv.find("linear_switch,") != std::string::npos);

        std::string detail = alignment_detail_csv(results);
        REQUIRE(detail.rfind("method,task_id,is_source,pre_accuracy,post_accuracy\n", 0) == 0);
        REQUIRE(std::count(detail.begin(), detail.end(), '\n') ==
                1 + 4 * static_cast<long>(val_tasks.size()));
    }
}
