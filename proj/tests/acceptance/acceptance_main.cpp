// End-to-end acceptance checks. Each numbered check prints one PASS/FAIL
// line; the process exits nonzero if any fail. The reference training run
// (checks 4-8) dominates the runtime at roughly half an hour.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "iflab/experiments.hpp"
#include "iflab/features.hpp"
#include "iflab/workbench.hpp"
#include "support/oracles.hpp"

using namespace iflab;
namespace fs = std::filesystem;

namespace {

struct Check {
    int id;
    std::string name;
    bool pass = false;
    std::string detail;
};

std::vector<Check> g_checks;
std::chrono::steady_clock::time_point g_t0;

void start_check() { g_t0 = std::chrono::steady_clock::now(); }

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_t0).count();
    g_checks.push_back(Check{id, name, pass, detail});
    std::printf("[%2d] %s  %-46s %s (%.1fs)\n", id, pass ? "PASS" : "FAIL", name.c_str(),
                detail.c_str(), sec);
    std::fflush(stdout);
}

std::string fmt(double v, int sig = 4) { return format_double(v, sig); }

// label vector in first-seen canonical form, for partition equality
std::vector<int> canon(const std::vector<int>& v) {
    std::map<int, int> m;
    std::vector<int> out;
    out.reserve(v.size());
    for (int x : v) out.push_back(m.emplace(x, static_cast<int>(m.size())).first->second);
    return out;
}

// ---------------------------------------------------------------------------
// 1: clustering metrics against the quadratic / direct-summation oracles

void check_metric_oracles() {
    start_check();
    Rng rng(20260814);
    double max_err = 0;
    for (int trial = 0; trial < 500; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(0, 10));  // 2..12 points
        int ka = 1 + static_cast<int>(rng.uniform_int(0, static_cast<uint64_t>(n) - 1));
        int kb = 1 + static_cast<int>(rng.uniform_int(0, static_cast<uint64_t>(n) - 1));
        std::vector<int> a(static_cast<size_t>(n)), b(static_cast<size_t>(n));
        for (int& x : a) x = static_cast<int>(rng.uniform_int(0, static_cast<uint64_t>(ka) - 1));
        for (int& x : b) x = static_cast<int>(rng.uniform_int(0, static_cast<uint64_t>(kb) - 1));

        // the pair oracle handles every degenerate case itself; the adjusted
        // scores hit 0/0 on equal partitions, which score 1 by definition
        double want_f1 = oracle::pair_f1(a, b);
        double want_ari, want_ami;
        if (canon(a) == canon(b)) {
            want_ari = want_ami = 1.0;
        } else {
            want_ari = oracle::adjusted_rand(a, b);
            want_ami = oracle::adjusted_mutual_info(a, b);
        }
        max_err = std::max({max_err, std::fabs(pair_f1(a, b) - want_f1),
                            std::fabs(ari(a, b) - want_ari), std::fabs(ami(a, b) - want_ami)});
    }
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_t0).count();
    report(1, "clustering metrics match quadratic oracles",
           max_err <= 1e-9 && sec < 60.0,
           "max |err| " + fmt(max_err, 3) + " over 500 instances");
}

// ---------------------------------------------------------------------------
// 2: kmeans with restarts against the exhaustive optimum

void check_kmeans_optimal() {
    start_check();
    Rng rng(424242);
    double max_err = 0;
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(0, 6));  // 2..8 points
        int k = 1 + static_cast<int>(rng.uniform_int(0, std::min<uint64_t>(2, static_cast<uint64_t>(n) - 1)));
        int dim = 1 + static_cast<int>(rng.uniform_int(0, 2));
        Mat pts(n, dim);
        std::vector<std::vector<double>> dpts(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dim; ++j) {
                pts.at(i, j) = static_cast<float>(rng.normal(0.0, 3.0));
                dpts[static_cast<size_t>(i)].push_back(static_cast<double>(pts.at(i, j)));
            }
        double opt = oracle::optimal_kmeans_cost(dpts, k);
        ClusterAssignment a =
            kmeans(pts, k, 50, 300, derive_seed(4242, "trial" + std::to_string(trial)));
        max_err = std::max(max_err, std::fabs(a.inertia - opt));
    }
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_t0).count();
    report(2, "kmeans inertia matches exhaustive optimum",
           max_err <= 1e-6 && sec < 60.0,
           "max |inertia err| " + fmt(max_err, 3) + " over 200 instances");
}

// ---------------------------------------------------------------------------
// 3: transformer gradients against central finite differences in double

void check_gradients() {
    start_check();
    ModelConfig mc;
    mc.vocab_size = 26;
    mc.d_model = 24;  // smallest parameter tensors still have >= 20 elements
    mc.n_layers = 2;
    mc.n_heads = 3;
    mc.max_len = 12;
    mc.dropout = 0.0f;
    CausalLMT<double> model(mc, 99);

    Rng rng(7);
    std::vector<std::vector<int>> seqs;
    for (int len : {5, 12, 8, 10}) {
        std::vector<int> s(static_cast<size_t>(len));
        for (int& t : s) t = static_cast<int>(rng.uniform_int(0, 25));
        seqs.push_back(s);
    }
    PackedBatch b = PackedBatch::pack(seqs);

    auto loss_value = [&]() {
        GraphT<double> g(false, nullptr);
        return g.value(model.forward_loss(g, b)).d[0];
    };

    model.zero_grads();
    {
        GraphT<double> g(false, nullptr);
        g.backward(model.forward_loss(g, b));
    }

    const double h = 1e-5;
    double max_rel = 0;
    int min_coords = 1 << 30;
    for (auto* p : model.params()) {
        size_t size = p->value.d.size();
        std::set<size_t> coords;
        while (coords.size() < 20 && coords.size() < size)
            coords.insert(static_cast<size_t>(rng.uniform_int(0, static_cast<uint64_t>(size) - 1)));
        min_coords = std::min(min_coords, static_cast<int>(coords.size()));
        for (size_t e : coords) {
            double keep = p->value.d[e];
            p->value.d[e] = keep + h;
            double fp = loss_value();
            p->value.d[e] = keep - h;
            double fm = loss_value();
            p->value.d[e] = keep;
            double fd = (fp - fm) / (2 * h);
            double an = p->grad.d[e];
            max_rel = std::max(max_rel, std::fabs(fd - an) / std::max(std::fabs(fd) + std::fabs(an), 1e-4));
        }
    }
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_t0).count();
    report(3, "autograd matches central finite differences",
           max_rel <= 1e-4 && min_coords >= 20 && sec < 300.0,
           "max rel err " + fmt(max_rel, 3) + " on " + std::to_string(min_coords) +
               "+ coords per tensor");
}

// ---------------------------------------------------------------------------
// 4-8: the reference run and its cluster / knn dynamics

struct F1Key {
    int epoch, layer;
    bool operator<(const F1Key& o) const {
        return epoch != o.epoch ? epoch < o.epoch : layer < o.layer;
    }
};

void check_reference_run() {
    start_check();
    DataConfig dc;
    dc.seed = 1;
    Dataset ds = build_dataset(dc);

    ModelConfig mc;
    mc.vocab_size = ds.vocab.size();
    mc.max_len = ds.max_sequence_len();
    CausalLM model(mc, derive_seed(1, "init"));

    TrainConfig tc;
    tc.epochs = 500;
    tc.lr = 3e-4;
    tc.snapshot_stride = 10;

    std::vector<std::pair<std::string, const std::vector<Instance>*>> groups{
        {"train_subset", &ds.train_subset}, {"validation", &ds.validation}};
    std::vector<ActivationDump> dumps;
    ActivationDump best_dump;

    Trainer tr(model, ds, tc, derive_seed(1, "train"));
    tr.on_epoch = [&](const EpochMetrics& m) {
        if (m.epoch % 50 == 0 || m.epoch == 1)
            std::printf("     ... reference epoch %d: loss %.3f val acc %.3f\n", m.epoch, m.loss,
                        m.val_acc);
        std::fflush(stdout);
    };
    tr.on_save = [&](int epoch, CausalLM& m, const TrainState&) {
        dumps.push_back(collect_activation_dump(m, ds, groups, "reference", epoch));
    };
    tr.on_best = [&](int epoch, CausalLM& m) {
        best_dump = collect_activation_dump(m, ds, groups, "reference-best", epoch);
    };
    TrainResult res = tr.train();
    double train_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_t0).count();

    double early = 0;
    for (int e = 0; e < 3; ++e) early = std::max(early, res.history[static_cast<size_t>(e)].val_acc);
    report(4, "reference run: flat start, high best accuracy",
           early <= 0.05 && res.best_val_acc >= 0.90 && train_sec < 3600.0,
           "epochs 1-3 val acc <= " + fmt(early) + ", best " + fmt(res.best_val_acc) + " @ epoch " +
               std::to_string(res.best_epoch) + ", " + fmt(train_sec / 60.0, 3) + " min");

    // task-label clustering of the train subset across every snapshot
    start_check();
    SweepOptions so;
    so.label_types = {LabelType::kTask};
    so.splits = {"train_subset"};
    std::map<F1Key, double> f1;
    for (const ClusterScores& s : sweep_dumps(dumps, so)) f1[{s.epoch, s.layer}] = s.f1;

    const int last_layer = mc.n_layers;
    const int last_epoch = tc.epochs;
    double late_min_best_layer = 1.0;
    for (const ActivationDump& d : dumps) {
        if (d.epoch <= last_epoch - last_epoch / 10) continue;  // final 10% of epochs
        double best_layer = 0;
        for (int l = 0; l <= last_layer; ++l) best_layer = std::max(best_layer, f1[{d.epoch, l}]);
        late_min_best_layer = std::min(late_min_best_layer, best_layer);
    }
    report(5, "task clusters emerge at the best layer", late_min_best_layer >= 0.9,
           "best-layer subset F1 >= " + fmt(late_min_best_layer) + " across the last snapshots");

    start_check();
    double l0_min = 1.0, l0_max = 0.0;
    for (const ActivationDump& d : dumps) {
        l0_min = std::min(l0_min, f1[{d.epoch, 0}]);
        l0_max = std::max(l0_max, f1[{d.epoch, 0}]);
    }
    double depth_gain = f1[{last_epoch, last_layer}] - f1[{last_epoch, 0}];
    report(6, "clustering improves with depth", depth_gain >= 0.2 && (l0_max - l0_min) <= 0.15,
           "final-epoch layer " + std::to_string(last_layer) + " minus layer 0 = " +
               fmt(depth_gain) + ", layer-0 range " + fmt(l0_max - l0_min));

    // the subset mixes hard variants with their source tasks, so the same F1
    // threshold implies the variants land in clusters of their own
    start_check();
    int hard = 0, original = 0;
    for (const Instance& x : ds.train_subset) (x.task_id >= dc.n_tasks ? hard : original) += 1;
    report(7, "hard variants separate within the subset",
           hard > 0 && original > 0 && late_min_best_layer >= 0.9,
           std::to_string(hard) + " hard + " + std::to_string(original) +
               " original instances, F1 >= " + fmt(late_min_best_layer));

    start_check();
    KnnScores first = knn_scores(knn_inputs_for_layer(dumps.front(), ds, last_layer), 10);
    KnnScores best = knn_scores(knn_inputs_for_layer(best_dump, ds, last_layer), 10);
    bool knn_ok = best.purity - first.purity >= 0.3 && best.accuracy - first.accuracy >= 0.3 &&
                  best.purity >= 0.8 && best.accuracy >= 0.8;
    report(8, "knn purity and accuracy grow", knn_ok,
           "purity " + fmt(first.purity) + " -> " + fmt(best.purity) + ", accuracy " +
               fmt(first.accuracy) + " -> " + fmt(best.accuracy));
}

// ---------------------------------------------------------------------------
// 9: task-id pretraining reaches the accuracy threshold first

void check_pretraining() {
    start_check();
    DataConfig dc;
    dc.seed = 9;
    dc.n_tasks = 8;
    dc.n_hard_tasks = 0;
    dc.n_subset_tasks = 4;
    dc.n_instruction_symbols = 20;
    dc.n_markers = 0;
    dc.n_task_symbols = 16;
    dc.n_mappings = 4;
    dc.max_dists = 2;
    dc.train_instructions_per_dist = 6;
    dc.val_instructions_per_dist = 2;
    dc.max_regex_nodes = 2;
    dc.max_regex_args = 6;
    dc.train_total = 0;
    dc.val_total = 0;
    dc.train_subset_total = 0;
    dc.val_all_tasks = true;
    Dataset ds = build_dataset(dc);

    PretrainStudyConfig cfg;
    cfg.model.vocab_size = ds.vocab.size();
    cfg.model.d_model = 256;
    cfg.model.max_len = ds.max_sequence_len();
    cfg.pretrain.epochs = 30;
    cfg.pretrain.batch_size = 32;
    cfg.pretrain.lr = 1e-3;
    cfg.finetune.epochs = 60;
    cfg.finetune.batch_size = 32;
    cfg.finetune.lr = 3e-4;

    auto arms = compare_pretraining(ds, cfg, 9);
    int t_task = arms[0].epochs_to_threshold;
    int t_instr = arms[1].epochs_to_threshold;
    int t_none = arms[2].epochs_to_threshold;
    auto beats = [&](int other) { return t_task >= 1 && (other == -1 || t_task < other); };
    auto show = [](int e) { return e == -1 ? std::string("never") : std::to_string(e); };
    report(9, "task-id pretraining converges first", beats(t_instr) && beats(t_none),
           "epochs to 0.9: task_id " + show(t_task) + ", instruction " + show(t_instr) +
               ", none " + show(t_none));
}

// ---------------------------------------------------------------------------
// 10-11: alignment quality ordering and the frozen original-head path

void check_alignment() {
    start_check();
    DataConfig dc;
    dc.seed = 21;
    dc.n_tasks = 12;
    dc.n_aligned_pairs = 3;
    dc.n_hard_tasks = 0;
    dc.n_subset_tasks = 4;
    dc.n_markers = 0;
    dc.n_instruction_symbols = 24;
    dc.max_dists = 3;
    dc.train_instructions_per_dist = 8;
    dc.val_instructions_per_dist = 2;
    dc.max_regex_nodes = 2;
    dc.max_regex_args = 8;
    dc.train_total = 0;
    dc.val_total = 0;
    dc.train_subset_total = 0;
    dc.val_all_tasks = true;
    Dataset ds = build_dataset(dc);

    ModelConfig mc;
    mc.vocab_size = ds.vocab.size();
    mc.d_model = 64;
    mc.max_len = ds.max_sequence_len();
    CausalLM base(mc, derive_seed(21, "init"));
    TrainConfig tc;
    tc.epochs = 300;
    tc.lr = 3e-4;
    TrainResult base_res = train_to_best(base, ds, tc, derive_seed(21, "train"));
    std::printf("     ... alignment base: val acc %.3f @ epoch %d\n", base_res.best_val_acc,
                base_res.best_epoch);
    std::fflush(stdout);

    AlignmentConfig ac;
    ac.pairs = derive_alignment_pairs(ds);
    ac.finetune.epochs = 80;
    ac.finetune.batch_size = 32;
    ac.finetune.lr = 3e-4;

    auto rs = run_alignment(base, ds, ac, 21);
    double d_direct = rs[0].accuracy_drop, d_head = rs[1].accuracy_drop;
    double d_switch = std::max(rs[2].accuracy_drop, rs[3].accuracy_drop);
    bool sources_perfect = true;
    for (const auto& r : rs) sources_perfect = sources_perfect && r.source_accuracy == 1.0;
    bool ordered = d_direct - d_head >= 0.02 && d_head - d_switch >= 0.02;
    report(10, "alignment: perfect sources, ordered drops", sources_perfect && ordered,
           "source acc " + fmt(rs[0].source_accuracy) + "/" + fmt(rs[1].source_accuracy) + "/" +
               fmt(rs[2].source_accuracy) + "/" + fmt(rs[3].source_accuracy) + ", drops " +
               fmt(d_direct) + " > " + fmt(d_head) + " > " + fmt(d_switch));

    // oracle routing: every non-source instance goes to the original head,
    // whose logits must match the pre-alignment model bit for bit
    start_check();
    std::set<int> sources;
    for (const auto& p : ac.pairs) sources.insert(p.source);
    std::vector<Instance> non_source;
    for (const Instance& x : ds.validation)
        if (!sources.count(x.task_id)) non_source.push_back(x);

    bool bits_ok = true;
    std::string why = "trunk frozen, logits identical on " + std::to_string(non_source.size()) +
                      " instances x 2 switch methods";
    for (AlignMethod m : {AlignMethod::kLinearSwitch, AlignMethod::kMlpSwitch}) {
        CausalLM tuned = finetune_aligned(base, ds, ac, m, 21).first;
        for (auto* p : tuned.params())
            if (p->name != "head.w" &&
                p->value.d != const_cast<CausalLM&>(base).param_by_name(p->name).value.d) {
                bits_ok = false;
                why = std::string(align_method_name(m)) + " moved trunk parameter " + p->name;
            }
        // route-0 inference: the fine-tuned trunk with the original head
        CausalLM hybrid = tuned;
        hybrid.param_by_name("head.w").value = const_cast<CausalLM&>(base).param_by_name("head.w").value;
        std::vector<std::vector<int>> prompts;
        for (const Instance& x : non_source) prompts.push_back(x.prompt());
        PackedBatch b = PackedBatch::pack(prompts);
        if (base.eval_logits(b).d != hybrid.eval_logits(b).d) {
            bits_ok = false;
            why = std::string(align_method_name(m)) + " logits differ from the original model";
        }
    }
    report(11, "original-head routing is bit-identical", bits_ok, why);
}

// ---------------------------------------------------------------------------
// 12: byte-identical reruns of the command-line tool

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void check_determinism(const fs::path& work) {
    start_check();
    const char* cli = std::getenv("IFLAB_CLI");
    if (!cli) {
        report(12, "command reruns are byte-identical", false, "IFLAB_CLI is not set");
        return;
    }
    fs::path det = work / "det";
    fs::remove_all(det);
    fs::create_directories(det);
    std::ofstream(det / "data.json") << R"({
        "seed": 7, "n_tasks": 6, "n_hard_tasks": 2, "n_aligned_pairs": 2,
        "n_instruction_symbols": 12, "n_markers": 2, "n_task_symbols": 10, "n_mappings": 3,
        "min_dists": 1, "max_dists": 2,
        "train_instructions_per_dist": 4, "val_instructions_per_dist": 2,
        "min_regex_nodes": 1, "max_regex_nodes": 2, "min_regex_args": 3, "max_regex_args": 6,
        "n_subset_tasks": 2, "hard_dists_per_task": 1, "hard_instructions_per_dist": 2,
        "train_total": 0, "val_total": 0, "train_subset_total": 16, "val_all_tasks": true})";
    std::ofstream(det / "train.json") << R"({
        "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "dropout": 0.0},
        "train": {"epochs": 3, "batch_size": 32, "lr": 0.003, "snapshot_stride": 1}})";

    auto run = [&](const std::string& args) {
        std::string cmd = std::string(cli) + " " + args + " >> " + (det / "log.txt").string() + " 2>&1";
        return std::system(cmd.c_str()) == 0;
    };

    bool ok = true;
    std::string why = "gen, train, analyze, knn over two seeded runs";
    auto fail = [&](const std::string& w) {
        ok = false;
        why = w;
    };

    for (const char* tag : {"a", "b"}) {
        std::string t = tag;
        if (!run("gen --config " + (det / "data.json").string() + " -o " + (det / ("data_" + t)).string()) ||
            !run("train --data " + (det / ("data_" + t) / "dataset.bin").string() + " --config " +
                 (det / "train.json").string() + " --run-dir " + (det / ("run_" + t)).string() +
                 " --seed 5 --threads 1") ||
            !run("analyze --run-dir " + (det / ("run_" + t)).string() + " --threads 1") ||
            !run("knn --run-dir " + (det / ("run_" + t)).string() + " --data " +
                 (det / ("data_" + t) / "dataset.bin").string()))
            fail("a command exited nonzero on run " + t);
    }
    for (const char* rel : {"dataset.bin", "dataset_stats.json"})
        if (ok && slurp(det / "data_a" / rel) != slurp(det / "data_b" / rel))
            fail(std::string(rel) + " differs between reruns");
    for (const char* rel :
         {"metrics.jsonl", "checkpoints/epoch_3.bin", "checkpoints/best.bin",
          "checkpoints/epoch_2.state", "snapshots/epoch_3.acts", "analysis/cluster_scores.csv",
          "knn/knn_scores.csv"})
        if (ok && slurp(det / "run_a" / rel) != slurp(det / "run_b" / rel))
            fail(std::string(rel) + " differs between reruns");
    if (ok && slurp(det / "run_a" / "metrics.jsonl").empty()) fail("metrics.jsonl is empty");

    report(12, "command reruns are byte-identical", ok, why);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string work_dir;
    std::vector<int> only;
    app.add_option("--work-dir", work_dir, "scratch directory")->required();
    app.add_option("--only", only, "run only these check numbers");
    CLI11_PARSE(app, argc, argv);

    fs::path work(work_dir);
    fs::create_directories(work);
    auto wanted = [&](std::initializer_list<int> ids) {
        if (only.empty()) return true;
        for (int id : ids)
            if (std::find(only.begin(), only.end(), id) != only.end()) return true;
        return false;
    };

    auto guarded = [&](std::initializer_list<int> ids, const std::string& name, auto&& fn) {
        if (!wanted(ids)) return;
        try {
            fn();
        } catch (const std::exception& e) {
            for (int id : ids) report(id, name, false, std::string("exception: ") + e.what());
        }
    };

    guarded({1}, "clustering metrics match quadratic oracles", check_metric_oracles);
    guarded({2}, "kmeans inertia matches exhaustive optimum", check_kmeans_optimal);
    guarded({3}, "autograd matches central finite differences", check_gradients);
    guarded({4, 5, 6, 7, 8}, "reference run", check_reference_run);
    guarded({9}, "task-id pretraining converges first", check_pretraining);
    guarded({10, 11}, "alignment", check_alignment);
    guarded({12}, "command reruns are byte-identical", [&] { check_determinism(work); });

    int failed = 0;
    for (const Check& c : g_checks)
        if (!c.pass) ++failed;
    std::printf("%zu checks, %d failed\n", g_checks.size(), failed);
    return failed == 0 ? 0 : 1;
}
