#pragma once

// Run-directory layer shared by the CLI verbs: locking, config snapshots,
// metrics logs, checkpoint/snapshot cadence, score CSVs, charts, manifests.
// Each command owns one directory (gen/train/pretrain/align: their output
// root; analyze/knn: a subdirectory of the training run) and writes a
// manifest there. Everything numeric lands in CSV/JSONL; SVGs are views.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cluster.hpp"
#include "config_json.hpp"
#include "experiments.hpp"
#include "features.hpp"
#include "knn.hpp"
#include "manifest.hpp"
#include "svg.hpp"

namespace iflab {

namespace fs = std::filesystem;

// Exclusive ownership of a run directory for the lifetime of one command.
class RunLock {
public:
    RunLock(const fs::path& dir, bool force) : path_(dir / ".lock") {
        fs::create_directories(dir);
        if (force) fs::remove(path_);  // a crashed run may have left its lock
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw ConfigError("run directory is locked by another command: " + dir.string() +
                              " (remove " + path_.string() + " or pass --force)");
        ::close(fd);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

namespace wb_detail {

inline void write_text(const fs::path& p, const std::string& content) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IntegrityError("cannot write " + p.string());
    f << content;
    if (!f) throw IntegrityError("short write on " + p.string());
}

inline void refuse_existing_output(const fs::path& marker, bool force) {
    if (!force && fs::exists(marker))
        throw ConfigError("output already exists: " + marker.string() + " (pass --force to redo)");
}

inline Mat select_rows(const Mat& m, const std::vector<int>& idx) {
    Mat out(static_cast<int>(idx.size()), m.cols);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(m.row(idx[i]), m.row(idx[i]) + m.cols, out.row(static_cast<int>(i)));
    return out;
}

}  // namespace wb_detail

inline std::string metrics_jsonl_line(const EpochMetrics& m) {
    return "{\"epoch\":" + std::to_string(m.epoch) + ",\"loss\":" + format_double(m.loss) +
           ",\"val_loss\":" + format_double(m.val_loss) +
           ",\"subset_acc\":" + format_double(m.subset_acc) +
           ",\"val_acc\":" + format_double(m.val_acc) + ",\"lr\":" + format_double(m.lr) + "}\n";
}

// Model config with data-dependent gaps filled: vocabulary from the symbol
// table, max_len from the longest sequence when unset or too small.
inline ModelConfig resolve_model_config(ModelConfig mc, const Dataset& ds) {
    if (mc.vocab_size == 0) mc.vocab_size = ds.vocab.size();
    if (mc.vocab_size < ds.vocab.size())
        throw ConfigError("model: vocab_size smaller than the dataset vocabulary");
    if (mc.max_len < ds.max_sequence_len())
        throw ConfigError("model: max_len shorter than the longest dataset sequence");
    return mc;
}

// ---------------------------------------------------------------------------
// gen

inline fs::path workbench_gen(const DataConfig& cfg, const fs::path& out_dir, bool force) {
    Dataset ds = build_dataset(cfg);  // build fully before touching the disk
    RunLock lock(out_dir, force);
    wb_detail::refuse_existing_output(out_dir / "dataset.bin", force);

    ds.save(out_dir / "dataset.bin");
    Json stats{{"train", ds.train.size()},
               {"train_subset", ds.train_subset.size()},
               {"validation", ds.validation.size()},
               {"tasks", ds.tasks.size()},
               {"distributions", ds.dists.size()},
               {"vocab_size", ds.vocab.size()},
               {"max_sequence_len", ds.max_sequence_len()}};
    wb_detail::write_text(out_dir / "dataset_stats.json", stats.dump(2) + "\n");

    RunManifest m;
    m.command = "gen";
    m.seed = cfg.seed;
    m.config = data_config_json(cfg);
    m.run_id = RunManifest::make_id(m.command, m.seed, m.config);
    m.add_artifact(out_dir, "dataset.bin");
    m.add_artifact(out_dir, "dataset_stats.json");
    m.save(out_dir);
    return out_dir / "dataset.bin";
}

// ---------------------------------------------------------------------------
// train

// Thrown (and caught internally) to honor --stop-after: the run halts right
// after the first checkpoint at or past the requested epoch.
struct WorkbenchStop {
    int epoch = 0;
};

struct TrainRunOutcome {
    TrainResult result;
    bool stopped = false;
    fs::path run_dir;
};

inline int latest_state_epoch(const fs::path& checkpoints) {
    int best = -1;
    if (!fs::exists(checkpoints)) return best;
    for (const auto& e : fs::directory_iterator(checkpoints)) {
        std::string name = e.path().filename().string();
        int n = 0;
        if (std::sscanf(name.c_str(), "epoch_%d.state", &n) == 1) best = std::max(best, n);
    }
    return best;
}

inline TrainRunOutcome workbench_train(const Dataset& ds, const TrainBundleConfig& cfg,
                                       const fs::path& run_dir, uint64_t seed, bool resume,
                                       bool force, int stop_after = 0,
                                       const std::string& dataset_note = "") {
    TrainBundleConfig rc = cfg;
    rc.model = resolve_model_config(rc.model, ds);
    rc.train.validate();

    RunLock lock(run_dir, force);
    fs::path ckpt_dir = run_dir / "checkpoints";
    fs::path snap_dir = run_dir / "snapshots";

    TrainState prior;
    if (resume) {
        int at = latest_state_epoch(ckpt_dir);
        if (at < 0) throw ConfigError("resume: no saved state under " + ckpt_dir.string());
        prior = TrainState::load(ckpt_dir / ("epoch_" + std::to_string(at) + ".state"));
    } else {
        wb_detail::refuse_existing_output(run_dir / "manifest.json", force);
        if (force) {
            fs::remove_all(ckpt_dir);
            fs::remove_all(snap_dir);
            for (const char* f : {"metrics.jsonl", "best.txt", "manifest.json", "config.json"})
                fs::remove(run_dir / f);
        }
    }
    fs::create_directories(ckpt_dir);
    fs::create_directories(snap_dir);

    RunManifest manifest;
    manifest.command = "train";
    manifest.seed = seed;
    manifest.config = train_bundle_json(rc);
    if (!dataset_note.empty()) manifest.config["dataset"] = dataset_note;
    manifest.run_id = RunManifest::make_id(manifest.command, seed, manifest.config);

    wb_detail::write_text(run_dir / "config.json", manifest.config.dump(2) + "\n");

    std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw IntegrityError("cannot write metrics log in " + run_dir.string());
    for (const auto& m : prior.history) metrics << metrics_jsonl_line(m);
    metrics.flush();

    CausalLM model(rc.model, derive_seed(seed, "init"));
    if (resume)
        model.load_checkpoint(ckpt_dir /
                              ("epoch_" + std::to_string(prior.completed_epochs) + ".bin"));

    std::vector<std::pair<std::string, const std::vector<Instance>*>> groups;
    if (!ds.train_subset.empty()) groups.emplace_back("train_subset", &ds.train_subset);
    if (!ds.validation.empty()) groups.emplace_back("validation", &ds.validation);

    Trainer tr(model, ds, rc.train, seed);
    tr.on_epoch = [&](const EpochMetrics& m) {
        metrics << metrics_jsonl_line(m);
        metrics.flush();
    };
    tr.on_save = [&](int epoch, CausalLM& snap_model, const TrainState& st) {
        std::string tag = "epoch_" + std::to_string(epoch);
        snap_model.save_checkpoint(ckpt_dir / (tag + ".bin"));
        st.save(ckpt_dir / (tag + ".state"));
        if (!groups.empty()) {
            ActivationDump dump =
                collect_activation_dump(snap_model, ds, groups, manifest.run_id, epoch);
            dump.save(snap_dir / (tag + ".acts"));
        }
        if (stop_after > 0 && epoch >= stop_after) throw WorkbenchStop{epoch};
    };
    tr.on_best = [&](int, CausalLM& best_model) {
        best_model.save_checkpoint(ckpt_dir / "best.bin");
    };

    TrainRunOutcome out;
    out.run_dir = run_dir;
    try {
        StageTimer t(manifest, "train");
        out.result = resume ? tr.resume(prior) : tr.train();
    } catch (const WorkbenchStop& stop) {
        out.stopped = true;
        metrics.close();
        RunManifest partial = manifest;
        partial.config["stopped_at_epoch"] = stop.epoch;
        partial.add_artifact(run_dir, "config.json");
        partial.add_artifact(run_dir, "metrics.jsonl");
        partial.add_tree(run_dir, "checkpoints");
        partial.add_tree(run_dir, "snapshots");
        partial.save(run_dir);
        return out;
    }
    metrics.close();

    wb_detail::write_text(run_dir / "best.txt",
                          "epoch " + std::to_string(out.result.best_epoch) + "\nval_acc " +
                              format_double(out.result.best_val_acc) + "\n");

    manifest.add_artifact(run_dir, "config.json");
    manifest.add_artifact(run_dir, "metrics.jsonl");
    manifest.add_artifact(run_dir, "best.txt");
    manifest.add_tree(run_dir, "checkpoints");
    manifest.add_tree(run_dir, "snapshots");
    manifest.save(run_dir);
    return out;
}

// best-epoch weights of a finished training run
inline CausalLM load_run_model(const fs::path& run_dir, const std::string& checkpoint = "best") {
    Json cj = load_json_file(run_dir / "config.json");
    if (!cj.contains("model")) throw ConfigError("run config has no model section");
    ModelConfig mc = parse_model_config(cj["model"]);
    CausalLM model(mc, 0);
    model.load_checkpoint(run_dir / "checkpoints" / (checkpoint + ".bin"));
    return model;
}

inline std::vector<ActivationDump> load_snapshots(const fs::path& run_dir) {
    fs::path snap_dir = run_dir / "snapshots";
    if (!fs::exists(snap_dir)) throw ConfigError("no snapshots under " + run_dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(snap_dir))
        if (e.path().extension() == ".acts") files.push_back(e.path());
    if (files.empty()) throw ConfigError("no .acts snapshots under " + snap_dir.string());
    std::vector<ActivationDump> dumps;
    for (const auto& f : files) dumps.push_back(ActivationDump::load(f));
    std::sort(dumps.begin(), dumps.end(),
              [](const ActivationDump& a, const ActivationDump& b) { return a.epoch < b.epoch; });
    return dumps;
}

// ---------------------------------------------------------------------------
// analyze

// One chart per (label_type, metric, split): epoch on x, one line per layer.
inline std::vector<ClusterScores> workbench_analyze(const fs::path& run_dir,
                                                    const SweepOptions& opt, bool force) {
    std::vector<ActivationDump> dumps = load_snapshots(run_dir);

    // drop requested splits absent from the snapshots (instruction-only
    // pretraining runs have no subset, for instance)
    std::set<std::string> present;
    for (const auto& d : dumps)
        for (const auto& l : d.labels) present.insert(l.split);
    SweepOptions so = opt;
    so.splits.clear();
    for (const auto& s : opt.splits)
        if (present.count(s)) so.splits.push_back(s);
    if (so.splits.empty()) throw ConfigError("analyze: no requested split present in snapshots");

    RunLock lock(run_dir, force);
    fs::path out_dir = run_dir / "analysis";
    wb_detail::refuse_existing_output(out_dir / "manifest.json", force);
    fs::remove_all(out_dir);
    fs::create_directories(out_dir);

    RunManifest manifest;
    manifest.command = "analyze";
    manifest.seed = so.seed;
    manifest.config = Json{{"splits", so.splits},
                           {"kmeans_restarts", so.kmeans_restarts},
                           {"kmeans_iters", so.kmeans_iters},
                           {"reduction_policy", so.policy == ReductionPolicy::kNone     ? "none"
                                                : so.policy == ReductionPolicy::kTsne   ? "tsne"
                                                                                        : "both"},
                           {"threads", so.threads}};
    manifest.run_id = RunManifest::make_id(manifest.command, so.seed, manifest.config);

    std::vector<ClusterScores> rows;
    {
        StageTimer t(manifest, "sweep");
        rows = sweep_dumps(dumps, so);
    }
    wb_detail::write_text(out_dir / "cluster_scores.csv", scores_to_csv(rows));
    manifest.add_artifact(run_dir, "analysis/cluster_scores.csv");

    struct Metric {
        const char* name;
        double ClusterScores::*field;
    };
    const Metric metrics[] = {{"f1", &ClusterScores::f1},
                              {"ari", &ClusterScores::ari},
                              {"ami", &ClusterScores::ami}};
    for (LabelType lt : so.label_types) {
        for (const std::string& split : so.splits) {
            for (const Metric& metric : metrics) {
                std::map<int, Series> by_layer;
                for (const auto& r : rows) {
                    if (r.label_type != lt || r.split != split) continue;
                    Series& s = by_layer[r.layer];
                    if (s.name.empty()) s.name = "layer " + std::to_string(r.layer);
                    s.x.push_back(r.epoch);
                    s.y.push_back(r.*(metric.field));
                }
                std::vector<Series> series;
                for (auto& [_, s] : by_layer) series.push_back(std::move(s));
                ChartOptions co;
                co.title = std::string(label_type_name(lt)) + " labels, " + split;
                co.x_label = "epoch";
                co.y_label = metric.name;
                std::string file = std::string("cluster_") + label_type_name(lt) + "_" + split +
                                   "_" + metric.name + ".svg";
                wb_detail::write_text(out_dir / file, line_chart_svg(series, co));
                manifest.add_artifact(run_dir, "analysis/" + file);
            }
        }
    }
    manifest.save(out_dir);
    return rows;
}

// ---------------------------------------------------------------------------
// knn

// Snapshot rows follow the dump group order (train_subset rows, then
// validation rows, dataset order within each); the instances supply the
// output symbols that the probe predicts.
inline KnnInputs knn_inputs_for_layer(const ActivationDump& dump, const Dataset& ds, int layer) {
    std::vector<int> train_idx, query_idx;
    for (size_t i = 0; i < dump.labels.size(); ++i) {
        if (dump.labels[i].split == "train_subset") train_idx.push_back(static_cast<int>(i));
        else if (dump.labels[i].split == "validation") query_idx.push_back(static_cast<int>(i));
    }
    if (train_idx.size() != ds.train_subset.size() || query_idx.size() != ds.validation.size())
        throw IntegrityError("snapshot rows do not match the dataset splits");

    KnnInputs in;
    in.train = wb_detail::select_rows(dump.layers[static_cast<size_t>(layer)], train_idx);
    in.queries = wb_detail::select_rows(dump.layers[static_cast<size_t>(layer)], query_idx);
    for (size_t i = 0; i < train_idx.size(); ++i) {
        const Instance& x = ds.train_subset[i];
        if (dump.labels[static_cast<size_t>(train_idx[i])].task_id != x.task_id)
            throw IntegrityError("snapshot task labels do not match the dataset");
        in.train_tasks.push_back(x.task_id);
        in.train_outputs.push_back(x.output_symbol);
    }
    for (size_t i = 0; i < query_idx.size(); ++i) {
        const Instance& x = ds.validation[i];
        if (dump.labels[static_cast<size_t>(query_idx[i])].task_id != x.task_id)
            throw IntegrityError("snapshot task labels do not match the dataset");
        in.query_tasks.push_back(x.task_id);
        in.query_outputs.push_back(x.output_symbol);
    }
    return in;
}

inline std::vector<KnnScores> workbench_knn(const fs::path& run_dir, const Dataset& ds, int k,
                                            bool force) {
    std::vector<ActivationDump> dumps = load_snapshots(run_dir);

    RunLock lock(run_dir, force);
    fs::path out_dir = run_dir / "knn";
    wb_detail::refuse_existing_output(out_dir / "manifest.json", force);
    fs::remove_all(out_dir);
    fs::create_directories(out_dir);

    RunManifest manifest;
    manifest.command = "knn";
    manifest.config = Json{{"k", k}};
    manifest.run_id = RunManifest::make_id(manifest.command, 0, manifest.config);

    std::vector<KnnScores> rows;
    {
        StageTimer t(manifest, "knn");
        for (const auto& dump : dumps) {
            for (size_t layer = 0; layer < dump.layers.size(); ++layer) {
                KnnInputs in = knn_inputs_for_layer(dump, ds, static_cast<int>(layer));
                KnnScores s = knn_scores(in, k);
                s.epoch = dump.epoch;
                s.layer = static_cast<int>(layer);
                rows.push_back(s);
            }
        }
    }
    wb_detail::write_text(out_dir / "knn_scores.csv", knn_csv(rows));
    manifest.add_artifact(run_dir, "knn/knn_scores.csv");

    struct Metric {
        const char* name;
        double KnnScores::*field;
    };
    for (const Metric& metric : {Metric{"purity", &KnnScores::purity},
                                 Metric{"knn_accuracy", &KnnScores::accuracy}}) {
        std::map<int, Series> by_layer;
        for (const auto& r : rows) {
            Series& s = by_layer[r.layer];
            if (s.name.empty()) s.name = "layer " + std::to_string(r.layer);
            s.x.push_back(r.epoch);
            s.y.push_back(r.*(metric.field));
        }
        std::vector<Series> series;
        for (auto& [_, s] : by_layer) series.push_back(std::move(s));
        ChartOptions co;
        co.title = std::string(metric.name) + ", k=" + std::to_string(k);
        co.x_label = "epoch";
        co.y_label = metric.name;
        std::string file = std::string("knn_") + metric.name + ".svg";
        wb_detail::write_text(out_dir / file, line_chart_svg(series, co));
        manifest.add_artifact(run_dir, "knn/" + file);
    }
    manifest.save(out_dir);
    return rows;
}

// ---------------------------------------------------------------------------
// pretrain / align

inline std::vector<PretrainArmResult> workbench_pretrain(const Dataset& ds,
                                                         const PretrainStudyConfig& cfg,
                                                         const fs::path& out_dir, uint64_t seed,
                                                         bool force) {
    PretrainStudyConfig rc = cfg;
    rc.model = resolve_model_config(rc.model, ds);

    RunLock lock(out_dir, force);
    wb_detail::refuse_existing_output(out_dir / "manifest.json", force);

    RunManifest manifest;
    manifest.command = "pretrain";
    manifest.seed = seed;
    manifest.config = pretrain_study_json(rc);
    manifest.run_id = RunManifest::make_id(manifest.command, seed, manifest.config);

    std::vector<PretrainArmResult> arms;
    {
        StageTimer t(manifest, "pretrain");
        arms = compare_pretraining(ds, rc, seed);
    }
    wb_detail::write_text(out_dir / "pretrain_curves.csv", pretrain_curves_csv(arms));
    wb_detail::write_text(out_dir / "pretrain_summary.csv",
                          pretrain_summary_csv(arms, rc.threshold));

    std::vector<Series> series;
    for (const auto& a : arms) {
        Series s;
        s.name = pretrain_arm_name(a.arm);
        for (const auto& m : a.finetune.history) {
            s.x.push_back(m.epoch);
            s.y.push_back(m.val_acc);
        }
        series.push_back(std::move(s));
    }
    ChartOptions co;
    co.title = "fine-tuning validation accuracy by pretraining arm";
    co.x_label = "fine-tuning epoch";
    co.y_label = "val task accuracy";
    wb_detail::write_text(out_dir / "pretrain_val_acc.svg", line_chart_svg(series, co));

    manifest.add_artifact(out_dir, "pretrain_curves.csv");
    manifest.add_artifact(out_dir, "pretrain_summary.csv");
    manifest.add_artifact(out_dir, "pretrain_val_acc.svg");
    manifest.save(out_dir);
    return arms;
}

inline std::vector<MethodResult> workbench_align(const Dataset& ds, const CausalLM& base,
                                                 AlignmentConfig cfg, const fs::path& out_dir,
                                                 uint64_t seed, bool force) {
    if (cfg.pairs.empty()) cfg.pairs = derive_alignment_pairs(ds);

    RunLock lock(out_dir, force);
    wb_detail::refuse_existing_output(out_dir / "manifest.json", force);

    RunManifest manifest;
    manifest.command = "align";
    manifest.seed = seed;
    manifest.config = alignment_config_json(cfg);
    manifest.run_id = RunManifest::make_id(manifest.command, seed, manifest.config);

    std::vector<MethodResult> results;
    {
        StageTimer t(manifest, "align");
        results = run_alignment(base, ds, cfg, seed);
    }
    wb_detail::write_text(out_dir / "alignment.csv", alignment_csv(results));
    wb_detail::write_text(out_dir / "alignment_detail.csv", alignment_detail_csv(results));

    // per-task accuracy view: pre-alignment baseline plus one line per method
    std::vector<Series> series;
    Series pre;
    pre.name = "pre";
    for (const auto& d : results.front().detail) {
        pre.x.push_back(d.task_id);
        pre.y.push_back(d.pre);
    }
    series.push_back(std::move(pre));
    for (const auto& r : results) {
        Series s;
        s.name = align_method_name(r.method);
        for (const auto& d : r.detail) {
            s.x.push_back(d.task_id);
            s.y.push_back(d.post);
        }
        series.push_back(std::move(s));
    }
    ChartOptions co;
    co.title = "per-task validation accuracy after alignment";
    co.x_label = "task id";
    co.y_label = "accuracy";
    wb_detail::write_text(out_dir / "alignment_post.svg", line_chart_svg(series, co));

    manifest.add_artifact(out_dir, "alignment.csv");
    manifest.add_artifact(out_dir, "alignment_detail.csv");
    manifest.add_artifact(out_dir, "alignment_post.svg");
    manifest.save(out_dir);
    return results;
}

// ---------------------------------------------------------------------------
// import-acts / report

// Validates an externally produced activation dump and files it under the
// run's snapshots so analyze can sweep it like any training snapshot.
inline fs::path workbench_import_acts(const fs::path& acts_file, const fs::path& run_dir,
                                      bool force) {
    ActivationDump dump = import_external_dump(acts_file);  // full validation
    RunLock lock(run_dir, force);
    if (fs::exists(run_dir / "manifest.json")) {
        RunManifest prior = RunManifest::load(run_dir);
        if (prior.command != "import-acts")
            throw ConfigError("refusing to import into a " + prior.command + " run directory");
    }
    fs::path snap_dir = run_dir / "snapshots";
    fs::create_directories(snap_dir);
    fs::path dest = snap_dir / ("epoch_" + std::to_string(dump.epoch) + ".acts");
    if (!force && fs::exists(dest))
        throw ConfigError("output already exists: " + dest.string() + " (pass --force to redo)");
    dump.save(dest);

    RunManifest manifest;
    manifest.command = "import-acts";
    manifest.config = Json{{"source", dump.source}, {"epoch", dump.epoch},
                           {"points", dump.n_points()}, {"layers", dump.layers.size()}};
    manifest.run_id = RunManifest::make_id(manifest.command, 0, manifest.config);
    manifest.add_tree(run_dir, "snapshots");  // repeat imports accumulate here
    manifest.save(run_dir);
    return dest;
}

// Verifies every manifest under the run directory, then writes report.md
// summarizing the run and its artifacts.
inline std::string workbench_report(const fs::path& run_dir) {
    std::vector<fs::path> manifest_dirs;
    if (fs::exists(run_dir / "manifest.json")) manifest_dirs.push_back(run_dir);
    for (const char* sub : {"analysis", "knn"})
        if (fs::exists(run_dir / sub / "manifest.json")) manifest_dirs.push_back(run_dir / sub);
    if (manifest_dirs.empty()) throw IntegrityError("no manifest under " + run_dir.string());

    std::string md = "# Run report\n";
    for (const auto& dir : manifest_dirs) {
        RunManifest m = RunManifest::load(dir);
        // analyze/knn manifests live in subdirectories but reference
        // artifacts relative to the run root
        m.verify(run_dir);
        md += "\n## " + m.command + "\n\n";
        md += "- run id: `" + m.run_id + "`\n";
        md += "- tool version: " + m.tool_version + "\n";
        md += "- seed: " + std::to_string(m.seed) + "\n";
        for (const auto& [stage, secs] : m.timings)
            md += "- " + stage + " time: " + format_double(secs, 4) + "s\n";
        md += "\n| artifact | bytes | checksum |\n|---|---|---|\n";
        for (const auto& a : m.artifacts)
            md += "| " + a.path + " | " + std::to_string(a.bytes) + " | `" + a.checksum + "` |\n";
    }

    fs::path best = run_dir / "best.txt";
    if (fs::exists(best)) {
        std::ifstream f(best);
        std::string line, block;
        while (std::getline(f, line)) block += line + "\n";
        md += "\n## Best epoch\n\n```\n" + block + "```\n";
    }
    wb_detail::write_text(run_dir / "report.md", md);
    return md;
}

}  // namespace iflab
