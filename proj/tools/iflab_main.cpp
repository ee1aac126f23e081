// iflab: synthesize instruction-following data, train small causal LMs on
// it, and probe how task identity organizes their hidden states.
//
// Verbs: gen, train, analyze, knn, pretrain, align, import-acts, report.
// Relative --run-dir/--out/--data paths resolve under $IFLAB_ROOT when set.
// Exit codes: 0 ok, 2 configuration error, 3 data integrity error,
// 4 numerical failure.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "iflab/workbench.hpp"

using namespace iflab;

namespace {

fs::path resolve(const std::string& p) {
    fs::path path(p);
    const char* root = std::getenv("IFLAB_ROOT");
    if (path.is_relative() && root && *root) return fs::path(root) / path;
    return path;
}

LabelType parse_label_type(const std::string& s) {
    if (s == "task") return LabelType::kTask;
    if (s == "distribution") return LabelType::kDistribution;
    if (s == "distribution_mapping") return LabelType::kDistributionMapping;
    throw ConfigError("unknown label type: " + s +
                      " (expected task, distribution, or distribution_mapping)");
}

std::string note_for(const fs::path& dataset_path) {
    return dataset_path.string() + "#" + checksum_hex(checksum_file(dataset_path));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "iflab: instruction-following dataset synthesis, causal-LM training, "
        "and hidden-state analysis. Set IFLAB_ROOT to anchor relative paths."};
    app.require_subcommand(1);

    uint64_t seed = 0;
    bool seed_given = false;
    std::string config_path, run_dir, data_path, out_dir;
    int threads = 1;
    bool force = false;

    app.add_option("--seed", seed, "base RNG seed")->each([&](const std::string&) {
        seed_given = true;
    });
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--run-dir", run_dir, "run directory");
    app.add_option("--threads", threads, "worker threads for analysis sweeps");
    app.add_flag("--force", force, "redo work even if outputs exist");

    auto* gen = app.add_subcommand("gen", "generate a dataset from a config");
    gen->add_option("-o,--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "train a model into a run directory");
    train->add_option("--data", data_path, "dataset file from gen")->required();
    bool resume = false;
    int stop_after = 0;
    train->add_flag("--resume", resume, "continue from the latest saved state");
    train->add_option("--stop-after", stop_after,
                      "checkpoint and exit after this epoch (interruption testing)");

    auto* analyze = app.add_subcommand("analyze", "cluster snapshot hidden states, score, plot");
    bool with_tsne = false;
    std::vector<std::string> split_names, label_names;
    analyze->add_flag("--tsne", with_tsne, "also cluster a t-SNE embedding, keep the better F1");
    analyze->add_option("--splits", split_names, "splits to score (default: train_subset validation)");
    analyze->add_option("--label-types", label_names,
                        "task, distribution, distribution_mapping (default: all)");

    auto* knn = app.add_subcommand("knn", "nearest-neighbor probe over snapshots");
    int k = 10;
    knn->add_option("--data", data_path, "dataset file from gen")->required();
    knn->add_option("--k", k, "neighbor count");

    auto* pretrain = app.add_subcommand("pretrain", "compare pretraining arms, then fine-tune");
    pretrain->add_option("--data", data_path, "dataset file from gen")->required();
    pretrain->add_option("-o,--out", out_dir, "output directory")->required();

    auto* align = app.add_subcommand("align", "retarget source tasks onto their partners");
    std::string base_dir;
    align->add_option("--data", data_path, "dataset file from gen")->required();
    align->add_option("--base", base_dir, "training run directory holding the base model")
        ->required();
    align->add_option("-o,--out", out_dir, "output directory")->required();

    auto* import_acts = app.add_subcommand("import-acts", "file an external activation dump");
    std::string acts_path;
    import_acts->add_option("--acts", acts_path, "activation dump file")->required();

    auto* report = app.add_subcommand("report", "verify manifests and write report.md");

    for (auto* sub : {gen, train, analyze, knn, pretrain, align, import_acts, report})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
        app.exit(e);
        return static_cast<int>(ExitCode::kExitConfigError);
    }

    try {
        if (gen->parsed()) {
            if (config_path.empty()) throw ConfigError("gen needs --config");
            DataConfig dc = parse_data_config(load_json_file(resolve(config_path)));
            if (seed_given) dc.seed = seed;
            fs::path out = resolve(out_dir);
            fs::path file = workbench_gen(dc, out, force);
            Json stats = load_json_file(out / "dataset_stats.json");
            std::cout << "wrote " << file.string() << " (train " << stats["train"]
                      << ", subset " << stats["train_subset"] << ", validation "
                      << stats["validation"] << ")\n";
        } else if (train->parsed()) {
            if (run_dir.empty()) throw ConfigError("train needs --run-dir");
            fs::path data = resolve(data_path);
            Dataset ds = Dataset::load(data);
            TrainBundleConfig cfg;
            if (!config_path.empty())
                cfg = parse_train_bundle(load_json_file(resolve(config_path)));
            TrainRunOutcome out = workbench_train(ds, cfg, resolve(run_dir), seed, resume, force,
                                                  stop_after, note_for(data));
            if (out.stopped) {
                std::cout << "stopped after epoch " << stop_after << "; resume with --resume\n";
            } else {
                std::cout << "trained " << out.result.history.size() << " epochs; best epoch "
                          << out.result.best_epoch << " (val acc "
                          << format_double(out.result.best_val_acc, 4) << ")\n";
            }
        } else if (analyze->parsed()) {
            if (run_dir.empty()) throw ConfigError("analyze needs --run-dir");
            SweepOptions so;
            so.policy = with_tsne ? ReductionPolicy::kBoth : ReductionPolicy::kNone;
            so.seed = seed;
            so.threads = threads;
            if (!split_names.empty()) so.splits = split_names;
            if (!label_names.empty()) {
                so.label_types.clear();
                for (const auto& n : label_names) so.label_types.push_back(parse_label_type(n));
            }
            auto rows = workbench_analyze(resolve(run_dir), so, force);
            std::cout << "scored " << rows.size() << " cells into "
                      << (resolve(run_dir) / "analysis").string() << "\n";
        } else if (knn->parsed()) {
            if (run_dir.empty()) throw ConfigError("knn needs --run-dir");
            Dataset ds = Dataset::load(resolve(data_path));
            auto rows = workbench_knn(resolve(run_dir), ds, k, force);
            std::cout << "probed " << rows.size() << " (epoch, layer) cells into "
                      << (resolve(run_dir) / "knn").string() << "\n";
        } else if (pretrain->parsed()) {
            if (config_path.empty()) throw ConfigError("pretrain needs --config");
            Dataset ds = Dataset::load(resolve(data_path));
            PretrainStudyConfig cfg = parse_pretrain_study(load_json_file(resolve(config_path)));
            auto arms = workbench_pretrain(ds, cfg, resolve(out_dir), seed, force);
            for (const auto& a : arms)
                std::cout << pretrain_arm_name(a.arm) << ": reaches "
                          << format_double(cfg.threshold, 4) << " at epoch "
                          << a.epochs_to_threshold << " (best val acc "
                          << format_double(a.finetune.best_val_acc, 4) << ")\n";
        } else if (align->parsed()) {
            Dataset ds = Dataset::load(resolve(data_path));
            AlignmentConfig cfg;
            if (!config_path.empty())
                cfg = parse_alignment_config(load_json_file(resolve(config_path)));
            CausalLM base = load_run_model(resolve(base_dir));
            auto results = workbench_align(ds, base, cfg, resolve(out_dir), seed, force);
            for (const auto& r : results)
                std::cout << align_method_name(r.method) << ": source accuracy "
                          << format_double(r.source_accuracy, 4) << ", drop "
                          << format_double(r.accuracy_drop, 4) << "\n";
        } else if (import_acts->parsed()) {
            if (run_dir.empty()) throw ConfigError("import-acts needs --run-dir");
            fs::path dest = workbench_import_acts(resolve(acts_path), resolve(run_dir), force);
            std::cout << "imported " << dest.string() << "\n";
        } else if (report->parsed()) {
            if (run_dir.empty()) throw ConfigError("report needs --run-dir");
            workbench_report(resolve(run_dir));
            std::cout << "verified manifests; wrote "
                      << (resolve(run_dir) / "report.md").string() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitConfigError);
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitIntegrityError);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kExitNumericError);
    }
    return 0;
}
