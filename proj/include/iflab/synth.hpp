#pragma once

// Synthetic instruction-following data. Each task is a small string-rewrite
// function over a task-symbol alphabet; each task owns one or more
// instruction distributions, defined by tiny regular expressions over a
// disjoint instruction alphabet. An instance serializes as
// [instruction; input; output] with no separators.
//
// Hard variants: a handful of marker symbols are reserved out of the
// instruction alphabet and never appear in any regex. A hard task's
// instructions are source-task instructions with one position overwritten
// by that task's marker, so the perturbation is systematic (Hamming
// distance exactly 1), collision-free with every regex language, and
// generalizes to unseen instructions.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace iflab {

struct DataConfig {
    uint64_t seed = 0;
    int n_tasks = 50;
    int n_instruction_symbols = 35;
    int n_markers = 5;
    int n_task_symbols = 25;
    int n_mappings = 5;
    int min_dists = 1;
    int max_dists = 6;
    int train_instructions_per_dist = 10;
    int val_instructions_per_dist = 3;
    int min_regex_nodes = 1;
    int max_regex_nodes = 3;
    int min_regex_args = 3;
    int max_regex_args = 10;
    int max_repeat = 3;
    int n_subset_tasks = 5;
    int n_hard_tasks = 5;
    int hard_dists_per_task = 2;
    int hard_instructions_per_dist = 3;
    int train_total = 7300;        // 0 = whatever the draws produce
    int val_total = 315;           // 0 = unconstrained
    int train_subset_total = 180;  // 0 = unconstrained
    int n_aligned_pairs = 0;       // leading task pairs share their input set
    bool val_all_tasks = false;    // validation instructions for every distribution

    int n_identities() const { return n_tasks + n_hard_tasks; }

    void validate() const {
        if (n_tasks < 1) throw ConfigError("data: n_tasks must be >= 1");
        if (n_markers < 0 || n_markers >= n_instruction_symbols)
            throw ConfigError("data: markers must leave usable instruction symbols");
        if (n_instruction_symbols - n_markers < max_regex_args)
            throw ConfigError("data: regex args cannot exceed the non-marker symbol pool");
        if (n_task_symbols < 2) throw ConfigError("data: need at least 2 task symbols");
        if (n_mappings < 1) throw ConfigError("data: n_mappings must be >= 1");
        if (n_mappings > n_task_symbols)
            throw ConfigError("data: per-task mapping inputs must be distinct symbols");
        if ((n_tasks + n_hard_tasks) * n_mappings > n_task_symbols * n_task_symbols)
            throw ConfigError("data: not enough symbol pairs for globally unique mappings");
        if (min_dists < 1 || max_dists < min_dists) throw ConfigError("data: bad dists range");
        if (min_regex_nodes < 1 || max_regex_nodes < min_regex_nodes)
            throw ConfigError("data: bad regex node range");
        if (min_regex_args < 1 || max_regex_args < min_regex_args)
            throw ConfigError("data: bad regex args range");
        if (max_repeat < 1) throw ConfigError("data: max_repeat must be >= 1");
        if (n_subset_tasks < 1 || n_subset_tasks > n_tasks)
            throw ConfigError("data: bad subset task count");
        if (n_hard_tasks != 0 && n_hard_tasks != n_subset_tasks)
            throw ConfigError("data: hard tasks must be 0 or one per subset task");
        if (n_hard_tasks > 0 && n_markers < n_hard_tasks)
            throw ConfigError("data: need one marker per hard task");
        if (n_hard_tasks > 0 && (hard_dists_per_task < 1 || hard_instructions_per_dist < 1))
            throw ConfigError("data: bad hard example shape");
        if (n_hard_tasks > 0 && hard_instructions_per_dist > train_instructions_per_dist)
            throw ConfigError("data: hard instructions cannot exceed the source pool");
        if (n_aligned_pairs * 2 > n_tasks) throw ConfigError("data: too many aligned pairs");
        if (train_total < 0 || val_total < 0 || train_subset_total < 0)
            throw ConfigError("data: totals must be >= 0");
    }

    nlohmann::json to_json() const;
    static DataConfig from_json(const nlohmann::json& j);
};

// Token id layout: [instruction symbols | task symbols | pad | trigger | task-id tokens].
struct SymbolVocab {
    int n_instruction_symbols = 0;
    int n_markers = 0;
    int n_task_symbols = 0;
    int n_identities = 0;

    static SymbolVocab from_config(const DataConfig& c) {
        return SymbolVocab{c.n_instruction_symbols, c.n_markers, c.n_task_symbols, c.n_identities()};
    }

    int size() const { return n_instruction_symbols + n_task_symbols + 2 + n_identities; }
    int regex_pool() const { return n_instruction_symbols - n_markers; }  // ids [0, pool)
    int marker(int i) const { return n_instruction_symbols - n_markers + i; }
    bool is_marker(int id) const {
        return id >= n_instruction_symbols - n_markers && id < n_instruction_symbols;
    }
    bool is_instruction_symbol(int id) const { return id >= 0 && id < n_instruction_symbols; }
    int task_symbol(int i) const { return n_instruction_symbols + i; }
    bool is_task_symbol(int id) const {
        return id >= n_instruction_symbols && id < n_instruction_symbols + n_task_symbols;
    }
    int pad() const { return n_instruction_symbols + n_task_symbols; }
    int trigger() const { return pad() + 1; }
    int task_token(int identity) const { return trigger() + 1 + identity; }
};

enum class RegexKind { kAlternation, kRepeatedClass, kOptionalGroup, kLiteralRun };

struct RegexNode {
    RegexKind kind;
    std::vector<int> args;
};

struct RegexPattern {
    std::vector<RegexNode> nodes;
    int max_repeat = 3;

    int min_len() const {
        int n = 0;
        for (const auto& node : nodes) {
            switch (node.kind) {
                case RegexKind::kAlternation:
                case RegexKind::kRepeatedClass: n += 1; break;
                case RegexKind::kOptionalGroup: break;
                case RegexKind::kLiteralRun: n += static_cast<int>(node.args.size()); break;
            }
        }
        return n;
    }

    int max_len() const {
        int n = 0;
        for (const auto& node : nodes) {
            switch (node.kind) {
                case RegexKind::kAlternation: n += 1; break;
                case RegexKind::kRepeatedClass: n += max_repeat; break;
                case RegexKind::kOptionalGroup:
                case RegexKind::kLiteralRun: n += static_cast<int>(node.args.size()); break;
            }
        }
        return n;
    }

    std::vector<int> sample(Rng& rng) const {
        std::vector<int> out;
        for (const auto& node : nodes) {
            switch (node.kind) {
                case RegexKind::kAlternation:
                    out.push_back(node.args[static_cast<size_t>(
                        rng.uniform_int(0, static_cast<int64_t>(node.args.size()) - 1))]);
                    break;
                case RegexKind::kRepeatedClass: {
                    int r = static_cast<int>(rng.uniform_int(1, max_repeat));
                    for (int i = 0; i < r; ++i)
                        out.push_back(node.args[static_cast<size_t>(
                            rng.uniform_int(0, static_cast<int64_t>(node.args.size()) - 1))]);
                    break;
                }
                case RegexKind::kOptionalGroup:
                    if (rng.bernoulli(0.5))
                        for (int a : node.args) out.push_back(a);
                    break;
                case RegexKind::kLiteralRun:
                    for (int a : node.args) out.push_back(a);
                    break;
            }
        }
        return out;
    }

    bool matches(const std::vector<int>& s) const { return match_from(s, 0, 0); }

private:
    bool match_from(const std::vector<int>& s, size_t ni, size_t pos) const {
        if (ni == nodes.size()) return pos == s.size();
        const RegexNode& node = nodes[ni];
        auto in_class = [&](int sym) {
            return std::find(node.args.begin(), node.args.end(), sym) != node.args.end();
        };
        switch (node.kind) {
            case RegexKind::kAlternation:
                return pos < s.size() && in_class(s[pos]) && match_from(s, ni + 1, pos + 1);
            case RegexKind::kRepeatedClass:
                for (int r = 1; r <= max_repeat; ++r) {
                    if (pos + static_cast<size_t>(r) > s.size() || !in_class(s[pos + static_cast<size_t>(r) - 1]))
                        break;
                    if (match_from(s, ni + 1, pos + static_cast<size_t>(r))) return true;
                }
                return false;
            case RegexKind::kOptionalGroup: {
                if (match_from(s, ni + 1, pos)) return true;
                if (pos + node.args.size() > s.size()) return false;
                for (size_t i = 0; i < node.args.size(); ++i)
                    if (s[pos + i] != node.args[i]) return false;
                return match_from(s, ni + 1, pos + node.args.size());
            }
            case RegexKind::kLiteralRun: {
                if (pos + node.args.size() > s.size()) return false;
                for (size_t i = 0; i < node.args.size(); ++i)
                    if (s[pos + i] != node.args[i]) return false;
                return match_from(s, ni + 1, pos + node.args.size());
            }
        }
        return false;
    }
};

struct TaskSpec {
    int task_id = 0;
    bool is_hard = false;
    int source_task = -1;
    int marker_symbol = -1;
    std::vector<int> inputs;   // absolute token ids, one symbol per mapping
    std::vector<int> outputs;  // outputs[m] pairs with inputs[m]
};

struct DistSpec {
    int dist_id = 0;
    int task_id = 0;
    int source_dist = -1;  // hard distributions: the perturbed original
    RegexPattern pattern;  // empty for hard distributions
    std::vector<std::vector<int>> train_instructions;
    std::vector<std::vector<int>> val_instructions;
};

// One data point: [instruction; input symbol; output symbol] with no
// separator tokens. A negative input/output symbol means that slot is absent
// (used by instruction-only pretraining sequences).
struct Instance {
    int task_id = 0;
    int dist_id = 0;
    int mapping_id = 0;
    std::vector<int> instruction;
    int input_symbol = -1;
    int output_symbol = -1;

    std::vector<int> tokens() const {
        std::vector<int> t;
        t.reserve(instruction.size() + 2);
        t.insert(t.end(), instruction.begin(), instruction.end());
        if (input_symbol >= 0) t.push_back(input_symbol);
        if (output_symbol >= 0) t.push_back(output_symbol);
        return t;
    }

    std::vector<int> prompt() const {
        std::vector<int> t;
        t.insert(t.end(), instruction.begin(), instruction.end());
        if (input_symbol >= 0) t.push_back(input_symbol);
        return t;
    }

    // Index of the input token inside tokens()/prompt() (the last prompt token).
    int last_input_pos() const {
        return static_cast<int>(instruction.size()) - (input_symbol >= 0 ? 0 : 1);
    }
};

struct Dataset {
    DataConfig cfg;
    SymbolVocab vocab;
    std::vector<TaskSpec> tasks;
    std::vector<DistSpec> dists;
    std::vector<Instance> train, train_subset, validation;

    int max_sequence_len() const {
        size_t mx = 0;
        for (const auto* split : {&train, &train_subset, &validation})
            for (const auto& in : *split) mx = std::max(mx, in.tokens().size());
        return static_cast<int>(mx);
    }

    const TaskSpec& task(int id) const { return tasks[static_cast<size_t>(id)]; }

    void save(const std::filesystem::path& path) const;
    static Dataset load(const std::filesystem::path& path);
};

namespace synth_detail {

constexpr int kStringBudget = 10000;
constexpr int kRegexAttempts = 100;

inline RegexPattern sample_pattern(const DataConfig& cfg, const SymbolVocab& vocab, Rng& rng) {
    RegexPattern p;
    p.max_repeat = cfg.max_repeat;
    int n_nodes = static_cast<int>(rng.uniform_int(cfg.min_regex_nodes, cfg.max_regex_nodes));
    for (int i = 0; i < n_nodes; ++i) {
        RegexNode node;
        node.kind = static_cast<RegexKind>(rng.uniform_int(0, 3));
        int n_args = static_cast<int>(rng.uniform_int(cfg.min_regex_args, cfg.max_regex_args));
        node.args = rng.sample_without_replacement(vocab.regex_pool(), n_args);
        p.nodes.push_back(std::move(node));
    }
    return p;
}

// Sound lower bound on the language size: draw a few hundred strings and
// count distinct ones. Passing proves the language holds >= `need` strings.
inline bool language_rich_enough(const RegexPattern& p, int need, Rng& rng) {
    std::set<std::vector<int>> seen;
    int draws = std::max(200, 20 * need);
    for (int i = 0; i < draws; ++i) {
        seen.insert(p.sample(rng));
        if (static_cast<int>(seen.size()) >= need) return true;
    }
    return false;
}

}  // namespace synth_detail

inline Dataset build_dataset(const DataConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.cfg = cfg;
    ds.vocab = SymbolVocab::from_config(cfg);
    Rng rng(derive_seed(cfg.seed, "data"));

    const int per_dist_train = cfg.train_instructions_per_dist * cfg.n_mappings;
    const int per_dist_val = cfg.val_instructions_per_dist * cfg.n_mappings;
    const int hard_train_total =
        cfg.n_hard_tasks * cfg.hard_dists_per_task * cfg.hard_instructions_per_dist * cfg.n_mappings;

    // ---- distribution counts per task ----
    std::vector<int> subset_ids = rng.sample_without_replacement(cfg.n_tasks, cfg.n_subset_tasks);
    std::sort(subset_ids.begin(), subset_ids.end());
    std::vector<bool> in_subset(static_cast<size_t>(cfg.n_tasks), false);
    for (int t : subset_ids) in_subset[static_cast<size_t>(t)] = true;

    std::vector<int> dist_counts(static_cast<size_t>(cfg.n_tasks));
    for (auto& c : dist_counts) c = static_cast<int>(rng.uniform_int(cfg.min_dists, cfg.max_dists));

    if (cfg.val_total > 0) {
        // validation covers the subset identities; its size pins the number
        // of distributions the subset tasks must own between them
        if (cfg.val_total % per_dist_val != 0)
            throw ConfigError("data: val_total not divisible by instructions x mappings");
        int val_dists = cfg.val_total / per_dist_val;
        int subset_dist_total = val_dists - cfg.n_hard_tasks * cfg.hard_dists_per_task;
        int lo = std::max(cfg.min_dists, cfg.n_hard_tasks > 0 ? cfg.hard_dists_per_task : cfg.min_dists);
        if (subset_dist_total < lo * cfg.n_subset_tasks ||
            subset_dist_total > cfg.max_dists * cfg.n_subset_tasks)
            throw ConfigError("data: val_total incompatible with subset task count");
        int base = subset_dist_total / cfg.n_subset_tasks;
        int rem = subset_dist_total % cfg.n_subset_tasks;
        for (int i = 0; i < cfg.n_subset_tasks; ++i)
            dist_counts[static_cast<size_t>(subset_ids[static_cast<size_t>(i)])] =
                std::max(lo, base + (i < rem ? 1 : 0));
    } else if (cfg.n_hard_tasks > 0) {
        for (int t : subset_ids)
            dist_counts[static_cast<size_t>(t)] =
                std::max(dist_counts[static_cast<size_t>(t)], cfg.hard_dists_per_task);
    }

    if (cfg.train_total > 0) {
        if ((cfg.train_total - hard_train_total) % per_dist_train != 0)
            throw ConfigError("data: train_total does not decompose into whole distributions");
        int want = (cfg.train_total - hard_train_total) / per_dist_train;
        auto total = [&] {
            int s = 0;
            for (int c : dist_counts) s += c;
            return s;
        };
        std::vector<int> adjustable;
        for (int t = 0; t < cfg.n_tasks; ++t)
            if (!in_subset[static_cast<size_t>(t)] || cfg.val_total == 0)
                adjustable.push_back(t);
        if (adjustable.empty()) throw ConfigError("data: no adjustable tasks to hit train_total");
        int guard = 0;
        while (total() != want) {
            if (++guard > 100000) throw ConfigError("data: train_total unreachable with dist bounds");
            int t = adjustable[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(adjustable.size()) - 1))];
            int floor_t = (cfg.n_hard_tasks > 0 && in_subset[static_cast<size_t>(t)])
                              ? std::max(cfg.min_dists, cfg.hard_dists_per_task)
                              : cfg.min_dists;
            if (total() > want && dist_counts[static_cast<size_t>(t)] > floor_t)
                --dist_counts[static_cast<size_t>(t)];
            else if (total() < want && dist_counts[static_cast<size_t>(t)] < cfg.max_dists)
                ++dist_counts[static_cast<size_t>(t)];
        }
    }

    // ---- task mappings: (input symbol -> output symbol), one token each ----
    std::set<std::pair<int, int>> io_pairs;  // globally unique across all tasks
    auto random_task_symbol = [&] {
        return ds.vocab.task_symbol(static_cast<int>(rng.uniform_int(0, cfg.n_task_symbols - 1)));
    };
    auto sample_outputs = [&](const std::vector<int>& inputs) {
        std::vector<int> outputs;
        for (int in : inputs) {
            int tries = 0;
            while (true) {
                int out = random_task_symbol();
                if (io_pairs.insert({in, out}).second) {
                    outputs.push_back(out);
                    break;
                }
                if (++tries > synth_detail::kStringBudget)
                    throw ConfigError("data: cannot satisfy globally unique input/output mappings");
            }
        }
        return outputs;
    };
    auto sample_inputs = [&] {
        std::vector<int> inputs;
        for (int rel : rng.sample_without_replacement(cfg.n_task_symbols, cfg.n_mappings))
            inputs.push_back(ds.vocab.task_symbol(rel));
        return inputs;
    };

    for (int t = 0; t < cfg.n_tasks; ++t) {
        TaskSpec task;
        task.task_id = t;
        bool second_of_pair = t < 2 * cfg.n_aligned_pairs && (t % 2 == 1);
        task.inputs = second_of_pair ? ds.tasks[static_cast<size_t>(t - 1)].inputs : sample_inputs();
        task.outputs = sample_outputs(task.inputs);
        ds.tasks.push_back(std::move(task));
    }

    // ---- regexes for every base distribution ----
    struct DistDraft {
        int task_id;
        bool needs_val;
        RegexPattern pattern;
    };
    std::vector<DistDraft> drafts;
    for (int t = 0; t < cfg.n_tasks; ++t) {
        bool needs_val = cfg.val_all_tasks || (cfg.val_total != 0 && in_subset[static_cast<size_t>(t)]);
        for (int k = 0; k < dist_counts[static_cast<size_t>(t)]; ++k)
            drafts.push_back(DistDraft{t, needs_val, RegexPattern{}});
    }

    const int instr_need_base = cfg.train_instructions_per_dist;
    auto draw_pattern = [&](bool subset_task, int val_need) {
        int need = 3 * (instr_need_base + val_need);
        for (int attempt = 0; attempt < synth_detail::kRegexAttempts; ++attempt) {
            RegexPattern p = synth_detail::sample_pattern(cfg, ds.vocab, rng);
            if (p.min_len() < 1) continue;                  // the empty instruction identifies nothing
            if (subset_task && p.min_len() < 2) continue;   // hard perturbation needs >= 2 positions
            if (!synth_detail::language_rich_enough(p, need, rng)) continue;
            return p;
        }
        throw ConfigError("data: could not sample a rich enough regex");
    };
    for (auto& d : drafts)
        d.pattern = draw_pattern(cfg.n_hard_tasks > 0 && in_subset[static_cast<size_t>(d.task_id)],
                                 d.needs_val ? cfg.val_instructions_per_dist : 0);

    // ---- instruction strings: globally unique, match exactly one regex ----
    std::set<std::vector<int>> instr_set;
    auto unambiguous = [&](const std::vector<int>& s, size_t own) {
        for (size_t o = 0; o < drafts.size(); ++o)
            if (o != own && drafts[o].pattern.matches(s)) return false;
        return true;
    };

    std::vector<std::vector<std::vector<int>>> train_instr(drafts.size()), val_instr(drafts.size());
    for (size_t di = 0; di < drafts.size(); ++di) {
        int want_train = cfg.train_instructions_per_dist;
        int want_val = drafts[di].needs_val ? cfg.val_instructions_per_dist : 0;
        for (int attempt = 0;; ++attempt) {
            if (attempt >= synth_detail::kRegexAttempts)
                throw ConfigError("data: could not populate an instruction distribution");
            std::vector<std::vector<int>> got;
            std::set<std::vector<int>> local;
            int budget = synth_detail::kStringBudget;
            while (static_cast<int>(got.size()) < want_train + want_val && budget-- > 0) {
                auto s = drafts[di].pattern.sample(rng);
                if (local.count(s) || instr_set.count(s)) continue;
                if (!unambiguous(s, di)) continue;
                local.insert(s);
                got.push_back(std::move(s));
            }
            if (static_cast<int>(got.size()) == want_train + want_val) {
                for (auto& s : got) instr_set.insert(s);
                train_instr[di].assign(got.begin(), got.begin() + want_train);
                val_instr[di].assign(got.begin() + want_train, got.end());
                break;
            }
            // replace this regex; the new language must avoid every string
            // other distributions already own
            while (true) {
                RegexPattern p = draw_pattern(
                    cfg.n_hard_tasks > 0 && in_subset[static_cast<size_t>(drafts[di].task_id)],
                    drafts[di].needs_val ? cfg.val_instructions_per_dist : 0);
                bool clashes = false;
                for (const auto& s : instr_set)
                    if (p.matches(s)) {
                        clashes = true;
                        break;
                    }
                if (!clashes) {
                    drafts[di].pattern = std::move(p);
                    break;
                }
            }
        }
    }

    for (size_t di = 0; di < drafts.size(); ++di) {
        DistSpec d;
        d.dist_id = static_cast<int>(di);
        d.task_id = drafts[di].task_id;
        d.pattern = drafts[di].pattern;
        d.train_instructions = train_instr[di];
        d.val_instructions = val_instr[di];
        ds.dists.push_back(std::move(d));
    }

    // ---- hard tasks: marker-perturbed copies of subset-task instructions ----
    std::vector<std::vector<int>> hard_dists_of_task(static_cast<size_t>(cfg.n_hard_tasks));
    std::map<int, std::vector<int>> hard_source_rows;  // hard dist id -> perturbed source indices
    if (cfg.n_hard_tasks > 0) {
        std::set<std::vector<int>> hard_instr_set;
        auto perturb = [&](const std::vector<int>& src, int marker) {
            for (int tries = 0; tries < 64; ++tries) {
                auto s = src;
                size_t p = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(s.size()) - 1));
                s[p] = marker;
                if (!hard_instr_set.count(s)) return s;
            }
            // deterministic sweep as a last resort
            for (size_t p = 0; p < src.size(); ++p) {
                auto s = src;
                s[p] = marker;
                if (!hard_instr_set.count(s)) return s;
            }
            throw ConfigError("data: cannot derive a unique hard instruction");
        };

        for (int i = 0; i < cfg.n_hard_tasks; ++i) {
            int src_task = subset_ids[static_cast<size_t>(i)];
            TaskSpec hard;
            hard.task_id = cfg.n_tasks + i;
            hard.is_hard = true;
            hard.source_task = src_task;
            hard.marker_symbol = ds.vocab.marker(i);
            hard.inputs = ds.tasks[static_cast<size_t>(src_task)].inputs;
            hard.outputs = sample_outputs(hard.inputs);
            ds.tasks.push_back(std::move(hard));

            std::vector<int> src_dists;
            for (const auto& d : ds.dists)
                if (d.task_id == src_task && d.source_dist < 0) src_dists.push_back(d.dist_id);
            auto pick = rng.sample_without_replacement(static_cast<int>(src_dists.size()),
                                                       cfg.hard_dists_per_task);
            std::sort(pick.begin(), pick.end());
            for (int pi : pick) {
                const DistSpec& src = ds.dists[static_cast<size_t>(src_dists[static_cast<size_t>(pi)])];
                DistSpec hd;
                hd.dist_id = static_cast<int>(ds.dists.size());
                hd.task_id = cfg.n_tasks + i;
                hd.source_dist = src.dist_id;
                auto srcs = rng.sample_without_replacement(cfg.train_instructions_per_dist,
                                                           cfg.hard_instructions_per_dist);
                std::sort(srcs.begin(), srcs.end());
                hard_source_rows[hd.dist_id] = srcs;
                for (int si : srcs) {
                    auto s = perturb(src.train_instructions[static_cast<size_t>(si)],
                                     ds.vocab.marker(i));
                    hard_instr_set.insert(s);
                    hd.train_instructions.push_back(std::move(s));
                }
                for (const auto& vsrc : src.val_instructions) {
                    auto s = perturb(vsrc, ds.vocab.marker(i));
                    hard_instr_set.insert(s);
                    hd.val_instructions.push_back(std::move(s));
                }
                hard_dists_of_task[static_cast<size_t>(i)].push_back(hd.dist_id);
                ds.dists.push_back(std::move(hd));
            }
        }
    }

    // ---- materialize instances ----
    auto emit = [&](std::vector<Instance>& split, const DistSpec& d,
                    const std::vector<std::vector<int>>& instrs) {
        const TaskSpec& task = ds.tasks[static_cast<size_t>(d.task_id)];
        for (const auto& ins : instrs)
            for (int m = 0; m < cfg.n_mappings; ++m) {
                Instance x;
                x.task_id = d.task_id;
                x.dist_id = d.dist_id;
                x.mapping_id = m;
                x.instruction = ins;
                x.input_symbol = task.inputs[static_cast<size_t>(m)];
                x.output_symbol = task.outputs[static_cast<size_t>(m)];
                split.push_back(std::move(x));
            }
    };
    for (const auto& d : ds.dists) emit(ds.train, d, d.train_instructions);
    for (const auto& d : ds.dists)
        if (!d.val_instructions.empty()) emit(ds.validation, d, d.val_instructions);

    // ---- training subset, stratified over the probe identities ----
    std::vector<int> identities;
    if (cfg.n_hard_tasks > 0) {
        for (int t : subset_ids) identities.push_back(t);
        for (int i = 0; i < cfg.n_hard_tasks; ++i) identities.push_back(cfg.n_tasks + i);
    } else {
        identities = subset_ids;
    }

    if (cfg.train_subset_total > 0) {
        if (cfg.train_subset_total % static_cast<int>(identities.size()) != 0)
            throw ConfigError("data: train_subset_total not divisible by probe identities");
        int per_identity = cfg.train_subset_total / static_cast<int>(identities.size());

        for (size_t ii = 0; ii < identities.size(); ++ii) {
            int ident = identities[ii];
            // the instruction pool mirrors the hard structure: for a hard task
            // its own instructions, for an original the instructions its hard
            // variant perturbed (when hard examples exist)
            std::vector<std::pair<int, std::vector<int>>> pool;  // (dist, instruction)
            const TaskSpec& task = ds.tasks[static_cast<size_t>(ident)];
            if (cfg.n_hard_tasks > 0) {
                if (task.is_hard) {
                    for (int hd : hard_dists_of_task[static_cast<size_t>(ident - cfg.n_tasks)])
                        for (const auto& s : ds.dists[static_cast<size_t>(hd)].train_instructions)
                            pool.emplace_back(hd, s);
                } else {
                    int hard_idx = static_cast<int>(
                        std::find(subset_ids.begin(), subset_ids.end(), ident) - subset_ids.begin());
                    for (int hd : hard_dists_of_task[static_cast<size_t>(hard_idx)]) {
                        const DistSpec& src =
                            ds.dists[static_cast<size_t>(ds.dists[static_cast<size_t>(hd)].source_dist)];
                        for (int si : hard_source_rows.at(hd))
                            pool.emplace_back(src.dist_id, src.train_instructions[static_cast<size_t>(si)]);
                    }
                }
            } else {
                for (const auto& d : ds.dists)
                    if (d.task_id == ident)
                        for (const auto& s : d.train_instructions) pool.emplace_back(d.dist_id, s);
            }
            if (pool.empty()) throw ConfigError("data: empty subset instruction pool");
            if (per_identity % static_cast<int>(pool.size()) != 0 &&
                per_identity / static_cast<int>(pool.size()) >= cfg.n_mappings)
                throw ConfigError("data: subset size incompatible with instruction pool");
            int maps_per_instr =
                std::min(cfg.n_mappings, std::max(1, per_identity / static_cast<int>(pool.size())));
            if (maps_per_instr * static_cast<int>(pool.size()) != per_identity)
                throw ConfigError("data: subset size must be instructions x mappings per identity");

            for (size_t j = 0; j < pool.size(); ++j) {
                for (int k = 0; k < maps_per_instr; ++k) {
                    int m = static_cast<int>((j * static_cast<size_t>(maps_per_instr) + static_cast<size_t>(k)) %
                                             static_cast<size_t>(cfg.n_mappings));
                    Instance x;
                    x.task_id = ident;
                    x.dist_id = pool[j].first;
                    x.mapping_id = m;
                    x.instruction = pool[j].second;
                    x.input_symbol = task.inputs[static_cast<size_t>(m)];
                    x.output_symbol = task.outputs[static_cast<size_t>(m)];
                    ds.train_subset.push_back(std::move(x));
                }
            }
        }
    }

    // ---- integrity checks ----
    if (cfg.train_total > 0 && static_cast<int>(ds.train.size()) != cfg.train_total)
        throw IntegrityError("data: train size missed its target");
    if (cfg.val_total > 0 && static_cast<int>(ds.validation.size()) != cfg.val_total)
        throw IntegrityError("data: validation size missed its target");
    if (cfg.train_subset_total > 0 && static_cast<int>(ds.train_subset.size()) != cfg.train_subset_total)
        throw IntegrityError("data: train_subset size missed its target");
    {
        std::set<std::vector<int>> all;
        for (const auto& d : ds.dists) {
            for (const auto* group : {&d.train_instructions, &d.val_instructions})
                for (const auto& s : *group)
                    if (!all.insert(s).second) throw IntegrityError("data: duplicate instruction string");
        }
        for (const auto& d : ds.dists) {
            if (d.source_dist >= 0) continue;
            for (const auto* group : {&d.train_instructions, &d.val_instructions})
                for (const auto& s : *group)
                    for (const auto& o : ds.dists) {
                        if (o.source_dist >= 0) continue;
                        bool m = o.pattern.matches(s);
                        if (m != (o.dist_id == d.dist_id))
                            throw IntegrityError("data: ambiguous instruction string");
                    }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// JSONL serialization. First line is a header carrying the config, counts
// and an FNV-1a checksum of every following line; then one record per line.

namespace synth_detail {

inline nlohmann::json pattern_to_json(const RegexPattern& p) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : p.nodes) {
        const char* kind = nullptr;
        switch (n.kind) {
            case RegexKind::kAlternation: kind = "alternation"; break;
            case RegexKind::kRepeatedClass: kind = "repeated_class"; break;
            case RegexKind::kOptionalGroup: kind = "optional_group"; break;
            case RegexKind::kLiteralRun: kind = "literal_run"; break;
        }
        nodes.push_back({{"kind", kind}, {"args", n.args}});
    }
    return {{"max_repeat", p.max_repeat}, {"nodes", nodes}};
}

inline RegexPattern pattern_from_json(const nlohmann::json& j) {
    RegexPattern p;
    p.max_repeat = j.at("max_repeat").get<int>();
    for (const auto& n : j.at("nodes")) {
        RegexNode node;
        std::string kind = n.at("kind").get<std::string>();
        if (kind == "alternation") node.kind = RegexKind::kAlternation;
        else if (kind == "repeated_class") node.kind = RegexKind::kRepeatedClass;
        else if (kind == "optional_group") node.kind = RegexKind::kOptionalGroup;
        else if (kind == "literal_run") node.kind = RegexKind::kLiteralRun;
        else throw IntegrityError("dataset: unknown regex node kind " + kind);
        node.args = n.at("args").get<std::vector<int>>();
        p.nodes.push_back(std::move(node));
    }
    return p;
}

}  // namespace synth_detail

inline nlohmann::json DataConfig::to_json() const {
    return nlohmann::json{{"seed", seed},
                          {"n_tasks", n_tasks},
                          {"n_instruction_symbols", n_instruction_symbols},
                          {"n_markers", n_markers},
                          {"n_task_symbols", n_task_symbols},
                          {"n_mappings", n_mappings},
                          {"min_dists", min_dists},
                          {"max_dists", max_dists},
                          {"train_instructions_per_dist", train_instructions_per_dist},
                          {"val_instructions_per_dist", val_instructions_per_dist},
                          {"min_regex_nodes", min_regex_nodes},
                          {"max_regex_nodes", max_regex_nodes},
                          {"min_regex_args", min_regex_args},
                          {"max_regex_args", max_regex_args},
                          {"max_repeat", max_repeat},
                          {"n_subset_tasks", n_subset_tasks},
                          {"n_hard_tasks", n_hard_tasks},
                          {"hard_dists_per_task", hard_dists_per_task},
                          {"hard_instructions_per_dist", hard_instructions_per_dist},
                          {"train_total", train_total},
                          {"val_total", val_total},
                          {"train_subset_total", train_subset_total},
                          {"n_aligned_pairs", n_aligned_pairs},
                          {"val_all_tasks", val_all_tasks}};
}

inline DataConfig DataConfig::from_json(const nlohmann::json& j) {
    DataConfig c;
    std::set<std::string> known;
    auto get = [&](const char* key, auto& field) {
        known.insert(key);
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("seed", c.seed);
    get("n_tasks", c.n_tasks);
    get("n_instruction_symbols", c.n_instruction_symbols);
    get("n_markers", c.n_markers);
    get("n_task_symbols", c.n_task_symbols);
    get("n_mappings", c.n_mappings);
    get("min_dists", c.min_dists);
    get("max_dists", c.max_dists);
    get("train_instructions_per_dist", c.train_instructions_per_dist);
    get("val_instructions_per_dist", c.val_instructions_per_dist);
    get("min_regex_nodes", c.min_regex_nodes);
    get("max_regex_nodes", c.max_regex_nodes);
    get("min_regex_args", c.min_regex_args);
    get("max_regex_args", c.max_regex_args);
    get("max_repeat", c.max_repeat);
    get("n_subset_tasks", c.n_subset_tasks);
    get("n_hard_tasks", c.n_hard_tasks);
    get("hard_dists_per_task", c.hard_dists_per_task);
    get("hard_instructions_per_dist", c.hard_instructions_per_dist);
    get("train_total", c.train_total);
    get("val_total", c.val_total);
    get("train_subset_total", c.train_subset_total);
    get("n_aligned_pairs", c.n_aligned_pairs);
    get("val_all_tasks", c.val_all_tasks);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("data config: unknown key '" + it.key() + "'");
    c.validate();
    return c;
}

inline void Dataset::save(const std::filesystem::path& path) const {
    std::vector<std::string> lines;
    for (const auto& t : tasks) {
        nlohmann::json j{{"type", "task"},      {"id", t.task_id},
                         {"hard", t.is_hard},   {"source_task", t.source_task},
                         {"marker", t.marker_symbol}, {"inputs", t.inputs},
                         {"outputs", t.outputs}};
        lines.push_back(j.dump());
    }
    for (const auto& d : dists) {
        nlohmann::json j{{"type", "dist"},
                         {"id", d.dist_id},
                         {"task", d.task_id},
                         {"source_dist", d.source_dist},
                         {"pattern", synth_detail::pattern_to_json(d.pattern)},
                         {"train_instructions", d.train_instructions},
                         {"val_instructions", d.val_instructions}};
        lines.push_back(j.dump());
    }
    auto emit_split = [&](const char* name, const std::vector<Instance>& split) {
        for (const auto& x : split) {
            nlohmann::json j{{"type", "instance"}, {"split", name},
                             {"task", x.task_id},  {"dist", x.dist_id},
                             {"mapping", x.mapping_id}, {"instruction", x.instruction},
                             {"input", x.input_symbol}, {"output", x.output_symbol}};
            lines.push_back(j.dump());
        }
    };
    emit_split("train", train);
    emit_split("train_subset", train_subset);
    emit_split("validation", validation);

    uint64_t checksum = 0xcbf29ce484222325ULL;
    for (const auto& l : lines) {
        checksum = fnv1a64(l.data(), l.size(), checksum);
        checksum = fnv1a64("\n", 1, checksum);
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(checksum));

    nlohmann::json header{{"type", "header"},
                          {"version", 1},
                          {"seed", cfg.seed},
                          {"config", cfg.to_json()},
                          {"counts",
                           {{"tasks", tasks.size()},
                            {"dists", dists.size()},
                            {"train", train.size()},
                            {"train_subset", train_subset.size()},
                            {"validation", validation.size()}}},
                          {"checksum", hex}};

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open dataset file for writing: " + path.string());
    f << header.dump() << "\n";
    for (const auto& l : lines) f << l << "\n";
    if (!f) throw IntegrityError("short write on dataset file: " + path.string());
}

inline Dataset Dataset::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open dataset file: " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw IntegrityError("dataset file is empty: " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("dataset header is not valid json: ") + e.what());
    }
    if (header.value("type", "") != "header") throw IntegrityError("dataset: first line is not a header");
    if (header.at("version").get<int>() != 1) throw IntegrityError("dataset: unsupported version");

    Dataset ds;
    ds.cfg = DataConfig::from_json(header.at("config"));
    ds.vocab = SymbolVocab::from_config(ds.cfg);

    uint64_t checksum = 0xcbf29ce484222325ULL;
    std::vector<nlohmann::json> records;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        checksum = fnv1a64(line.data(), line.size(), checksum);
        checksum = fnv1a64("\n", 1, checksum);
        try {
            records.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("dataset record is not valid json: ") + e.what());
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(checksum));
    if (header.at("checksum").get<std::string>() != hex)
        throw IntegrityError("dataset checksum mismatch (file corrupted or truncated)");

    try {
        for (const auto& j : records) {
            std::string type = j.at("type").get<std::string>();
            if (type == "task") {
                TaskSpec t;
                t.task_id = j.at("id").get<int>();
                t.is_hard = j.at("hard").get<bool>();
                t.source_task = j.at("source_task").get<int>();
                t.marker_symbol = j.at("marker").get<int>();
                t.inputs = j.at("inputs").get<std::vector<int>>();
                t.outputs = j.at("outputs").get<std::vector<int>>();
                ds.tasks.push_back(std::move(t));
            } else if (type == "dist") {
                DistSpec d;
                d.dist_id = j.at("id").get<int>();
                d.task_id = j.at("task").get<int>();
                d.source_dist = j.at("source_dist").get<int>();
                d.pattern = synth_detail::pattern_from_json(j.at("pattern"));
                d.train_instructions = j.at("train_instructions").get<std::vector<std::vector<int>>>();
                d.val_instructions = j.at("val_instructions").get<std::vector<std::vector<int>>>();
                ds.dists.push_back(std::move(d));
            } else if (type == "instance") {
                Instance x;
                x.task_id = j.at("task").get<int>();
                x.dist_id = j.at("dist").get<int>();
                x.mapping_id = j.at("mapping").get<int>();
                x.instruction = j.at("instruction").get<std::vector<int>>();
                x.input_symbol = j.at("input").get<int>();
                x.output_symbol = j.at("output").get<int>();
                std::string split = j.at("split").get<std::string>();
                if (split == "train") ds.train.push_back(std::move(x));
                else if (split == "train_subset") ds.train_subset.push_back(std::move(x));
                else if (split == "validation") ds.validation.push_back(std::move(x));
                else throw IntegrityError("dataset: unknown split " + split);
            } else {
                throw IntegrityError("dataset: unknown record type " + type);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("dataset record missing field: ") + e.what());
    }

    const auto& counts = header.at("counts");
    if (counts.at("tasks").get<size_t>() != ds.tasks.size() ||
        counts.at("dists").get<size_t>() != ds.dists.size() ||
        counts.at("train").get<size_t>() != ds.train.size() ||
        counts.at("train_subset").get<size_t>() != ds.train_subset.size() ||
        counts.at("validation").get<size_t>() != ds.validation.size())
        throw IntegrityError("dataset: header counts do not match records");
    return ds;
}

}  // namespace iflab
