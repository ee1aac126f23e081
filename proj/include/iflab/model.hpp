#pragma once

// Decoder-only causal LM: pre-norm transformer blocks, learned positional
// embeddings, untied output head. Two forward paths share the same kernels:
// a graph-building one for training and a tape-free one for evaluation,
// including an incremental-cache greedy decoder. Kernels are row-independent,
// so both paths (and cached vs recomputed decoding) agree bit for bit.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace iflab {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 32;
    int n_layers = 6;
    int n_heads = 8;
    int d_ff = 0;  // 0 = default rule below
    int max_len = 50;
    float dropout = 0.2f;
    float layer_norm_eps = 1e-5f;

    // FFN width tracks the hidden size except at the 768 reference size.
    int resolved_d_ff() const { return d_ff > 0 ? d_ff : (d_model == 768 ? 1024 : 2 * d_model); }

    void validate() const {
        if (vocab_size <= 0) throw ConfigError("model: vocab_size must be positive");
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_len <= 0)
            throw ConfigError("model: sizes must be positive");
        if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
        if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("model: dropout must be in [0, 1)");
    }
};

// A packed ragged batch: all sequences concatenated, no padding.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<int> positions;
    std::vector<int> offsets;  // n_seq + 1, offsets.back() == tokens.size()

    int n_seq() const { return static_cast<int>(offsets.size()) - 1; }
    int total() const { return static_cast<int>(tokens.size()); }

    static PackedBatch pack(const std::vector<std::vector<int>>& seqs) {
        PackedBatch b;
        b.offsets.push_back(0);
        for (const auto& s : seqs) {
            if (s.empty()) throw ConfigError("pack: empty sequence");
            for (int t : s) b.tokens.push_back(t);
            for (size_t p = 0; p < s.size(); ++p) b.positions.push_back(static_cast<int>(p));
            b.offsets.push_back(static_cast<int>(b.tokens.size()));
        }
        return b;
    }

    // Next-token targets over the packed layout; the last position of every
    // sequence predicts nothing and is masked out.
    void clm_targets(std::vector<int>& targets, std::vector<uint8_t>& mask) const {
        targets.assign(tokens.size(), 0);
        mask.assign(tokens.size(), 0);
        for (int s = 0; s < n_seq(); ++s) {
            for (int i = offsets[static_cast<size_t>(s)]; i + 1 < offsets[static_cast<size_t>(s) + 1]; ++i) {
                targets[static_cast<size_t>(i)] = tokens[static_cast<size_t>(i) + 1];
                mask[static_cast<size_t>(i)] = 1;
            }
        }
    }
};

template <typename F>
class CausalLMT {
public:
    using M = MatT<F>;

    CausalLMT(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        build_params();
        init_weights(init_seed);
    }

    const ModelConfig& config() const { return cfg_; }

    std::vector<ParamT<F>*> params() {
        std::vector<ParamT<F>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    ParamT<F>& param_by_name(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw ConfigError("model: no parameter named " + name);
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

    // ---- training path: builds the autodiff graph, returns the logits node ----

    int forward_logits(GraphT<F>& g, const PackedBatch& b) {
        check_batch(b);
        const int d = cfg_.d_model;
        const F p = static_cast<F>(cfg_.dropout);
        const F eps = static_cast<F>(cfg_.layer_norm_eps);

        int wte = g.param(at("wte")), wpe = g.param(at("wpe"));
        int x = g.add(g.embed(wte, b.tokens), g.embed(wpe, b.positions));
        x = g.dropout(x, p);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            std::string pre = "h" + std::to_string(l) + ".";
            int h = g.rowwise_affine(g.layer_norm(x, eps), g.param(at(pre + "ln1.g")),
                                     g.param(at(pre + "ln1.b")));
            int qkv = g.add_row(g.matmul(h, g.param(at(pre + "attn.w_qkv"))),
                                g.param(at(pre + "attn.b_qkv")));
            int q = g.slice_cols(qkv, 0, d);
            int k = g.slice_cols(qkv, d, 2 * d);
            int v = g.slice_cols(qkv, 2 * d, 3 * d);
            int a = g.causal_attention(q, k, v, b.offsets, cfg_.n_heads, p);
            a = g.add_row(g.matmul(a, g.param(at(pre + "attn.w_proj"))), g.param(at(pre + "attn.b_proj")));
            x = g.add(x, g.dropout(a, p));
            int h2 = g.rowwise_affine(g.layer_norm(x, eps), g.param(at(pre + "ln2.g")),
                                      g.param(at(pre + "ln2.b")));
            int m = g.gelu(g.add_row(g.matmul(h2, g.param(at(pre + "mlp.w_fc"))), g.param(at(pre + "mlp.b_fc"))));
            m = g.add_row(g.matmul(m, g.param(at(pre + "mlp.w_out"))), g.param(at(pre + "mlp.b_out")));
            x = g.add(x, g.dropout(m, p));
        }
        int xf = g.rowwise_affine(g.layer_norm(x, eps), g.param(at("lnf.g")), g.param(at("lnf.b")));
        return g.matmul(xf, g.param(at("head.w")));
    }

    int forward_loss(GraphT<F>& g, const PackedBatch& b) {
        std::vector<int> targets;
        std::vector<uint8_t> mask;
        b.clm_targets(targets, mask);
        return g.cross_entropy_mean(forward_logits(g, b), std::move(targets), std::move(mask));
    }

    // ---- evaluation path: no tape ----

    // Full forward. `trace`, when given, receives n_layers + 1 packed
    // matrices: the token+position embedding, then each block's output
    // (pre final norm). `kv`, when given, receives per-layer packed K and V
    // for cache seeding.
    M eval_logits(const PackedBatch& b, std::vector<M>* trace = nullptr,
                  std::vector<std::pair<M, M>>* kv = nullptr) const {
        check_batch(b);
        const int d = cfg_.d_model;
        const int Mrows = b.total();
        const F eps = static_cast<F>(cfg_.layer_norm_eps);

        M x(Mrows, d);
        const M& wte = cat("wte").value;
        const M& wpe = cat("wpe").value;
        for (int i = 0; i < Mrows; ++i) {
            const F* te = wte.row(b.tokens[static_cast<size_t>(i)]);
            const F* pe = wpe.row(b.positions[static_cast<size_t>(i)]);
            F* xi = x.row(i);
            for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
        }
        if (trace) {
            trace->clear();
            trace->push_back(x);
        }
        if (kv) kv->clear();

        M h(Mrows, d), qkv(Mrows, 3 * d), attn(Mrows, d), proj(Mrows, d);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            std::string pre = "h" + std::to_string(l) + ".";
            ln_affine(x, cat(pre + "ln1.g").value, cat(pre + "ln1.b").value, eps, h);
            mm_nn(h, cat(pre + "attn.w_qkv").value, qkv);
            add_bias(qkv, cat(pre + "attn.b_qkv").value);
            attention_nograd(qkv, b.offsets, attn);
            if (kv) {
                M K(Mrows, d), V(Mrows, d);
                for (int i = 0; i < Mrows; ++i) {
                    std::memcpy(K.row(i), qkv.row(i) + d, sizeof(F) * static_cast<size_t>(d));
                    std::memcpy(V.row(i), qkv.row(i) + 2 * d, sizeof(F) * static_cast<size_t>(d));
                }
                kv->emplace_back(std::move(K), std::move(V));
            }
            mm_nn(attn, cat(pre + "attn.w_proj").value, proj);
            add_bias(proj, cat(pre + "attn.b_proj").value);
            for (size_t i = 0; i < x.d.size(); ++i) x.d[i] += proj.d[i];

            ln_affine(x, cat(pre + "ln2.g").value, cat(pre + "ln2.b").value, eps, h);
            M fc(Mrows, cfg_.resolved_d_ff());
            mm_nn(h, cat(pre + "mlp.w_fc").value, fc);
            add_bias(fc, cat(pre + "mlp.b_fc").value);
            for (auto& v : fc.d) v = gelu_scalar(v);
            mm_nn(fc, cat(pre + "mlp.w_out").value, proj);
            add_bias(proj, cat(pre + "mlp.b_out").value);
            for (size_t i = 0; i < x.d.size(); ++i) x.d[i] += proj.d[i];
            if (trace) trace->push_back(x);
        }
        ln_affine(x, cat("lnf.g").value, cat("lnf.b").value, eps, h);
        M logits(Mrows, cfg_.vocab_size);
        mm_nn(h, cat("head.w").value, logits);
        return logits;
    }

    // Mean next-token CE over a packed batch, evaluation mode.
    double eval_loss(const PackedBatch& b) const {
        M logits = eval_logits(b);
        std::vector<int> targets;
        std::vector<uint8_t> mask;
        b.clm_targets(targets, mask);
        double total = 0;
        int count = 0;
        for (int i = 0; i < logits.rows; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            const F* xi = logits.row(i);
            F mx = xi[0];
            for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, xi[j]);
            double sum = 0;
            for (int j = 0; j < logits.cols; ++j) sum += std::exp(static_cast<double>(xi[j] - mx));
            total += static_cast<double>(mx) + std::log(sum) -
                     static_cast<double>(xi[targets[static_cast<size_t>(i)]]);
            ++count;
        }
        if (count == 0) throw NumericError("eval_loss: batch has no predictable positions");
        return total / count;
    }

    // Greedy continuation of each prefix by out_lens[i] tokens, batched with
    // incremental per-sequence caches. Ties pick the lowest token id.
    std::vector<std::vector<int>> greedy_decode(const std::vector<std::vector<int>>& prefixes,
                                                const std::vector<int>& out_lens) const {
        if (prefixes.size() != out_lens.size())
            throw ConfigError("greedy_decode: prefixes/out_lens size mismatch");
        size_t n = prefixes.size();
        std::vector<std::vector<int>> out(n);
        if (n == 0) return out;
        for (size_t i = 0; i < n; ++i) {
            if (prefixes[i].empty()) throw ConfigError("greedy_decode: empty prefix");
            if (static_cast<int>(prefixes[i].size()) + out_lens[i] > cfg_.max_len)
                throw ConfigError("greedy_decode: sequence would exceed max_len");
        }

        const int d = cfg_.d_model;
        const F eps = static_cast<F>(cfg_.layer_norm_eps);

        // Prefill all prefixes in one packed pass, keeping per-layer K/V.
        PackedBatch pb = PackedBatch::pack(prefixes);
        std::vector<std::pair<M, M>> packed_kv;
        M logits = eval_logits(pb, nullptr, &packed_kv);

        struct SeqState {
            std::vector<M> K, V;  // per layer, capacity rows = max needed
            int len = 0;
            int next_token = 0;
            int remaining = 0;
            size_t idx = 0;
        };
        std::vector<SeqState> st(n);
        for (size_t i = 0; i < n; ++i) {
            int L = static_cast<int>(prefixes[i].size());
            int cap = L + out_lens[i];
            st[i].K.resize(static_cast<size_t>(cfg_.n_layers));
            st[i].V.resize(static_cast<size_t>(cfg_.n_layers));
            for (int l = 0; l < cfg_.n_layers; ++l) {
                st[i].K[static_cast<size_t>(l)] = M(cap, d);
                st[i].V[static_cast<size_t>(l)] = M(cap, d);
                for (int t = 0; t < L; ++t) {
                    int src = pb.offsets[i] + t;
                    std::memcpy(st[i].K[static_cast<size_t>(l)].row(t),
                                packed_kv[static_cast<size_t>(l)].first.row(src),
                                sizeof(F) * static_cast<size_t>(d));
                    std::memcpy(st[i].V[static_cast<size_t>(l)].row(t),
                                packed_kv[static_cast<size_t>(l)].second.row(src),
                                sizeof(F) * static_cast<size_t>(d));
                }
            }
            st[i].len = L;
            st[i].remaining = out_lens[i];
            st[i].idx = i;
            int last = pb.offsets[i + 1] - 1;
            st[i].next_token = argmax_row(logits, last);
            if (st[i].remaining > 0) out[i].push_back(st[i].next_token);
        }

        std::vector<SeqState*> active;
        for (auto& s : st)
            if (s.remaining > 1) active.push_back(&s);

        while (!active.empty()) {
            int S = static_cast<int>(active.size());
            M x(S, d);
            const M& wte = cat("wte").value;
            const M& wpe = cat("wpe").value;
            for (int i = 0; i < S; ++i) {
                const F* te = wte.row(active[static_cast<size_t>(i)]->next_token);
                const F* pe = wpe.row(active[static_cast<size_t>(i)]->len);
                F* xi = x.row(i);
                for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
            }
            M h(S, d), qkv(S, 3 * d), attn(S, d), proj(S, d);
            for (int l = 0; l < cfg_.n_layers; ++l) {
                std::string pre = "h" + std::to_string(l) + ".";
                ln_affine(x, cat(pre + "ln1.g").value, cat(pre + "ln1.b").value, eps, h);
                mm_nn(h, cat(pre + "attn.w_qkv").value, qkv);
                add_bias(qkv, cat(pre + "attn.b_qkv").value);
                for (int i = 0; i < S; ++i) {
                    SeqState& s = *active[static_cast<size_t>(i)];
                    std::memcpy(s.K[static_cast<size_t>(l)].row(s.len), qkv.row(i) + d,
                                sizeof(F) * static_cast<size_t>(d));
                    std::memcpy(s.V[static_cast<size_t>(l)].row(s.len), qkv.row(i) + 2 * d,
                                sizeof(F) * static_cast<size_t>(d));
                    attend_one(qkv.row(i), s.K[static_cast<size_t>(l)], s.V[static_cast<size_t>(l)],
                               s.len + 1, attn.row(i));
                }
                mm_nn(attn, cat(pre + "attn.w_proj").value, proj);
                add_bias(proj, cat(pre + "attn.b_proj").value);
                for (size_t i = 0; i < x.d.size(); ++i) x.d[i] += proj.d[i];
                ln_affine(x, cat(pre + "ln2.g").value, cat(pre + "ln2.b").value, eps, h);
                M fc(S, cfg_.resolved_d_ff());
                mm_nn(h, cat(pre + "mlp.w_fc").value, fc);
                add_bias(fc, cat(pre + "mlp.b_fc").value);
                for (auto& v : fc.d) v = gelu_scalar(v);
                mm_nn(fc, cat(pre + "mlp.w_out").value, proj);
                add_bias(proj, cat(pre + "mlp.b_out").value);
                for (size_t i = 0; i < x.d.size(); ++i) x.d[i] += proj.d[i];
            }
            ln_affine(x, cat("lnf.g").value, cat("lnf.b").value, eps, h);
            M step_logits(S, cfg_.vocab_size);
            mm_nn(h, cat("head.w").value, step_logits);

            std::vector<SeqState*> next_active;
            for (int i = 0; i < S; ++i) {
                SeqState& s = *active[static_cast<size_t>(i)];
                s.len += 1;
                s.remaining -= 1;
                s.next_token = argmax_row(step_logits, i);
                out[s.idx].push_back(s.next_token);
                if (s.remaining > 1) next_active.push_back(&s);
            }
            active = std::move(next_active);
        }
        return out;
    }

    // ---- checkpoints: magic, version, tensor count, then per tensor
    //      name_len/name/ndim/dims and row-major f32 data, little endian ----

    void save_checkpoint(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IntegrityError("cannot open checkpoint for writing: " + path.string());
        f.write("IFCK", 4);
        write_u32(f, 1);
        write_u32(f, static_cast<uint32_t>(params_.size()));
        for (const auto& p : params_) {
            write_u32(f, static_cast<uint32_t>(p.name.size()));
            f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            write_u32(f, 2);
            write_u32(f, static_cast<uint32_t>(p.value.rows));
            write_u32(f, static_cast<uint32_t>(p.value.cols));
            for (F v : p.value.d) {
                float fv = static_cast<float>(v);
                f.write(reinterpret_cast<const char*>(&fv), 4);
            }
        }
        if (!f) throw IntegrityError("short write on checkpoint: " + path.string());
    }

    void load_checkpoint(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IntegrityError("cannot open checkpoint: " + path.string());
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "IFCK", 4) != 0)
            throw IntegrityError("bad checkpoint magic: " + path.string());
        if (read_u32(f) != 1) throw IntegrityError("unsupported checkpoint version");
        uint32_t count = read_u32(f);
        if (count != params_.size())
            throw IntegrityError("checkpoint tensor count does not match the model");
        for (auto& p : params_) {
            uint32_t name_len = read_u32(f);
            std::string name(name_len, '\0');
            f.read(name.data(), name_len);
            if (!f || name != p.name)
                throw IntegrityError("checkpoint tensor order mismatch: expected " + p.name);
            uint32_t ndim = read_u32(f);
            if (ndim != 2) throw IntegrityError("checkpoint tensor must be 2-d");
            uint32_t rows = read_u32(f), cols = read_u32(f);
            if (rows != static_cast<uint32_t>(p.value.rows) || cols != static_cast<uint32_t>(p.value.cols))
                throw IntegrityError("checkpoint shape mismatch on " + p.name);
            for (auto& v : p.value.d) {
                float fv;
                f.read(reinterpret_cast<char*>(&fv), 4);
                v = static_cast<F>(fv);
            }
            if (!f) throw IntegrityError("truncated checkpoint: " + path.string());
        }
        char extra;
        if (f.read(&extra, 1))
            throw IntegrityError("trailing bytes after checkpoint payload: " + path.string());
    }

private:
    static void write_u32(std::ofstream& f, uint32_t v) {
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    static uint32_t read_u32(std::ifstream& f) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw IntegrityError("truncated checkpoint header");
        return v;
    }

    ParamT<F>& at(const std::string& name) { return params_[index_.at(name)]; }
    const ParamT<F>& cat(const std::string& name) const { return params_[index_.at(name)]; }

    void check_batch(const PackedBatch& b) const {
        if (b.offsets.size() < 2 || b.offsets.front() != 0 ||
            b.offsets.back() != static_cast<int>(b.tokens.size()))
            throw DimensionError("batch: bad offsets");
        if (b.positions.size() != b.tokens.size()) throw DimensionError("batch: positions size mismatch");
        for (size_t i = 0; i < b.tokens.size(); ++i) {
            if (b.tokens[i] < 0 || b.tokens[i] >= cfg_.vocab_size)
                throw DimensionError("batch: token id out of range");
            if (b.positions[i] < 0 || b.positions[i] >= cfg_.max_len)
                throw DimensionError("batch: position exceeds max_len");
        }
    }

    void add_param(const std::string& name, int r, int c, bool decay) {
        index_[name] = params_.size();
        params_.emplace_back(name, r, c, decay);
    }

    void build_params() {
        const int d = cfg_.d_model, ff = cfg_.resolved_d_ff();
        add_param("wte", cfg_.vocab_size, d, false);
        add_param("wpe", cfg_.max_len, d, false);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            std::string pre = "h" + std::to_string(l) + ".";
            add_param(pre + "ln1.g", 1, d, false);
            add_param(pre + "ln1.b", 1, d, false);
            add_param(pre + "attn.w_qkv", d, 3 * d, true);
            add_param(pre + "attn.b_qkv", 1, 3 * d, false);
            add_param(pre + "attn.w_proj", d, d, true);
            add_param(pre + "attn.b_proj", 1, d, false);
            add_param(pre + "ln2.g", 1, d, false);
            add_param(pre + "ln2.b", 1, d, false);
            add_param(pre + "mlp.w_fc", d, ff, true);
            add_param(pre + "mlp.b_fc", 1, ff, false);
            add_param(pre + "mlp.w_out", ff, d, true);
            add_param(pre + "mlp.b_out", 1, d, false);
        }
        add_param("lnf.g", 1, d, false);
        add_param("lnf.b", 1, d, false);
        add_param("head.w", d, cfg_.vocab_size, true);
    }

    void init_weights(uint64_t seed) {
        Rng rng(derive_seed(seed, "init"));
        const double base_std = 0.02;
        const double resid_std = base_std / std::sqrt(2.0 * cfg_.n_layers);
        for (auto& p : params_) {
            bool is_gain = p.name.size() >= 2 && p.name.substr(p.name.size() - 2) == ".g";
            bool is_bias_or_shift = p.name.substr(p.name.size() - 2) == ".b" ||
                                    p.name.find(".b_") != std::string::npos;
            bool is_resid_proj = p.name.find("attn.w_proj") != std::string::npos ||
                                 p.name.find("mlp.w_out") != std::string::npos;
            if (is_gain) {
                std::fill(p.value.d.begin(), p.value.d.end(), F(1));
            } else if (is_bias_or_shift) {
                std::fill(p.value.d.begin(), p.value.d.end(), F(0));
            } else {
                p.value.fill_normal(rng, 0.0, is_resid_proj ? resid_std : base_std);
            }
        }
    }

    // y = affine(layer_norm(x)) in one pass; element arithmetic matches the
    // graph ops' order exactly.
    static void ln_affine(const M& x, const M& gain, const M& shift, F eps, M& y) {
        const int n = x.cols;
        for (int i = 0; i < x.rows; ++i) {
            const F* xi = x.row(i);
            F mean = 0;
            for (int j = 0; j < n; ++j) mean += xi[j];
            mean /= F(n);
            F var = 0;
            for (int j = 0; j < n; ++j) {
                F dx = xi[j] - mean;
                var += dx * dx;
            }
            var /= F(n);
            F inv_std = F(1) / std::sqrt(var + eps);
            F* yi = y.row(i);
            const F* gr = gain.row(0);
            const F* sr = shift.row(0);
            for (int j = 0; j < n; ++j) yi[j] = ((xi[j] - mean) * inv_std) * gr[j] + sr[j];
        }
    }

    static void add_bias(M& x, const M& bias) {
        for (int i = 0; i < x.rows; ++i) {
            F* xi = x.row(i);
            const F* br = bias.row(0);
            for (int j = 0; j < x.cols; ++j) xi[j] += br[j];
        }
    }

    // Causal multi-head attention over packed qkv ([M x 3d]) without a tape.
    void attention_nograd(const M& qkv, const std::vector<int>& offsets, M& out) const {
        const int d = cfg_.d_model;
        const int hd = d / cfg_.n_heads;
        const F alpha = F(1) / std::sqrt(F(hd));
        std::vector<F> p;
        for (size_t s = 0; s + 1 < offsets.size(); ++s) {
            const int base = offsets[s];
            const int L = offsets[s + 1] - base;
            p.resize(static_cast<size_t>(L));
            for (int h = 0; h < cfg_.n_heads; ++h) {
                const int hq = h * hd, hk = d + h * hd, hv = 2 * d + h * hd;
                for (int t = 0; t < L; ++t) {
                    const F* qt = qkv.row(base + t) + hq;
                    F mx = -std::numeric_limits<F>::infinity();
                    for (int j = 0; j <= t; ++j) {
                        const F* kj = qkv.row(base + j) + hk;
                        F acc = 0;
                        for (int e = 0; e < hd; ++e) acc += qt[e] * kj[e];
                        p[static_cast<size_t>(j)] = acc * alpha;
                        mx = std::max(mx, p[static_cast<size_t>(j)]);
                    }
                    F sum = 0;
                    for (int j = 0; j <= t; ++j) {
                        p[static_cast<size_t>(j)] = std::exp(p[static_cast<size_t>(j)] - mx);
                        sum += p[static_cast<size_t>(j)];
                    }
                    F inv = F(1) / sum;
                    F* ot = out.row(base + t) + hq;
                    std::fill(ot, ot + hd, F(0));
                    for (int j = 0; j <= t; ++j) {
                        F w = p[static_cast<size_t>(j)] * inv;
                        const F* vj = qkv.row(base + j) + hv;
                        for (int e = 0; e < hd; ++e) ot[e] += w * vj[e];
                    }
                }
            }
        }
    }

    // One query row against cached K/V (cache_len valid rows).
    void attend_one(const F* qkv_row, const M& K, const M& V, int cache_len, F* out_row) const {
        const int d = cfg_.d_model;
        const int hd = d / cfg_.n_heads;
        const F alpha = F(1) / std::sqrt(F(hd));
        std::vector<F> p(static_cast<size_t>(cache_len));
        for (int h = 0; h < cfg_.n_heads; ++h) {
            const int hc = h * hd;
            const F* qt = qkv_row + hc;
            F mx = -std::numeric_limits<F>::infinity();
            for (int j = 0; j < cache_len; ++j) {
                const F* kj = K.row(j) + hc;
                F acc = 0;
                for (int e = 0; e < hd; ++e) acc += qt[e] * kj[e];
                p[static_cast<size_t>(j)] = acc * alpha;
                mx = std::max(mx, p[static_cast<size_t>(j)]);
            }
            F sum = 0;
            for (int j = 0; j < cache_len; ++j) {
                p[static_cast<size_t>(j)] = std::exp(p[static_cast<size_t>(j)] - mx);
                sum += p[static_cast<size_t>(j)];
            }
            F inv = F(1) / sum;
            F* ot = out_row + hc;
            std::fill(ot, ot + hd, F(0));
            for (int j = 0; j < cache_len; ++j) {
                F w = p[static_cast<size_t>(j)] * inv;
                const F* vj = V.row(j) + hc;
                for (int e = 0; e < hd; ++e) ot[e] += w * vj[e];
            }
        }
    }

    static int argmax_row(const M& logits, int row) {
        const F* r = logits.row(row);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
            if (r[j] > r[best]) best = j;
        return best;
    }

    ModelConfig cfg_;
    std::vector<ParamT<F>> params_;
    std::map<std::string, size_t> index_;
};

using CausalLM = CausalLMT<float>;

}  // namespace iflab
