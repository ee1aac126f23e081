#pragma once

// Training loop: AdamW with decoupled weight decay, cosine-annealed learning
// rate, global-norm gradient clipping, per-epoch greedy-decoding accuracy on
// the probe subset and validation split, and exact resume (optimizer state
// and rng streams serialize bit-for-bit).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "model.hpp"
#include "synth.hpp"

namespace iflab {

struct TrainConfig {
    int epochs = 200;
    int batch_size = 64;
    double lr = 1e-4;
    double lr_floor_ratio = 0.1;  // cosine anneals from lr down to ratio * lr
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    int snapshot_stride = 0;  // also checkpoint/state cadence; 0 = ends only
    // Parameter names to optimize; empty = all. Parameters left out are never
    // touched (no gradient step, no weight decay).
    std::vector<std::string> trainable;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (lr <= 0) throw ConfigError("train: lr must be positive");
        if (lr_floor_ratio < 0 || lr_floor_ratio > 1) throw ConfigError("train: bad lr_floor_ratio");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("train: betas must be in [0, 1)");
        if (adam_eps <= 0) throw ConfigError("train: adam_eps must be positive");
        if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
        if (grad_clip < 0) throw ConfigError("train: grad_clip must be >= 0");
        if (snapshot_stride < 0) throw ConfigError("train: snapshot_stride must be >= 0");
    }
};

// lr for 0-based epoch e of T: peak at e=0, floor at e=T-1.
inline double cosine_lr(double peak, double floor_ratio, int e, int total) {
    double floor = peak * floor_ratio;
    if (total <= 1) return peak;
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(3.14159265358979323846 * e / (total - 1)));
}

template <typename F>
class AdamWT {
public:
    AdamWT(std::vector<ParamT<F>*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.push_back(MatT<F>::zeros(p->value.rows, p->value.cols));
            v_.push_back(MatT<F>::zeros(p->value.rows, p->value.cols));
        }
    }

    // Global-norm clip over every parameter gradient; returns the pre-clip norm.
    double clip_gradients() {
        double sq = 0;
        for (auto* p : params_)
            for (F g : p->grad.d) sq += static_cast<double>(g) * static_cast<double>(g);
        double norm = std::sqrt(sq);
        if (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) {
            F scale = static_cast<F>(cfg_.grad_clip / norm);
            for (auto* p : params_)
                for (F& g : p->grad.d) g *= scale;
        }
        return norm;
    }

    void step(double lr) {
        ++t_;
        const F b1 = static_cast<F>(cfg_.beta1), b2 = static_cast<F>(cfg_.beta2);
        const F bc1 = static_cast<F>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        const F bc2 = static_cast<F>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        const F flr = static_cast<F>(lr);
        const F eps = static_cast<F>(cfg_.adam_eps);
        const F decay_mult = static_cast<F>(1.0 - lr * cfg_.weight_decay);
        for (size_t i = 0; i < params_.size(); ++i) {
            ParamT<F>& p = *params_[i];
            MatT<F>& m = m_[i];
            MatT<F>& v = v_[i];
            const bool decay = p.decay && cfg_.weight_decay > 0;
            for (size_t e = 0; e < p.value.d.size(); ++e) {
                if (decay) p.value.d[e] *= decay_mult;
                F g = p.grad.d[e];
                m.d[e] = b1 * m.d[e] + (F(1) - b1) * g;
                v.d[e] = b2 * v.d[e] + (F(1) - b2) * g * g;
                F mhat = m.d[e] / bc1;
                F vhat = v.d[e] / bc2;
                p.value.d[e] -= flr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    int64_t step_count() const { return t_; }
    std::vector<MatT<F>>& moment1() { return m_; }
    std::vector<MatT<F>>& moment2() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    std::vector<ParamT<F>*> params_;
    TrainConfig cfg_;
    std::vector<MatT<F>> m_, v_;
    int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

struct EpochMetrics {
    int epoch = 0;  // 1-based
    double loss = 0;
    double val_loss = 0;
    double subset_acc = 0;
    double val_acc = 0;
    double lr = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    int best_epoch = 0;
    double best_val_acc = 0;
};

// Fraction of instances whose output is reproduced exactly by greedy decoding.
inline double eval_task_accuracy(const CausalLM& model, const std::vector<Instance>& instances,
                                 int chunk = 512) {
    int scored = 0, correct = 0;
    for (size_t base = 0; base < instances.size(); base += static_cast<size_t>(chunk)) {
        size_t end = std::min(instances.size(), base + static_cast<size_t>(chunk));
        std::vector<std::vector<int>> prefixes;
        std::vector<int> lens;
        std::vector<size_t> idx;
        for (size_t i = base; i < end; ++i) {
            if (instances[i].output_symbol < 0) continue;
            prefixes.push_back(instances[i].prompt());
            lens.push_back(1);
            idx.push_back(i);
        }
        if (prefixes.empty()) continue;
        auto decoded = model.greedy_decode(prefixes, lens);
        for (size_t k = 0; k < idx.size(); ++k) {
            ++scored;
            if (decoded[k].at(0) == instances[idx[k]].output_symbol) ++correct;
        }
    }
    return scored == 0 ? 0.0 : static_cast<double>(correct) / scored;
}

// Token-weighted mean CE over instances, chunked to bound peak memory.
inline double eval_clm_loss(const CausalLM& model, const std::vector<Instance>& instances,
                            int max_tokens = 8192) {
    double total = 0;
    int64_t count = 0;
    std::vector<std::vector<int>> group;
    int group_tokens = 0;
    auto flush = [&] {
        if (group.empty()) return;
        PackedBatch b = PackedBatch::pack(group);
        int predictable = b.total() - b.n_seq();
        total += model.eval_loss(b) * predictable;
        count += predictable;
        group.clear();
        group_tokens = 0;
    };
    for (const auto& x : instances) {
        auto t = x.tokens();
        if (t.size() < 2) continue;
        group_tokens += static_cast<int>(t.size());
        group.push_back(std::move(t));
        if (group_tokens >= max_tokens) flush();
    }
    flush();
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// Serializable training state for exact resume. The current model weights
// live in the matching checkpoint file, not here.
struct TrainState {
    int completed_epochs = 0;
    int64_t adam_t = 0;
    std::string shuffle_rng, dropout_rng;
    int best_epoch = 0;
    double best_val_acc = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<Mat> best_params;
    std::vector<Mat> adam_m, adam_v;
    std::vector<EpochMetrics> history;

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IntegrityError("cannot write train state: " + path.string());
        f.write("IFTS", 4);
        auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
        auto w64 = [&](uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
        auto wf64 = [&](double v) { f.write(reinterpret_cast<const char*>(&v), 8); };
        auto wstr = [&](const std::string& s) {
            w32(static_cast<uint32_t>(s.size()));
            f.write(s.data(), static_cast<std::streamsize>(s.size()));
        };
        auto wmats = [&](const std::vector<Mat>& ms) {
            w32(static_cast<uint32_t>(ms.size()));
            for (const auto& m : ms) {
                w32(static_cast<uint32_t>(m.rows));
                w32(static_cast<uint32_t>(m.cols));
                f.write(reinterpret_cast<const char*>(m.d.data()),
                        static_cast<std::streamsize>(m.d.size() * sizeof(float)));
            }
        };
        w32(1);
        w32(static_cast<uint32_t>(completed_epochs));
        w64(static_cast<uint64_t>(adam_t));
        wstr(shuffle_rng);
        wstr(dropout_rng);
        w32(static_cast<uint32_t>(best_epoch));
        wf64(best_val_acc);
        wf64(best_score);
        wmats(best_params);
        wmats(adam_m);
        wmats(adam_v);
        w32(static_cast<uint32_t>(history.size()));
        for (const auto& h : history) {
            w32(static_cast<uint32_t>(h.epoch));
            wf64(h.loss);
            wf64(h.val_loss);
            wf64(h.subset_acc);
            wf64(h.val_acc);
            wf64(h.lr);
        }
        if (!f) throw IntegrityError("short write on train state: " + path.string());
    }

    static TrainState load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IntegrityError("cannot open train state: " + path.string());
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "IFTS", 4) != 0)
            throw IntegrityError("bad train state magic: " + path.string());
        auto r32 = [&] {
            uint32_t v;
            f.read(reinterpret_cast<char*>(&v), 4);
            if (!f) throw IntegrityError("truncated train state");
            return v;
        };
        auto r64 = [&] {
            uint64_t v;
            f.read(reinterpret_cast<char*>(&v), 8);
            if (!f) throw IntegrityError("truncated train state");
            return v;
        };
        auto rf64 = [&] {
            double v;
            f.read(reinterpret_cast<char*>(&v), 8);
            if (!f) throw IntegrityError("truncated train state");
            return v;
        };
        auto rstr = [&] {
            uint32_t n = r32();
            std::string s(n, '\0');
            f.read(s.data(), n);
            if (!f) throw IntegrityError("truncated train state");
            return s;
        };
        auto rmats = [&] {
            uint32_t n = r32();
            std::vector<Mat> ms;
            for (uint32_t i = 0; i < n; ++i) {
                uint32_t r = r32(), c = r32();
                Mat m(static_cast<int>(r), static_cast<int>(c));
                f.read(reinterpret_cast<char*>(m.d.data()),
                       static_cast<std::streamsize>(m.d.size() * sizeof(float)));
                if (!f) throw IntegrityError("truncated train state");
                ms.push_back(std::move(m));
            }
            return ms;
        };
        TrainState st;
        if (r32() != 1) throw IntegrityError("unsupported train state version");
        st.completed_epochs = static_cast<int>(r32());
        st.adam_t = static_cast<int64_t>(r64());
        st.shuffle_rng = rstr();
        st.dropout_rng = rstr();
        st.best_epoch = static_cast<int>(r32());
        st.best_val_acc = rf64();
        st.best_score = rf64();
        st.best_params = rmats();
        st.adam_m = rmats();
        st.adam_v = rmats();
        uint32_t n = r32();
        for (uint32_t i = 0; i < n; ++i) {
            EpochMetrics h;
            h.epoch = static_cast<int>(r32());
            h.loss = rf64();
            h.val_loss = rf64();
            h.subset_acc = rf64();
            h.val_acc = rf64();
            h.lr = rf64();
            st.history.push_back(h);
        }
        return st;
    }
};

class Trainer {
public:
    Trainer(CausalLM& model, const Dataset& data, TrainConfig cfg, uint64_t seed)
        : model_(model),
          data_(data),
          cfg_(std::move(cfg)),
          trainable_(pick_trainable(model, cfg_)),
          opt_(trainable_, cfg_),
          shuffle_rng_(derive_seed(seed, "shuffle")),
          dropout_rng_(derive_seed(seed, "dropout")) {
        cfg_.validate();
        if (data_.train.empty()) throw ConfigError("train: empty training split");
    }

    // Called after each epoch with fresh metrics.
    std::function<void(const EpochMetrics&)> on_epoch;
    // Called at checkpoint epochs (1, stride multiples, final); `model` holds
    // that epoch's weights and `state` permits exact resume from it.
    std::function<void(int epoch, CausalLM& model, const TrainState& state)> on_save;
    // Called once after the last epoch with the best epoch's weights loaded
    // into `model` (they are restored afterwards).
    std::function<void(int best_epoch, CausalLM& model)> on_best;

    TrainResult train() { return run(1); }

    TrainResult resume(const TrainState& st) {
        if (st.completed_epochs >= cfg_.epochs)
            throw ConfigError("resume: run already has all requested epochs");
        if (st.adam_m.size() != trainable_.size() ||
            st.best_params.size() != model_.params().size())
            throw IntegrityError("resume: state does not match the model architecture");
        for (size_t i = 0; i < trainable_.size(); ++i)
            if (!st.adam_m[i].same_shape(trainable_[i]->value))
                throw IntegrityError("resume: optimizer state shape mismatch");
        opt_.moment1() = st.adam_m;
        opt_.moment2() = st.adam_v;
        opt_.set_step_count(st.adam_t);
        shuffle_rng_.load_state(st.shuffle_rng);
        dropout_rng_.load_state(st.dropout_rng);
        best_epoch_ = st.best_epoch;
        best_val_acc_ = st.best_val_acc;
        best_score_ = st.best_score;
        best_params_ = st.best_params;
        history_ = st.history;
        return run(st.completed_epochs + 1);
    }

private:
    TrainResult run(int first_epoch) {
        const size_t n = data_.train.size();
        std::vector<size_t> order(n);

        for (int epoch = first_epoch; epoch <= cfg_.epochs; ++epoch) {
            double lr = cosine_lr(cfg_.lr, cfg_.lr_floor_ratio, epoch - 1, cfg_.epochs);
            for (size_t i = 0; i < n; ++i) order[i] = i;
            shuffle_rng_.shuffle(order);

            double loss_sum = 0;
            int64_t token_count = 0;
            for (size_t base = 0; base < n; base += static_cast<size_t>(cfg_.batch_size)) {
                size_t end = std::min(n, base + static_cast<size_t>(cfg_.batch_size));
                std::vector<std::vector<int>> seqs;
                seqs.reserve(end - base);
                for (size_t i = base; i < end; ++i) seqs.push_back(data_.train[order[i]].tokens());
                PackedBatch b = PackedBatch::pack(seqs);

                model_.zero_grads();
                Graph g(true, &dropout_rng_);
                int loss = model_.forward_loss(g, b);
                double batch_loss = static_cast<double>(g.value(loss).d[0]);
                if (!std::isfinite(batch_loss))
                    throw NumericError("training loss is not finite at epoch " + std::to_string(epoch) +
                                       ", batch offset " + std::to_string(base));
                g.backward(loss);
                opt_.clip_gradients();
                opt_.step(lr);

                int predictable = b.total() - b.n_seq();
                loss_sum += batch_loss * predictable;
                token_count += predictable;
            }

            EpochMetrics m;
            m.epoch = epoch;
            m.loss = token_count ? loss_sum / static_cast<double>(token_count) : 0.0;
            m.lr = lr;
            m.subset_acc = eval_task_accuracy(model_, data_.train_subset);
            m.val_acc = eval_task_accuracy(model_, data_.validation);
            m.val_loss = data_.validation.empty() ? 0.0 : eval_clm_loss(model_, data_.validation);
            history_.push_back(m);
            if (on_epoch) on_epoch(m);

            double score = selector_ ? selector_(m) : m.val_acc;
            if (best_epoch_ == 0 || score > best_score_) {
                best_score_ = score;
                best_epoch_ = epoch;
                best_val_acc_ = m.val_acc;
                best_params_.clear();
                for (auto* p : model_.params()) best_params_.push_back(p->value);
            }

            bool checkpoint_epoch = epoch == 1 || epoch == cfg_.epochs ||
                                    (cfg_.snapshot_stride > 0 && epoch % cfg_.snapshot_stride == 0);
            if (checkpoint_epoch && on_save) on_save(epoch, model_, capture_state(epoch));
        }

        if (on_best) {
            auto params = model_.params();
            std::vector<Mat> current;
            for (auto* p : params) current.push_back(p->value);
            for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_params_[i];
            on_best(best_epoch_, model_);
            for (size_t i = 0; i < params.size(); ++i) params[i]->value = current[i];
        }

        TrainResult r;
        r.history = history_;
        r.best_epoch = best_epoch_;
        r.best_val_acc = best_val_acc_;
        return r;
    }

    TrainState capture_state(int epoch) {
        TrainState st;
        st.completed_epochs = epoch;
        st.adam_t = opt_.step_count();
        st.shuffle_rng = shuffle_rng_.save_state();
        st.dropout_rng = dropout_rng_.save_state();
        st.best_epoch = best_epoch_;
        st.best_val_acc = best_val_acc_;
        st.best_score = best_score_;
        st.best_params = best_params_;
        st.adam_m = opt_.moment1();
        st.adam_v = opt_.moment2();
        st.history = history_;
        return st;
    }

public:
    // Optional override for "best" (defaults to validation accuracy, ties to
    // the earliest epoch). Return value is maximized.
    void set_selector(std::function<double(const EpochMetrics&)> fn) { selector_ = std::move(fn); }

    static std::vector<ParamT<float>*> pick_trainable(CausalLM& model, const TrainConfig& cfg) {
        if (cfg.trainable.empty()) return model.params();
        std::vector<ParamT<float>*> out;
        for (const auto& name : cfg.trainable) {
            ParamT<float>* p = &model.param_by_name(name);
            if (std::find(out.begin(), out.end(), p) != out.end())
                throw ConfigError("train: duplicate trainable parameter " + name);
            out.push_back(p);
        }
        return out;
    }

private:
    CausalLM& model_;
    const Dataset& data_;
    TrainConfig cfg_;
    std::vector<ParamT<float>*> trainable_;
    AdamW opt_;
    Rng shuffle_rng_, dropout_rng_;
    std::function<double(const EpochMetrics&)> selector_;
    int best_epoch_ = 0;
    double best_val_acc_ = 0;
    double best_score_ = -std::numeric_limits<double>::infinity();
    std::vector<Mat> best_params_;
    std::vector<EpochMetrics> history_;
};

}  // namespace iflab
