// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop: decoupled-weight-decay Adam, linear warmup into cosine
// decay, optional auxiliary memory loss, deterministic micro-batched
// gradient accumulation (fixed shard size, fixed reduction order), metrics
// stream, divergence detection with rollback to the last good snapshot.

#pragma once

#include <chrono>
#include <cmath>
#include <optional>

#include "selattn/pruning.hpp"

namespace selattn {

struct train_config {
    std::int64_t steps = 1000;
    index_t batch_size = 32;
    index_t micro_batch = 32;  // shard size; part of the reproducibility contract
    double lr = 0.005;
    std::int64_t warmup_steps = 1000;
    double lr_floor_ratio = 0.1;  // cosine floor as a fraction of peak
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // 0 disables clipping
    std::uint64_t seed = 0;
    std::optional<mem_loss_params> mem_loss;
    std::int64_t eval_every = 0;  // 0: evaluate only at the end
    index_t eval_samples = 512;
    double stop_at_accuracy = -1.0;  // early stop once eval accuracy reaches this

    void validate() const {
        if (steps < 0) throw user_error("train_config: steps must be >= 0");
        if (batch_size < 1) throw user_error("train_config: batch_size must be >= 1");
        if (micro_batch < 1) throw user_error("train_config: micro_batch must be >= 1");
        if (lr <= 0) throw user_error("train_config: lr must be > 0");
        if (warmup_steps > steps) throw user_error("train_config: warmup_steps must be <= steps");
        if (lr_floor_ratio < 0 || lr_floor_ratio > 1) {
            throw user_error("train_config: lr_floor_ratio must be in [0,1]");
        }
        if (mem_loss) mem_loss->validate();
    }
};

inline void to_json(json& j, const train_config& c) {
    j = json{{"steps", c.steps},
             {"batch_size", c.batch_size},
             {"micro_batch", c.micro_batch},
             {"lr", c.lr},
             {"warmup_steps", c.warmup_steps},
             {"lr_floor_ratio", c.lr_floor_ratio},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"weight_decay", c.weight_decay},
             {"grad_clip", c.grad_clip},
             {"seed", c.seed},
             {"eval_every", c.eval_every},
             {"eval_samples", c.eval_samples},
             {"stop_at_accuracy", c.stop_at_accuracy}};
    if (c.mem_loss) j["mem_loss"] = json{{"epsilon", c.mem_loss->epsilon}, {"tau", c.mem_loss->tau}};
}

inline void from_json(const json& j, train_config& c) {
    c.steps = j.value("steps", std::int64_t(1000));
    c.batch_size = j.value("batch_size", index_t(32));
    c.micro_batch = j.value("micro_batch", index_t(32));
    c.lr = j.value("lr", 0.005);
    c.warmup_steps = j.value("warmup_steps", std::int64_t(1000));
    c.lr_floor_ratio = j.value("lr_floor_ratio", 0.1);
    c.beta1 = j.value("beta1", 0.9);
    c.beta2 = j.value("beta2", 0.999);
    c.weight_decay = j.value("weight_decay", 0.0);
    c.grad_clip = j.value("grad_clip", 0.0);
    c.seed = j.value("seed", std::uint64_t(0));
    c.eval_every = j.value("eval_every", std::int64_t(0));
    c.eval_samples = j.value("eval_samples", index_t(512));
    c.stop_at_accuracy = j.value("stop_at_accuracy", -1.0);
    if (j.contains("mem_loss")) {
        mem_loss_params p;
        p.epsilon = j.at("mem_loss").value("epsilon", 0.1);
        p.tau = j.at("mem_loss").value("tau", 1.0);
        c.mem_loss = p;
    }
    c.validate();
}

/// Linear warmup to the peak, then cosine decay to lr_floor_ratio * peak at
/// `steps`. lr(warmup_steps) == peak and lr(steps) == floor exactly.
inline double lr_at(const train_config& c, std::int64_t step) {
    if (c.warmup_steps > 0 && step < c.warmup_steps) {
        return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    }
    const double fl = c.lr * c.lr_floor_ratio;
    if (c.steps <= c.warmup_steps || step == c.warmup_steps) return c.lr;
    if (step >= c.steps) return fl;
    const double progress = static_cast<double>(step - c.warmup_steps) /
                            static_cast<double>(c.steps - c.warmup_steps);
    return fl + (c.lr - fl) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// Adam with decoupled weight decay. The decay multiplier is applied
/// independently of the learning rate, so lr == 0 still decays.
template <typename S>
class adamw {
public:
    explicit adamw(model<S>& m) {
        m.for_each_param([&](const std::string&, tensor<S>& t) { params_.push_back(t); });
        st_.m.resize(params_.size());
        st_.v.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            st_.m[i].assign(static_cast<std::size_t>(params_[i].size()), S(0));
            st_.v[i].assign(static_cast<std::size_t>(params_[i].size()), S(0));
        }
    }

    void load_state(opt_state<S> st) {
        if (st.present()) st_ = std::move(st);
    }
    opt_state<S>& state() { return st_; }

    double grad_norm() {
        double sq = 0;
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (index_t i = 0; i < p.size(); ++i) {
                sq += static_cast<double>(p.grad_data()[i]) * static_cast<double>(p.grad_data()[i]);
            }
        }
        return std::sqrt(sq);
    }

    void step(double lr, double beta1, double beta2, double weight_decay, double grad_clip = 0.0) {
        st_.t += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st_.t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st_.t));
        double clip_scale = 1.0;
        if (grad_clip > 0.0) {
            const double norm = grad_norm();
            if (norm > grad_clip) clip_scale = grad_clip / norm;
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            tensor<S>& p = params_[i];
            p.ensure_grad();
            S* m = st_.m[i].data();
            S* v = st_.v[i].data();
            const S* g = p.grad_data();
            S* w = p.data();
            for (index_t k = 0; k < p.size(); ++k) {
                const double gk = static_cast<double>(g[k]) * clip_scale;
                const double mk = beta1 * static_cast<double>(m[k]) + (1 - beta1) * gk;
                const double vk = beta2 * static_cast<double>(v[k]) + (1 - beta2) * gk * gk;
                m[k] = static_cast<S>(mk);
                v[k] = static_cast<S>(vk);
                const double update = lr * (mk / bc1) / (std::sqrt(vk / bc2) + 1e-8);
                w[k] = static_cast<S>((static_cast<double>(w[k]) - update) * (1.0 - weight_decay));
            }
        }
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<tensor<S>> params_;
    opt_state<S> st_;
};

struct metrics_record {
    std::int64_t step = 0;
    double train_loss = 0;
    double eval_log_perplexity = std::numeric_limits<double>::quiet_NaN();
    double eval_accuracy = std::numeric_limits<double>::quiet_NaN();
    double mem_term = std::numeric_limits<double>::quiet_NaN();
    double wall_time = 0;  // seconds since the run started
};

inline void write_metrics_jsonl(const std::string& path, const std::vector<metrics_record>& recs) {
    std::ofstream out(path);
    if (!out) throw user_error("cannot write " + path);
    for (const auto& r : recs) {
        json j = {{"step", r.step}, {"train_loss", r.train_loss}, {"wall_time", r.wall_time}};
        if (std::isfinite(r.eval_log_perplexity)) j["eval_log_perplexity"] = r.eval_log_perplexity;
        if (std::isfinite(r.eval_accuracy)) j["eval_accuracy"] = r.eval_accuracy;
        if (std::isfinite(r.mem_term)) j["mem_term"] = r.mem_term;
        out << j.dump() << '\n';
    }
}

enum class eval_metric { log_perplexity, answer_accuracy };

inline eval_metric metric_from_name(const std::string& s) {
    if (s == "log_perplexity" || s == "ppl") return eval_metric::log_perplexity;
    if (s == "answer_accuracy" || s == "accuracy") return eval_metric::answer_accuracy;
    throw user_error("unknown metric '" + s + "'");
}

/// Mean NLL over scored positions, or the fraction of scored positions whose
/// argmax equals the target. An optional budget routes evaluation through
/// the pruned forward pass.
template <typename S>
double evaluate(const model<S>& m, const std::vector<task_sample>& samples, eval_metric metric,
                const prune_budget* budget = nullptr, index_t micro_batch = 16) {
    if (samples.empty()) throw user_error("evaluate: no data");
    if (metric == eval_metric::log_perplexity) return masked_eval(m, samples, budget, micro_batch);
    keep_callback<S> cb;
    if (budget) cb = budget_callback<S>(*budget);
    index_t correct = 0, total = 0;
    for (std::size_t at = 0; at < samples.size(); at += static_cast<std::size_t>(micro_batch)) {
        std::vector<task_sample> part(samples.begin() + static_cast<std::ptrdiff_t>(at),
                                      samples.begin() + static_cast<std::ptrdiff_t>(std::min(
                                          samples.size(), at + static_cast<std::size_t>(micro_batch))));
        batch b = stack_samples(part);
        tape<S> tp;
        tp.set_recording(false);
        auto out = m.forward_features(tp, b.tokens, b.count, b.length, budget ? &cb : nullptr);
        // project only the scored rows through the head
        const index_t D = m.cfg.d_model(), V = m.cfg.vocab_size;
        std::vector<index_t> rows;
        for (index_t r = 0; r < b.count * b.length; ++r) {
            if (b.mask[static_cast<std::size_t>(r)]) rows.push_back(r);
        }
        tensor<S> xg = tensor<S>::uninit({static_cast<index_t>(rows.size()), D});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy(out.features.data() + rows[i] * D, out.features.data() + (rows[i] + 1) * D,
                      xg.data() + static_cast<index_t>(i) * D);
        }
        tensor<S> logits = matmul(tp, xg, m.head);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const S* row = logits.data() + static_cast<index_t>(i) * V;
            index_t best = 0;
            for (index_t c = 1; c < V; ++c) {
                if (row[c] > row[best]) best = c;
            }
            correct += best == b.targets[static_cast<std::size_t>(rows[i])] ? 1 : 0;
            total += 1;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

struct train_result {
    std::vector<metrics_record> metrics;
    std::int64_t final_step = 0;  // steps actually applied
    bool diverged = false;
    bool early_stopped = false;
};

/// Runs the optimization loop. The same seed yields a bit-identical
/// parameter trajectory and metrics stream (wall_time aside). When the loss
/// turns non-finite the parameters roll back to the last evaluated snapshot
/// and the result is flagged.
template <typename S>
train_result train(model<S>& m, adamw<S>& opt, const train_config& tc, const batch_source& data,
                   const std::vector<task_sample>& eval_set, eval_metric metric,
                   index_t pad_id = 0) {
    tc.validate();
    train_result res;
    rng64 data_rng(tc.seed);
    const auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    // rollback snapshot for the divergence path
    std::vector<std::vector<S>> snapshot;
    std::int64_t snapshot_step = 0;
    auto take_snapshot = [&] {
        snapshot.clear();
        m.for_each_param([&](const std::string&, tensor<S>& t) {
            snapshot.emplace_back(t.data(), t.data() + t.size());
        });
    };
    auto restore_snapshot = [&] {
        std::size_t i = 0;
        m.for_each_param([&](const std::string&, tensor<S>& t) {
            std::copy(snapshot[i].begin(), snapshot[i].end(), t.data());
            ++i;
        });
    };
    take_snapshot();

    const bool mem_on = tc.mem_loss && tc.mem_loss->epsilon > 0.0;
    if (mem_on && !m.cfg.attention.selective) {
        throw user_error("memory loss needs a selective-attention model");
    }

    for (std::int64_t step = 0; step < tc.steps; ++step) {
        const double lr = lr_at(tc, step);
        batch b = data(data_rng, tc.batch_size);
        const index_t total_masked = masked_count(b.mask);
        if (total_masked == 0) throw user_error("train: batch has no scored positions");

        double loss_val = 0.0, mem_val = 0.0;
        bool numeric_failure = false;
        try {
        for (index_t at = 0; at < b.count; at += tc.micro_batch) {
            const index_t bm = std::min(tc.micro_batch, b.count - at);
            std::vector<std::int32_t> toks(b.tokens.begin() + at * b.length,
                                           b.tokens.begin() + (at + bm) * b.length);
            std::vector<std::int32_t> tgts(b.targets.begin() + at * b.length,
                                           b.targets.begin() + (at + bm) * b.length);
            std::vector<std::uint8_t> msk(b.mask.begin() + at * b.length,
                                          b.mask.begin() + (at + bm) * b.length);
            tape<S> tp;
            auto out = m.forward_features(tp, toks, bm, b.length);
            auto ce = masked_head_nll_sum(tp, out.features, m.head, tgts, msk);
            tensor<S> obj = scale(tp, ce, static_cast<S>(1.0 / static_cast<double>(total_masked)));
            if (mem_on) {
                std::vector<index_t> n_nonpad(static_cast<std::size_t>(bm), 0);
                for (index_t e = 0; e < bm; ++e) {
                    index_t c = 0;
                    for (index_t t = 0; t < b.length; ++t) {
                        if (toks[static_cast<std::size_t>(e * b.length + t)] != pad_id) ++c;
                    }
                    n_nonpad[static_cast<std::size_t>(e)] = std::max<index_t>(1, c);
                }
                std::vector<tensor<S>> acc;
                for (auto& st : out.states) acc.push_back(st.accumulated);
                tensor<S> mt = memory_loss(tp, acc, *tc.mem_loss, n_nonpad);
                tensor<S> mt_scaled =
                    scale(tp, mt, static_cast<S>(static_cast<double>(bm) / static_cast<double>(b.count)));
                mem_val += static_cast<double>(mt_scaled.item());
                obj = add(tp, obj, mt_scaled);
            }
            loss_val += static_cast<double>(ce.item()) / static_cast<double>(total_masked);
            tp.backward(obj);
        }
        } catch (const user_error&) {
            // Mid-step numerical failures (a NaN reaching the softmax turns a
            // causal row degenerate) are divergence, not usage errors.
            numeric_failure = true;
        }
        const double total_loss = loss_val + mem_val;
        if (numeric_failure || !std::isfinite(total_loss)) {
            restore_snapshot();
            res.diverged = true;
            res.final_step = snapshot_step;
            metrics_record r;
            r.step = step;
            r.train_loss = total_loss;
            r.wall_time = wall();
            res.metrics.push_back(r);
            return res;
        }
        opt.step(lr, tc.beta1, tc.beta2, tc.weight_decay, tc.grad_clip);
        opt.zero_grads();
        res.final_step = step + 1;

        const bool last = step + 1 == tc.steps;
        if ((tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) || last) {
            metrics_record r;
            r.step = step + 1;
            r.train_loss = loss_val;
            if (mem_on) r.mem_term = mem_val;
            if (!eval_set.empty()) {
                if (metric == eval_metric::answer_accuracy) {
                    r.eval_accuracy = evaluate(m, eval_set, metric);
                } else {
                    r.eval_log_perplexity = evaluate(m, eval_set, metric);
                }
            }
            r.wall_time = wall();
            res.metrics.push_back(r);
            take_snapshot();
            snapshot_step = step + 1;
            if (tc.stop_at_accuracy >= 0 && std::isfinite(r.eval_accuracy) &&
                r.eval_accuracy >= tc.stop_at_accuracy) {
                res.early_stopped = true;
                return res;
            }
        }
    }
    return res;
}

/// Trains each labelled configuration across the given seeds and writes a
/// CSV of per-label mean and spread of the final evaluation metric. The
/// runner owns model construction so configurations can differ arbitrarily.
struct compare_cell {
    std::string label;
    std::uint64_t seed;
    double final_metric;
};

inline void write_comparison_csv(const std::string& path, const std::vector<compare_cell>& cells) {
    std::map<std::string, std::vector<double>> by_label;
    std::vector<std::string> order;
    for (const auto& c : cells) {
        if (!by_label.count(c.label)) order.push_back(c.label);
        by_label[c.label].push_back(c.final_metric);
    }
    std::ofstream out(path);
    if (!out) throw user_error("cannot write " + path);
    out << "label,seeds,mean,min,max\n";
    for (const auto& label : order) {
        const auto& v = by_label[label];
        double mean = 0, mn = v[0], mx = v[0];
        for (double x : v) {
            mean += x;
            mn = std::min(mn, x);
            mx = std::max(mx, x);
        }
        mean /= static_cast<double>(v.size());
        out << label << ',' << v.size() << ',' << std::setprecision(10) << mean << ',' << mn << ','
            << mx << '\n';
    }
}

inline std::vector<compare_cell> compare_runs(
    const std::vector<std::pair<std::string, std::function<double(std::uint64_t)>>>& configs,
    const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw user_error("compare_runs: need at least one seed");
    std::vector<compare_cell> cells;
    for (const auto& [label, run] : configs) {
        for (std::uint64_t s : seeds) cells.push_back({label, s, run(s)});
    }
    return cells;
}

}  // namespace selattn
