// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Context-buffer pruning under per-layer token budgets. Once a layer holds
// its budget of tokens, each arriving token evicts the surviving past token
// with the highest accumulated selection value (or the oldest one, for the
// window baselines). Evictions are permanent. The greedy search allocates a
// global budget by repeatedly shrinking the layer that hurts perplexity
// least, and the auxiliary memory loss rewards models for masking early.

#pragma once

#include <iomanip>

#include "selattn/checkpoint.hpp"
#include "selattn/tasks.hpp"

namespace selattn {

enum class evict_policy { selective_f, window, window_plus_first4 };

inline const char* policy_name(evict_policy p) {
    switch (p) {
        case evict_policy::selective_f: return "selective";
        case evict_policy::window: return "window";
        case evict_policy::window_plus_first4: return "window+4";
    }
    return "?";
}

inline evict_policy policy_from_name(const std::string& s) {
    if (s == "selective" || s == "selective_f") return evict_policy::selective_f;
    if (s == "window") return evict_policy::window;
    if (s == "window+4" || s == "window_plus_first4") return evict_policy::window_plus_first4;
    throw user_error("unknown eviction policy '" + s + "'");
}

struct prune_budget {
    std::vector<index_t> per_layer;
    evict_policy policy = evict_policy::selective_f;
    index_t step = 8;  // search step size

    index_t total() const {
        index_t t = 0;
        for (index_t k : per_layer) t += k;
        return t;
    }

    static prune_budget full(index_t n_layers, index_t context, evict_policy p = evict_policy::selective_f,
                             index_t step = 8) {
        prune_budget b;
        b.per_layer.assign(static_cast<std::size_t>(n_layers), context);
        b.policy = p;
        b.step = step;
        return b;
    }
};

inline index_t budget_floor(index_t step) { return std::max<index_t>(step, 2); }

/// Simulates the eviction stream for one layer and one example. `acc` is the
/// layer's accumulated selection matrix ([n,n] row-major; may be null for the
/// window policies). Returns keep bits: keep[i*n+j] == 1 iff token j is still
/// in the buffer when token i attends.
template <typename S>
std::vector<std::uint8_t> evict_sequence(const S* acc, index_t n, index_t budget, evict_policy policy) {
    const index_t min_budget = policy == evict_policy::window_plus_first4 ? 5 : 2;
    if (budget < min_budget) {
        throw user_error("infeasible budget " + std::to_string(budget) + " for policy " +
                         policy_name(policy));
    }
    if (budget >= n) {
        // nothing can ever be evicted: plain causal visibility
        std::vector<std::uint8_t> keep(static_cast<std::size_t>(n * n), 0);
        for (index_t i = 0; i < n; ++i) {
            for (index_t j = 0; j <= i; ++j) keep[static_cast<std::size_t>(i * n + j)] = 1;
        }
        return keep;
    }
    if (policy == evict_policy::selective_f && acc == nullptr) {
        throw user_error("selective eviction needs a selective model's accumulated scores");
    }
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(n * n), 0);
    std::vector<index_t> kept;
    kept.reserve(static_cast<std::size_t>(budget + 1));
    for (index_t i = 0; i < n; ++i) {
        kept.push_back(i);
        if (static_cast<index_t>(kept.size()) > budget) {
            index_t victim_at = -1;
            if (policy == evict_policy::selective_f) {
                S best = S(0);
                bool have = false;
                for (std::size_t p = 0; p < kept.size(); ++p) {
                    const index_t j = kept[p];
                    if (j == 0 || j >= i) continue;  // BOS and the arriving token are safe
                    const S f = acc[i * n + j];
                    if (!have || f > best) {  // ties keep the earliest candidate
                        best = f;
                        have = true;
                        victim_at = static_cast<index_t>(p);
                    }
                }
            } else {
                const index_t first_evictable = policy == evict_policy::window ? 1 : 4;
                for (std::size_t p = 0; p < kept.size(); ++p) {
                    const index_t j = kept[p];
                    if (j >= first_evictable && j < i) {
                        victim_at = static_cast<index_t>(p);
                        break;  // kept is ordered; the first hit is the oldest
                    }
                }
            }
            if (victim_at < 0) {
                throw user_error("infeasible budget: no evictable token at position " +
                                 std::to_string(i));
            }
            kept.erase(kept.begin() + victim_at);
        }
        for (index_t j : kept) keep[static_cast<std::size_t>(i * n + j)] = 1;
    }
    return keep;
}

/// Keep-mask provider wired into model::forward.
template <typename S>
keep_callback<S> budget_callback(const prune_budget& budget) {
    return [&budget](int layer, const tensor<S>* acc, index_t B, index_t n) {
        if (layer >= static_cast<int>(budget.per_layer.size())) {
            throw user_error("budget has too few layers");
        }
        const index_t k = budget.per_layer[static_cast<std::size_t>(layer)];
        std::vector<std::vector<std::uint8_t>> keep(static_cast<std::size_t>(B));
        for (index_t b = 0; b < B; ++b) {
            const S* f = acc ? acc->data() + b * n * n : nullptr;
            keep[static_cast<std::size_t>(b)] = evict_sequence(f, n, k, budget.policy);
        }
        return keep;
    };
}

/// Mean negative log-likelihood over the scored positions of `samples`,
/// with attention restricted to each layer's surviving tokens. Evicted
/// logits become -inf before the softmax; positions keep their absolute
/// indices. A null budget evaluates the unpruned model.
template <typename S>
double masked_eval(const model<S>& m, const std::vector<task_sample>& samples,
                   const prune_budget* budget, index_t micro_batch = 16) {
    if (samples.empty()) throw user_error("masked_eval: no data");
    keep_callback<S> cb;
    if (budget) {
        if (static_cast<index_t>(budget->per_layer.size()) != m.cfg.n_layers()) {
            throw user_error("budget layer count does not match the model");
        }
        cb = budget_callback<S>(*budget);
    }
    double nll = 0.0;
    index_t count = 0;
    for (std::size_t at = 0; at < samples.size(); at += static_cast<std::size_t>(micro_batch)) {
        std::vector<task_sample> part(samples.begin() + static_cast<std::ptrdiff_t>(at),
                                      samples.begin() + static_cast<std::ptrdiff_t>(std::min(
                                          samples.size(), at + static_cast<std::size_t>(micro_batch))));
        batch b = stack_samples(part);
        tape<S> tp;
        tp.set_recording(false);
        auto out = m.forward_features(tp, b.tokens, b.count, b.length, budget ? &cb : nullptr);
        auto loss = masked_head_nll_sum(tp, out.features, m.head, b.targets, b.mask);
        nll += static_cast<double>(loss.item());
        count += masked_count(b.mask);
    }
    return nll / static_cast<double>(count);
}

struct search_row {
    int iteration;
    index_t total_budget;
    double perplexity;  // log-perplexity on the tune set
    std::vector<index_t> budgets;
};

struct search_result {
    prune_budget budget;
    std::vector<search_row> trajectory;
    bool warned = false;  // already above the stop threshold at full budgets
};

/// Greedy budget allocation: start at full context everywhere; each
/// iteration tentatively shrinks every layer by `step` and commits the one
/// whose tune-set log-perplexity is lowest (ties to the lowest layer index).
/// Returns the last budget whose perplexity stayed within `stop_perplexity`.
template <typename S>
search_result greedy_budget_search(const model<S>& m, const std::vector<task_sample>& tune,
                                   double stop_perplexity, index_t step,
                                   evict_policy policy = evict_policy::selective_f) {
    const index_t L = m.cfg.n_layers();
    const index_t floor = budget_floor(step);
    search_result res;
    res.budget = prune_budget::full(L, m.cfg.context_size, policy, step);
    double cur = masked_eval(m, tune, &res.budget);
    res.trajectory.push_back({0, res.budget.total(), cur, res.budget.per_layer});
    if (cur > stop_perplexity) {
        res.warned = true;
        return res;
    }
    prune_budget best_feasible = res.budget;
    for (int iter = 1;; ++iter) {
        int best_layer = -1;
        double best_ppl = std::numeric_limits<double>::infinity();
        for (index_t l = 0; l < L; ++l) {
            if (res.budget.per_layer[static_cast<std::size_t>(l)] - step < floor) continue;
            prune_budget cand = res.budget;
            cand.per_layer[static_cast<std::size_t>(l)] -= step;
            const double ppl = masked_eval(m, tune, &cand);
            if (ppl < best_ppl) {  // strict '<' keeps the lowest layer index on ties
                best_ppl = ppl;
                best_layer = static_cast<int>(l);
            }
        }
        if (best_layer < 0) break;  // every layer is at the floor
        res.budget.per_layer[static_cast<std::size_t>(best_layer)] -= step;
        cur = best_ppl;
        res.trajectory.push_back({iter, res.budget.total(), cur, res.budget.per_layer});
        if (cur <= stop_perplexity) {
            best_feasible = res.budget;
        } else {
            break;  // crossed the threshold; the previous budget is the answer
        }
    }
    res.budget = best_feasible;
    return res;
}

// ---------------------------------------------------------------------------
// Auxiliary memory loss
// ---------------------------------------------------------------------------

struct mem_loss_params {
    double epsilon = 0.1;
    double tau = 1.0;

    void validate() const {
        if (epsilon < 0) throw user_error("mem loss: epsilon must be >= 0");
        if (tau <= 0) throw user_error("mem loss: tau must be > 0");
    }
};

/// Differentiable memory estimate: for each example, layer l and position i,
/// M_i = i - sum_{k=1..i} min(F[i,k], tau)/tau counts the tokens still
/// unmasked (the first column never counts). The term is
/// epsilon * mean_over_examples( sum_l max_i M_i / (L * n_nonpad) ).
template <typename S>
tensor<S> memory_loss(tape<S>& tp, const std::vector<tensor<S>>& accumulated,
                      const mem_loss_params& params, const std::vector<index_t>& n_nonpad) {
    params.validate();
    if (params.epsilon == 0.0 || accumulated.empty()) return tensor<S>::scalar(S(0));
    const index_t L = static_cast<index_t>(accumulated.size());
    const index_t n = accumulated[0].dim(-1);
    const index_t B = accumulated[0].size() / (n * n);
    if (static_cast<index_t>(n_nonpad.size()) != B) {
        throw user_error("memory_loss: n_nonpad must have one entry per example");
    }
    tensor<S> ramp = tensor<S>::zeros({n});
    for (index_t i = 0; i < n; ++i) ramp.data()[i] = static_cast<S>(i);
    tensor<S> acc;  // [B]: sum over layers of max_i M_i
    for (const auto& f : accumulated) {
        tensor<S> clamped = zero_index_axis(tp, min_scalar(tp, f, static_cast<S>(params.tau)), -1, 0);
        tensor<S> covered = scale(tp, tri_rowsum(tp, clamped), static_cast<S>(-1.0 / params.tau));
        tensor<S> mem = add_tiled(tp, covered, ramp, S(1));  // [B,n]
        tensor<S> worst = max_lastdim(tp, mem);               // [B]
        acc = acc.defined() ? add(tp, acc, worst) : worst;
    }
    tensor<S> inv = tensor<S>::zeros({B});
    for (index_t b = 0; b < B; ++b) {
        if (n_nonpad[static_cast<std::size_t>(b)] < 1) throw user_error("memory_loss: n_nonpad must be >= 1");
        inv.data()[b] = static_cast<S>(1.0 / (static_cast<double>(L) *
                                              static_cast<double>(n_nonpad[static_cast<std::size_t>(b)])));
    }
    return scale(tp, sum_all(tp, mul(tp, acc, inv)), static_cast<S>(params.epsilon / static_cast<double>(B)));
}

// ---------------------------------------------------------------------------
// Budget file and trade-off CSV
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const std::vector<std::int32_t>& ids) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int32_t v : ids) {
        for (int b = 0; b < 4; ++b) {
            h ^= static_cast<std::uint64_t>((v >> (8 * b)) & 0xff);
            h *= 1099511628211ull;
        }
    }
    return h;
}

inline std::uint64_t tune_set_hash(const std::vector<task_sample>& samples) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& s : samples) h ^= fnv1a(s.tokens) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

inline void save_budget(const std::string& path, const prune_budget& b, double stop_perplexity,
                        std::uint64_t tune_hash) {
    json j = {{"budgets", b.per_layer},
              {"policy", policy_name(b.policy)},
              {"step", b.step},
              {"stop_perplexity", stop_perplexity},
              {"tune_set_hash", tune_hash}};
    std::ofstream out(path);
    if (!out) throw user_error("cannot write budget file " + path);
    out << j.dump(2) << '\n';
}

inline prune_budget load_budget(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw user_error("cannot open budget file " + path);
    json j = json::parse(in, nullptr, true, true);
    prune_budget b;
    b.per_layer = j.at("budgets").get<std::vector<index_t>>();
    b.policy = policy_from_name(j.value("policy", "selective"));
    b.step = j.value("step", index_t(8));
    return b;
}

inline void save_tradeoff_csv(const std::string& path, const std::vector<search_row>& rows) {
    std::ofstream out(path);
    if (!out) throw user_error("cannot write " + path);
    out << "iteration,total_budget,log_perplexity";
    if (!rows.empty()) {
        for (std::size_t l = 0; l < rows[0].budgets.size(); ++l) out << ",k" << l;
    }
    out << '\n';
    for (const auto& r : rows) {
        out << r.iteration << ',' << r.total_budget << ',' << std::setprecision(10) << r.perplexity;
        for (index_t k : r.budgets) out << ',' << k;
        out << '\n';
    }
}

}  // namespace selattn
