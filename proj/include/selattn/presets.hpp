// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Named desk-scale experiment presets wiring a model size, training recipe,
// and data pipeline together.

#pragma once

#include "selattn/training.hpp"

namespace selattn {

struct preset {
    std::string name;
    model_config mc;
    train_config tc;
    batch_source train_source;
    std::function<std::vector<task_sample>(index_t, std::uint64_t)> make_eval;
    std::function<std::vector<task_sample>(index_t, std::uint64_t)> make_eval_ood;  // may be null
    std::function<std::vector<task_sample>(index_t)> make_tune;  // budget-search split
    eval_metric metric = eval_metric::answer_accuracy;
    index_t pad_id = 0;
};

inline std::vector<task_sample> sample_many(const std::function<task_sample(rng64&)>& gen,
                                            index_t count, std::uint64_t seed) {
    rng64 rng(seed);
    std::vector<task_sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (index_t i = 0; i < count; ++i) out.push_back(gen(rng));
    return out;
}

inline preset make_preset(const std::string& name) {
    preset p;
    p.name = name;
    if (name == "varass") {
        var_assign_spec spec;
        p.mc.d = 3;
        p.mc.context_size = spec.sample_length();
        p.mc.vocab_size = spec.vocab_size();
        p.tc.steps = 20000;
        p.tc.batch_size = 256;
        p.tc.micro_batch = 32;
        p.tc.warmup_steps = 200;
        p.tc.eval_every = 50;
        p.tc.eval_samples = 512;
        p.tc.stop_at_accuracy = 0.995;
        p.train_source = task_stream([spec](rng64& rng) { return gen_variable_assignment(spec, rng); });
        p.make_eval = [spec](index_t n, std::uint64_t seed) {
            return sample_many([spec](rng64& r) { return gen_variable_assignment(spec, r); }, n, seed);
        };
        p.make_eval_ood = [spec](index_t n, std::uint64_t seed) {
            return sample_many([spec](rng64& r) { return gen_variable_assignment(spec, r, true); }, n,
                               seed);
        };
        p.metric = eval_metric::answer_accuracy;
    } else if (name == "copy") {
        copy_spec spec;
        p.mc.d = 3;
        p.mc.context_size = spec.sample_length();
        p.mc.vocab_size = spec.vocab_size();
        p.tc.steps = 20000;
        p.tc.batch_size = 64;
        p.tc.micro_batch = 64;
        p.tc.warmup_steps = 200;
        p.tc.eval_every = 100;
        p.tc.eval_samples = 512;
        p.tc.stop_at_accuracy = 0.99;
        p.train_source = task_stream([spec](rng64& rng) { return gen_copy(spec, rng); });
        p.make_eval = [spec](index_t n, std::uint64_t seed) {
            return sample_many([spec](rng64& r) { return gen_copy(spec, r); }, n, seed);
        };
        p.metric = eval_metric::answer_accuracy;
    } else if (name == "parity") {
        parity_spec spec;
        p.mc.d = 3;
        p.mc.context_size = spec.sample_length();
        p.mc.vocab_size = spec.vocab_size();
        p.tc.steps = 20000;
        p.tc.batch_size = 64;
        p.tc.micro_batch = 64;
        p.tc.warmup_steps = 200;
        p.tc.eval_every = 100;
        p.tc.eval_samples = 512;
        p.tc.stop_at_accuracy = 0.99;
        p.train_source = task_stream([spec](rng64& rng) { return gen_parity_star(spec, rng); });
        p.make_eval = [spec](index_t n, std::uint64_t seed) {
            return sample_many([spec](rng64& r) { return gen_parity_star(spec, r); }, n, seed);
        };
        p.metric = eval_metric::answer_accuracy;
    } else if (name == "lm-tiny") {
        p.mc.d = 4;
        p.mc.context_size = 256;
        p.mc.vocab_size = byte_vocab::size;
        p.tc.steps = 30000;
        p.tc.batch_size = 8;
        p.tc.micro_batch = 8;
        p.tc.warmup_steps = 1000;
        p.tc.eval_every = 2000;
        p.tc.eval_samples = 192;
        auto train_windows = chunk_corpus(synthetic_corpus(8u << 20, 9001), p.mc.context_size);
        p.train_source = corpus_stream(std::move(train_windows));
        // fixed held-out validation text, independent of the run seed
        p.make_eval = [ctx = p.mc.context_size](index_t n, std::uint64_t) {
            auto w = chunk_corpus(synthetic_corpus(512u << 10, 9002), ctx);
            w.resize(std::min<std::size_t>(w.size(), static_cast<std::size_t>(n)));
            return w;
        };
        // budget-search tuning text, independent of train and validation
        p.make_tune = [ctx = p.mc.context_size](index_t n) {
            auto w = chunk_corpus(synthetic_corpus(256u << 10, 9003), ctx);
            w.resize(std::min<std::size_t>(w.size(), static_cast<std::size_t>(n)));
            return w;
        };
        p.metric = eval_metric::log_perplexity;
        p.pad_id = byte_vocab::pad;
    } else {
        throw user_error("unknown preset '" + name + "' (available: varass, copy, parity, lm-tiny)");
    }
    if (!p.make_tune) {
        p.make_tune = [mk = p.make_eval](index_t n) { return mk(n, 777001); };
    }
    p.mc.attention.selective = true;  // callers flip this off for baselines
    return p;
}

}  // namespace selattn
