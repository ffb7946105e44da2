// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train / eval / prune-search / dump / gen-corpus.
// Exit codes: 0 success, 2 user error, 3 state mismatch, 4 numerical
// divergence. SELATTN_THREADS caps the worker pool.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "selattn/presets.hpp"

namespace fs = std::filesystem;
using namespace selattn;

namespace {

struct cli_options {
    std::string preset_name;
    std::string model_config_path, train_config_path;
    std::string out_dir = "out";
    std::string selective = "on";
    std::string selection = "head0";
    bool no_shift = false, no_relu = false, allow_bos_mask = false, allow_self_mask = false;
    std::uint64_t seed = 0;
    std::int64_t steps = -1;
    index_t batch = -1;
    double epsilon = -1.0;  // >= 0 attaches the memory loss
    double tau = 1.0;
};

void apply_attention_flags(model_config& mc, const cli_options& o) {
    if (o.selective == "on") {
        mc.attention.selective = true;
    } else if (o.selective == "off") {
        mc.attention.selective = false;
    } else {
        throw user_error("--selective must be on or off");
    }
    if (o.selection == "head0") {
        mc.attention.selection_source = attention_config::source_t::head_zero;
    } else if (o.selection == "bilinear") {
        mc.attention.selection_source = attention_config::source_t::separate_bilinear;
    } else {
        throw user_error("--selection must be head0 or bilinear");
    }
    if (o.no_shift) mc.attention.shift_future = false;
    if (o.no_relu) mc.attention.constrain_relu = false;
    if (o.allow_bos_mask) mc.attention.protect_bos = false;
    if (o.allow_self_mask) mc.attention.protect_self = false;
}

json read_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw user_error(std::string(what) + " file not found: " + path);
    try {
        return json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw user_error(std::string("cannot parse ") + what + " " + path + ": " + e.what());
    }
}

/// Loads a preset and applies config files / flag overrides.
preset resolve_preset(const cli_options& o) {
    preset p = make_preset(o.preset_name.empty() ? "varass" : o.preset_name);
    if (!o.model_config_path.empty()) {
        p.mc = read_json_file(o.model_config_path, "model config").get<model_config>();
    }
    if (!o.train_config_path.empty()) {
        p.tc = read_json_file(o.train_config_path, "train config").get<train_config>();
    }
    apply_attention_flags(p.mc, o);
    if (o.steps >= 0) p.tc.steps = o.steps;
    if (o.batch >= 0) p.tc.batch_size = o.batch;
    if (p.tc.warmup_steps > p.tc.steps) p.tc.warmup_steps = p.tc.steps;
    if (o.epsilon >= 0) p.tc.mem_loss = mem_loss_params{o.epsilon, o.tau};
    p.tc.seed = o.seed;
    return p;
}

struct loaded_run {
    preset p;
    model<float> m;
    checkpoint<float> ck;
};

loaded_run load_run(const std::string& ckpt_path) {
    loaded_run r{make_preset("varass"), model<float>{}, load_checkpoint<float>(ckpt_path)};
    const std::string preset_name = r.ck.meta.value("preset", "varass");
    r.p = make_preset(preset_name);
    r.p.mc = r.ck.config();
    r.m = build<float>(r.p.mc, 0);
    restore_model(r.m, r.ck);
    if (r.ck.meta.contains("train_config")) {
        r.p.tc = r.ck.meta.at("train_config").get<train_config>();
    }
    return r;
}

int cmd_train(const cli_options& o) {
    preset p = resolve_preset(o);
    fs::create_directories(o.out_dir);
    auto m = build<float>(p.mc, o.seed);
    adamw<float> opt(m);
    auto eval_set =
        p.make_eval ? p.make_eval(p.tc.eval_samples, o.seed + 1000003) : std::vector<task_sample>{};
    auto res = train(m, opt, p.tc, p.train_source, eval_set, p.metric, p.pad_id);

    json extra = {{"preset", p.name}, {"train_config", p.tc}, {"final_step", res.final_step}};
    rng64 run_rng(p.tc.seed);
    save_checkpoint(o.out_dir + "/checkpoint.bin", m, res.final_step, run_rng.state(), &opt.state(),
                    &extra);
    write_metrics_jsonl(o.out_dir + "/metrics.jsonl", res.metrics);
    {
        json snapshot = {{"preset", p.name}, {"model", p.mc}, {"train", p.tc}, {"seed", o.seed}};
        std::ofstream cfg(o.out_dir + "/config.json");
        cfg << snapshot.dump(2) << '\n';
    }
    if (!res.metrics.empty()) {
        const auto& last = res.metrics.back();
        std::cout << "trained " << res.final_step << " steps; final train_loss=" << last.train_loss;
        if (std::isfinite(last.eval_accuracy)) std::cout << " eval_accuracy=" << last.eval_accuracy;
        if (std::isfinite(last.eval_log_perplexity)) {
            std::cout << " eval_log_perplexity=" << last.eval_log_perplexity;
        }
        std::cout << (res.early_stopped ? " (early stop)" : "") << "\n";
    }
    if (res.diverged) {
        std::cout << "run diverged; checkpoint holds the last good parameters\n";
        throw divergence_error("training diverged at step " + std::to_string(res.final_step));
    }
    return 0;
}

int cmd_eval(const cli_options& o, const std::string& ckpt_path, const std::string& metric_name,
             bool ood, const std::string& budget_path, index_t samples) {
    auto run = load_run(ckpt_path);
    const eval_metric metric = metric_from_name(metric_name);
    std::vector<task_sample> data;
    if (ood) {
        if (!run.p.make_eval_ood) throw user_error("preset " + run.p.name + " has no OOD split");
        data = run.p.make_eval_ood(samples, o.seed + 2000003);
    } else {
        data = run.p.make_eval(samples, o.seed + 1000003);
    }
    prune_budget budget;
    const bool pruned = !budget_path.empty();
    if (pruned) budget = load_budget(budget_path);
    const double value = evaluate(run.m, data, metric, pruned ? &budget : nullptr);
    json rec = {{"metric", metric == eval_metric::log_perplexity ? "log_perplexity" : "answer_accuracy"},
                {"value", value},
                {"samples", static_cast<std::int64_t>(data.size())},
                {"ood", ood},
                {"checkpoint", ckpt_path}};
    if (pruned) rec["budget"] = budget_path;
    fs::create_directories(o.out_dir);
    std::ofstream out(o.out_dir + "/eval.json");
    out << rec.dump(2) << '\n';
    std::cout << rec["metric"].get<std::string>() << " = " << value << "\n";
    return 0;
}

int cmd_prune_search(const cli_options& o, const std::string& ckpt_path, double stop_ppl,
                     const std::string& baseline_file, index_t step_c, index_t tune_samples,
                     const std::string& policy_name_str) {
    auto run = load_run(ckpt_path);
    if (!baseline_file.empty()) {
        json b = read_json_file(baseline_file, "baseline threshold");
        if (!b.contains("value")) throw user_error("baseline file lacks a 'value' field");
        stop_ppl = b.at("value").get<double>();
    } else if (std::isinf(stop_ppl) && stop_ppl < 0) {
        throw user_error("prune-search needs --stop-ppl or --baseline-file");
    }
    auto tune = run.p.make_tune(tune_samples);
    const evict_policy pol = policy_from_name(policy_name_str);
    auto res = greedy_budget_search(run.m, tune, stop_ppl, step_c, pol);
    fs::create_directories(o.out_dir);
    save_budget(o.out_dir + "/budget.json", res.budget, stop_ppl, tune_set_hash(tune));
    save_tradeoff_csv(o.out_dir + "/tradeoff.csv", res.trajectory);
    std::cout << "budget:";
    for (index_t k : res.budget.per_layer) std::cout << ' ' << k;
    std::cout << "  total=" << res.budget.total() << "/"
              << run.p.mc.n_layers() * run.p.mc.context_size
              << (res.warned ? "  (warning: already above threshold at full budgets)" : "") << "\n";
    return 0;
}

int cmd_dump(const cli_options& o, const std::string& ckpt_path, const std::string& text_path,
             index_t mean_samples, const std::string& budget_path) {
    auto run = load_run(ckpt_path);
    const auto& mc = run.p.mc;
    fs::create_directories(o.out_dir);

    // input: either a text file (byte-level models) or one generated sample
    std::vector<task_sample> inputs;
    if (!text_path.empty()) {
        std::ifstream in(text_path, std::ios::binary);
        if (!in) throw user_error("input text not found: " + text_path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (static_cast<index_t>(text.size()) + 1 > mc.context_size) {
            throw user_error("input text longer than the model context (" +
                             std::to_string(mc.context_size) + " tokens)");
        }
        inputs = chunk_corpus(text, mc.context_size);
    } else {
        inputs = run.p.make_eval(1, o.seed + 3000003);
    }
    batch b = stack_samples({inputs[0]});

    tape<float> tp;
    tp.set_recording(false);
    auto fw = run.m.forward(tp, b.tokens, 1, b.length);
    const index_t n = b.length;
    const int L = static_cast<int>(mc.n_layers());

    auto zero_state = [&] {
        selection_state<float> st;
        st.scores = tensor<float>::zeros({1, n, n});
        st.accumulated = tensor<float>::zeros({1, n, n});
        return st;
    };

    std::ofstream last_row(o.out_dir + "/last_row.csv");
    last_row << "# masking of the final position, one row per layer, n=" << n << "\n";
    for (int l = 0; l < L; ++l) {
        selection_state<float> st =
            mc.attention.selective ? fw.states[static_cast<std::size_t>(l)] : zero_state();
        dump_selection(st, mc.attn_normalized(), l, o.out_dir + "/selection");
        for (index_t j = 0; j < n; ++j) {
            if (j) last_row << ',';
            last_row << st.accumulated.data()[(n - 1) * n + j];
        }
        last_row << '\n';
    }

    if (mean_samples > 0) {
        if (!mc.attention.selective) throw user_error("mean dump needs a selective checkpoint");
        std::vector<std::vector<double>> mean(
            static_cast<std::size_t>(L), std::vector<double>(static_cast<std::size_t>(n * n), 0.0));
        auto samples = run.p.make_eval(mean_samples, o.seed + 4000003);
        index_t done = 0;
        for (std::size_t at = 0; at < samples.size(); at += 16) {
            std::vector<task_sample> part(
                samples.begin() + static_cast<std::ptrdiff_t>(at),
                samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), at + 16)));
            batch pb = stack_samples(part);
            tape<float> t2;
            t2.set_recording(false);
            auto out = run.m.forward(t2, pb.tokens, pb.count, pb.length);
            for (int l = 0; l < L; ++l) {
                const auto& f = out.states[static_cast<std::size_t>(l)].accumulated;
                for (index_t e = 0; e < pb.count; ++e) {
                    for (index_t i = 0; i < n * n; ++i) {
                        mean[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] +=
                            f.data()[e * n * n + i];
                    }
                }
            }
            done += pb.count;
        }
        for (int l = 0; l < L; ++l) {
            std::ofstream mf(o.out_dir + "/mean_accumulated_layer" + std::to_string(l) + ".csv");
            mf << "# mean accumulated selection over " << done << " samples, layer " << l << "\n";
            for (index_t i = 0; i < n; ++i) {
                for (index_t j = 0; j < n; ++j) {
                    if (j) mf << ',';
                    mf << mean[static_cast<std::size_t>(l)][static_cast<std::size_t>(i * n + j)] /
                              static_cast<double>(done);
                }
                mf << '\n';
            }
        }
    }

    if (!budget_path.empty()) {
        prune_budget budget = load_budget(budget_path);
        if (static_cast<index_t>(budget.per_layer.size()) != L) {
            throw state_error("budget layer count does not match the checkpoint");
        }
        keep_callback<float> cb = budget_callback<float>(budget);
        tape<float> t3;
        t3.set_recording(false);
        std::vector<std::vector<std::vector<std::uint8_t>>> keeps;
        keep_callback<float> capture = [&](int layer, const tensor<float>* acc, index_t B,
                                           index_t nn) {
            auto k = cb(layer, acc, B, nn);
            keeps.push_back(k);
            return k;
        };
        run.m.forward(t3, b.tokens, 1, b.length, &capture);
        for (int l = 0; l < L; ++l) {
            std::ofstream kf(o.out_dir + "/keep_mask_layer" + std::to_string(l) + ".csv");
            kf << "# keep mask under budget " << budget.per_layer[static_cast<std::size_t>(l)]
               << ", policy " << policy_name(budget.policy) << ", layer " << l << "\n";
            const auto& km = keeps[static_cast<std::size_t>(l)][0];
            for (index_t i = 0; i < n; ++i) {
                for (index_t j = 0; j < n; ++j) {
                    if (j) kf << ',';
                    kf << static_cast<int>(km[static_cast<std::size_t>(i * n + j)]);
                }
                kf << '\n';
            }
        }
    }
    std::cout << "wrote selection dumps to " << o.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selective-attention experiments"};
    app.require_subcommand(1);

    cli_options o;
    std::string ckpt_path, metric_name = "accuracy", budget_path, text_path, baseline_file;
    std::string policy_str = "selective";
    bool ood = false;
    index_t samples = 1024, tune_samples = 64, mean_samples = 0, step_c = 8;
    double stop_ppl = -std::numeric_limits<double>::infinity();
    std::size_t corpus_bytes = 1 << 20;
    std::string corpus_out = "corpus.txt";

    auto add_common = [&](CLI::App* c) {
        c->add_option("--preset", o.preset_name, "preset: varass, copy, parity, lm-tiny");
        c->add_option("--config", o.model_config_path, "model config JSON");
        c->add_option("--train-config", o.train_config_path, "train config JSON");
        c->add_option("--selective", o.selective, "on|off")->check(CLI::IsMember({"on", "off"}));
        c->add_option("--selection", o.selection, "head0|bilinear")
            ->check(CLI::IsMember({"head0", "bilinear"}));
        c->add_flag("--no-shift", o.no_shift, "masking also affects the masking token itself");
        c->add_flag("--no-relu", o.no_relu, "allow negative selection scores");
        c->add_flag("--allow-bos-mask", o.allow_bos_mask, "let tokens mask the first position");
        c->add_flag("--allow-self-mask", o.allow_self_mask, "let tokens mask themselves");
        c->add_option("--seed", o.seed, "run seed");
        c->add_option("--out", o.out_dir, "output directory");
        c->add_option("--steps", o.steps, "override training steps");
        c->add_option("--batch", o.batch, "override batch size");
        c->add_option("--epsilon", o.epsilon, "attach the memory loss with this weight");
        c->add_option("--tau", o.tau, "memory loss clamp");
    };

    auto* t = app.add_subcommand("train", "train a model from a preset or config files");
    add_common(t);

    auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(e);
    e->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    e->add_option("--metric", metric_name, "accuracy|ppl");
    e->add_flag("--ood", ood, "use the out-of-distribution split");
    e->add_option("--budget", budget_path, "evaluate under a pruning budget file");
    e->add_option("--samples", samples, "evaluation sample count");

    auto* ps = app.add_subcommand("prune-search", "greedy per-layer budget search");
    add_common(ps);
    ps->add_option("--ckpt", ckpt_path, "selective checkpoint")->required();
    ps->add_option("--stop-ppl", stop_ppl, "stop threshold (tune-set log-perplexity)");
    ps->add_option("--baseline-file", baseline_file, "eval.json of the baseline run");
    ps->add_option("--C", step_c, "budget decrement per iteration");
    ps->add_option("--tune-samples", tune_samples, "tune subset size");
    ps->add_option("--policy", policy_str, "selective|window|window+4");

    auto* d = app.add_subcommand("dump", "write selection-matrix and keep-mask CSVs");
    add_common(d);
    d->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    d->add_option("--text", text_path, "input text file (byte-level models)");
    d->add_option("--budget", budget_path, "budget file for keep-mask dumps");
    d->add_option("--mean-samples", mean_samples, "average the accumulated matrix over N samples");

    auto* g = app.add_subcommand("gen-corpus", "write the deterministic demo corpus");
    g->add_option("--bytes", corpus_bytes, "approximate size");
    g->add_option("--seed", o.seed, "generator seed");
    g->add_option("--out", corpus_out, "output file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (t->parsed()) return cmd_train(o);
        if (e->parsed()) return cmd_eval(o, ckpt_path, metric_name, ood, budget_path, samples);
        if (ps->parsed()) {
            return cmd_prune_search(o, ckpt_path, stop_ppl, baseline_file, step_c, tune_samples,
                                    policy_str);
        }
        if (d->parsed()) return cmd_dump(o, ckpt_path, text_path, mean_samples, budget_path);
        if (g->parsed()) {
            std::ofstream out(corpus_out, std::ios::binary);
            if (!out) throw user_error("cannot write " + corpus_out);
            out << synthetic_corpus(corpus_bytes, o.seed);
            std::cout << "wrote " << corpus_bytes << " bytes to " << corpus_out << "\n";
            return 0;
        }
    } catch (const divergence_error& ex) {
        std::cerr << "divergence: " << ex.what() << "\n";
        return 4;
    } catch (const state_error& ex) {
        std::cerr << "state mismatch: " << ex.what() << "\n";
        return 3;
    } catch (const user_error& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "internal error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
