// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer parameterized by a width multiplier d:
// n_layers = n_heads = d, d_model = 64*d, d_head = 64. Pre-norm blocks with
// RMSNorm, normalized Q/K projections, SwiGLU feed-forward with hidden width
// floor(8*d_model/3), learned absolute positions, untied embeddings, no
// biases. Selective attention is a pure wiring change: with the head-zero
// selection source it adds zero parameters.

#pragma once

#include <functional>
#include <string>

#include "selattn/attention.hpp"

namespace selattn {

struct model_config {
    int d = 2;                  // width multiplier
    index_t context_size = 64;  // maximum sequence length N
    index_t vocab_size = 259;
    bool qk_norm = true;
    attention_config attention;

    index_t d_model() const { return 64 * static_cast<index_t>(d); }
    index_t n_layers() const { return d; }
    index_t n_heads() const { return d; }
    index_t d_head() const { return 64; }
    index_t ffn_hidden() const { return 8 * d_model() / 3; }

    bool uses_bilinear() const {
        return attention.selective &&
               attention.selection_source == attention_config::source_t::separate_bilinear;
    }

    void validate() const {
        if (d < 1) throw user_error("model_config: d must be >= 1");
        if (context_size < 1) throw user_error("model_config: context_size must be >= 1");
        if (vocab_size < 2) throw user_error("model_config: vocab_size must be >= 2");
        if (d_model() % n_heads() != 0) {
            throw user_error("model_config: d_model not divisible by n_heads");
        }
    }

    attention_config attn_normalized() const {
        attention_config a = attention;
        a.n_heads = n_heads();
        a.d_head = d_head();
        return a;
    }
};

/// Exact parameter count of build(); pure function of the config.
inline std::int64_t param_count(const model_config& cfg) {
    cfg.validate();
    const std::int64_t D = cfg.d_model();
    const std::int64_t H = cfg.ffn_hidden();
    const std::int64_t L = cfg.n_layers();
    std::int64_t per_layer = 4 * D * D   // wq, wk, wv, wo
                             + 3 * D * H  // SwiGLU gate, up, down
                             + 2 * D;     // pre-attention and pre-ffn gains
    if (cfg.qk_norm) per_layer += 2 * D;  // q and k gains
    if (cfg.uses_bilinear()) per_layer += 2 * D * cfg.d_head();
    std::int64_t non_layer = 2 * cfg.vocab_size * D  // token embedding + untied output head
                             + cfg.context_size * D  // learned positions
                             + D;                    // final norm gain
    return non_layer + L * per_layer;
}

template <typename S>
struct layer_params {
    tensor<S> pre_attn_g, wq, wk, wv, wo;
    tensor<S> q_g, k_g;          // defined when qk_norm
    tensor<S> sel_q, sel_k;      // defined when separate_bilinear is selected
    tensor<S> pre_ffn_g, w_gate, w_up, w_down;
};

/// Per-layer keep-mask provider for inference-time context pruning. Receives
/// the layer index and the accumulated selection matrix (null for
/// non-selective models) and returns per-example [n*n] keep bits.
template <typename S>
using keep_callback =
    std::function<std::vector<std::vector<std::uint8_t>>(int layer, const tensor<S>* accumulated,
                                                         index_t batch, index_t n)>;

template <typename S>
struct forward_result {
    tensor<S> logits;  // [B,n,vocab]
    std::vector<selection_state<S>> states;  // one per layer when selective
};

template <typename S>
struct features_result {
    tensor<S> features;  // [B,n,d_model], final-normed, ready for the head
    std::vector<selection_state<S>> states;
};

template <typename S>
struct model {
    model_config cfg;
    tensor<S> tok_emb, pos_emb, final_g, head;
    std::vector<layer_params<S>> layers;

    /// Visits every parameter in a fixed, name-stable order.
    void for_each_param(const std::function<void(const std::string&, tensor<S>&)>& fn) {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& lp = layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            fn(p + "pre_attn_g", lp.pre_attn_g);
            fn(p + "wq", lp.wq);
            fn(p + "wk", lp.wk);
            fn(p + "wv", lp.wv);
            fn(p + "wo", lp.wo);
            if (cfg.qk_norm) {
                fn(p + "q_g", lp.q_g);
                fn(p + "k_g", lp.k_g);
            }
            if (cfg.uses_bilinear()) {
                fn(p + "sel_q", lp.sel_q);
                fn(p + "sel_k", lp.sel_k);
            }
            fn(p + "pre_ffn_g", lp.pre_ffn_g);
            fn(p + "w_gate", lp.w_gate);
            fn(p + "w_up", lp.w_up);
            fn(p + "w_down", lp.w_down);
        }
        fn("final_g", final_g);
        fn("head", head);
    }

    std::int64_t actual_param_count() {
        std::int64_t n = 0;
        for_each_param([&](const std::string&, tensor<S>& t) { n += t.size(); });
        return n;
    }

    forward_result<S> forward(tape<S>& tp, const std::vector<std::int32_t>& tokens, index_t B,
                              index_t n, const keep_callback<S>* keep_fn = nullptr) const {
        features_result<S> f = forward_features(tp, tokens, B, n, keep_fn);
        forward_result<S> res;
        res.logits = matmul(tp, f.features, head);
        res.states = std::move(f.states);
        return res;
    }

    features_result<S> forward_features(tape<S>& tp, const std::vector<std::int32_t>& tokens,
                                        index_t B, index_t n,
                                        const keep_callback<S>* keep_fn = nullptr) const {
        if (n > cfg.context_size) {
            throw user_error("forward: sequence of " + std::to_string(n) +
                             " exceeds context size " + std::to_string(cfg.context_size));
        }
        if (static_cast<index_t>(tokens.size()) != B * n) {
            throw user_error("forward: token buffer does not match batch shape");
        }
        const attention_config acfg = cfg.attn_normalized();
        const index_t h = cfg.n_heads();
        const S inv_sqrt_dh = S(1.0 / std::sqrt(static_cast<double>(cfg.d_head())));

        std::vector<std::int32_t> pos_ids(static_cast<std::size_t>(B * n));
        for (index_t i = 0; i < B * n; ++i) pos_ids[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i % n);

        tensor<S> x = add(tp, embedding(tp, tok_emb, tokens, B, n),
                          embedding(tp, pos_emb, pos_ids, B, n));

        features_result<S> res;
        for (int l = 0; l < cfg.n_layers(); ++l) {
            const auto& lp = layers[static_cast<std::size_t>(l)];
            tensor<S> hin = rmsnorm(tp, x, lp.pre_attn_g);
            tensor<S> q = to_heads(tp, matmul(tp, hin, lp.wq), h);
            tensor<S> k = to_heads(tp, matmul(tp, hin, lp.wk), h);
            if (cfg.qk_norm) {
                q = rmsnorm_heads(tp, q, lp.q_g);
                k = rmsnorm_heads(tp, k, lp.k_g);
            }
            tensor<S> v = to_heads(tp, matmul(tp, hin, lp.wv), h);

            tensor<S> bil;
            if (cfg.uses_bilinear()) {
                tensor<S> sq = matmul(tp, hin, lp.sel_q);
                tensor<S> sk = matmul(tp, hin, lp.sel_k);
                bil = causal_neg_inf(tp, scale(tp, matmul_nt(tp, sq, sk), inv_sqrt_dh));
            }
            const tensor<S>* bil_ptr = bil.defined() ? &bil : nullptr;

            tensor<S> attn_out;
            if (!keep_fn) {
                attention_result<S> ar = selective_attention(tp, q, k, v, acfg, bil_ptr);
                attn_out = ar.output;
                if (acfg.selective) res.states.push_back(std::move(ar.state));
            } else {
                // Pruned path: the keep mask for this layer is derived from
                // the freshly accumulated selection matrix, then applied
                // before the subtraction and softmax.
                tensor<S> logits = causal_logits(tp, q, k);
                selection_state<S> st;
                const tensor<S>* facc = nullptr;
                if (acfg.selective) {
                    st = selection_pipeline(tp, logits, acfg, bil_ptr);
                    facc = &st.accumulated;
                }
                auto keep = (*keep_fn)(l, facc, B, n);
                tensor<S> masked = mask_keep(tp, logits, keep);
                tensor<S> weights = acfg.selective ? softmax_sub_bcast(tp, masked, st.accumulated)
                                                   : softmax_lastdim(tp, masked);
                attn_out = from_heads(tp, matmul(tp, weights, v));
                if (acfg.selective) res.states.push_back(std::move(st));
            }

            x = add(tp, x, matmul(tp, attn_out, lp.wo));
            tensor<S> hff = rmsnorm(tp, x, lp.pre_ffn_g);
            tensor<S> gate = silu(tp, matmul(tp, hff, lp.w_gate));
            tensor<S> up = matmul(tp, hff, lp.w_up);
            tensor<S> down = matmul(tp, mul(tp, gate, up), lp.w_down);
            x = add(tp, x, down);
        }
        res.features = rmsnorm(tp, x, final_g);
        return res;
    }
};

/// Deterministic initialization from a seed. Residual-feeding projections
/// are scaled down by sqrt(2*n_layers).
template <typename S>
model<S> build(const model_config& cfg, std::uint64_t seed) {
    cfg.validate();
    rng64 rng(seed);
    const index_t D = cfg.d_model();
    const index_t H = cfg.ffn_hidden();
    const double base = 0.02;
    const double residual = base / std::sqrt(2.0 * static_cast<double>(cfg.n_layers()));

    model<S> m;
    m.cfg = cfg;
    m.tok_emb = tensor<S>::param_normal({cfg.vocab_size, D}, rng, base);
    m.pos_emb = tensor<S>::param_normal({cfg.context_size, D}, rng, base);
    for (int l = 0; l < cfg.n_layers(); ++l) {
        layer_params<S> lp;
        lp.pre_attn_g = tensor<S>::param_const({D}, S(1));
        lp.wq = tensor<S>::param_normal({D, D}, rng, base);
        lp.wk = tensor<S>::param_normal({D, D}, rng, base);
        lp.wv = tensor<S>::param_normal({D, D}, rng, base);
        lp.wo = tensor<S>::param_normal({D, D}, rng, residual);
        if (cfg.qk_norm) {
            lp.q_g = tensor<S>::param_const({D}, S(1));
            lp.k_g = tensor<S>::param_const({D}, S(1));
        }
        if (cfg.uses_bilinear()) {
            lp.sel_q = tensor<S>::param_normal({D, cfg.d_head()}, rng, base);
            lp.sel_k = tensor<S>::param_normal({D, cfg.d_head()}, rng, base);
        }
        lp.pre_ffn_g = tensor<S>::param_const({D}, S(1));
        lp.w_gate = tensor<S>::param_normal({D, H}, rng, base);
        lp.w_up = tensor<S>::param_normal({D, H}, rng, base);
        lp.w_down = tensor<S>::param_normal({H, D}, rng, residual);
        m.layers.push_back(std::move(lp));
    }
    m.final_g = tensor<S>::param_const({D}, S(1));
    m.head = tensor<S>::param_normal({D, cfg.vocab_size}, rng, base);
    return m;
}

}  // namespace selattn
