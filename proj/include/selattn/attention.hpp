// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Causal multi-head attention plus the selective variant: each token emits
// masking scores for earlier tokens; the scores are constrained, accumulated
// over queries, and subtracted from every head's logits before the softmax.

#pragma once

#include <fstream>

#include "selattn/ops.hpp"

namespace selattn {

struct attention_config {
    index_t n_heads = 1;
    index_t d_head = 64;
    bool selective = false;

    enum class source_t { head_zero, separate_bilinear };
    source_t selection_source = source_t::head_zero;

    bool shift_future = true;    // a token's masking applies only to later queries
    bool constrain_relu = true;  // masking can only reduce attention, never boost
    bool protect_bos = true;     // column 0 is never masked
    bool protect_self = true;    // the diagonal is never masked
};

/// Per-layer selection state: the constrained score matrix and its causal
/// accumulation, one [n,n] matrix per batch element.
template <typename S>
struct selection_state {
    tensor<S> scores;       // [B,n,n] after constraints
    tensor<S> accumulated;  // [B,n,n]
};

/// logits[b,h,i,j] = <Q_i,K_j>/sqrt(d_head) for j<=i, -inf above the
/// diagonal. Fused: one output tensor, one backward rule (the masked
/// entries of the incoming gradient are exact zeros, so plain GEMMs apply).
template <typename S>
tensor<S> causal_logits(tape<S>& tp, const tensor<S>& q, const tensor<S>& k) {
    check_shapes_match(q.shape(), k.shape(), "causal_logits");
    const index_t n = q.dim(-2);
    if (n == 0) throw user_error("causal_logits: empty sequence");
    const index_t dh = q.dim(-1);
    const index_t batches = q.size() / (n * dh);
    const S inv = S(1.0 / std::sqrt(static_cast<double>(dh)));
    const S ninf = -std::numeric_limits<S>::infinity();
    shape_t os(q.shape());
    os.back() = n;
    tensor<S> out = tensor<S>::uninit(os);
    pool().run(batches, [&](index_t i) {
        Eigen::Map<const mat_t<S>> Q(q.data() + i * n * dh, n, dh);
        Eigen::Map<const mat_t<S>> K(k.data() + i * n * dh, n, dh);
        Eigen::Map<mat_t<S>> C(out.data() + i * n * n, n, n);
        C.noalias() = Q * K.transpose() * inv;
        S* m = out.data() + i * n * n;
        for (index_t r = 0; r + 1 < n; ++r) std::fill(m + r * n + r + 1, m + (r + 1) * n, ninf);
    });
    if (detail::want_grad(tp, {&q, &k})) {
        out.set_requires_grad(true);
        tensor<S> qc = q, kc = k, oc = out;
        tp.record([qc, kc, oc, batches, n, dh, inv]() mutable {
            if (!oc.has_grad()) return;
            if (qc.requires_grad()) qc.ensure_grad();
            if (kc.requires_grad()) kc.ensure_grad();
            pool().run(batches, [&](index_t i) {
                Eigen::Map<const mat_t<S>> G(oc.grad_data() + i * n * n, n, n);
                if (qc.requires_grad()) {
                    Eigen::Map<const mat_t<S>> K(kc.data() + i * n * dh, n, dh);
                    Eigen::Map<mat_t<S>> dQ(qc.grad_data() + i * n * dh, n, dh);
                    dQ.noalias() += G * K * inv;
                }
                if (kc.requires_grad()) {
                    Eigen::Map<const mat_t<S>> Q(qc.data() + i * n * dh, n, dh);
                    Eigen::Map<mat_t<S>> dK(kc.grad_data() + i * n * dh, n, dh);
                    dK.noalias() += G.transpose() * Q * inv;
                }
            });
        });
    }
    return out;
}

/// Applies the selection constraints in a fixed order (they commute; the
/// order is pinned so dumps are byte-stable): relu, zero the first column,
/// zero the diagonal.
template <typename S>
tensor<S> constrain(tape<S>& tp, const tensor<S>& s, const attention_config& cfg) {
    tensor<S> out = s;
    if (cfg.constrain_relu) out = relu(tp, out);
    if (cfg.protect_bos) out = zero_index_axis(tp, out, -1, 0);
    if (cfg.protect_self) out = zero_diag_last2(tp, out);
    return out;
}

/// F[i,j] = sum_{k<=i-1} S[k,j] with the future shift on (row i of S is
/// rolled past itself first), or sum_{k<=i} without it.
template <typename S>
tensor<S> accumulate(tape<S>& tp, const tensor<S>& s, bool shift_future) {
    tensor<S> x = s;
    if (shift_future) {
        x = roll_axis(tp, x, 1, -2);
        x = zero_index_axis(tp, x, -2, 0);
    }
    return cumsum_axis(tp, x, -2);
}

/// Builds the constrained selection matrix from causally masked logits
/// [B,h,n,n]. With head_zero the first head's pre-softmax logits are reused
/// (the causal -inf entries are treated as 0; they sit above the diagonal
/// and never reach an accumulated value). With separate_bilinear the caller
/// passes the dedicated score matrix [B,n,n] (already causally masked).
template <typename S>
tensor<S> compute_selection(tape<S>& tp, const tensor<S>& logits, const attention_config& cfg,
                            const tensor<S>* bilinear_scores = nullptr) {
    tensor<S> raw;
    if (cfg.selection_source == attention_config::source_t::separate_bilinear) {
        if (!bilinear_scores || !bilinear_scores->defined()) {
            throw user_error("compute_selection: separate_bilinear needs its score matrix");
        }
        raw = *bilinear_scores;
    } else {
        if (logits.dim(-3) < 1) throw user_error("compute_selection: no heads");
        raw = head_slice(tp, logits, 0);
    }
    return constrain(tp, finite_or_zero(tp, raw), cfg);
}

/// Fused constrain + accumulate: builds the constrained score matrix and its
/// causal accumulation in one pass over the source (head 0 of the causally
/// masked logits, or a dedicated bilinear score matrix). Semantics equal
/// compute_selection followed by accumulate; one backward rule covers the
/// relu/column/diagonal masks, the future shift, and the prefix sum.
template <typename S>
selection_state<S> selection_pipeline(tape<S>& tp, const tensor<S>& logits,
                                      const attention_config& cfg,
                                      const tensor<S>* bilinear_scores = nullptr) {
    const bool use_bilinear =
        cfg.selection_source == attention_config::source_t::separate_bilinear;
    if (use_bilinear && (!bilinear_scores || !bilinear_scores->defined())) {
        throw user_error("selection: separate_bilinear needs its score matrix");
    }
    const index_t n = logits.dim(-1);
    const index_t h = logits.dim(-3);
    if (!use_bilinear && h < 1) throw user_error("selection: no heads");
    const index_t B = logits.size() / (h * n * n);
    const tensor<S>& src = use_bilinear ? *bilinear_scores : logits;
    // source stride: bilinear is [B,n,n]; head zero picks head 0 of [B,h,n,n]
    const index_t src_stride = use_bilinear ? n * n : h * n * n;

    selection_state<S> st;
    st.scores = tensor<S>::uninit({B, n, n});
    st.accumulated = tensor<S>::uninit({B, n, n});
    pool().run(B, [&](index_t b) {
        const S* in = src.data() + b * src_stride;
        S* sm = st.scores.data() + b * n * n;
        S* fm = st.accumulated.data() + b * n * n;
        for (index_t i = 0; i < n; ++i) {
            for (index_t j = 0; j < n; ++j) {
                S v = in[i * n + j];
                if (!std::isfinite(static_cast<double>(v))) v = S(0);
                if (cfg.constrain_relu && v < S(0)) v = S(0);
                if (cfg.protect_bos && j == 0) v = S(0);
                if (cfg.protect_self && i == j) v = S(0);
                sm[i * n + j] = v;
            }
        }
        // F[i,:] = sum of S rows up to i-1 (shift) or i
        detail::arr1_map<S> first(fm, n);
        if (cfg.shift_future) {
            first.setZero();
        } else {
            first = detail::carr1_map<S>(sm, n);
        }
        for (index_t i = 1; i < n; ++i) {
            detail::arr1_map<S>(fm + i * n, n) =
                detail::carr1_map<S>(fm + (i - 1) * n, n) +
                detail::carr1_map<S>(sm + (cfg.shift_future ? i - 1 : i) * n, n);
        }
    });

    const bool src_grad = use_bilinear ? bilinear_scores->requires_grad() : logits.requires_grad();
    if (tp.recording() && src_grad) {
        st.scores.set_requires_grad(true);
        st.accumulated.set_requires_grad(true);
        tensor<S> srcc = src, sc = st.scores, fc = st.accumulated;
        attention_config c = cfg;
        tp.record([srcc, sc, fc, c, B, n, src_stride]() mutable {
            if (!sc.has_grad() && !fc.has_grad()) return;
            srcc.ensure_grad();
            pool().run(B, [&](index_t b) {
                const S* in = srcc.data() + b * src_stride;
                S* din = srcc.grad_data() + b * src_stride;
                Eigen::Array<S, Eigen::Dynamic, 1> suffix =
                    Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n);
                // walk rows backward: suffix accumulates dF rows > k (shift)
                // or >= k (no shift), then dS_total gates through the masks
                for (index_t k = n - 1; k >= 0; --k) {
                    if (!c.shift_future && fc.has_grad()) {
                        suffix += detail::carr1_map<S>(fc.grad_data() + (b * n + k) * n, n);
                    }
                    for (index_t j = 0; j < n; ++j) {
                        S ds = suffix(j);
                        if (sc.has_grad()) ds += sc.grad_data()[(b * n + k) * n + j];
                        if (ds == S(0)) continue;
                        const S v = in[k * n + j];
                        if (!std::isfinite(static_cast<double>(v))) continue;
                        if (c.constrain_relu && v < S(0)) continue;
                        if (c.protect_bos && j == 0) continue;
                        if (c.protect_self && k == j) continue;
                        din[k * n + j] += ds;
                    }
                    if (c.shift_future && fc.has_grad() && k >= 1) {
                        suffix += detail::carr1_map<S>(fc.grad_data() + (b * n + k) * n, n);
                    }
                }
            });
        });
    }
    return st;
}

/// Fused softmax(logits - F) with F broadcast across heads; avoids
/// materializing the adjusted logits.
template <typename S>
tensor<S> softmax_sub_bcast(tape<S>& tp, const tensor<S>& logits, const tensor<S>& f) {
    const index_t n = logits.dim(-1), nq = logits.dim(-2), h = logits.dim(-3);
    const index_t B = logits.size() / (h * nq * n);
    if (f.size() != B * nq * n) {
        throw user_error("softmax_sub_bcast: " + shape_str(logits.shape()) + " vs " +
                         shape_str(f.shape()));
    }
    tensor<S> out = tensor<S>::uninit(logits.shape());
    std::atomic<bool> degenerate{false};
    pool().run(B * h, [&](index_t bh) {
        const index_t b = bh / h;
        detail::carr2_map<S> lg(logits.data() + bh * nq * n, nq, n);
        detail::carr2_map<S> fm(f.data() + b * nq * n, nq, n);
        detail::arr2_map<S> o(out.data() + bh * nq * n, nq, n);
        o = lg - fm;
        Eigen::Array<S, Eigen::Dynamic, 1> mx = o.rowwise().maxCoeff();
        if ((mx == -std::numeric_limits<S>::infinity()).any()) {
            degenerate.store(true);
            return;
        }
        o = (o.colwise() - mx).exp();
        Eigen::Array<S, Eigen::Dynamic, 1> inv = o.rowwise().sum().inverse();
        o.colwise() *= inv;
    });
    if (degenerate.load()) throw user_error("softmax_lastdim: row of all -inf");

    if (detail::want_grad(tp, {&logits, &f})) {
        out.set_requires_grad(true);
        tensor<S> lc = logits, fc = f, oc = out;
        tp.record([lc, fc, oc, B, h, nq, n]() mutable {
            if (!oc.has_grad()) return;
            if (lc.requires_grad()) lc.ensure_grad();
            if (fc.requires_grad()) fc.ensure_grad();
            // dz (per head) feeds dlogits directly and -dz sums into dF;
            // heads of one example collide in dF, so walk examples in the
            // outer parallel loop.
            pool().run(B, [&](index_t b) {
                for (index_t hh = 0; hh < h; ++hh) {
                    const index_t bh = b * h + hh;
                    detail::carr2_map<S> w(oc.data() + bh * nq * n, nq, n);
                    detail::carr2_map<S> g(oc.grad_data() + bh * nq * n, nq, n);
                    Eigen::Array<S, Eigen::Dynamic, 1> dot = (w * g).rowwise().sum();
                    auto dz = (w * (g.colwise() - dot)).eval();
                    if (lc.requires_grad()) {
                        detail::arr2_map<S>(lc.grad_data() + bh * nq * n, nq, n) += dz;
                    }
                    if (fc.requires_grad()) {
                        detail::arr2_map<S>(fc.grad_data() + b * nq * n, nq, n) -= dz;
                    }
                }
            });
        });
    }
    return out;
}

template <typename S>
struct attention_result {
    tensor<S> output;  // [B,n,h*d_head], heads concatenated
    selection_state<S> state;
};

/// Full attention: causal logits, optional selective masking, softmax,
/// weighted sum over V, heads concatenated. The caller owns the output
/// projection. `keep`, when given, marks evicted (i,j) pairs whose logits
/// are forced to -inf before the softmax (inference-time pruning).
template <typename S>
attention_result<S> selective_attention(tape<S>& tp, const tensor<S>& q, const tensor<S>& k,
                                        const tensor<S>& v, const attention_config& cfg,
                                        const tensor<S>* bilinear_scores = nullptr,
                                        const std::vector<std::vector<std::uint8_t>>* keep = nullptr) {
    tensor<S> logits = causal_logits(tp, q, k);
    attention_result<S> res;
    tensor<S> weights;
    if (cfg.selective) {
        res.state = selection_pipeline(tp, logits, cfg, bilinear_scores);
        tensor<S> masked = keep ? mask_keep(tp, logits, *keep) : logits;
        // One F per layer, subtracted from every head (the selection head
        // included; it still attends as usual).
        weights = softmax_sub_bcast(tp, masked, res.state.accumulated);
    } else {
        weights = softmax_lastdim(tp, keep ? mask_keep(tp, logits, *keep) : logits);
    }
    res.output = from_heads(tp, matmul(tp, weights, v));
    return res;
}

/// Writes the selection matrices of one layer as CSV, one file per batch
/// element: "<prefix>_layer<L>_ex<B>_{scores|accumulated}.csv". The header
/// line records the matrix size and the active flags.
template <typename S>
std::vector<std::string> dump_selection(const selection_state<S>& state, const attention_config& cfg,
                                        int layer, const std::string& prefix) {
    if (!state.accumulated.defined()) throw user_error("dump_selection: no selective state");
    const index_t n = state.accumulated.dim(-1);
    const index_t B = state.accumulated.size() / (n * n);
    std::vector<std::string> written;
    auto flag_str = [&] {
        std::string f;
        f += cfg.constrain_relu ? "relu" : "norelu";
        f += cfg.protect_bos ? ",bos" : ",nobos";
        f += cfg.protect_self ? ",self" : ",noself";
        f += cfg.shift_future ? ",shift" : ",noshift";
        return f;
    };
    for (index_t b = 0; b < B; ++b) {
        for (const char* which : {"scores", "accumulated"}) {
            const tensor<S>& t = which == std::string("scores") ? state.scores : state.accumulated;
            std::string path = prefix + "_layer" + std::to_string(layer) + "_ex" + std::to_string(b) +
                               "_" + which + ".csv";
            std::ofstream out(path);
            if (!out) throw user_error("dump_selection: cannot write " + path);
            out << "# n=" << n << " layer=" << layer << " example=" << b << " flags=" << flag_str()
                << " kind=" << which << "\n";
            for (index_t i = 0; i < n; ++i) {
                for (index_t j = 0; j < n; ++j) {
                    if (j) out << ',';
                    out << t.data()[(b * n + i) * n + j];
                }
                out << '\n';
            }
            written.push_back(std::move(path));
        }
    }
    return written;
}

}  // namespace selattn
