// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every op computes its value eagerly and, when
// an input requires gradients, records a reverse rule on the tape. Hot loops
// run as Eigen array expressions over fixed-size row blocks fanned across
// the pool, so results are reproducible for any worker count.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "selattn/tensor.hpp"

namespace selattn {

namespace detail {

template <typename S>
inline bool want_grad(const tape<S>& tp, std::initializer_list<const tensor<S>*> ins) {
    if (!tp.recording()) return false;
    for (const tensor<S>* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline index_t lead_count(const shape_t& s, int keep_last) {
    index_t n = 1;
    for (std::size_t i = 0; i + keep_last < s.size(); ++i) n *= s[i];
    return n;
}

template <typename S>
using arr2_map = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using carr2_map = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using arr1_map = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using carr1_map = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

/// a: [..,m,k] x b: [k,n] or [..,k,n] -> [..,m,n]. A 2-D right-hand side is
/// broadcast over the leading dims of a (the projection workhorse: one GEMM).
template <typename S>
tensor<S> matmul(tape<S>& tp, const tensor<S>& a, const tensor<S>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw user_error("matmul: need >=2-D operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const index_t m = a.dim(-2), k = a.dim(-1);
    const index_t kb = b.dim(-2), n = b.dim(-1);
    if (k != kb) {
        throw user_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const bool b2d = b.ndim() == 2;
    const index_t batches = detail::lead_count(a.shape(), 2);
    if (!b2d) {
        if (detail::lead_count(b.shape(), 2) != batches) {
            throw user_error("matmul: batch dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        }
    }
    shape_t os(a.shape());
    os.back() = n;
    tensor<S> out = tensor<S>::uninit(os);

    if (b2d) {
        detail::gemm(a.data(), b.data(), out.data(), batches * m, k, n, false);
    } else {
        pool().run(batches, [&](index_t i) {
            Eigen::Map<const mat_t<S>> A(a.data() + i * m * k, m, k);
            Eigen::Map<const mat_t<S>> B(b.data() + i * k * n, k, n);
            Eigen::Map<mat_t<S>> C(out.data() + i * m * n, m, n);
            C.noalias() = A * B;
        });
    }

    if (detail::want_grad(tp, {&a, &b})) {
        out.set_requires_grad(true);
        tensor<S> ac = a, bc = b, oc = out;
        tp.record([ac, bc, oc, m, k, n, batches, b2d]() mutable {
            if (!oc.has_grad()) return;
            if (ac.requires_grad()) {
                ac.ensure_grad();
                if (b2d) {
                    detail::gemm_nt(oc.grad_data(), bc.data(), ac.grad_data(), batches * m, n, k, true);
                } else {
                    pool().run(batches, [&](index_t i) {
                        Eigen::Map<const mat_t<S>> dC(oc.grad_data() + i * m * n, m, n);
                        Eigen::Map<const mat_t<S>> B(bc.data() + i * k * n, k, n);
                        Eigen::Map<mat_t<S>> dA(ac.grad_data() + i * m * k, m, k);
                        dA.noalias() += dC * B.transpose();
                    });
                }
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                if (b2d) {
                    detail::gemm_tn(ac.data(), oc.grad_data(), bc.grad_data(), k, batches * m, n, true);
                } else {
                    for (index_t i = 0; i < batches; ++i) {
                        Eigen::Map<const mat_t<S>> A(ac.data() + i * m * k, m, k);
                        Eigen::Map<const mat_t<S>> dC(oc.grad_data() + i * m * n, m, n);
                        Eigen::Map<mat_t<S>> dB(bc.grad_data() + i * k * n, k, n);
                        dB.noalias() += A.transpose() * dC;
                    }
                }
            }
        });
    }
    return out;
}

/// a: [..,m,k] x b: [..,n,k]^T -> [..,m,n]; avoids materialized transposes.
template <typename S>
tensor<S> matmul_nt(tape<S>& tp, const tensor<S>& a, const tensor<S>& b) {
    const index_t m = a.dim(-2), k = a.dim(-1);
    const index_t n = b.dim(-2), kb = b.dim(-1);
    if (k != kb) {
        throw user_error("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    }
    const index_t batches = detail::lead_count(a.shape(), 2);
    if (detail::lead_count(b.shape(), 2) != batches) {
        throw user_error("matmul_nt: batch dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    shape_t os(a.shape());
    os.back() = n;
    tensor<S> out = tensor<S>::uninit(os);
    pool().run(batches, [&](index_t i) {
        Eigen::Map<const mat_t<S>> A(a.data() + i * m * k, m, k);
        Eigen::Map<const mat_t<S>> B(b.data() + i * n * k, n, k);
        Eigen::Map<mat_t<S>> C(out.data() + i * m * n, m, n);
        C.noalias() = A * B.transpose();
    });

    if (detail::want_grad(tp, {&a, &b})) {
        out.set_requires_grad(true);
        tensor<S> ac = a, bc = b, oc = out;
        tp.record([ac, bc, oc, m, k, n, batches]() mutable {
            if (!oc.has_grad()) return;
            if (ac.requires_grad()) ac.ensure_grad();
            if (bc.requires_grad()) bc.ensure_grad();
            pool().run(batches, [&](index_t i) {
                Eigen::Map<const mat_t<S>> dC(oc.grad_data() + i * m * n, m, n);
                if (ac.requires_grad()) {
                    Eigen::Map<const mat_t<S>> B(bc.data() + i * n * k, n, k);
                    Eigen::Map<mat_t<S>> dA(ac.grad_data() + i * m * k, m, k);
                    dA.noalias() += dC * B;
                }
                if (bc.requires_grad()) {
                    Eigen::Map<const mat_t<S>> A(ac.data() + i * m * k, m, k);
                    Eigen::Map<mat_t<S>> dB(bc.grad_data() + i * n * k, n, k);
                    dB.noalias() += dC.transpose() * A;
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename FwdFn, typename BwdFn>
tensor<S> binary_same_shape(tape<S>& tp, const tensor<S>& a, const tensor<S>& b, const char* name,
                            FwdFn fwd, BwdFn bwd) {
    check_shapes_match(a.shape(), b.shape(), name);
    tensor<S> out = tensor<S>::uninit(a.shape());
    const index_t n = out.size();
    parallel_blocks(n, 1 << 17, [&](index_t lo, index_t hi) {
        fwd(a.data() + lo, b.data() + lo, out.data() + lo, hi - lo);
    });
    if (want_grad(tp, {&a, &b})) {
        out.set_requires_grad(true);
        tensor<S> ac = a, bc = b, oc = out;
        tp.record([ac, bc, oc, n, bwd]() mutable {
            if (!oc.has_grad()) return;
            if (ac.requires_grad()) ac.ensure_grad();
            if (bc.requires_grad()) bc.ensure_grad();
            parallel_blocks(n, 1 << 17, [&](index_t lo, index_t hi) {
                bwd(ac, bc, oc, lo, hi - lo);
            });
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
tensor<S> add(tape<S>& tp, const tensor<S>& a, const tensor<S>& b) {
    return detail::binary_same_shape(
        tp, a, b, "add",
        [](const S* x, const S* y, S* o, index_t len) {
            detail::arr1_map<S>(o, len) = detail::carr1_map<S>(x, len) + detail::carr1_map<S>(y, len);
        },
        [](tensor<S>& ac, tensor<S>& bc, tensor<S>& oc, index_t lo, index_t len) {
            detail::carr1_map<S> g(oc.grad_data() + lo, len);
            if (ac.requires_grad()) detail::arr1_map<S>(ac.grad_data() + lo, len) += g;
            if (bc.requires_grad()) detail::arr1_map<S>(bc.grad_data() + lo, len) += g;
        });
}

template <typename S>
tensor<S> sub(tape<S>& tp, const tensor<S>& a, const tensor<S>& b) {
    return detail::binary_same_shape(
        tp, a, b, "sub",
        [](const S* x, const S* y, S* o, index_t len) {
            detail::arr1_map<S>(o, len) = detail::carr1_map<S>(x, len) - detail::carr1_map<S>(y, len);
        },
        [](tensor<S>& ac, tensor<S>& bc, tensor<S>& oc, index_t lo, index_t len) {
            detail::carr1_map<S> g(oc.grad_data() + lo, len);
            if (ac.requires_grad()) detail::arr1_map<S>(ac.grad_data() + lo, len) += g;
            if (bc.requires_grad()) detail::arr1_map<S>(bc.grad_data() + lo, len) -= g;
        });
}

template <typename S>
tensor<S> mul(tape<S>& tp, const tensor<S>& a, const tensor<S>& b) {
    return detail::binary_same_shape(
        tp, a, b, "mul",
        [](const S* x, const S* y, S* o, index_t len) {
            detail::arr1_map<S>(o, len) = detail::carr1_map<S>(x, len) * detail::carr1_map<S>(y, len);
        },
        [](tensor<S>& ac, tensor<S>& bc, tensor<S>& oc, index_t lo, index_t len) {
            detail::carr1_map<S> g(oc.grad_data() + lo, len);
            if (ac.requires_grad()) {
                detail::arr1_map<S>(ac.grad_data() + lo, len) += g * detail::carr1_map<S>(bc.data() + lo, len);
            }
            if (bc.requires_grad()) {
                detail::arr1_map<S>(bc.grad_data() + lo, len) += g * detail::carr1_map<S>(ac.data() + lo, len);
            }
        });
}

template <typename S>
tensor<S> scale(tape<S>& tp, const tensor<S>& a, S c) {
    tensor<S> out = tensor<S>::uninit(a.shape());
    out.arr() = a.arr() * c;
    if (detail::want_grad(tp, {&a})) {
        out.set_requires_grad(true);
        tensor<S> ac = a, oc = out;
        tp.record([ac, oc, c]() mutable {
            if (!oc.has_grad()) return;
            ac.ensure_grad();
            ac.grad_arr() += oc.grad_arr() * c;
        });
    }
    return out;
}

/// out = x + alpha * tile(v): v is tiled along the leading dims of x
/// (v.size() must divide x.size()).
template <typename S>
tensor<S> add_tiled(tape<S>& tp, const tensor<S>& x, const tensor<S>& v, S alpha = S(1)) {
    const index_t period = v.size();
    if (period == 0 || x.size() % period != 0) {
        throw user_error("add_tiled: " + shape_str(v.shape()) + " does not tile " +
                         shape_str(x.shape()));
    }
    tensor<S> out = tensor<S>::uninit(x.shape());
    const index_t reps = x.size() / period;
    pool().run(reps, [&](index_t r) {
        detail::arr1_map<S>(out.data() + r * period, period) =
            detail::carr1_map<S>(x.data() + r * period, period) +
            alpha * detail::carr1_map<S>(v.data(), period);
    });
    if (detail::want_grad(tp, {&x, &v})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, vc = v, oc = out;
        tp.record([xc, vc, oc, reps, period, alpha]() mutable {
            if (!oc.has_grad()) return;
            if (xc.requires_grad()) {
                xc.ensure_grad();
                xc.grad_arr() += oc.grad_arr();
            }
            if (vc.requires_grad()) {
                vc.ensure_grad();
                for (index_t r = 0; r < reps; ++r) {
                    vc.grad_arr() += alpha * detail::carr1_map<S>(oc.grad_data() + r * period, period);
                }
            }
        });
    }
    return out;
}

template <typename S>
tensor<S> relu(tape<S>& tp, const tensor<S>& x) {
    tensor<S> out = tensor<S>::uninit(x.shape());
    const index_t n = x.size();
    parallel_blocks(n, 1 << 17, [&](index_t lo, index_t hi) {
        detail::arr1_map<S>(out.data() + lo, hi - lo) =
            detail::carr1_map<S>(x.data() + lo, hi - lo).max(S(0));
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            parallel_blocks(n, 1 << 17, [&](index_t lo, index_t hi) {
                const index_t len = hi - lo;
                detail::arr1_map<S>(xc.grad_data() + lo, len) +=
                    (detail::carr1_map<S>(xc.data() + lo, len) > S(0))
                        .select(detail::carr1_map<S>(oc.grad_data() + lo, len), S(0));
            });
        });
    }
    return out;
}

template <typename S>
tensor<S> silu(tape<S>& tp, const tensor<S>& x) {
    tensor<S> out = tensor<S>::uninit(x.shape());
    const index_t n = x.size();
    parallel_blocks(n, 1 << 16, [&](index_t lo, index_t hi) {
        const index_t len = hi - lo;
        detail::carr1_map<S> in(x.data() + lo, len);
        detail::arr1_map<S>(out.data() + lo, len) = in / (S(1) + (-in).exp());
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            parallel_blocks(n, 1 << 16, [&](index_t lo, index_t hi) {
                const index_t len = hi - lo;
                detail::carr1_map<S> in(xc.data() + lo, len);
                detail::carr1_map<S> g(oc.grad_data() + lo, len);
                auto s = (S(1) + (-in).exp()).inverse();
                detail::arr1_map<S>(xc.grad_data() + lo, len) += g * (s + in * s * (S(1) - s));
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / norms
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax over the last dim. -inf entries map to
/// exactly 0; a row of only -inf is a degenerate-row error.
template <typename S>
tensor<S> softmax_lastdim(tape<S>& tp, const tensor<S>& x) {
    const index_t cols = x.dim(-1);
    const index_t rows = x.size() / cols;
    if (cols < 1) throw user_error("softmax_lastdim: empty last dimension");
    tensor<S> out = tensor<S>::uninit(x.shape());
    std::atomic<bool> degenerate{false};
    parallel_blocks(rows, 64, [&](index_t lo, index_t hi) {
        detail::carr2_map<S> in(x.data() + lo * cols, hi - lo, cols);
        detail::arr2_map<S> o(out.data() + lo * cols, hi - lo, cols);
        Eigen::Array<S, Eigen::Dynamic, 1> mx = in.rowwise().maxCoeff();
        if ((mx == -std::numeric_limits<S>::infinity()).any()) {
            degenerate.store(true);
            return;
        }
        o = (in.colwise() - mx).exp();
        Eigen::Array<S, Eigen::Dynamic, 1> inv = o.rowwise().sum().inverse();
        o.colwise() *= inv;
    });
    if (degenerate.load()) throw user_error("softmax_lastdim: row of all -inf");

    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, rows, cols]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            parallel_blocks(rows, 64, [&](index_t lo, index_t hi) {
                detail::carr2_map<S> w(oc.data() + lo * cols, hi - lo, cols);
                detail::carr2_map<S> g(oc.grad_data() + lo * cols, hi - lo, cols);
                detail::arr2_map<S> dx(xc.grad_data() + lo * cols, hi - lo, cols);
                Eigen::Array<S, Eigen::Dynamic, 1> dot = (w * g).rowwise().sum();
                dx += w * (g.colwise() - dot);
            });
        });
    }
    return out;
}

namespace detail {

/// Shared RMS-norm kernel: rows of width `cols`; group_of_row picks the gain
/// slice (always 0 for plain rmsnorm, the head index for per-head norms).
template <typename S, typename GroupFn>
tensor<S> rmsnorm_impl(tape<S>& tp, const tensor<S>& x, const tensor<S>& gain, index_t cols,
                       GroupFn group_of_row) {
    const index_t rows = x.size() / cols;
    const S eps = S(1e-6);
    tensor<S> out = tensor<S>::uninit(x.shape());
    parallel_blocks(rows, 256, [&](index_t lo, index_t hi) {
        for (index_t r = lo; r < hi; ++r) {
            carr1_map<S> in(x.data() + r * cols, cols);
            carr1_map<S> g(gain.data() + group_of_row(r) * cols, cols);
            const S inv = S(1) / std::sqrt(in.square().sum() / S(cols) + eps);
            arr1_map<S>(out.data() + r * cols, cols) = in * inv * g;
        }
    });
    if (want_grad(tp, {&x, &gain})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, gc = gain, oc = out;
        tp.record([xc, gc, oc, rows, cols, eps, group_of_row]() mutable {
            if (!oc.has_grad()) return;
            const bool need_x = xc.requires_grad();
            const bool need_g = gc.requires_grad();
            if (need_x) xc.ensure_grad();
            if (need_g) gc.ensure_grad();
            if (need_x && !need_g) {
                parallel_blocks(rows, 256, [&](index_t lo, index_t hi) {
                    for (index_t r = lo; r < hi; ++r) {
                        carr1_map<S> in(xc.data() + r * cols, cols);
                        carr1_map<S> g(gc.data() + group_of_row(r) * cols, cols);
                        carr1_map<S> go(oc.grad_data() + r * cols, cols);
                        const S inv = S(1) / std::sqrt(in.square().sum() / S(cols) + eps);
                        const S c = (go * g * in).sum() * inv * inv * inv / S(cols);
                        arr1_map<S>(xc.grad_data() + r * cols, cols) += go * g * inv - c * in;
                    }
                });
            } else {
                // gain gradients collide across rows: sequential accumulation
                for (index_t r = 0; r < rows; ++r) {
                    carr1_map<S> in(xc.data() + r * cols, cols);
                    const index_t grp = group_of_row(r);
                    carr1_map<S> g(gc.data() + grp * cols, cols);
                    carr1_map<S> go(oc.grad_data() + r * cols, cols);
                    const S inv = S(1) / std::sqrt(in.square().sum() / S(cols) + eps);
                    if (need_g) arr1_map<S>(gc.grad_data() + grp * cols, cols) += go * in * inv;
                    if (need_x) {
                        const S c = (go * g * in).sum() * inv * inv * inv / S(cols);
                        arr1_map<S>(xc.grad_data() + r * cols, cols) += go * g * inv - c * in;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

/// RMS norm over the last dim with a learned gain of the same width.
template <typename S>
tensor<S> rmsnorm(tape<S>& tp, const tensor<S>& x, const tensor<S>& gain) {
    const index_t cols = x.dim(-1);
    if (gain.size() != cols) {
        throw user_error("rmsnorm: gain " + shape_str(gain.shape()) + " vs last dim " +
                         std::to_string(cols));
    }
    return detail::rmsnorm_impl(tp, x, gain, cols, [](index_t) { return index_t(0); });
}

/// Per-head RMS norm for x: [B,h,n,dh] with gain [h*dh]; head i uses gain
/// slice [i*dh, (i+1)*dh).
template <typename S>
tensor<S> rmsnorm_heads(tape<S>& tp, const tensor<S>& x, const tensor<S>& gain) {
    const index_t dh = x.dim(-1), n = x.dim(-2), h = x.dim(-3);
    if (gain.size() != h * dh) {
        throw user_error("rmsnorm_heads: gain " + shape_str(gain.shape()) + " vs heads " +
                         std::to_string(h) + "x" + std::to_string(dh));
    }
    return detail::rmsnorm_impl(tp, x, gain, dh, [n, h](index_t r) { return (r / n) % h; });
}

// ---------------------------------------------------------------------------
// shape / masking ops
// ---------------------------------------------------------------------------

/// Prefix sum along `axis` (negative axes count from the back).
template <typename S>
tensor<S> cumsum_axis(tape<S>& tp, const tensor<S>& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw user_error("cumsum_axis: axis out of range");
    index_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
    const index_t n = x.dim(axis);
    tensor<S> out = tensor<S>::uninit(x.shape());
    pool().run(outer, [&](index_t o) {
        const S* in = x.data() + o * n * inner;
        S* dst = out.data() + o * n * inner;
        detail::arr1_map<S>(dst, inner) = detail::carr1_map<S>(in, inner);
        for (index_t i = 1; i < n; ++i) {
            detail::arr1_map<S>(dst + i * inner, inner) =
                detail::carr1_map<S>(dst + (i - 1) * inner, inner) +
                detail::carr1_map<S>(in + i * inner, inner);
        }
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, outer, inner, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            pool().run(outer, [&](index_t o) {
                const S* g = oc.grad_data() + o * n * inner;
                S* dx = xc.grad_data() + o * n * inner;
                Eigen::Array<S, Eigen::Dynamic, 1> suffix =
                    Eigen::Array<S, Eigen::Dynamic, 1>::Zero(inner);
                for (index_t i = n - 1; i >= 0; --i) {
                    suffix += detail::carr1_map<S>(g + i * inner, inner);
                    detail::arr1_map<S>(dx + i * inner, inner) += suffix;
                }
            });
        });
    }
    return out;
}

/// Cyclic roll along `axis` by `shift` positions.
template <typename S>
tensor<S> roll_axis(tape<S>& tp, const tensor<S>& x, index_t shift, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw user_error("roll_axis: axis out of range");
    index_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
    const index_t n = x.dim(axis);
    const index_t s = ((shift % n) + n) % n;
    tensor<S> out = tensor<S>::uninit(x.shape());
    pool().run(outer, [&](index_t o) {
        const S* in = x.data() + o * n * inner;
        S* dst = out.data() + o * n * inner;
        for (index_t i = 0; i < n; ++i) {
            index_t src = (i - s + n) % n;
            std::copy(in + src * inner, in + (src + 1) * inner, dst + i * inner);
        }
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, outer, inner, n, s]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            pool().run(outer, [&](index_t o) {
                const S* g = oc.grad_data() + o * n * inner;
                S* dx = xc.grad_data() + o * n * inner;
                for (index_t i = 0; i < n; ++i) {
                    index_t src = (i - s + n) % n;
                    detail::arr1_map<S>(dx + src * inner, inner) +=
                        detail::carr1_map<S>(g + i * inner, inner);
                }
            });
        });
    }
    return out;
}

/// Zeros the slice at `idx` along `axis`.
template <typename S>
tensor<S> zero_index_axis(tape<S>& tp, const tensor<S>& x, int axis, index_t idx) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw user_error("zero_index_axis: axis out of range");
    index_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
    const index_t n = x.dim(axis);
    tensor<S> out = tensor<S>::copy_of(x);
    for (index_t o = 0; o < outer; ++o) {
        S* dst = out.data() + (o * n + idx) * inner;
        std::fill(dst, dst + inner, S(0));
    }
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, outer, inner, n, idx]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            const S* g = oc.grad_data();
            S* dx = xc.grad_data();
            if (inner == 1) {
                // column zeroing: add everything, subtract the column back
                for (index_t o = 0; o < outer; ++o) {
                    detail::arr1_map<S>(dx + o * n, n) += detail::carr1_map<S>(g + o * n, n);
                    dx[o * n + idx] -= g[o * n + idx];
                }
            } else {
                detail::arr1_map<S>(dx, oc.size()) += detail::carr1_map<S>(g, oc.size());
                for (index_t o = 0; o < outer; ++o) {
                    detail::arr1_map<S>(dx + (o * n + idx) * inner, inner) -=
                        detail::carr1_map<S>(g + (o * n + idx) * inner, inner);
                }
            }
        });
    }
    return out;
}

/// Zeros the diagonal of the trailing [n,n] matrices.
template <typename S>
tensor<S> zero_diag_last2(tape<S>& tp, const tensor<S>& x) {
    const index_t n = x.dim(-1);
    if (x.dim(-2) != n) throw user_error("zero_diag_last2: trailing dims not square");
    const index_t batches = x.size() / (n * n);
    tensor<S> out = tensor<S>::copy_of(x);
    for (index_t b = 0; b < batches; ++b) {
        S* m = out.data() + b * n * n;
        for (index_t i = 0; i < n; ++i) m[i * n + i] = S(0);
    }
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, batches, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            const S* g = oc.grad_data();
            S* dx = xc.grad_data();
            detail::arr1_map<S>(dx, oc.size()) += detail::carr1_map<S>(g, oc.size());
            for (index_t b = 0; b < batches; ++b) {
                for (index_t i = 0; i < n; ++i) dx[b * n * n + i * n + i] -= g[b * n * n + i * n + i];
            }
        });
    }
    return out;
}

/// Replaces non-finite entries (the causal -inf sentinels) with 0.
template <typename S>
tensor<S> finite_or_zero(tape<S>& tp, const tensor<S>& x) {
    tensor<S> out = tensor<S>::uninit(x.shape());
    const index_t n = x.size();
    parallel_blocks(n, 1 << 17, [&](index_t lo, index_t hi) {
        const index_t len = hi - lo;
        detail::carr1_map<S> in(x.data() + lo, len);
        detail::arr1_map<S>(out.data() + lo, len) = in.isFinite().select(in, S(0));
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            parallel_blocks(n, 1 << 17, [&](index_t lo, index_t hi) {
                const index_t len = hi - lo;
                detail::carr1_map<S> in(xc.data() + lo, len);
                detail::arr1_map<S>(xc.grad_data() + lo, len) +=
                    in.isFinite().select(detail::carr1_map<S>(oc.grad_data() + lo, len), S(0));
            });
        });
    }
    return out;
}

/// Sets entries strictly above the diagonal of the trailing [n,n] matrices
/// to -inf (the causal mask).
template <typename S>
tensor<S> causal_neg_inf(tape<S>& tp, const tensor<S>& x) {
    const index_t n = x.dim(-1);
    if (x.dim(-2) != n) throw user_error("causal_neg_inf: trailing dims not square");
    const index_t batches = x.size() / (n * n);
    const S ninf = -std::numeric_limits<S>::infinity();
    tensor<S> out = tensor<S>::copy_of(x);
    pool().run(batches, [&](index_t b) {
        S* m = out.data() + b * n * n;
        for (index_t i = 0; i + 1 < n; ++i) {
            std::fill(m + i * n + i + 1, m + (i + 1) * n, ninf);
        }
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, batches, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            pool().run(batches, [&](index_t b) {
                const S* g = oc.grad_data() + b * n * n;
                S* dx = xc.grad_data() + b * n * n;
                for (index_t i = 0; i < n; ++i) {
                    detail::arr1_map<S>(dx + i * n, i + 1) += detail::carr1_map<S>(g + i * n, i + 1);
                }
            });
        });
    }
    return out;
}

/// Sets logits[b,h,i,j] to -inf wherever keep[b][i*n+j] is false. keep is a
/// per-example boolean matrix shared by all heads. Inference-only.
template <typename S>
tensor<S> mask_keep(tape<S>& tp, const tensor<S>& x,
                    const std::vector<std::vector<std::uint8_t>>& keep) {
    if (tp.recording() && x.requires_grad()) {
        throw user_error("mask_keep is an inference-only op; disable tape recording");
    }
    const index_t n = x.dim(-1), nq = x.dim(-2), h = x.dim(-3);
    const index_t B = x.size() / (h * nq * n);
    if (static_cast<index_t>(keep.size()) != B) throw user_error("mask_keep: batch size mismatch");
    const S ninf = -std::numeric_limits<S>::infinity();
    tensor<S> out = tensor<S>::copy_of(x);
    for (index_t b = 0; b < B; ++b) {
        const auto& km = keep[static_cast<std::size_t>(b)];
        for (index_t hh = 0; hh < h; ++hh) {
            S* m = out.data() + ((b * h + hh) * nq) * n;
            for (index_t i = 0; i < nq * n; ++i) {
                if (!km[static_cast<std::size_t>(i)]) m[i] = ninf;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// head layout
// ---------------------------------------------------------------------------

/// [B,n,D] -> [B,h,n,dh]
template <typename S>
tensor<S> to_heads(tape<S>& tp, const tensor<S>& x, index_t h) {
    const index_t D = x.dim(-1), n = x.dim(-2), B = x.size() / (n * D);
    if (D % h != 0) throw user_error("to_heads: model width not divisible by head count");
    const index_t dh = D / h;
    tensor<S> out = tensor<S>::uninit({B, h, n, dh});
    pool().run(B, [&](index_t b) {
        for (index_t i = 0; i < n; ++i) {
            const S* src = x.data() + (b * n + i) * D;
            for (index_t hh = 0; hh < h; ++hh) {
                std::copy(src + hh * dh, src + (hh + 1) * dh,
                          out.data() + (((b * h + hh) * n) + i) * dh);
            }
        }
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, B, n, D, h, dh]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            pool().run(B, [&](index_t b) {
                for (index_t i = 0; i < n; ++i) {
                    S* dst = xc.grad_data() + (b * n + i) * D;
                    for (index_t hh = 0; hh < h; ++hh) {
                        detail::arr1_map<S>(dst + hh * dh, dh) += detail::carr1_map<S>(
                            oc.grad_data() + (((b * h + hh) * n) + i) * dh, dh);
                    }
                }
            });
        });
    }
    return out;
}

/// [B,h,n,dh] -> [B,n,D]
template <typename S>
tensor<S> from_heads(tape<S>& tp, const tensor<S>& x) {
    const index_t dh = x.dim(-1), n = x.dim(-2), h = x.dim(-3);
    const index_t B = x.size() / (h * n * dh);
    const index_t D = h * dh;
    tensor<S> out = tensor<S>::uninit({B, n, D});
    pool().run(B, [&](index_t b) {
        for (index_t i = 0; i < n; ++i) {
            S* dst = out.data() + (b * n + i) * D;
            for (index_t hh = 0; hh < h; ++hh) {
                const S* src = x.data() + (((b * h + hh) * n) + i) * dh;
                std::copy(src, src + dh, dst + hh * dh);
            }
        }
    });
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, B, n, D, h, dh]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            pool().run(B, [&](index_t b) {
                for (index_t i = 0; i < n; ++i) {
                    const S* g = oc.grad_data() + (b * n + i) * D;
                    for (index_t hh = 0; hh < h; ++hh) {
                        detail::arr1_map<S>(xc.grad_data() + (((b * h + hh) * n) + i) * dh, dh) +=
                            detail::carr1_map<S>(g + hh * dh, dh);
                    }
                }
            });
        });
    }
    return out;
}

/// Extracts head `head` from [B,h,n,m] -> [B,n,m].
template <typename S>
tensor<S> head_slice(tape<S>& tp, const tensor<S>& x, index_t head) {
    const index_t m = x.dim(-1), n = x.dim(-2), h = x.dim(-3);
    const index_t B = x.size() / (h * n * m);
    if (head < 0 || head >= h) throw user_error("head_slice: head index out of range");
    tensor<S> out = tensor<S>::uninit({B, n, m});
    for (index_t b = 0; b < B; ++b) {
        const S* src = x.data() + ((b * h + head) * n) * m;
        std::copy(src, src + n * m, out.data() + b * n * m);
    }
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, B, h, n, m, head]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            for (index_t b = 0; b < B; ++b) {
                detail::arr1_map<S>(xc.grad_data() + ((b * h + head) * n) * m, n * m) +=
                    detail::carr1_map<S>(oc.grad_data() + b * n * m, n * m);
            }
        });
    }
    return out;
}

/// scores: [B,h,n,n] minus f: [B,n,n] broadcast across heads.
template <typename S>
tensor<S> sub_bcast_heads(tape<S>& tp, const tensor<S>& scores, const tensor<S>& f) {
    const index_t n = scores.dim(-1), nq = scores.dim(-2), h = scores.dim(-3);
    const index_t B = scores.size() / (h * nq * n);
    if (f.size() != B * nq * n) {
        throw user_error("sub_bcast_heads: " + shape_str(scores.shape()) + " vs " +
                         shape_str(f.shape()));
    }
    tensor<S> out = tensor<S>::uninit(scores.shape());
    pool().run(B * h, [&](index_t bh) {
        const index_t b = bh / h;
        detail::arr1_map<S>(out.data() + bh * nq * n, nq * n) =
            detail::carr1_map<S>(scores.data() + bh * nq * n, nq * n) -
            detail::carr1_map<S>(f.data() + b * nq * n, nq * n);
    });
    if (detail::want_grad(tp, {&scores, &f})) {
        out.set_requires_grad(true);
        tensor<S> sc = scores, fc = f, oc = out;
        tp.record([sc, fc, oc, B, h, nq, n]() mutable {
            if (!oc.has_grad()) return;
            if (sc.requires_grad()) {
                sc.ensure_grad();
                sc.grad_arr() += oc.grad_arr();
            }
            if (fc.requires_grad()) {
                fc.ensure_grad();
                for (index_t bh = 0; bh < B * h; ++bh) {
                    const index_t b = bh / h;
                    detail::arr1_map<S>(fc.grad_data() + b * nq * n, nq * n) -=
                        detail::carr1_map<S>(oc.grad_data() + bh * nq * n, nq * n);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

template <typename S>
tensor<S> min_scalar(tape<S>& tp, const tensor<S>& x, S cap) {
    tensor<S> out = tensor<S>::uninit(x.shape());
    out.arr() = x.arr().min(cap);
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, cap]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            xc.grad_arr() += (xc.arr() < cap).select(oc.grad_arr(), S(0));
        });
    }
    return out;
}

/// y[..,i] = sum_{k<=i} x[..,i,k]: per-query row sums over the causal
/// (lower-triangular, diagonal included) part.
template <typename S>
tensor<S> tri_rowsum(tape<S>& tp, const tensor<S>& x) {
    const index_t n = x.dim(-1);
    if (x.dim(-2) != n) throw user_error("tri_rowsum: trailing dims not square");
    const index_t batches = x.size() / (n * n);
    shape_t os(x.shape());
    os.pop_back();
    tensor<S> out = tensor<S>::uninit(os);
    for (index_t b = 0; b < batches; ++b) {
        const S* m = x.data() + b * n * n;
        S* o = out.data() + b * n;
        for (index_t i = 0; i < n; ++i) o[i] = detail::carr1_map<S>(m + i * n, i + 1).sum();
    }
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, batches, n]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            for (index_t b = 0; b < batches; ++b) {
                const S* g = oc.grad_data() + b * n;
                S* dx = xc.grad_data() + b * n * n;
                for (index_t i = 0; i < n; ++i) {
                    detail::arr1_map<S>(dx + i * n, i + 1) += g[i];
                }
            }
        });
    }
    return out;
}

/// Max over the last dim; ties route the gradient to the first maximum.
template <typename S>
tensor<S> max_lastdim(tape<S>& tp, const tensor<S>& x) {
    const index_t cols = x.dim(-1);
    const index_t rows = x.size() / cols;
    shape_t os(x.shape());
    os.pop_back();
    if (os.empty()) os.push_back(1);
    tensor<S> out = tensor<S>::uninit(os);
    auto arg = std::make_shared<std::vector<index_t>>(static_cast<std::size_t>(rows));
    for (index_t r = 0; r < rows; ++r) {
        const S* in = x.data() + r * cols;
        index_t best = 0;
        for (index_t j = 1; j < cols; ++j) {
            if (in[j] > in[best]) best = j;
        }
        (*arg)[static_cast<std::size_t>(r)] = best;
        out.data()[r] = in[best];
    }
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc, arg, rows, cols]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            for (index_t r = 0; r < rows; ++r) {
                xc.grad_data()[r * cols + (*arg)[static_cast<std::size_t>(r)]] += oc.grad_data()[r];
            }
        });
    }
    return out;
}

template <typename S>
tensor<S> sum_all(tape<S>& tp, const tensor<S>& x) {
    tensor<S> out = tensor<S>::scalar(static_cast<S>(x.arr().template cast<double>().sum()));
    if (detail::want_grad(tp, {&x})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, oc = out;
        tp.record([xc, oc]() mutable {
            if (!oc.has_grad()) return;
            xc.ensure_grad();
            xc.grad_arr() += oc.grad_arr()(0);
        });
    }
    return out;
}

template <typename S>
tensor<S> mean_all(tape<S>& tp, const tensor<S>& x) {
    return scale(tp, sum_all(tp, x), S(1) / S(x.size()));
}

/// Embedding lookup: table [V,D] gathered by ids -> [B,n,D].
template <typename S>
tensor<S> embedding(tape<S>& tp, const tensor<S>& table, const std::vector<std::int32_t>& ids,
                    index_t B, index_t n) {
    const index_t V = table.dim(0), D = table.dim(1);
    if (static_cast<index_t>(ids.size()) != B * n) throw user_error("embedding: id count mismatch");
    for (std::int32_t id : ids) {
        if (id < 0 || id >= V) {
            throw user_error("embedding: token id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(V));
        }
    }
    tensor<S> out = tensor<S>::uninit({B, n, D});
    for (index_t i = 0; i < B * n; ++i) {
        const S* src = table.data() + static_cast<index_t>(ids[static_cast<std::size_t>(i)]) * D;
        std::copy(src, src + D, out.data() + i * D);
    }
    if (detail::want_grad(tp, {&table})) {
        out.set_requires_grad(true);
        tensor<S> tc = table, oc = out;
        auto idc = std::make_shared<std::vector<std::int32_t>>(ids);
        tp.record([tc, oc, idc, B, n, D]() mutable {
            if (!oc.has_grad()) return;
            tc.ensure_grad();
            // rows repeat; scatter sequentially for determinism
            for (index_t i = 0; i < B * n; ++i) {
                detail::arr1_map<S>(
                    tc.grad_data() + static_cast<index_t>((*idc)[static_cast<std::size_t>(i)]) * D, D) +=
                    detail::carr1_map<S>(oc.grad_data() + i * D, D);
            }
        });
    }
    return out;
}

/// Sum of negative log-likelihoods over the masked rows of logits [R,V].
template <typename S>
tensor<S> cross_entropy_sum(tape<S>& tp, const tensor<S>& logits,
                            const std::vector<std::int32_t>& targets,
                            const std::vector<std::uint8_t>& mask) {
    const index_t V = logits.dim(-1);
    const index_t R = logits.size() / V;
    if (static_cast<index_t>(targets.size()) != R || static_cast<index_t>(mask.size()) != R) {
        throw user_error("cross_entropy: row count mismatch");
    }
    const index_t n_blocks = (R + 255) / 256;
    std::vector<double> partial(static_cast<std::size_t>(n_blocks), 0.0);
    std::atomic<std::int32_t> bad_target{-1};
    parallel_blocks(R, 256, [&](index_t lo, index_t hi) {
        double acc = 0.0;
        for (index_t r = lo; r < hi; ++r) {
            if (!mask[static_cast<std::size_t>(r)]) continue;
            const std::int32_t t = targets[static_cast<std::size_t>(r)];
            if (t < 0 || t >= V) {
                bad_target.store(t);
                return;
            }
            detail::carr1_map<S> row(logits.data() + r * V, V);
            const S mx = row.maxCoeff();
            const double sum = static_cast<double>((row - mx).exp().sum());
            acc += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row(t));
        }
        partial[static_cast<std::size_t>(lo / 256)] = acc;
    });
    if (bad_target.load() >= 0) {
        throw user_error("cross_entropy: target id " + std::to_string(bad_target.load()) +
                         " outside vocabulary of " + std::to_string(V));
    }
    double total = 0.0;
    for (double p : partial) total += p;
    tensor<S> out = tensor<S>::scalar(static_cast<S>(total));

    if (detail::want_grad(tp, {&logits})) {
        out.set_requires_grad(true);
        tensor<S> lc = logits, oc = out;
        auto tgt = std::make_shared<std::vector<std::int32_t>>(targets);
        auto msk = std::make_shared<std::vector<std::uint8_t>>(mask);
        tp.record([lc, oc, tgt, msk, R, V]() mutable {
            if (!oc.has_grad()) return;
            lc.ensure_grad();
            const S g = oc.grad_arr()(0);
            parallel_blocks(R, 256, [&](index_t lo, index_t hi) {
                for (index_t r = lo; r < hi; ++r) {
                    if (!(*msk)[static_cast<std::size_t>(r)]) continue;
                    detail::carr1_map<S> row(lc.data() + r * V, V);
                    detail::arr1_map<S> drow(lc.grad_data() + r * V, V);
                    const S mx = row.maxCoeff();
                    Eigen::Array<S, Eigen::Dynamic, 1> e = (row - mx).exp();
                    drow += e * (g / e.sum());
                    drow((*tgt)[static_cast<std::size_t>(r)]) -= g;
                }
            });
        });
    }
    return out;
}

/// Fused output head + NLL restricted to masked rows: equivalent to
/// cross_entropy_sum(matmul(x, w), ...) but the projection only runs for
/// the scored positions. x: [..,D] with R rows, w: [D,V].
template <typename S>
tensor<S> masked_head_nll_sum(tape<S>& tp, const tensor<S>& x, const tensor<S>& w,
                              const std::vector<std::int32_t>& targets,
                              const std::vector<std::uint8_t>& mask) {
    const index_t D = x.dim(-1);
    const index_t R = x.size() / D;
    const index_t V = w.dim(-1);
    if (w.dim(0) != D) throw user_error("masked_head: width mismatch");
    if (static_cast<index_t>(targets.size()) != R || static_cast<index_t>(mask.size()) != R) {
        throw user_error("masked_head: row count mismatch");
    }
    auto rows = std::make_shared<std::vector<index_t>>();
    for (index_t r = 0; r < R; ++r) {
        if (mask[static_cast<std::size_t>(r)]) rows->push_back(r);
    }
    const index_t M = static_cast<index_t>(rows->size());
    if (M == 0) throw user_error("masked_head: no scored rows");
    tensor<S> xg = tensor<S>::uninit({M, D});
    for (index_t i = 0; i < M; ++i) {
        std::copy(x.data() + (*rows)[static_cast<std::size_t>(i)] * D,
                  x.data() + ((*rows)[static_cast<std::size_t>(i)] + 1) * D, xg.data() + i * D);
    }
    tensor<S> logits = tensor<S>::uninit({M, V});
    detail::gemm(xg.data(), w.data(), logits.data(), M, D, V, false);

    auto probs = std::make_shared<tensor<S>>(tensor<S>::uninit(shape_t{M, V}));
    double total = 0.0;
    for (index_t i = 0; i < M; ++i) {
        const std::int32_t t = targets[static_cast<std::size_t>((*rows)[static_cast<std::size_t>(i)])];
        if (t < 0 || t >= V) {
            throw user_error("cross_entropy: target id " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(V));
        }
        detail::carr1_map<S> row(logits.data() + i * V, V);
        detail::arr1_map<S> prow(probs->data() + i * V, V);
        const S mx = row.maxCoeff();
        prow = (row - mx).exp();
        const double sum = static_cast<double>(prow.sum());
        prow /= static_cast<S>(sum);
        total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row(t));
    }
    tensor<S> out = tensor<S>::scalar(static_cast<S>(total));

    if (detail::want_grad(tp, {&x, &w})) {
        out.set_requires_grad(true);
        tensor<S> xc = x, wc = w, oc = out, xgc = xg;
        auto tgt = std::make_shared<std::vector<std::int32_t>>(targets);
        tp.record([xc, wc, oc, xgc, probs, rows, tgt, M, D, V]() mutable {
            if (!oc.has_grad()) return;
            const S g = oc.grad_arr()(0);
            // dlogits = g * (probs - onehot), reused for both inputs
            tensor<S>& dl = *probs;
            for (index_t i = 0; i < M; ++i) {
                detail::arr1_map<S> row(dl.data() + i * V, V);
                row *= g;
                row((*tgt)[static_cast<std::size_t>((*rows)[static_cast<std::size_t>(i)])]) -= g;
            }
            if (xc.requires_grad()) {
                xc.ensure_grad();
                tensor<S> dxg = tensor<S>::uninit({M, D});
                detail::gemm_nt(dl.data(), wc.data(), dxg.data(), M, V, D, false);
                for (index_t i = 0; i < M; ++i) {
                    detail::arr1_map<S>(xc.grad_data() + (*rows)[static_cast<std::size_t>(i)] * D, D) +=
                        detail::carr1_map<S>(dxg.data() + i * D, D);
                }
            }
            if (wc.requires_grad()) {
                wc.ensure_grad();
                detail::gemm_tn(xgc.data(), dl.data(), wc.grad_data(), D, M, V, true);
            }
        });
    }
    return out;
}

}  // namespace selattn
