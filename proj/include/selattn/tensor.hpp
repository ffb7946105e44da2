// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode differentiation on a tape.
// Tensors are cheap handles over shared buffers; reshapes alias the same
// storage, so gradients flow through them with no recorded op.

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <utility>

#include "selattn/common.hpp"

namespace selattn {

template <typename S>
using mat_t = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using arr_t = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
struct tensor_buf {
    buf_vec<S> value;
    buf_vec<S> grad;  // empty until first accumulation
    bool requires_grad = false;
};

template <typename S>
class tensor {
public:
    tensor() = default;

    static tensor zeros(shape_t shape) {
        tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = std::make_shared<tensor_buf<S>>();
        t.buf_->value.assign(static_cast<std::size_t>(numel(t.shape_)), S(0));
        return t;
    }

    /// Allocation without zero-fill, for outputs that are fully overwritten.
    static tensor uninit(shape_t shape) {
        tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = std::make_shared<tensor_buf<S>>();
        t.buf_->value.resize(static_cast<std::size_t>(numel(t.shape_)));
#ifdef SELATTN_POISON_UNINIT
        std::fill(t.buf_->value.begin(), t.buf_->value.end(), S(1e30));
#endif
        return t;
    }

    static tensor full(shape_t shape, S v) {
        tensor t = zeros(std::move(shape));
        std::fill(t.buf_->value.begin(), t.buf_->value.end(), v);
        return t;
    }

    static tensor from_data(shape_t shape, const std::vector<S>& data) {
        if (numel(shape) != static_cast<index_t>(data.size())) {
            throw user_error("tensor::from_data: " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
        }
        tensor t = uninit(std::move(shape));
        std::copy(data.begin(), data.end(), t.buf_->value.begin());
        return t;
    }

    /// Copy of another tensor's values (no graph connection).
    static tensor copy_of(const tensor& o) {
        tensor t = uninit(o.shape());
        std::copy(o.data(), o.data() + o.size(), t.buf_->value.begin());
        return t;
    }

    static tensor scalar(S v) { return from_data({1}, {v}); }

    /// Trainable parameter initialized from a normal distribution.
    static tensor param_normal(shape_t shape, rng64& rng, double stddev) {
        tensor t = zeros(std::move(shape));
        for (auto& v : t.buf_->value) v = static_cast<S>(rng.normal() * stddev);
        t.buf_->requires_grad = true;
        return t;
    }

    static tensor param_const(shape_t shape, S v) {
        tensor t = full(std::move(shape), v);
        t.buf_->requires_grad = true;
        return t;
    }

    bool defined() const { return buf_ != nullptr; }
    const shape_t& shape() const { return shape_; }
    index_t dim(int i) const {
        int n = static_cast<int>(shape_.size());
        return shape_[static_cast<std::size_t>(i < 0 ? i + n : i)];
    }
    int ndim() const { return static_cast<int>(shape_.size()); }
    index_t size() const { return static_cast<index_t>(buf_->value.size()); }

    bool requires_grad() const { return buf_->requires_grad; }
    void set_requires_grad(bool v) { buf_->requires_grad = v; }

    S* data() { return buf_->value.data(); }
    const S* data() const { return buf_->value.data(); }

    S item() const {
        if (size() != 1) throw user_error("item(): tensor is not scalar, shape " + shape_str(shape_));
        return buf_->value[0];
    }

    /// New handle over the same storage with a different shape.
    tensor reshaped(shape_t shape) const {
        if (numel(shape) != size()) {
            throw user_error("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                             ": element count differs");
        }
        tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = buf_;
        return t;
    }

    Eigen::Map<arr_t<S>> arr() { return {buf_->value.data(), size()}; }
    Eigen::Map<const arr_t<S>> arr() const { return {buf_->value.data(), size()}; }

    Eigen::Map<mat_t<S>> mat(index_t rows, index_t cols) { return {buf_->value.data(), rows, cols}; }
    Eigen::Map<const mat_t<S>> mat(index_t rows, index_t cols) const {
        return {buf_->value.data(), rows, cols};
    }

    /// Matrix view folding all leading dims into rows.
    Eigen::Map<mat_t<S>> mat2() { return mat(size() / dim(-1), dim(-1)); }
    Eigen::Map<const mat_t<S>> mat2() const { return mat(size() / dim(-1), dim(-1)); }

    bool has_grad() const { return !buf_->grad.empty(); }
    void ensure_grad() {
        if (buf_->grad.empty()) buf_->grad.assign(buf_->value.size(), S(0));
    }

    /// For backward rules that overwrite the whole gradient: the first dense
    /// writer gets an uninitialized buffer and must assign; later writers
    /// accumulate. Partial writers must use ensure_grad() instead.
    bool grad_begin_dense() {
        if (buf_->grad.empty()) {
            buf_->grad.resize(buf_->value.size());
            return true;
        }
        return false;
    }
    void zero_grad() {
        if (!buf_->grad.empty()) std::fill(buf_->grad.begin(), buf_->grad.end(), S(0));
    }
    void drop_grad() { buf_->grad.clear(); }

    S* grad_data() { return buf_->grad.data(); }
    Eigen::Map<arr_t<S>> grad_arr() { return {buf_->grad.data(), size()}; }
    Eigen::Map<mat_t<S>> grad_mat(index_t rows, index_t cols) { return {buf_->grad.data(), rows, cols}; }
    Eigen::Map<mat_t<S>> grad_mat2() { return grad_mat(size() / dim(-1), dim(-1)); }

    bool all_finite() const {
        for (const S& v : buf_->value) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool same_buffer(const tensor& o) const { return buf_ == o.buf_; }

private:
    shape_t shape_;
    std::shared_ptr<tensor_buf<S>> buf_;
};

/// Records backward closures in construction order (which is a topological
/// order of the graph) and replays them in reverse exactly once.
template <typename S>
class tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    void record(std::function<void()> fn) {
        if (recording_) nodes_.push_back(std::move(fn));
    }

    std::size_t size() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// requires_grad tensor reachable from it.
    void backward(tensor<S> loss) {
        if (consumed_) throw state_error("backward() on a stale graph; reset() first");
        if (loss.size() != 1) {
            throw user_error("backward() needs a scalar loss, got " + shape_str(loss.shape()));
        }
        consumed_ = true;
        loss.ensure_grad();
        loss.grad_arr()(0) += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
    bool consumed_ = false;
};

namespace detail {

/// C (+)= A * B with fixed 128-row blocks fanned over the pool. Each output
/// element is reduced by Eigen's sequential kernel, so results do not depend
/// on the worker count.
template <typename S>
void gemm(const S* a, const S* b, S* c, index_t m, index_t k, index_t n, bool accumulate) {
    parallel_blocks(m, 128, [&](index_t lo, index_t hi) {
        Eigen::Map<const mat_t<S>> A(a + lo * k, hi - lo, k);
        Eigen::Map<const mat_t<S>> B(b, k, n);
        Eigen::Map<mat_t<S>> C(c + lo * n, hi - lo, n);
        if (accumulate) {
            C.noalias() += A * B;
        } else {
            C.noalias() = A * B;
        }
    });
}

/// C (+)= A * B^T
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, index_t m, index_t k, index_t n, bool accumulate) {
    parallel_blocks(m, 128, [&](index_t lo, index_t hi) {
        Eigen::Map<const mat_t<S>> A(a + lo * k, hi - lo, k);
        Eigen::Map<const mat_t<S>> B(b, n, k);
        Eigen::Map<mat_t<S>> C(c + lo * n, hi - lo, n);
        if (accumulate) {
            C.noalias() += A * B.transpose();
        } else {
            C.noalias() = A * B.transpose();
        }
    });
}

/// C (+)= A^T * B where A: [k,m], B: [k,n], C: [m,n]; blocked over C rows.
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, index_t m, index_t k, index_t n, bool accumulate) {
    parallel_blocks(m, 128, [&](index_t lo, index_t hi) {
        Eigen::Map<const mat_t<S>> A(a, k, m);
        Eigen::Map<const mat_t<S>> B(b, k, n);
        Eigen::Map<mat_t<S>> C(c + lo * n, hi - lo, n);
        if (accumulate) {
            C.noalias() += A.middleCols(lo, hi - lo).transpose() * B;
        } else {
            C.noalias() = A.middleCols(lo, hi - lo).transpose() * B;
        }
    });
}

}  // namespace detail

}  // namespace selattn
