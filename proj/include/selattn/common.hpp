// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace selattn {

using index_t = std::int64_t;
using shape_t = std::vector<index_t>;

/// Allocator for tensor buffers: 64-byte aligned so SIMD kernels take the
/// same code path for every buffer (a reduction's summation order must not
/// depend on where malloc placed the data), and default-initializing since
/// op outputs are fully overwritten before reads.
template <typename T>
struct uninit_alloc {
    using value_type = T;
    uninit_alloc() = default;
    template <typename U>
    uninit_alloc(const uninit_alloc<U>&) noexcept {}
    template <typename U>
    struct rebind {
        using other = uninit_alloc<U>;
    };
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
    template <typename U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    bool operator==(const uninit_alloc&) const { return true; }
};

template <typename T>
using buf_vec = std::vector<T, uninit_alloc<T>>;

/// Invalid user input: bad config values, missing files, malformed flags.
/// The CLI maps this to exit code 2.
struct user_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Persistent-state mismatch, e.g. a checkpoint that does not fit the model
/// it is loaded into. CLI exit code 3.
struct state_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss. CLI exit code 4.
struct divergence_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline index_t numel(const shape_t& shape) {
    index_t n = 1;
    for (index_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const shape_t& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline index_t masked_count(const std::vector<std::uint8_t>& mask) {
    index_t c = 0;
    for (std::uint8_t m : mask) c += m ? 1 : 0;
    return c;
}

inline void check_shapes_match(const shape_t& a, const shape_t& b, const char* what) {
    if (a != b) {
        throw user_error(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

/// Deterministic RNG. std::mt19937_64 output is pinned by the standard; the
/// distributions below are hand-rolled so streams are identical across
/// standard libraries.
class rng64 {
public:
    explicit rng64(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        std::uint64_t bound = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = eng_();
        } while (v >= bound);
        return v % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        have_spare_ = false;
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

namespace detail {
inline thread_local int pool_depth = 0;
}

/// Small persistent worker pool. Work is split into a fixed chunk grid that
/// does not depend on the worker count, so float reductions stay bitwise
/// identical no matter how many threads execute the chunks. Nested calls run
/// inline.
class thread_pool {
    struct job_state {
        std::atomic<index_t> next{0};
        std::atomic<index_t> done{0};
        index_t n = 0;
        const std::function<void(index_t)>* fn = nullptr;
    };

public:
    explicit thread_pool(unsigned n_workers) {
        for (unsigned i = 1; i < std::max(1u, n_workers); ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~thread_pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    unsigned size() const { return static_cast<unsigned>(workers_.size()) + 1; }

    /// Runs fn(chunk) for chunk in [0, n_chunks); the calling thread
    /// participates and the call blocks until every chunk finished.
    void run(index_t n_chunks, const std::function<void(index_t)>& fn) {
        if (n_chunks <= 0) return;
        if (n_chunks == 1 || workers_.empty() || detail::pool_depth > 0) {
            detail::pool_depth++;
            for (index_t c = 0; c < n_chunks; ++c) fn(c);
            detail::pool_depth--;
            return;
        }
        auto state = std::make_shared<job_state>();
        state->n = n_chunks;
        state->fn = &fn;
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_ = state;
            job_epoch_++;
        }
        cv_.notify_all();
        detail::pool_depth++;
        drain(*state);
        detail::pool_depth--;
        // Workers only dereference fn for chunks they claimed before n was
        // exhausted; once done == n no live reference to fn remains.
        while (state->done.load(std::memory_order_acquire) < n_chunks) {
            std::this_thread::yield();
        }
    }

private:
    static void drain(job_state& s) {
        index_t c;
        while ((c = s.next.fetch_add(1, std::memory_order_relaxed)) < s.n) {
            (*s.fn)(c);
            s.done.fetch_add(1, std::memory_order_release);
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            std::shared_ptr<job_state> state;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || (job_ && job_epoch_ != seen); });
                if (stop_) return;
                seen = job_epoch_;
                state = job_;
            }
            detail::pool_depth++;
            drain(*state);
            detail::pool_depth--;
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::shared_ptr<job_state> job_;
    std::uint64_t job_epoch_ = 0;
    bool stop_ = false;
};

/// Process-wide pool, sized by SELATTN_THREADS (defaults to hardware
/// concurrency).
inline thread_pool& pool() {
    static thread_pool p([] {
#if defined(__GLIBC__)
        // Large activation buffers churn every step; keep them on the heap
        // instead of mmap so pages are reused rather than refaulted.
        mallopt(M_MMAP_MAX, 0);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
        unsigned n = std::thread::hardware_concurrency();
        if (const char* env = std::getenv("SELATTN_THREADS")) {
            long v = std::strtol(env, nullptr, 10);
            if (v >= 1) n = static_cast<unsigned>(v);
        }
        return std::max(1u, n);
    }());
    return p;
}

/// parallel_for over [0, n) in fixed-size blocks. The block size is a
/// constant of the call site, not of the worker count.
inline void parallel_blocks(index_t n, index_t block,
                            const std::function<void(index_t, index_t)>& fn) {
    if (n <= 0) return;
    index_t n_chunks = (n + block - 1) / block;
    pool().run(n_chunks, [&](index_t c) {
        index_t lo = c * block;
        fn(lo, std::min(n, lo + block));
    });
}

}  // namespace selattn
