// Copyright (c) 2026 The selattn authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "selattn/ops.hpp"

using namespace selattn;

namespace {

// Direct-summation matmul oracle, independent of the GEMM path.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  index_t m, index_t k, index_t n) {
    std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
    for (index_t i = 0; i < m; ++i) {
        for (index_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (index_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
            c[i * n + j] = acc;
        }
    }
    return c;
}

// Extended-precision exp-normalize oracle.
std::vector<double> softmax_oracle(const std::vector<double>& row) {
    long double mx = row[0];
    for (double v : row) mx = std::max<long double>(mx, v);
    long double sum = 0.0L;
    std::vector<long double> e(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        e[i] = expl(static_cast<long double>(row[i]) - mx);
        sum += e[i];
    }
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
    return out;
}

tensor<double> rand_tensor(shape_t shape, rng64& rng, double scl = 1.0) {
    tensor<double> t = tensor<double>::zeros(std::move(shape));
    for (index_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal() * scl;
    return t;
}

// Finite-difference check: builds loss = fn(tape) from `inputs`, compares
// autodiff gradients of every input coordinate against central differences.
template <typename Fn>
void gradcheck(std::vector<tensor<double>> inputs, Fn fn, double tol = 1e-6, double h = 1e-5) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.drop_grad();  // tensors may be shared between checks
    }
    tape<double> tp;
    tensor<double> loss = fn(tp, inputs);
    tp.backward(loss);

    auto eval = [&]() {
        tape<double> t2;
        t2.set_recording(false);
        return fn(t2, inputs).item();
    };

    for (std::size_t t = 0; t < inputs.size(); ++t) {
        tensor<double>& x = inputs[t];
        REQUIRE(x.has_grad());
        for (index_t c = 0; c < x.size(); ++c) {
            const double orig = x.data()[c];
            x.data()[c] = orig + h;
            const double fp = eval();
            x.data()[c] = orig - h;
            const double fm = eval();
            x.data()[c] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double ad = x.grad_data()[c];
            const double err = std::abs(fd - ad) / std::max(1.0, std::max(std::abs(fd), std::abs(ad)));
            INFO("input ", t, " (", shape_str(x.shape()), ") coord ", c, " fd=", fd, " ad=", ad);
            CHECK(err < tol);
        }
    }
}

// Weighted sum turns any op output into a scalar that exercises the whole
// jacobian; the weights stay fixed across FD evaluations.
tensor<double> weighted(tape<double>& tp, const tensor<double>& y, const tensor<double>& w) {
    return sum_all(tp, mul(tp, y, w));
}

}  // namespace

TEST_CASE("matmul identity, hand oracle, zeros") {
    tape<float> tp;
    auto eye = tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
    auto m = tensor<float>::from_data({2, 2}, {3.5f, -1, 2, 7});
    auto r = matmul(tp, eye, m);
    for (index_t i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

    // [[1,2]] x [[3],[4]] = [[11]], frozen from the direct-summation oracle.
    auto a = tensor<float>::from_data({1, 2}, {1, 2});
    auto b = tensor<float>::from_data({2, 1}, {3, 4});
    CHECK(matmul(tp, a, b).item() == doctest::Approx(11.0));
    auto oracle = matmul_oracle({1, 2}, {3, 4}, 1, 2, 1);
    CHECK(oracle[0] == 11.0);

    auto z = matmul(tp, tensor<float>::zeros({2, 3}), tensor<float>::full({3, 4}, 9.f));
    for (index_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0f);
    CHECK(z.shape() == shape_t{2, 4});
}

TEST_CASE("matmul random vs oracle and shape errors") {
    rng64 rng(7);
    tape<double> tp;
    auto a = rand_tensor({3, 4}, rng);
    auto b = rand_tensor({4, 5}, rng);
    auto c = matmul(tp, a, b);
    auto ref = matmul_oracle({a.data(), a.data() + a.size()}, {b.data(), b.data() + b.size()}, 3, 4, 5);
    for (index_t i = 0; i < c.size(); ++i) CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // zeros x anything stays zero
    auto z = matmul(tp, tensor<double>::zeros({2, 4}), b);
    for (index_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0);
    CHECK_THROWS_WITH_AS(matmul(tp, a, rand_tensor({3, 5}, rng)),
                         doctest::Contains("[3,4]"), user_error);
}

TEST_CASE("batched matmul and matmul_nt match per-batch oracle") {
    rng64 rng(11);
    tape<double> tp;
    auto a = rand_tensor({2, 3, 3, 4}, rng);
    auto b = rand_tensor({2, 3, 4, 2}, rng);
    auto c = matmul(tp, a, b);
    for (index_t batch = 0; batch < 6; ++batch) {
        auto ref = matmul_oracle({a.data() + batch * 12, a.data() + (batch + 1) * 12},
                                 {b.data() + batch * 8, b.data() + (batch + 1) * 8}, 3, 4, 2);
        for (index_t i = 0; i < 6; ++i) {
            CHECK(c.data()[batch * 6 + i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }

    auto q = rand_tensor({2, 2, 3, 4}, rng);
    auto k = rand_tensor({2, 2, 3, 4}, rng);
    auto s = matmul_nt(tp, q, k);
    for (index_t batch = 0; batch < 4; ++batch) {
        for (index_t i = 0; i < 3; ++i) {
            for (index_t j = 0; j < 3; ++j) {
                double acc = 0;
                for (index_t t = 0; t < 4; ++t) {
                    acc += q.data()[batch * 12 + i * 4 + t] * k.data()[batch * 12 + j * 4 + t];
                }
                CHECK(s.data()[batch * 9 + i * 3 + j] == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("softmax frozen examples") {
    tape<float> tp;
    auto u = softmax_lastdim(tp, tensor<float>::zeros({3}));
    for (int i = 0; i < 3; ++i) CHECK(u.data()[i] == doctest::Approx(1.0 / 3));

    const float ninf = -std::numeric_limits<float>::infinity();
    auto m = softmax_lastdim(tp, tensor<float>::from_data({2}, {ninf, 0.f}));
    CHECK(m.data()[0] == 0.0f);  // exactly zero
    CHECK(m.data()[1] == 1.0f);

    auto s = softmax_lastdim(tp, tensor<float>::from_data({3}, {1, 2, 3}));
    auto ref = softmax_oracle({1, 2, 3});
    for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));

    CHECK_THROWS_AS(softmax_lastdim(tp, tensor<float>::from_data({2}, {ninf, ninf})), user_error);
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
    rng64 rng(3);
    tape<double> tp;
    auto x = rand_tensor({8, 16}, rng, 5.0);
    // sprinkle -inf
    for (index_t i = 0; i < x.size(); i += 7) x.data()[i] = -std::numeric_limits<double>::infinity();
    auto y = softmax_lastdim(tp, x);
    for (index_t r = 0; r < 8; ++r) {
        double sum = 0;
        for (index_t c = 0; c < 16; ++c) {
            double v = y.data()[r * 16 + c];
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("cumsum frozen example and prefix property") {
    tape<float> tp;
    auto x = tensor<float>::from_data({2, 2}, {1, 0, 2, 3});
    auto y = cumsum_axis(tp, x, 0);
    CHECK(y.data()[0] == 1);
    CHECK(y.data()[1] == 0);
    CHECK(y.data()[2] == 3);
    CHECK(y.data()[3] == 3);

    rng64 rng(5);
    tape<double> tp2;
    auto r = rand_tensor({4, 6, 3}, rng);
    auto c = cumsum_axis(tp2, r, 1);
    for (index_t o = 0; o < 4; ++o) {
        for (index_t i = 0; i < 6; ++i) {
            for (index_t j = 0; j < 3; ++j) {
                double prev = i ? c.data()[(o * 6 + i - 1) * 3 + j] : 0.0;
                double diff = c.data()[(o * 6 + i) * 3 + j] - prev;
                CHECK(diff == doctest::Approx(r.data()[(o * 6 + i) * 3 + j]).epsilon(1e-7));
            }
        }
    }
}

TEST_CASE("relu and roll semantics") {
    tape<float> tp;
    auto r = relu(tp, tensor<float>::from_data({3}, {-1, 0, 2}));
    CHECK(r.data()[0] == 0);
    CHECK(r.data()[1] == 0);
    CHECK(r.data()[2] == 2);

    auto x = tensor<float>::from_data({3, 1}, {10, 20, 30});
    auto rolled = zero_index_axis(tp, roll_axis(tp, x, 1, 0), 0, 0);
    CHECK(rolled.data()[0] == 0);
    CHECK(rolled.data()[1] == 10);
    CHECK(rolled.data()[2] == 20);

    CHECK_THROWS_AS(roll_axis(tp, x, 1, 5), user_error);
    CHECK_THROWS_AS(cumsum_axis(tp, x, -4), user_error);
}

TEST_CASE("backward of sum-of-all is ones; stale graph errors") {
    tape<double> tp;
    auto x = tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    x.set_requires_grad(true);
    auto s = sum_all(tp, x);
    tp.backward(s);
    for (index_t i = 0; i < 6; ++i) CHECK(x.grad_data()[i] == 1.0);
    CHECK_THROWS_AS(tp.backward(s), state_error);
    tp.reset();

    tape<double> tp2;
    auto y = sum_all(tp2, x);
    CHECK_THROWS_AS(tp2.backward(tensor<double>::zeros({2})), user_error);
    (void)y;
}

TEST_CASE("gradcheck: matmul family") {
    rng64 rng(21);
    gradcheck({rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng), rand_tensor({3, 2}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, matmul(tp, in[0], in[1]), in[2]);
              });
    gradcheck({rand_tensor({2, 2, 3}, rng), rand_tensor({2, 4, 3}, rng), rand_tensor({2, 2, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, matmul_nt(tp, in[0], in[1]), in[2]);
              });
    gradcheck({rand_tensor({2, 2, 3}, rng), rand_tensor({2, 3, 2}, rng), rand_tensor({2, 2, 2}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, matmul(tp, in[0], in[1]), in[2]);
              });
}

TEST_CASE("gradcheck: elementwise and broadcast") {
    rng64 rng(22);
    gradcheck({rand_tensor({3, 3}, rng), rand_tensor({3, 3}, rng), rand_tensor({3, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  auto y = mul(tp, add(tp, in[0], in[1]), sub(tp, in[0], in[1]));
                  return weighted(tp, y, in[2]);
              });
    gradcheck({rand_tensor({2, 2, 3}, rng), rand_tensor({2, 3}, rng), rand_tensor({2, 2, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, add_tiled(tp, in[0], in[1], -0.5), in[2]);
              });
    // keep relu/silu inputs away from the kink
    auto x = rand_tensor({4, 4}, rng);
    for (index_t i = 0; i < x.size(); ++i) {
        if (std::abs(x.data()[i]) < 0.1) x.data()[i] += 0.2;
    }
    gradcheck({x, rand_tensor({4, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, relu(tp, in[0]), in[1]);
              });
    gradcheck({x, rand_tensor({4, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, silu(tp, in[0]), in[1]);
              });
    gradcheck({x, rand_tensor({4, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, scale(tp, in[0], 2.5), in[1]);
              });
}

TEST_CASE("gradcheck: softmax, rmsnorm, rmsnorm_heads") {
    rng64 rng(23);
    gradcheck({rand_tensor({3, 5}, rng), rand_tensor({3, 5}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, softmax_lastdim(tp, in[0]), in[1]);
              });
    gradcheck({rand_tensor({4, 6}, rng), rand_tensor({6}, rng, 0.5), rand_tensor({4, 6}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, rmsnorm(tp, in[0], in[1]), in[2]);
              });
    gradcheck({rand_tensor({2, 2, 3, 4}, rng), rand_tensor({8}, rng, 0.5), rand_tensor({2, 2, 3, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, rmsnorm_heads(tp, in[0], in[1]), in[2]);
              });
}

TEST_CASE("gradcheck: shaping and masking ops") {
    rng64 rng(24);
    gradcheck({rand_tensor({2, 5, 3}, rng), rand_tensor({2, 5, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, cumsum_axis(tp, in[0], 1), in[1]);
              });
    gradcheck({rand_tensor({2, 4, 3}, rng), rand_tensor({2, 4, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, roll_axis(tp, in[0], 1, -2), in[1]);
              });
    gradcheck({rand_tensor({2, 4, 4}, rng), rand_tensor({2, 4, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  auto y = zero_diag_last2(tp, zero_index_axis(tp, in[0], -1, 0));
                  return weighted(tp, y, in[1]);
              });
    gradcheck({rand_tensor({2, 4, 4}, rng), rand_tensor({2, 4, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  // -inf entries never reach the loss: zero them after masking.
                  auto y = finite_or_zero(tp, causal_neg_inf(tp, in[0]));
                  return weighted(tp, y, in[1]);
              });
    gradcheck({rand_tensor({2, 3, 4}, rng), rand_tensor({2, 2, 3, 2}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, to_heads(tp, in[0], 2), in[1]);
              });
    gradcheck({rand_tensor({2, 2, 3, 2}, rng), rand_tensor({2, 3, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, from_heads(tp, in[0]), in[1]);
              });
    gradcheck({rand_tensor({2, 3, 4, 4}, rng), rand_tensor({2, 4, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, head_slice(tp, in[0], 1), in[1]);
              });
    gradcheck({rand_tensor({2, 2, 3, 3}, rng), rand_tensor({2, 3, 3}, rng), rand_tensor({2, 2, 3, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, sub_bcast_heads(tp, in[0], in[1]), in[2]);
              });
}

TEST_CASE("gradcheck: reductions and losses") {
    rng64 rng(25);
    auto x = rand_tensor({3, 4}, rng);
    for (index_t i = 0; i < x.size(); ++i) {
        if (std::abs(x.data()[i] - 0.5) < 0.1) x.data()[i] += 0.3;  // stay off the clamp point
    }
    gradcheck({x, rand_tensor({3, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, min_scalar(tp, in[0], 0.5), in[1]);
              });
    gradcheck({rand_tensor({2, 4, 4}, rng), rand_tensor({2, 4}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, tri_rowsum(tp, in[0]), in[1]);
              });
    gradcheck({rand_tensor({3, 5}, rng), rand_tensor({3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, max_lastdim(tp, in[0]), in[1]);
              });
    gradcheck({rand_tensor({2, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return mean_all(tp, in[0]);
              });
    gradcheck({rand_tensor({4, 6}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return cross_entropy_sum(tp, in[0], {1, 3, 0, 5}, {1, 1, 0, 1});
              });
    gradcheck({rand_tensor({5, 3}, rng)},
              [](tape<double>& tp, std::vector<tensor<double>>& in) {
                  return weighted(tp, embedding(tp, in[0], {0, 2, 2, 4}, 2, 2),
                                  tensor<double>::full({2, 2, 3}, 0.7));
              });
}

TEST_CASE("fused masked head matches matmul + cross entropy, with gradients") {
    rng64 rng(31);
    auto x = rand_tensor({2, 3, 4}, rng);   // 6 rows of width 4
    auto w = rand_tensor({4, 5}, rng);
    const std::vector<std::int32_t> targets = {1, 0, 4, 2, 2, 3};
    const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};

    tape<double> tp;
    tp.set_recording(false);
    auto fused = masked_head_nll_sum(tp, x, w, targets, mask);
    auto composed = cross_entropy_sum(tp, matmul(tp, x, w).reshaped({6, 5}), targets, mask);
    CHECK(fused.item() == doctest::Approx(composed.item()).epsilon(1e-12));

    gradcheck({x, w},
              [&](tape<double>& t2, std::vector<tensor<double>>& in) {
                  return masked_head_nll_sum(t2, in[0], in[1], targets, mask);
              });

    CHECK_THROWS_AS(masked_head_nll_sum(tp, x, w, targets, {0, 0, 0, 0, 0, 0}), user_error);
    CHECK_THROWS_AS(masked_head_nll_sum(tp, x, w, {1, 0, 9, 2, 2, 3}, mask), user_error);
}

TEST_CASE("cross entropy vocabulary check and uniform logits") {
    tape<float> tp;
    auto logits = tensor<float>::zeros({4, 10});
    auto loss = cross_entropy_sum(tp, logits, {1, 2, 3, 4}, {1, 1, 1, 1});
    CHECK(loss.item() / 4 == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    CHECK_THROWS_AS(cross_entropy_sum(tp, logits, {1, 2, 3, 12}, {1, 1, 1, 1}), user_error);
    CHECK(masked_count({1, 0, 1, 1}) == 3);
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(tensor<float>::from_data({2, 2}, {1, 2, 3}), user_error);
    auto t = tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(numel(t.shape()) == t.size());
    auto r = t.reshaped({3, 2});
    CHECK(r.same_buffer(t));
    CHECK_THROWS_AS(t.reshaped({4, 2}), user_error);
    CHECK(t.all_finite());
    t.data()[2] = std::numeric_limits<float>::infinity();
    CHECK(!t.all_finite());
}
