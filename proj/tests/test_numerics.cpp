#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "egnn/adam.hpp"
#include "egnn/ops.hpp"
#include "egnn/tensor.hpp"
#include "support/test_support.hpp"

using namespace egnn;
using test::grad_check;
using test::random_tensor;

namespace {

Tensor<double> weighted_sum(Tape<double>& tape, const Tensor<double>& x, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = random_tensor(x.shape(), rng);
    return ops::reduce_sum_all(tape, ops::mul(tape, x, w));
}

} // namespace

TEST_CASE("leaky_relu definition") {
    Tape<double> tape;
    auto x = Tensor<double>::from_data({3}, {-1.0, 0.0, 2.0});
    auto y = ops::leaky_relu(tape, x, 0.01);
    CHECK(y.values()[0] == doctest::Approx(-0.01));
    CHECK(y.values()[1] == 0.0);
    CHECK(y.values()[2] == 2.0);
}

TEST_CASE("softmax symmetry and normalization") {
    Tape<double> tape;
    auto x = Tensor<double>::from_data({3}, {0.0, 0.0, 0.0});
    auto y = ops::softmax(tape, x, 0);
    for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3));

    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto r = random_tensor({4, 6}, rng, -5.0, 5.0);
        auto s = ops::softmax(tape, r, 1);
        for (std::size_t row = 0; row < 4; ++row) {
            double sum = 0;
            for (std::size_t k = 0; k < 6; ++k) {
                const double v = s.values()[row * 6 + k];
                CHECK(v > 0.0);
                CHECK(v < 1.0);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("bce at 0.5 is ln 2") {
    Tape<double> tape;
    auto pred = Tensor<double>::scalar(0.5);
    auto target = Tensor<double>::scalar(1.0);
    CHECK(ops::bce_loss(tape, pred, target).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("conv2d 3x3 same padding against direct summation") {
    // 5x5 all-ones input, all-ones kernel: interior 9, edges 6, corners 4.
    Tape<double> tape;
    auto x = Tensor<double>::full({1, 1, 5, 5}, 1.0);
    auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto b = Tensor<double>::zeros({1});
    auto y = ops::conv2d(tape, x, w, b, 1, 1);
    REQUIRE(y.shape() == Shape{1, 1, 5, 5});
    CHECK(y.values()[2 * 5 + 2] == doctest::Approx(9.0));
    CHECK(y.values()[0] == doctest::Approx(4.0));

    // Random case vs an independent plain-loop convolution.
    std::mt19937_64 rng(5);
    auto xr = random_tensor({2, 3, 6, 6}, rng);
    auto wr = random_tensor({4, 3, 3, 3}, rng);
    auto br = random_tensor({4}, rng);
    auto yr = ops::conv2d(tape, xr, wr, br, 1, 1);
    auto xv = xr.values();
    auto wv = wr.values();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
            for (std::size_t oy = 0; oy < 6; ++oy)
                for (std::size_t ox = 0; ox < 6; ++ox) {
                    double acc = br.values()[o];
                    for (std::size_t c = 0; c < 3; ++c)
                        for (int ky = -1; ky <= 1; ++ky)
                            for (int kx = -1; kx <= 1; ++kx) {
                                const int iy = static_cast<int>(oy) + ky;
                                const int ix = static_cast<int>(ox) + kx;
                                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                                acc += xv[((n * 3 + c) * 6 + iy) * 6 + ix] *
                                       wv[((o * 3 + c) * 3 + (ky + 1)) * 3 + (kx + 1)];
                            }
                    CHECK(yr.values()[((n * 4 + o) * 6 + oy) * 6 + ox] ==
                          doctest::Approx(acc).epsilon(1e-12));
                }
}

TEST_CASE("backward of sum(x*x)") {
    Tape<double> tape;
    auto x = Tensor<double>::from_data({3}, {1.0, 2.0, 3.0}, true);
    auto loss = ops::reduce_sum_all(tape, ops::mul(tape, x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("unused parameter receives zero gradient") {
    Tape<double> tape;
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
    auto unused = Tensor<double>::from_data({2}, {5.0, 5.0}, true);
    auto loss = ops::reduce_sum_all(tape, ops::mul(tape, x, x));
    tape.backward(loss);
    CHECK(test::grad_at(unused, 0) == 0.0);
    CHECK(test::grad_at(unused, 1) == 0.0);
}

TEST_CASE("backward misuse errors") {
    Tape<double> tape;
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
    auto y = ops::mul(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), std::logic_error); // non-scalar
    auto loss = ops::reduce_sum_all(tape, y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error); // consumed
}

TEST_CASE("shape errors") {
    Tape<double> tape;
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2, 3});
    CHECK_THROWS_AS(ops::matmul(tape, a, b), ShapeError);
    auto c = Tensor<double>::zeros({4});
    CHECK_THROWS_AS(ops::add(tape, a, c), ShapeError);
    CHECK_THROWS_AS(ops::reshape(tape, a, {5}), ShapeError);
}

TEST_CASE("l1_normalize unit norm on positive input") {
    Tape<double> tape;
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor({5, 7}, rng, 0.05, 2.0);
        auto y = ops::l1_normalize(tape, x, 1);
        for (std::size_t row = 0; row < 5; ++row) {
            double sum = 0;
            for (std::size_t k = 0; k < 7; ++k) sum += std::abs(y.values()[row * 7 + k]);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    auto zero = Tensor<double>::zeros({2, 2});
    CHECK_THROWS_AS(ops::l1_normalize(tape, zero, 1), NumericsError);
}

TEST_CASE("batchnorm batch statistics") {
    Tape<double> tape;
    std::mt19937_64 rng(23);
    auto x = random_tensor({16, 4}, rng, -3.0, 3.0);
    auto gamma = Tensor<double>::full({4}, 1.0);
    auto beta = Tensor<double>::zeros({4});
    BatchNormBuffers<double> buffers{Tensor<double>::zeros({4}), Tensor<double>::full({4}, 1.0)};
    auto y = ops::batchnorm(tape, x, gamma, beta, buffers, BNMode::Batch, 0.1, 1e-5, true);
    for (std::size_t f = 0; f < 4; ++f) {
        double mean = 0, var = 0;
        for (std::size_t n = 0; n < 16; ++n) mean += y.values()[n * 4 + f];
        mean /= 16;
        for (std::size_t n = 0; n < 16; ++n) {
            const double d = y.values()[n * 4 + f] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::abs(mean) < 1e-4);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
    // Running buffers moved toward the batch statistics.
    CHECK(buffers.running_var.values()[0] != 1.0);

    // Batch statistics need two rows.
    auto single = Tensor<double>::zeros({1, 4});
    CHECK_THROWS_AS(
        ops::batchnorm(tape, single, gamma, beta, buffers, BNMode::Batch, 0.1, 1e-5, false),
        ShapeError);
    // Running mode works with one row.
    auto out = ops::batchnorm(tape, single, gamma, beta, buffers, BNMode::Running, 0.1, 1e-5,
                              false);
    CHECK(out.all_finite());

    // Constant feature: eps keeps the output finite.
    auto flat = Tensor<double>::full({8, 4}, 3.5);
    auto yf = ops::batchnorm(tape, flat, gamma, beta, buffers, BNMode::Batch, 0.1, 1e-5, false);
    CHECK(yf.all_finite());
}

TEST_CASE("finite-difference oracle across the op family") {
    std::mt19937_64 rng(101);

    SUBCASE("elementwise and broadcast") {
        auto a = random_tensor({3, 4}, rng, -1.0, 1.0, true);
        auto b = random_tensor({3, 4}, rng, 0.4, 1.5, true);
        auto row = random_tensor({3, 1}, rng, 0.4, 1.5, true);
        auto check = grad_check({{"a", a, true}, {"b", b, true}, {"row", row, true}},
                                [&](Tape<double>& tape) {
                                    auto t = ops::add(tape, a, b);
                                    t = ops::mul(tape, t, b);
                                    t = ops::sub(tape, t, a);
                                    t = ops::div(tape, t, row);
                                    t = ops::scale(tape, t, 0.7);
                                    return weighted_sum(tape, t, 1);
                                });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("activations") {
        auto x = random_tensor({4, 5}, rng, -2.0, 2.0, true);
        auto check = grad_check({{"x", x, true}}, [&](Tape<double>& tape) {
            auto t = ops::leaky_relu(tape, x, 0.01);
            t = ops::sigmoid(tape, t);
            t = ops::softmax(tape, t, 1);
            return weighted_sum(tape, t, 2);
        });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("abs and pairwise_abs_diff") {
        auto x = random_tensor({4, 3}, rng, 0.2, 1.0, true); // rows distinct, away from ties
        auto check = grad_check({{"x", x, true}}, [&](Tape<double>& tape) {
            auto d = ops::pairwise_abs_diff(tape, x);
            auto t = ops::abs(tape, ops::sub(tape, x, Tensor<double>::full({4, 3}, 2.0)));
            return ops::add(tape, weighted_sum(tape, d, 3), weighted_sum(tape, t, 4));
        });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("matmul and reductions") {
        auto a = random_tensor({3, 4}, rng, -1.0, 1.0, true);
        auto b = random_tensor({4, 2}, rng, -1.0, 1.0, true);
        auto check = grad_check({{"a", a, true}, {"b", b, true}}, [&](Tape<double>& tape) {
            auto t = ops::matmul(tape, a, b);
            auto s0 = ops::reduce_sum(tape, t, 0, false);
            auto s1 = ops::reduce_sum(tape, t, 1, true);
            return ops::add(tape, weighted_sum(tape, s0, 5),
                            ops::add(tape, weighted_sum(tape, s1, 6),
                                     ops::reduce_sum_all(tape, t)));
        });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("structure ops") {
        auto a = random_tensor({3, 2}, rng, -1.0, 1.0, true);
        auto b = random_tensor({3, 3}, rng, -1.0, 1.0, true);
        auto check = grad_check({{"a", a, true}, {"b", b, true}}, [&](Tape<double>& tape) {
            auto cat = ops::concat(tape, {a, b}, 1);
            auto flat = ops::reshape(tape, cat, {15});
            auto picked = ops::gather_flat(tape, flat, {0, 3, 3, 7, 14});
            return weighted_sum(tape, picked, 7);
        });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("normalization ops") {
        auto x = random_tensor({4, 5}, rng, 0.1, 1.2, true);
        auto check = grad_check({{"x", x, true}}, [&](Tape<double>& tape) {
            auto t = ops::l1_normalize(tape, x, 1);
            t = ops::clamp(tape, t, 0.01, 0.8);
            return weighted_sum(tape, t, 8);
        });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("bce") {
        auto p = random_tensor({6}, rng, 0.15, 0.85, true);
        auto t = Tensor<double>::from_data({6}, {1, 0, 1, 1, 0, 0});
        auto check = grad_check({{"p", p, true}}, [&](Tape<double>& tape) {
            return ops::bce_loss(tape, p, t);
        });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("conv and pooling") {
        auto x = random_tensor({2, 2, 4, 4}, rng, -1.0, 1.0, true);
        auto w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5, true);
        auto b = random_tensor({3}, rng, -0.5, 0.5, true);
        auto check = grad_check({{"x", x, true}, {"w", w, true}, {"b", b, true}},
                                [&](Tape<double>& tape) {
                                    auto t = ops::conv2d(tape, x, w, b, 1, 1);
                                    t = ops::max_pool2d(tape, t, 2);
                                    return weighted_sum(tape, t, 9);
                                });
        CHECK_MESSAGE(check.ok(), check.worst);
    }

    SUBCASE("batchnorm both modes") {
        auto x = random_tensor({6, 3}, rng, -2.0, 2.0, true);
        auto gamma = random_tensor({3}, rng, 0.5, 1.5, true);
        auto beta = random_tensor({3}, rng, -0.5, 0.5, true);
        BatchNormBuffers<double> buffers{random_tensor({3}, rng, -0.2, 0.2),
                                         random_tensor({3}, rng, 0.5, 1.5)};
        for (BNMode mode : {BNMode::Batch, BNMode::Running}) {
            auto check = grad_check({{"x", x, true}, {"gamma", gamma, true}, {"beta", beta, true}},
                                    [&](Tape<double>& tape) {
                                        auto t = ops::batchnorm(tape, x, gamma, beta, buffers,
                                                                mode, 0.1, 1e-5, false);
                                        return weighted_sum(tape, t, 10);
                                    });
            CHECK_MESSAGE(check.ok(), check.worst);
        }
    }
}

TEST_CASE("backward determinism within one build") {
    auto run = [](std::vector<double>& grads) {
        std::mt19937_64 rng(77);
        auto x = random_tensor({5, 5}, rng, -1.0, 1.0, true);
        auto w = random_tensor({5, 5}, rng, -1.0, 1.0, true);
        Tape<double> tape;
        auto t = ops::matmul(tape, x, w);
        t = ops::softmax(tape, t, 1);
        auto loss = ops::bce_loss(tape, t, Tensor<double>::full({5, 5}, 0.3));
        tape.backward(loss);
        grads.assign(x.grad().begin(), x.grad().end());
        grads.insert(grads.end(), w.grad().begin(), w.grad().end());
    };
    std::vector<double> first, second;
    run(first);
    run(second);
    CHECK(first == second); // bitwise
}

TEST_CASE("adam single step and hand-computed trajectory") {
    AdamConfig<double> cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamOptimizer<double> adam(cfg);
    std::vector<NamedTensor<double>> params{
        {"w", Tensor<double>::from_data({1}, {0.0}, true), true}};
    params[0].tensor.grad_mut()[0] = 1.0;
    adam.step(params);
    CHECK(params[0].tensor.values()[0] == doctest::Approx(-0.1).epsilon(1e-6));

    // Three steps against the textbook recurrence, computed independently.
    AdamOptimizer<double> adam2(cfg);
    std::vector<NamedTensor<double>> p2{
        {"w", Tensor<double>::from_data({1}, {0.5}, true), true}};
    double w_ref = 0.5, m = 0, v = 0;
    const double grads[3] = {0.4, -0.2, 0.1};
    for (int t = 1; t <= 3; ++t) {
        const double g = grads[t - 1];
        p2[0].tensor.grad_mut()[0] = g;
        adam2.step(p2);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1 - std::pow(0.9, t));
        const double vhat = v / (1 - std::pow(0.999, t));
        w_ref -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(p2[0].tensor.values()[0] == doctest::Approx(w_ref).epsilon(1e-12));
    }
}

TEST_CASE("adam edge behavior") {
    AdamConfig<double> cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;

    SUBCASE("zero grad leaves parameter unchanged") {
        AdamOptimizer<double> adam(cfg);
        std::vector<NamedTensor<double>> params{
            {"w", Tensor<double>::from_data({2}, {1.5, -2.0}, true), true}};
        params[0].tensor.grad_mut(); // zero-filled
        adam.step(params);
        CHECK(params[0].tensor.values()[0] == 1.5);
        CHECK(params[0].tensor.values()[1] == -2.0);
    }

    SUBCASE("identical params and grads get identical updates") {
        AdamOptimizer<double> adam(cfg);
        std::vector<NamedTensor<double>> params{
            {"w1", Tensor<double>::from_data({1}, {0.7}, true), true},
            {"w2", Tensor<double>::from_data({1}, {0.7}, true), true}};
        params[0].tensor.grad_mut()[0] = 0.3;
        params[1].tensor.grad_mut()[0] = 0.3;
        adam.step(params);
        CHECK(params[0].tensor.values()[0] == params[1].tensor.values()[0]);
    }

    SUBCASE("missing grad names the parameter") {
        AdamOptimizer<double> adam(cfg);
        std::vector<NamedTensor<double>> params{
            {"theta.v", Tensor<double>::from_data({1}, {0.0}, true), true}};
        try {
            adam.step(params);
            FAIL("expected an error");
        } catch (const std::logic_error& e) {
            CHECK(std::string(e.what()).find("theta.v") != std::string::npos);
        }
    }

    SUBCASE("grads cleared after step") {
        AdamOptimizer<double> adam(cfg);
        std::vector<NamedTensor<double>> params{
            {"w", Tensor<double>::from_data({1}, {0.0}, true), true}};
        params[0].tensor.grad_mut()[0] = 1.0;
        adam.step(params);
        CHECK_FALSE(params[0].tensor.has_grad());
    }
}

TEST_CASE("lr halving schedule") {
    CHECK(scheduled_lr(5e-4, 0, 15000) == doctest::Approx(5e-4));
    CHECK(scheduled_lr(5e-4, 14999, 15000) == doctest::Approx(5e-4));
    CHECK(scheduled_lr(5e-4, 15000, 15000) == doctest::Approx(2.5e-4));
    CHECK(scheduled_lr(5e-4, 45000, 15000) == doctest::Approx(6.25e-5));
    AdamConfig<double> cfg;
    cfg.lr = 5e-4;
    AdamOptimizer<double> adam(cfg);
    adam.apply_lr_schedule(30000, 15000);
    CHECK(adam.lr() == doctest::Approx(1.25e-4));
    CHECK_THROWS_AS(scheduled_lr(5e-4, 100, 0), ConfigError);
}
