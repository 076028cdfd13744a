#pragma once

// Shared helpers for the test suites: random tensors and the central
// finite-difference gradient oracle the autodiff engine is checked against.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "egnn/adam.hpp"
#include "egnn/ops.hpp"
#include "egnn/tensor.hpp"

namespace egnn::test {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = dist(rng);
    return Tensor<double>::from_data(std::move(shape), std::move(data), requires_grad);
}

inline double grad_at(const Tensor<double>& t, std::size_t i) {
    return t.has_grad() ? t.grad()[i] : 0.0;
}

/// Reduces a tensor to a scalar through a fixed random projection, so
/// gradients reach every output element with distinct weights. The weights
/// depend only on the shape, keeping repeated forwards comparable.
inline Tensor<double> grad_check_loss(Tape<double>& tape, const Tensor<double>& x) {
    std::mt19937_64 rng(0xabcd1234u + 977 * x.size());
    auto w = random_tensor(x.shape(), rng, -1.0, 1.0);
    return ops::reduce_sum_all(tape, ops::mul(tape, x, w));
}

struct GradCheckResult {
    double max_ratio = 0.0; // |analytic - fd| / (atol + rtol * max(|analytic|, |fd|))
    std::string worst;
    bool ok(double threshold = 1.0) const { return max_ratio < threshold; }
};

/// Runs `forward` once on a recording tape to get analytic gradients of the
/// named leaves, then perturbs every leaf element by +-h with recording off
/// and compares against the central difference.
inline GradCheckResult grad_check(std::vector<NamedTensor<double>> leaves,
                                  const std::function<Tensor<double>(Tape<double>&)>& forward,
                                  double h = 1e-5, double rtol = 1e-3, double atol = 1e-6) {
    for (auto& leaf : leaves) leaf.tensor.zero_grad();
    Tape<double> tape;
    Tensor<double> loss = forward(tape);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& leaf : leaves) {
        std::vector<double> g(leaf.tensor.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_at(leaf.tensor, i);
        analytic.push_back(std::move(g));
        leaf.tensor.zero_grad();
    }

    auto eval = [&]() {
        Tape<double> t;
        t.set_recording(false);
        return forward(t).item();
    };

    GradCheckResult result;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        auto vals = leaves[l].tensor.values_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double up = eval();
            vals[i] = orig - h;
            const double down = eval();
            vals[i] = orig;
            const double fd = (up - down) / (2 * h);
            const double a = analytic[l][i];
            const double ratio =
                std::abs(a - fd) / (atol + rtol * std::max(std::abs(a), std::abs(fd)));
            if (ratio > result.max_ratio) {
                result.max_ratio = ratio;
                result.worst = leaves[l].name + "[" + std::to_string(i) + "] analytic=" +
                               std::to_string(a) + " fd=" + std::to_string(fd);
            }
        }
    }
    return result;
}

} // namespace egnn::test
